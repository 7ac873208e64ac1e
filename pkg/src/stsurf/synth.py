"""Synthetic dynamic point clouds with analytic scene flow, and a motion
classification benchmark whose labels depend only on motion direction."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidInput, ShapeError
from .geometry import CloudSequence

KINDS = ("translation", "rotation", "static", "shuffle")
SHAPES = ("sphere", "cube", "plane")


@dataclass
class MotionSpec:
    """How a base shape moves.

    ``velocity`` is a displacement per frame, either one 3-vector or one per
    frame (T, 3).  ``angular_rate`` is radians per frame about ``axis``
    through the origin.
    """

    kind: str = "translation"
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(3))
    angular_rate: float = 0.0
    axis: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    noise_sigma: float = 0.0
    outlier_frac: float = 0.0
    shape: str = "sphere"

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InvalidInput(f"unknown motion kind {self.kind!r}")
        if self.shape not in SHAPES:
            raise InvalidInput(f"unknown base shape {self.shape!r}")
        if not 0.0 <= self.outlier_frac < 1.0:
            raise InvalidInput("outlier_frac must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise InvalidInput("noise_sigma must be >= 0")
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.axis = np.asarray(self.axis, dtype=np.float64)


@dataclass(eq=False)
class FlowOracle:
    """Ground-truth per-frame displacement of every point.

    Points replaced by outliers carry zero flow and ``inlier == False``.
    """

    flows: list[np.ndarray]
    inlier: list[np.ndarray]


def base_shape(kind: str, n: int, rng: np.random.Generator) -> np.ndarray:
    if kind == "sphere":
        p = rng.standard_normal((n, 3))
        return p / np.linalg.norm(p, axis=1, keepdims=True)
    if kind == "cube":
        return rng.uniform(-0.5, 0.5, (n, 3))
    if kind == "plane":
        return np.column_stack([rng.uniform(-1, 1, (n, 2)), np.zeros(n)])
    raise InvalidInput(f"unknown base shape {kind!r}")


def rotation_matrix(axis, angle) -> np.ndarray:
    k = np.asarray(axis, dtype=np.float64)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * K @ K


def _per_frame_velocity(spec: MotionSpec, T: int) -> np.ndarray:
    v = spec.velocity
    if v.shape == (3,):
        return np.tile(v, (T, 1))
    if v.shape == (T, 3):
        return v
    raise ShapeError(f"velocity must be (3,) or ({T}, 3), got {v.shape}")


def gen_sequence(spec: MotionSpec, n_points: int, T: int, seed: int, offset=None, label=None):
    """Advect a random base shape; returns ``(sequence, flow_oracle)``.

    Frame ``t`` (0-based) of a constant translation is ``base + v t`` (plus
    ``offset``).  Noise and outliers are applied after the oracle is taken.
    """
    if n_points < 1 or T < 1:
        raise InvalidInput("n_points and T must be >= 1")
    rng = np.random.default_rng(seed)
    base = base_shape(spec.shape, n_points, rng)
    offset = np.zeros(3) if offset is None else np.asarray(offset, dtype=np.float64)
    frames, flows = [], []
    if spec.kind == "static":
        for _ in range(T):
            frames.append(base.copy())
            flows.append(np.zeros_like(base))
    elif spec.kind == "rotation":
        w = spec.angular_rate * spec.axis / np.linalg.norm(spec.axis)
        for t in range(T):
            x = base @ rotation_matrix(spec.axis, spec.angular_rate * t).T
            frames.append(x)
            flows.append(np.cross(w, x))
    else:
        vel = _per_frame_velocity(spec, T)
        disp = np.vstack([np.zeros(3), np.cumsum(vel[:-1], axis=0)])
        for t in range(T):
            frames.append(base + disp[t])
            flows.append(np.tile(vel[t], (n_points, 1)))
        if spec.kind == "shuffle":
            perm = rng.permutation(T)
            frames = [frames[k] for k in perm]
            flows = [frames[t + 1] - frames[t] for t in range(T - 1)]
            flows.append(flows[-1].copy() if T > 1 else np.zeros_like(base))
    inliers = []
    n_out = int(round(spec.outlier_frac * n_points))
    for t in range(T):
        x = frames[t] + offset
        if spec.noise_sigma > 0:
            x = x + rng.normal(0.0, spec.noise_sigma, x.shape)
        mask = np.ones(n_points, dtype=bool)
        if n_out:
            lo, hi = x.min(axis=0), x.max(axis=0)
            sel = rng.choice(n_points, n_out, replace=False)
            x[sel] = rng.uniform(lo, hi, (n_out, 3))
            flows[t] = flows[t].copy()
            flows[t][sel] = 0.0
            mask[sel] = False
        frames[t] = x
        inliers.append(mask)
    return CloudSequence.from_arrays(frames, label), FlowOracle(flows, inliers)


def class_directions(n_classes: int) -> np.ndarray:
    """Unit translation direction per class: +x, -x, +y, -y, then diagonals."""
    dirs = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0)]
    s = 1 / np.sqrt(2)
    dirs += [(s, s, 0), (-s, -s, 0), (s, -s, 0), (-s, s, 0)]
    if n_classes not in (2, 4, 8):
        raise InvalidInput("n_classes must be 2, 4 or 8")
    return np.array(dirs[:n_classes], dtype=np.float64)


@dataclass(eq=False)
class MotionDataset:
    train: list[CloudSequence]
    test: list[CloudSequence]

    @property
    def sequences(self):
        return self.train + self.test


def stratified_split(seqs, train_frac=0.7, seed=0):
    rng = np.random.default_rng(seed)
    labels = sorted({s.label for s in seqs})
    train, test = [], []
    for y in labels:
        members = [s for s in seqs if s.label == y]
        order = rng.permutation(len(members))
        cut = int(round(train_frac * len(members)))
        train += [members[k] for k in order[:cut]]
        test += [members[k] for k in order[cut:]]
    return train, test


def gen_motion_dataset(n_classes=4, per_class=50, seed=0, T=8, n_points=256, speed=0.15,
                       noise_sigma=0.0, outlier_frac=0.0, shape="sphere") -> MotionDataset:
    """Sequences of one base-shape distribution translating along a
    class-specific direction.

    Each trajectory is centered in time (the middle of the clip sits at the
    origin), so frames pooled over time have the same law for opposite
    directions, and the frame-mean of every class averages to the origin.
    """
    dirs = class_directions(n_classes)
    seqs = []
    ss = np.random.SeedSequence(seed)
    children = ss.spawn(n_classes * per_class)
    k = 0
    for y in range(n_classes):
        for _ in range(per_class):
            sub = int(children[k].generate_state(1)[0])
            k += 1
            v = dirs[y] * speed
            spec = MotionSpec("translation", v, noise_sigma=noise_sigma,
                              outlier_frac=outlier_frac, shape=shape)
            seq, _ = gen_sequence(spec, n_points, T, sub, offset=-v * (T - 1) / 2.0, label=y)
            seqs.append(seq)
    train, test = stratified_split(seqs, 0.7, seed)
    return MotionDataset(train, test)


@dataclass(frozen=True)
class OrthoStats:
    mean: float
    p95: float
    count: int


def orthogonality_error(normals, oracle: FlowOracle, inlier_only=True) -> OrthoStats:
    """|cos| between unit ST-normals and 4D flow directions ``(v, 1)``.

    Points with zero flow (and outliers) are skipped.
    """
    if len(normals) != len(oracle.flows):
        raise ShapeError("normals and oracle cover different frame counts")
    cos = []
    for n, v, keep in zip(normals, oracle.flows, oracle.inlier):
        n = np.asarray(n, dtype=np.float64)
        if n.shape[0] != v.shape[0]:
            raise ShapeError("normals and oracle differ in point count")
        sel = np.linalg.norm(v, axis=1) > 0
        if inlier_only:
            sel &= keep
        f = np.column_stack([v[sel], np.ones(int(sel.sum()))])
        f /= np.linalg.norm(f, axis=1, keepdims=True)
        nn = n[sel] / np.linalg.norm(n[sel], axis=1, keepdims=True)
        cos.append(np.abs(np.einsum("ij,ij->i", nn, f)))
    c = np.concatenate(cos) if cos else np.zeros(0)
    if c.size == 0:
        return OrthoStats(0.0, 0.0, 0)
    return OrthoStats(float(c.mean()), float(np.percentile(c, 95)), int(c.size))
