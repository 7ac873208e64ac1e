"""Point cloud sequence containers and spatio-temporal neighbor search."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInput

DEFAULT_K_MAX = 32


@dataclass(frozen=True, eq=False)
class PointFrame:
    coords: np.ndarray
    timestamp: int

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=np.float64)
        if c.ndim != 2 or c.shape[1] != 3 or c.shape[0] < 1:
            raise InvalidInput(f"frame {self.timestamp}: expected (m>=1, 3) coords, got {c.shape}")
        if not np.all(np.isfinite(c)):
            raise InvalidInput(f"frame {self.timestamp}: non-finite coordinates")
        object.__setattr__(self, "coords", c)

    def __len__(self):
        return self.coords.shape[0]


@dataclass(eq=False)
class CloudSequence:
    frames: list[PointFrame]
    label: Optional[int] = None

    def __post_init__(self):
        if not self.frames:
            raise InvalidInput("a sequence needs at least one frame")
        stamps = [f.timestamp for f in self.frames]
        if stamps != list(range(1, len(stamps) + 1)):
            raise InvalidInput(f"timestamps must run 1..T, got {stamps[:5]}...")

    @classmethod
    def from_arrays(cls, arrays, label=None) -> "CloudSequence":
        return cls([PointFrame(a, t + 1) for t, a in enumerate(arrays)], label)

    @property
    def T(self) -> int:
        return len(self.frames)

    def coords(self, t: int) -> np.ndarray:
        return self.frames[t].coords

    def stacked(self) -> np.ndarray:
        """(T, m, 3) array; every frame must have the same point count."""
        sizes = {len(f) for f in self.frames}
        if len(sizes) != 1:
            raise InvalidInput(f"frames have differing sizes {sorted(sizes)}")
        return np.stack([f.coords for f in self.frames])

    def coords_of(self, frames, points) -> np.ndarray:
        frames = np.asarray(frames, dtype=np.intp)
        points = np.asarray(points, dtype=np.intp)
        out = np.empty((frames.size, 3))
        for t in np.unique(frames):
            sel = frames == t
            out[sel] = self.frames[t].coords[points[sel]]
        return out

    def __len__(self):
        return self.T


@dataclass(frozen=True, eq=False)
class NeighborSet:
    """Space-time neighbors of ``center = (t, i)``; the center comes first.

    ``frames`` are 0-based frame positions, ``points`` indices within them,
    ``dist`` the spatial distance to the center.
    """

    center: tuple[int, int]
    frames: np.ndarray
    points: np.ndarray
    dist: np.ndarray
    dr: float
    dt: int

    def __len__(self):
        return int(self.frames.size)

    @property
    def members(self) -> list[tuple[int, int]]:
        return list(zip(self.frames.tolist(), self.points.tolist()))

    @property
    def tau(self) -> np.ndarray:
        """Frame offsets relative to the center frame."""
        return (self.frames - self.center[0]).astype(np.float64)


def distances(points: np.ndarray, center: np.ndarray) -> np.ndarray:
    diff = points - center
    return np.sqrt(np.einsum("ij,ij->i", diff, diff))


@dataclass(eq=False)
class STIndex:
    seq: CloudSequence
    trees: list = field(repr=False)

    @property
    def T(self):
        return self.seq.T

    def coords_of(self, frames, points):
        return self.seq.coords_of(frames, points)

    def query(self, center, dr, dt, k_max=DEFAULT_K_MAX) -> NeighborSet:
        return query_st_neighbors(self, center, dr, dt, k_max)


def build_st_index(seq: CloudSequence) -> STIndex:
    if seq is None or not getattr(seq, "frames", None):
        raise InvalidInput("empty sequence")
    return STIndex(seq, [cKDTree(f.coords) for f in seq.frames])


def _candidates(idx: STIndex, tau: int, c: np.ndarray, dr: float) -> np.ndarray:
    # kd-tree with a slightly inflated radius, then the exact test below
    cand = idx.trees[tau].query_ball_point(c, dr * (1 + 1e-9) + 1e-300)
    return np.asarray(cand, dtype=np.intp)


def query_st_neighbors(idx: STIndex, center, dr: float, dt: int, k_max=DEFAULT_K_MAX) -> NeighborSet:
    """All points within ``dr`` (inclusive) of the center and ``dt`` frames of it.

    Ordered center first, then by ascending distance with ties broken by
    (frame, point); truncated to ``k_max`` members (None for no cap).
    """
    t, i = center
    if not (0 <= t < idx.T and 0 <= i < len(idx.seq.frames[t])):
        raise InvalidInput(f"center {center} out of range")
    if not dr > 0 or dt < 0:
        raise InvalidInput("need dr > 0 and dt >= 0")
    c = idx.seq.frames[t].coords[i]
    fs, ps, ds = [np.array([t])], [np.array([i])], [np.array([0.0])]
    for tau in range(max(0, t - dt), min(idx.T, t + dt + 1)):
        cand = _candidates(idx, tau, c, dr)
        if tau == t:
            cand = cand[cand != i]
        d = distances(idx.seq.frames[tau].coords[cand], c)
        keep = d <= dr
        fs.append(np.full(int(keep.sum()), tau))
        ps.append(cand[keep])
        ds.append(d[keep])
    f, p, d = (np.concatenate(a) for a in (fs, ps, ds))
    order = np.lexsort((p[1:], f[1:], d[1:])) + 1
    order = np.concatenate([[0], order])
    if k_max is not None:
        order = order[:max(1, int(k_max))]
    return NeighborSet((t, i), f[order].astype(np.intp), p[order].astype(np.intp), d[order], float(dr), int(dt))


def farthest_point_sampling(coords: np.ndarray, n: int, start: Optional[int] = None) -> np.ndarray:
    """Greedy FPS.  Without ``start`` the seed point is the one farthest from
    the centroid, which keeps the selection independent of point order."""
    coords = np.asarray(coords, dtype=np.float64)
    m = coords.shape[0]
    n = min(int(n), m)
    if start is None:
        start = int(np.argmax(distances(coords, coords.mean(axis=0))))
    chosen = np.empty(n, dtype=np.intp)
    chosen[0] = start
    best = distances(coords, coords[start])
    for k in range(1, n):
        nxt = int(np.argmax(best))
        chosen[k] = nxt
        best = np.minimum(best, distances(coords, coords[nxt]))
    return chosen


def sample_sequence(seq: CloudSequence, n_frames: int, n_points: int, seed: int) -> CloudSequence:
    """Uniformly strided frames, each resampled to exactly ``n_points``."""
    if n_frames < 1 or n_points < 1:
        raise InvalidInput("n_frames and n_points must be >= 1")
    rng = np.random.default_rng(seed)
    picks = (np.arange(n_frames) * seq.T) // n_frames
    out = []
    for t in picks:
        c = seq.frames[t].coords
        m = c.shape[0]
        if m < n_points:
            extra = rng.integers(0, m, size=n_points - m)
            sel = np.concatenate([np.arange(m), extra])
        else:
            sel = farthest_point_sampling(c, n_points, start=int(rng.integers(m)))
        out.append(c[sel])
    return CloudSequence.from_arrays(out, seq.label)


def ball_group(points: np.ndarray, centers: np.ndarray, radius: float, k: int) -> np.ndarray:
    """Per center, the ``k`` nearest points within ``radius`` (padded with the
    nearest one), as an (n_centers, k) index array."""
    tree = cKDTree(points)
    kk = min(k, points.shape[0])
    d, idx = tree.query(centers, k=kk)
    d = d.reshape(len(centers), kk)
    idx = idx.reshape(len(centers), kk)
    idx = np.where(d <= radius, idx, idx[:, :1])
    if kk < k:
        idx = np.concatenate([idx, np.repeat(idx[:, :1], k - kk, axis=1)], axis=1)
    return idx.astype(np.intp)


@dataclass(frozen=True, eq=False)
class NeighborTable:
    """Fixed-width neighbor lists for every point of a frame stack.

    Points are numbered ``t * n + i``.  Unused slots repeat the center with
    ``mask == 0`` so that max-pooling is unaffected and weighted fits ignore
    them.
    """

    idx: np.ndarray
    mask: np.ndarray
    tau: np.ndarray

    @property
    def k(self):
        return self.idx.shape[1]


def neighbor_table(frames_xyz: np.ndarray, dr: float, dt: int, k_max: int = DEFAULT_K_MAX) -> NeighborTable:
    """Space-time neighbor lists of every point of a (T, n, 3) stack.

    Row ``t * n + i`` matches ``query_st_neighbors`` at center (t, i).
    """
    frames_xyz = np.asarray(frames_xyz, dtype=np.float64)
    T, n, _ = frames_xyz.shape
    trees = [cKDTree(f) for f in frames_xyz]
    kq = min(k_max, n)
    rows = []
    for t in range(T):
        X = frames_xyz[t]
        fs, js, ds = [], [], []
        for tau in range(max(0, t - dt), min(T, t + dt + 1)):
            _, j = trees[tau].query(X, k=kq, distance_upper_bound=dr * (1 + 1e-9) + 1e-300)
            j = j.reshape(n, kq)
            ok = j < n
            jj = np.where(ok, j, 0)
            diff = frames_xyz[tau][jj] - X[:, None, :]
            d = np.sqrt(np.einsum("nkc,nkc->nk", diff, diff))
            ok &= d <= dr
            if tau == t:
                ok &= jj != np.arange(n)[:, None]
            fs.append(np.full((n, kq), tau))
            js.append(jj)
            ds.append(np.where(ok, d, np.inf))
        f, j, d = (np.concatenate(a, axis=1) for a in (fs, js, ds))
        order = np.lexsort((j, f, d), axis=-1)[:, :k_max - 1]
        f, j, d = (np.take_along_axis(a, order, axis=1) for a in (f, j, d))
        centers = t * n + np.arange(n)
        idx = np.where(np.isfinite(d), f * n + j, centers[:, None])
        tau_off = np.where(np.isfinite(d), f - t, 0)
        idx = np.concatenate([centers[:, None], idx], axis=1)
        mask = np.concatenate([np.ones((n, 1)), np.isfinite(d)], axis=1)
        tau_off = np.concatenate([np.zeros((n, 1)), tau_off], axis=1)
        pad = k_max - idx.shape[1]
        if pad > 0:
            idx = np.concatenate([idx, np.repeat(centers[:, None], pad, axis=1)], axis=1)
            mask = np.concatenate([mask, np.zeros((n, pad))], axis=1)
            tau_off = np.concatenate([tau_off, np.zeros((n, pad))], axis=1)
        rows.append((idx, mask, tau_off))
    idx, mask, tau = (np.concatenate([r[k] for r in rows]) for k in range(3))
    return NeighborTable(idx.astype(np.intp), mask.astype(np.float64), tau.astype(np.float64))
