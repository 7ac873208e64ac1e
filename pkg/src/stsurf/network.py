"""Two-stream classifier: a per-frame set-abstraction backbone (spatial
stream) and stacked kinematic units over its features (temporal stream)."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import InvalidInput, ShapeError
from .geometry import CloudSequence, NeighborTable, ball_group, farthest_point_sampling, neighbor_table
from .kinet_unit import Affine, KinetConfig, KinetUnit, UnitState, unit_forward


@dataclass
class BackboneConfig:
    centroids: tuple = (512, 128)
    radii: tuple = (0.2, 0.4)
    nsample: tuple = (32, 32)
    mlps: tuple = ((32, 64), (64, 128))

    def __post_init__(self):
        self.centroids = tuple(int(c) for c in self.centroids)
        self.radii = tuple(float(r) for r in self.radii)
        self.nsample = tuple(int(k) for k in self.nsample)
        self.mlps = tuple(tuple(int(w) for w in m) for m in self.mlps)
        n = len(self.centroids)
        if n < 1 or not (len(self.radii) == len(self.nsample) == len(self.mlps) == n):
            raise InvalidInput("backbone config lists must have one entry per level")

    @property
    def levels(self):
        return len(self.centroids)

    @property
    def dims(self):
        return tuple(m[-1] for m in self.mlps)


@dataclass
class TrainConfig:
    epochs_static: int = 30
    epochs_temporal: int = 30
    lr: float = 1e-3
    batch_size: int = 16
    seed: int = 0
    optimizer: str = "adam"
    clip_norm: float = 10.0

    def __post_init__(self):
        if min(self.epochs_static, self.epochs_temporal) < 0 or self.batch_size < 1 or not self.lr > 0:
            raise InvalidInput("epochs must be >= 0, batch_size >= 1 and lr > 0")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")


class StaticBackbone:
    def __init__(self, config: BackboneConfig, n_classes: int, rng):
        self.config = config
        self.levels = []
        in_dim = 3
        for l, widths in enumerate(config.mlps):
            layers, d = [], in_dim
            for k, w in enumerate(widths):
                layers.append(Affine(d, w, rng, f"sa{l}.mlp{k}"))
                d = w
            self.levels.append(layers)
            in_dim = 3 + d
        self.head = Affine(config.dims[-1], n_classes, rng, "static_head")

    def parameters(self):
        ps = [p for layers in self.levels for a in layers for p in a.parameters()]
        return ps + self.head.parameters()


class TwoStreamModel:
    """Spatial backbone, one kinematic unit per backbone level, two heads."""

    def __init__(self, n_classes: int, backbone: BackboneConfig = None, kinet: KinetConfig = None, seed: int = 0):
        self.backbone_config = backbone or BackboneConfig()
        self.kinet_config = kinet or KinetConfig()
        self.n_classes = n_classes
        rng = np.random.default_rng(seed)
        self.backbone = StaticBackbone(self.backbone_config, n_classes, rng)
        self.units = []
        prev_groups, prev_out = None, 0
        for l, dim in enumerate(self.backbone_config.dims):
            unit = KinetUnit(3 + dim + prev_out, self.kinet_config, prev_groups, rng, f"kinet{l}")
            self.units.append(unit)
            prev_groups, prev_out = unit.groups, self.kinet_config.out_dim
        self.temporal_head = Affine(self.kinet_config.out_dim, n_classes, rng, "temporal_head")

    def backbone_parameters(self):
        return self.backbone.parameters()

    def temporal_parameters(self):
        return [p for u in self.units for p in u.parameters()] + self.temporal_head.parameters()

    def parameters(self):
        return self.backbone_parameters() + self.temporal_parameters()

    def named_parameters(self) -> dict:
        return {p.name: p for p in self.parameters()}

    def state_dict(self) -> dict:
        return {name: p.data.copy() for name, p in self.named_parameters().items()}

    def load_state_dict(self, state: dict):
        params = self.named_parameters()
        missing = set(params) - set(state)
        if missing:
            raise InvalidInput(f"checkpoint lacks {sorted(missing)[:3]}")
        for name, p in params.items():
            if state[name].shape != p.shape:
                raise ShapeError(f"{name}: checkpoint shape {state[name].shape} != {p.shape}")
            p.data = np.array(state[name], dtype=np.float64)


# ------------------------------------------------------------------ geometry

@dataclass(eq=False)
class Level:
    xyz: np.ndarray      # (T, n_l, 3)
    parent: np.ndarray   # (T, n_l) index of each centroid among the previous level's points
    group: np.ndarray    # (T, n_l, k) ball-query neighbors among the previous level's points
    table: NeighborTable


@dataclass(eq=False)
class Prepared:
    """Sampling and neighbor structure of one sequence, reused every epoch."""

    coords: np.ndarray
    levels: list
    label: Optional[int]


def prepare(seq: CloudSequence, model: TwoStreamModel) -> Prepared:
    bb, kc = model.backbone_config, model.kinet_config
    prev = seq.stacked()
    T_, levels = prev.shape[0], []
    for l in range(bb.levels):
        n_l = min(bb.centroids[l], prev.shape[1])
        parent = np.stack([farthest_point_sampling(prev[t], n_l) for t in range(T_)])
        xyz = np.take_along_axis(prev, parent[:, :, None], axis=1)
        group = np.stack([ball_group(prev[t], xyz[t], bb.radii[l], bb.nsample[l]) for t in range(T_)])
        levels.append(Level(xyz, parent, group, neighbor_table(xyz, kc.dr, kc.dt, kc.k_max)))
        prev = xyz
    return Prepared(seq.stacked(), levels, seq.label)


@dataclass(eq=False)
class Batch:
    """Several prepared sequences of identical shape, flattened.

    Points of level ``l`` are numbered ``(b * T + t) * n_l + i``.
    """

    coords: np.ndarray
    xyz: list
    parent: list
    group: list
    tables: list
    n_seq: int
    n_frames: int
    labels: np.ndarray


def collate(items: list[Prepared]) -> Batch:
    if not items:
        raise InvalidInput("empty batch")
    shape = items[0].coords.shape
    if any(it.coords.shape != shape for it in items):
        raise ShapeError("all sequences in a batch need the same (T, n) shape")
    B, T_ = len(items), shape[0]
    xyz, parent, group, tables = [], [], [], []
    n_prev = shape[1]
    for l in range(len(items[0].levels)):
        lv = [it.levels[l] for it in items]
        n_l = lv[0].xyz.shape[1]
        frame_base = np.arange(B * T_).reshape(B, T_, 1)
        xyz.append(np.concatenate([v.xyz for v in lv]).reshape(-1, 3))
        parent.append((np.stack([v.parent for v in lv]) + frame_base * n_prev).reshape(-1))
        group.append((np.stack([v.group for v in lv]) + frame_base[..., None] * n_prev).reshape(B * T_ * n_l, -1))
        seq_base = np.arange(B).reshape(B, 1, 1) * (T_ * n_l)
        idx = (np.stack([v.table.idx for v in lv]) + seq_base).reshape(B * T_ * n_l, -1)
        tables.append(NeighborTable(idx, np.concatenate([v.table.mask for v in lv]),
                                    np.concatenate([v.table.tau for v in lv])))
        n_prev = n_l
    labels = np.array([-1 if it.label is None else it.label for it in items])
    return Batch(np.concatenate([it.coords for it in items]).reshape(-1, 3),
                 xyz, parent, group, tables, B, T_, labels)


# ------------------------------------------------------------------ forward

def static_forward(model: TwoStreamModel, batch: Batch):
    """Frame-averaged static logits (B, C) and per-level point features."""
    bb = model.backbone
    prev_xyz, prev_feat, feats = batch.coords, None, []
    for l, layers in enumerate(bb.levels):
        g = batch.group[l]
        rel = prev_xyz[g] - batch.xyz[l][:, None, :]
        x = T.Tensor(rel)
        if prev_feat is not None:
            x = T.concat([x, T.gather(prev_feat, g)], axis=-1)
        for layer in layers:
            x = T.relu(layer(x))
        feat = T.reduce_max(x, axis=1)
        feats.append(feat)
        prev_xyz, prev_feat = batch.xyz[l], feat
    n_last = batch.xyz[-1].shape[0] // (batch.n_seq * batch.n_frames)
    pooled = T.reduce_max(T.reshape(prev_feat, (batch.n_seq * batch.n_frames, n_last, -1)), axis=1)
    frame_logits = T.reshape(bb.head(pooled), (batch.n_seq, batch.n_frames, -1))
    return T.mean(frame_logits, axis=1), feats


def temporal_forward(model: TwoStreamModel, feats, batch: Batch):
    """Logits of the temporal stream from per-level static features."""
    state, h = None, None
    for l, unit in enumerate(model.units):
        parts = [T.Tensor(batch.xyz[l]), feats[l]]
        if h is not None:
            parts.append(T.gather(h, batch.parent[l]))
            if state is not None and state.deviations is not None:
                state = UnitState(None, T.gather(state.deviations, batch.parent[l]))
        state, h = unit_forward(state, T.concat(parts, axis=-1), batch.tables[l], unit)
    per_seq = T.reshape(h, (batch.n_seq, -1, h.shape[-1]))
    return model.temporal_head(T.reduce_max(per_seq, axis=1))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def aggregate(static_logits, temporal_logits) -> np.ndarray:
    """Mean of the two streams' softmax scores."""
    s = np.asarray(getattr(static_logits, "data", static_logits), dtype=np.float64)
    t = np.asarray(getattr(temporal_logits, "data", temporal_logits), dtype=np.float64)
    if s.shape != t.shape:
        raise ShapeError(f"stream logits differ in shape: {s.shape} vs {t.shape}")
    return 0.5 * (softmax(s) + softmax(t))


def accuracy(scores, labels) -> float:
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if labels.size == 0:
        return float("nan")
    return float(np.mean(np.argmax(scores, axis=-1) == labels))


# ------------------------------------------------------------------ training

def _batches(n, size, rng):
    order = rng.permutation(n)
    return [order[k:k + size] for k in range(0, n, size)]


def _clip(params, max_norm):
    if not max_norm:
        return
    total = math.sqrt(sum(float((p.grad ** 2).sum()) for p in params if p.grad is not None))
    if total > max_norm:
        for p in params:
            if p.grad is not None:
                p.grad *= max_norm / total


def _step(params, cfg: TrainConfig):
    _clip(params, cfg.clip_norm)
    if cfg.optimizer == "adam":
        T.adam_step(params, cfg.lr)
    else:
        T.sgd_step(params, cfg.lr)
    T.zero_grad(params)


def _reset_optimizer(params):
    for p in params:
        p.m[...] = 0.0
        p.v[...] = 0.0
        p.step = 0
        p.grad = None


@dataclass
class EpochMetrics:
    epoch: int
    stage: int
    loss: float
    acc_static: float
    acc_temporal: float
    acc_fused: float

    def line(self) -> str:
        return (f"epoch={self.epoch},stage={self.stage},loss={self.loss!r},"
                f"acc_static={self.acc_static!r},acc_temporal={self.acc_temporal!r},"
                f"acc_fused={self.acc_fused!r}")


def _prepare_all(model, seqs):
    return [prepare(s, model) for s in seqs]


def cache_static(model, prepared, chunk=32):
    """Frozen-backbone outputs per sequence: (logits, [level feature arrays])."""
    out = []
    with T.no_grad():
        for k in range(0, len(prepared), chunk):
            items = prepared[k:k + chunk]
            batch = collate(items)
            logits, feats = static_forward(model, batch)
            for b in range(len(items)):
                per = []
                for l, f in enumerate(feats):
                    n = f.shape[0] // len(items)
                    per.append(f.data[b * n:(b + 1) * n])
                out.append((logits.data[b], per))
    return out


def train_two_stage(model: TwoStreamModel, dataset, cfg: TrainConfig, stages=(1, 2), log=None,
                    prepared=None):
    """Stage 1 fits the backbone on static logits; stage 2 freezes it and fits
    the temporal branch.  Returns the per-epoch metrics."""
    seqs = list(dataset)
    if not seqs:
        raise InvalidInput("empty training set")
    if any(s.label is None for s in seqs):
        raise InvalidInput("training sequences need labels")
    prepared = prepared if prepared is not None else _prepare_all(model, seqs)
    labels = np.array([p.label for p in prepared])
    rng = np.random.default_rng(cfg.seed)
    history = []

    def emit(m):
        history.append(m)
        if log is not None:
            log(m.line())

    if 1 in stages:
        params = model.backbone_parameters()
        _reset_optimizer(params)
        for epoch in range(1, cfg.epochs_static + 1):
            losses, correct = [], 0
            for idx in _batches(len(prepared), cfg.batch_size, rng):
                batch = collate([prepared[k] for k in idx])
                with T.Tape():
                    logits, _ = static_forward(model, batch)
                    loss = T.softmax_cross_entropy(logits, batch.labels)
                    T.backward(loss)
                _step(params, cfg)
                losses.append(float(loss.data) * len(idx))
                correct += int((logits.data.argmax(axis=1) == batch.labels).sum())
            emit(EpochMetrics(epoch, 1, sum(losses) / len(prepared), correct / len(prepared),
                              float("nan"), float("nan")))

    if 2 in stages:
        cached = cache_static(model, prepared)
        params = model.temporal_parameters()
        _reset_optimizer(params)
        for epoch in range(1, cfg.epochs_temporal + 1):
            losses, c_s, c_t, c_f = [], 0, 0, 0
            for idx in _batches(len(prepared), cfg.batch_size, rng):
                batch = collate([prepared[k] for k in idx])
                feats = [T.Tensor(np.concatenate([cached[k][1][l] for k in idx]))
                         for l in range(len(model.units))]
                s_logits = np.stack([cached[k][0] for k in idx])
                with T.Tape():
                    logits = temporal_forward(model, feats, batch)
                    loss = T.softmax_cross_entropy(logits, batch.labels)
                    T.backward(loss)
                _step(params, cfg)
                y = batch.labels
                losses.append(float(loss.data) * len(idx))
                c_s += int((s_logits.argmax(1) == y).sum())
                c_t += int((logits.data.argmax(1) == y).sum())
                c_f += int((aggregate(s_logits, logits.data).argmax(1) == y).sum())
            n = len(prepared)
            emit(EpochMetrics(epoch, 2, sum(losses) / n, c_s / n, c_t / n, c_f / n))
    return history


def predict(model: TwoStreamModel, seqs, prepared=None, chunk=32):
    """Static and temporal logits for every sequence (no gradients)."""
    prepared = prepared if prepared is not None else _prepare_all(model, seqs)
    s_all, t_all = [], []
    with T.no_grad():
        for k in range(0, len(prepared), chunk):
            batch = collate(prepared[k:k + chunk])
            s, feats = static_forward(model, batch)
            t = temporal_forward(model, feats, batch)
            s_all.append(s.data)
            t_all.append(t.data)
    return np.concatenate(s_all), np.concatenate(t_all)


def evaluate(model: TwoStreamModel, seqs, prepared=None) -> dict:
    """Argmax accuracy of the static, temporal and fused predictions."""
    seqs = list(seqs)
    if not seqs:
        return {"acc_static": float("nan"), "acc_temporal": float("nan"), "acc_fused": float("nan"), "n": 0}
    s, t = predict(model, seqs, prepared)
    y = np.array([q.label for q in seqs])
    return {"acc_static": accuracy(s, y), "acc_temporal": accuracy(t, y),
            "acc_fused": accuracy(aggregate(s, t), y), "n": len(seqs)}
