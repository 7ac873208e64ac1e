"""Differentiable feature-space ST-surface fitting.

A unit reduces static per-point features, splits them into ``d``-dim groups,
fits one weighted least-squares hyperplane ``A f + b = tau`` per group over
each point's space-time neighbors, and abstracts the concatenated group
normals with an affine map.  A residual branch carries the static features
through.  Fitting residuals are handed to the next unit, which turns them
into neighbor weights.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .geometry import NeighborTable


@dataclass
class KinetConfig:
    reduce_ratio: float = 0.5
    group_dim: int = 4
    dt: int = 1
    dr: float = 0.5
    out_dim: int = 64
    k_max: int = 32
    use_normals: bool = True
    use_weights: bool = True

    def __post_init__(self):
        if not 0 < self.reduce_ratio <= 1:
            raise ConfigError("reduce_ratio must lie in (0, 1]")
        if self.group_dim < 1 or self.out_dim < 1 or self.k_max < 1:
            raise ConfigError("group_dim, out_dim and k_max must be >= 1")
        if self.dt < 0 or not self.dr > 0:
            raise ConfigError("need dt >= 0 and dr > 0")

    def reduced_dim(self, static_dim: int) -> int:
        """``ratio * static_dim`` rounded down to a multiple of the group size."""
        c = int(self.reduce_ratio * static_dim) // self.group_dim * self.group_dim
        if c < self.group_dim:
            raise ConfigError(f"reduced dim of {static_dim} features is below group size {self.group_dim}")
        return c


class Affine:
    """Per-point affine map with Glorot-uniform weights and zero bias."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, name: str = "affine"):
        self.n_in, self.n_out = n_in, n_out
        self.W = T.Parameter(T.glorot_uniform(rng, n_in, n_out), name=f"{name}.W")
        self.b = T.Parameter(np.zeros(n_out), name=f"{name}.b")

    def __call__(self, x):
        return T.pointwise_linear(x, self.W, self.b)

    def parameters(self):
        return [self.W, self.b]


@dataclass
class UnitState:
    features: Optional[T.Tensor]
    deviations: Optional[T.Tensor]


class KinetUnit:
    def __init__(self, static_dim: int, config: KinetConfig, prev_groups: Optional[int] = None,
                 rng: Optional[np.random.Generator] = None, name: str = "kinet"):
        rng = np.random.default_rng(0) if rng is None else rng
        self.config = config
        self.static_dim = static_dim
        self.c = config.reduced_dim(static_dim)
        self.groups = self.c // config.group_dim
        d = config.group_dim
        self.D = Affine(static_dim, self.c, rng, f"{name}.D")
        c_in = self.groups * (d + 1) if config.use_normals else self.c
        self.C = Affine(c_in, config.out_dim, rng, f"{name}.C")
        self.R = Affine(static_dim, config.out_dim, rng, f"{name}.R")
        self.H = None
        if prev_groups and config.use_weights and config.use_normals:
            self.H = Affine(prev_groups, self.groups, rng, f"{name}.H")

    def parameters(self):
        ps = self.D.parameters() + self.C.parameters() + self.R.parameters()
        if self.H is not None:
            ps += self.H.parameters()
        return ps


def reduce(static_feats, D: Affine):
    return D(static_feats)


def split_groups(feats, d: int) -> list:
    c = feats.shape[-1]
    if d < 1 or c % d:
        raise ConfigError(f"feature dim {c} is not divisible by group size {d}")
    return [T.getitem(feats, (Ellipsis, slice(k * d, (k + 1) * d))) for k in range(c // d)]


def _swap_last(x):
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return T.transpose(x, axes)


def fit_feature_plane(F, w, tau):
    """Batched weighted LS of ``tau`` on ``[F, 1]``.

    ``F`` is (..., n, d); ``w`` and ``tau`` are (..., n).  Returns tensors
    ``A`` (..., d), ``b`` (...) and ``residuals = A f_j + b - tau_j`` (..., n).
    """
    F = T.as_tensor(F)
    w = T.as_tensor(w)
    tau = np.asarray(tau.data if isinstance(tau, T.Tensor) else tau, dtype=np.float64)
    if F.shape[:-1] != w.shape or tau.shape != w.shape:
        raise ShapeError(f"features {F.shape}, weights {w.shape}, times {tau.shape}")
    d = F.shape[-1]
    # center on the weighted centroid so the ridge on b cannot leak into A
    inv = T.reciprocal(T.sum(w, axis=-1))
    mu = T.sum(F * T.reshape(w, w.shape + (1,)), axis=-2) * T.reshape(inv, inv.shape + (1,))
    Fc = F - T.reshape(mu, mu.shape[:-1] + (1, d))
    A, bc, res = _fit_centered(Fc, w, tau, d)
    return A, bc - T.sum(A * mu, axis=-1), res


def _fit_centered(F, w, tau, d):
    X = T.concat([F, np.ones(F.shape[:-1] + (1,))], axis=-1)
    XW = X * T.reshape(w, w.shape + (1,))
    gram = _swap_last(X) @ XW
    eye = np.eye(d + 1)
    trace = T.sum(gram * eye, axis=(-2, -1))
    lam = trace * (1e-8 / (d + 1)) + 1e-12
    gram = gram + T.reshape(lam, lam.shape + (1, 1)) * eye
    rhs = T.sum(XW * tau[..., None], axis=-2)
    theta = T.linear_solve(gram, rhs)
    A = T.getitem(theta, (Ellipsis, slice(0, d)))
    b = T.getitem(theta, (Ellipsis, d))
    fitted = T.sum(X * T.reshape(theta, theta.shape[:-1] + (1, d + 1)), axis=-1)
    return A, b, fitted - tau


def group_normal(A):
    """Unit normal ``(A, -1) / |(A, -1)|`` along the last axis."""
    A = T.as_tensor(A)
    return T.l2_normalize(T.concat([A, -np.ones(A.shape[:-1] + (1,))], axis=-1), axis=-1)


def predict_weights(prev_deviations, H: Optional[Affine], n_points: int, n_groups: int):
    """Per-point, per-group neighbor weights in (0, 1).

    Without previous deviations (first unit) or without a weight head every
    weight is exactly 1.
    """
    if prev_deviations is None or H is None:
        return T.Tensor(np.ones((n_points, n_groups)))
    return T.sigmoid(H(prev_deviations))


def unit_forward(state_in: Optional[UnitState], static_feats, table: NeighborTable, unit: KinetUnit):
    """One kinematic unit over ``P`` points.

    ``static_feats`` is (P, static_dim) and ``table`` lists each point's
    space-time neighbors (indices into the same P points).  Returns the new
    state (reduced features and squared self-residuals per group) and the
    (P, out_dim) output.
    """
    cfg = unit.config
    S = T.as_tensor(static_feats)
    P = S.shape[0]
    if table.idx.shape[0] != P:
        raise ShapeError(f"neighbor table has {table.idx.shape[0]} rows for {P} points")
    K, G, d = table.k, unit.groups, cfg.group_dim
    f = reduce(S, unit.D)
    nbr = T.gather(f, table.idx)
    if not cfg.use_normals:
        out = unit.C(T.reduce_max(nbr, axis=1)) + unit.R(S)
        return UnitState(f, None), out
    Fg = T.transpose(T.reshape(nbr, (P, K, G, d)), (0, 2, 1, 3))
    prev = state_in.deviations if (state_in is not None and cfg.use_weights) else None
    wp = predict_weights(prev, unit.H, P, G)
    w = T.transpose(T.gather(wp, table.idx), (0, 2, 1)) * table.mask[:, None, :]
    tau = np.broadcast_to(table.tau[:, None, :], (P, G, K))
    A, b, _ = fit_feature_plane(Fg, w, tau)
    normals = T.reshape(group_normal(A), (P, G * (d + 1)))
    own = T.sum(A * T.reshape(f, (P, G, d)), axis=-1) + b
    out = unit.C(normals) + unit.R(S)
    return UnitState(f, T.square(own)), out
