"""Fitting space-time tangent planes ``A x + b = tau`` to point neighborhoods.

The unit normal of the fitted plane, ``(A, -1) / |(A, -1)|``, is orthogonal
to the local scene flow ``(v, 1)``; the field of normals therefore encodes
the motion of the sequence.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import InvalidInput
from .geometry import CloudSequence, NeighborSet, build_st_index, query_st_neighbors, DEFAULT_K_MAX

MAD_SCALE = 1.4826
SIGMA_EPS = 1e-9
MIN_WEIGHT = 1e-4


@dataclass(frozen=True, eq=False)
class TangentPlane:
    A: np.ndarray
    b: float


@dataclass(frozen=True, eq=False)
class STNormal:
    n: np.ndarray

    def __array__(self, dtype=None, copy=None):
        return self.n if dtype is None else self.n.astype(dtype)


@dataclass(frozen=True, eq=False)
class FitResult:
    plane: TangentPlane
    normal: STNormal
    residuals: np.ndarray


def ridge(gram: np.ndarray) -> float:
    """Tikhonov term added to the Gram matrix before solving."""
    s = gram.shape[-1]
    return 1e-8 * float(np.trace(gram)) / s + 1e-12


def solve_weighted_ls(X, w, tau):
    """Minimize ``sum_j w_j (A x_j + b - tau_j)^2``.

    ``X`` is (n, D+1) with a trailing column of ones.  Returns ``(A, b)``.
    """
    X = np.asarray(X, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    tau = np.asarray(tau, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 1 or w.shape != (X.shape[0],) or tau.shape != (X.shape[0],):
        raise InvalidInput(f"inconsistent shapes X{X.shape} w{w.shape} tau{tau.shape}")
    if not (np.all(np.isfinite(X)) and np.all(np.isfinite(w)) and np.all(np.isfinite(tau))):
        raise InvalidInput("non-finite input to weighted least squares")
    if np.any(w < 0) or not np.any(w > 0):
        raise InvalidInput("weights must be nonnegative with at least one positive")
    gram = X.T @ (w[:, None] * X)
    rhs = X.T @ (w * tau)
    reg = gram.copy()
    reg[np.diag_indices_from(reg)] += ridge(gram)
    factor = cho_factor(reg)
    coef = cho_solve(factor, rhs)
    # one refinement sweep removes the ridge bias along well-determined
    # directions and leaves (near-)null directions regularized
    coef += cho_solve(factor, rhs - gram @ coef)
    return coef[:-1], float(coef[-1])


def compute_normal(plane: TangentPlane) -> STNormal:
    raw = np.append(np.asarray(plane.A, dtype=np.float64), -1.0)
    return STNormal(raw / np.linalg.norm(raw))


def _design(neigh: NeighborSet, coords_of):
    get = coords_of.coords_of if hasattr(coords_of, "coords_of") else coords_of
    x = np.asarray(get(neigh.frames, neigh.points), dtype=np.float64)
    return np.hstack([x, np.ones((x.shape[0], 1))]), neigh.tau


def fit_plane(neigh: NeighborSet, coords_of, w=None) -> FitResult:
    """Weighted LS plane through a neighborhood, times centered on its frame.

    ``coords_of`` is a sequence/index exposing ``coords_of(frames, points)``
    or such a callable itself.
    """
    if len(neigh) < 1:
        raise InvalidInput("empty neighborhood")
    X, tau = _design(neigh, coords_of)
    w = np.ones(len(tau)) if w is None else np.asarray(w, dtype=np.float64)
    # solve around the weighted centroid: the Gram matrix is then block
    # diagonal, so the ridge on b cannot leak into A, and a neighborhood that
    # repeats one location gets A = 0 exactly
    if np.any(w < 0) or not np.any(w > 0):
        raise InvalidInput("weights must be nonnegative with at least one positive")
    origin = (w @ X[:, :-1]) / w.sum()
    Xc = X.copy()
    Xc[:, :-1] -= origin
    A, b = solve_weighted_ls(Xc, w, tau)
    plane = TangentPlane(A, b - float(A @ origin))
    return FitResult(plane, compute_normal(plane), X[:, :-1] @ A + b - tau)


def reweight(residuals) -> np.ndarray:
    """Gaussian kernel on residuals with a MAD-based robust scale."""
    r = np.asarray(residuals, dtype=np.float64)
    sigma = MAD_SCALE * np.median(np.abs(r)) + SIGMA_EPS
    return np.clip(np.exp(-(r / sigma) ** 2), MIN_WEIGHT, 1.0)


def angle_between(n1, n2) -> float:
    n1, n2 = np.asarray(n1), np.asarray(n2)
    return float(2.0 * np.arctan2(np.linalg.norm(n1 - n2), np.linalg.norm(n1 + n2)))


def iterative_normal_refinement(neigh: NeighborSet, coords_of, max_iters=10, tol=1e-4):
    """Alternate plane fitting and residual-based reweighting.

    Stops once successive normals differ by less than ``tol`` radians or after
    ``max_iters`` fits.  Returns ``(fit, weights, iterations)``; the weights
    are those derived from the final fit.
    """
    if max_iters < 1:
        raise InvalidInput("max_iters must be >= 1")
    if len(neigh) < 2:
        fit = fit_plane(neigh, coords_of)
        return fit, np.ones(len(neigh)), 0
    w = np.ones(len(neigh))
    prev = None
    it = 0
    for it in range(1, max_iters + 1):
        fit = fit_plane(neigh, coords_of, w)
        w = reweight(fit.residuals)
        if prev is not None and angle_between(fit.normal.n, prev) < tol:
            break
        prev = fit.normal.n
    return fit, w, it


def normal_field(seq: CloudSequence, dr=0.5, dt=1, refine=False, k_max=DEFAULT_K_MAX,
                 max_iters=10, tol=1e-4) -> list[np.ndarray]:
    """Unit ST-normal at every point; one (m_t, 4) array per frame."""
    index = build_st_index(seq)
    out = []
    for t, frame in enumerate(seq.frames):
        normals = np.empty((len(frame), 4))
        for i in range(len(frame)):
            nb = query_st_neighbors(index, (t, i), dr, dt, k_max)
            if refine:
                fit = iterative_normal_refinement(nb, index, max_iters, tol)[0]
            else:
                fit = fit_plane(nb, index)
            normals[i] = fit.normal.n
        out.append(normals)
    return out
