"""Reusable experiment drivers behind ``scripts/`` and the acceptance suite."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .config import RunConfig
from .geometry import CloudSequence, build_st_index, query_st_neighbors
from .network import TwoStreamModel, evaluate, prepare, train_two_stage
from .stsolver import angle_between, fit_plane, iterative_normal_refinement, normal_field, solve_weighted_ls
from .synth import MotionSpec, OrthoStats, gen_motion_dataset, gen_sequence, orthogonality_error

# Desk-scale motion benchmark: small backbone, short static stage (the static
# stream cannot learn the label anyway), longer temporal stage.
BENCH = RunConfig(out_dim=32, k_max=24, centroids=(48, 12), radii=(0.4, 0.8), nsample=(16, 12),
                  mlps=((16, 32), (32, 32)), epochs_static=3, epochs_temporal=20, frames=8, points=128)
BENCH_OUTLIERS = 0.05
VARIANTS = ("full", "no-weight", "no-normal")


# ---------------------------------------------------------------- normals

def orthogonality_run(noise_sigma=0.0, seed=0, n_points=256, T=5, velocity=(0.05, 0.02, 0.2)) -> OrthoStats:
    """|cos| between raw ST-normals and 4D flow on a rigidly translating sheet."""
    spec = MotionSpec("translation", velocity, noise_sigma=noise_sigma, shape="plane")
    seq, oracle = gen_sequence(spec, n_points, T, seed=seed)
    return orthogonality_error(normal_field(seq), oracle)


def refinement_trial(seed, outlier_frac=0.2, n=40, vz=0.2, half=0.4, noise=0.005):
    """Angular error of plain LS and of iterative refinement on one neighborhood.

    Three frames of a horizontal sheet rising at ``vz`` per frame; a fraction
    of every frame is replaced by points scattered up to 0.3 off the sheet.
    The true ST-plane is tau = z / vz around the center frame.
    """
    rng = np.random.default_rng(seed)
    frames = []
    k = int(round(outlier_frac * n))
    for tau in range(3):
        z = vz * (tau - 1)
        x = np.column_stack([rng.uniform(-half, half, (n, 2)), z + rng.normal(0, noise, n)])
        bad = rng.choice(np.arange(1, n), k, replace=False)
        x[bad] = np.column_stack([rng.uniform(-half, half, (k, 2)), z + rng.uniform(-0.3, 0.3, k)])
        frames.append(x)
    frames[1][0] = 0.0  # inlier center
    index = build_st_index(CloudSequence.from_arrays(frames))
    nb = query_st_neighbors(index, (1, 0), 1.0, 1, None)
    truth = np.array([0.0, 0.0, 1.0 / vz, -1.0])
    truth /= np.linalg.norm(truth)
    plain = fit_plane(nb, index).normal.n
    refined = iterative_normal_refinement(nb, index)[0].normal.n
    return angle_between(plain, truth), angle_between(refined, truth)


def refinement_benchmark(n_trials=200, outlier_frac=0.2, seed=0) -> dict:
    errs = np.array([refinement_trial(seed * 100_003 + s, outlier_frac) for s in range(n_trials)])
    return {"trials": n_trials, "win_rate": float(np.mean(errs[:, 1] < errs[:, 0])),
            "median_plain": float(np.median(errs[:, 0])), "median_refined": float(np.median(errs[:, 1]))}


# ---------------------------------------------------------------- solver

def random_system(rng):
    n, D = int(rng.integers(6, 20)), int(rng.integers(1, 5))
    X = np.hstack([rng.standard_normal((n, D)), np.ones((n, 1))])
    return X, rng.uniform(0.05, 1.0, n), rng.standard_normal(n)


def gradient_descent_iterate(systems, steps=10_000_000):
    """The ``steps``-th iterate of plain GD (step 1/L, start at 0) on each
    weighted objective.  GD on a quadratic is an affine map, so the iterate is
    formed by repeated squaring instead of a Python loop."""
    out = []
    for X, w, tau in systems:
        H = X.T @ (w[:, None] * X)
        g0 = X.T @ (w * tau)
        lr = 1.0 / np.linalg.eigvalsh(H).max()
        coef = np.zeros(X.shape[1])
        M = np.eye(len(coef)) - lr * H
        c = lr * g0
        # steps of coef <- M coef + c, by repeated squaring of the affine map
        P, q, k = M, c, steps
        while k:
            if k & 1:
                coef = P @ coef + q
            q = P @ q + q
            P = P @ P
            k >>= 1
        out.append(coef)
    return out


def solver_check(n_systems=100, seed=0) -> dict:
    rng = np.random.default_rng(seed)
    systems = [random_system(rng) for _ in range(n_systems)]
    sols = [np.append(*solve_weighted_ls(*s)) for s in systems]
    resid = max(float(np.abs(X.T @ (w * (X @ c - tau))).max()) for (X, w, tau), c in zip(systems, sols))
    gd = gradient_descent_iterate(systems)
    gap = max(float(np.abs(a - b).max()) for a, b in zip(sols, gd))
    return {"max_normal_eq_residual": resid, "max_gd_gap": gap}


# ---------------------------------------------------------------- classification

@dataclass
class VariantResult:
    variant: str
    acc_static: float
    acc_temporal: float
    acc_fused: float
    seconds: float


def bench_dataset(seed=0, cfg: RunConfig = BENCH, outlier_frac=BENCH_OUTLIERS):
    return gen_motion_dataset(4, 50, seed=seed, T=cfg.frames, n_points=cfg.points, outlier_frac=outlier_frac)


def run_variant(variant, data, cfg: RunConfig = BENCH, seed=0, log=None) -> VariantResult:
    t0 = time.perf_counter()
    model = TwoStreamModel(4, cfg.backbone(), cfg.kinet(None if variant == "full" else variant), seed=seed)
    train_prep = [prepare(s, model) for s in data.train]
    train_two_stage(model, data.train, cfg.train(seed), prepared=train_prep, log=log)
    res = evaluate(model, data.test)
    return VariantResult(variant, res["acc_static"], res["acc_temporal"], res["acc_fused"],
                         time.perf_counter() - t0)
