"""Central finite-difference checks for every differentiable piece.

Each case returns the relative error of tape gradients against central
differences in float64.  Used by the ``gradcheck`` command and the tests.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import tensor as T
from .geometry import neighbor_table
from .kinet_unit import KinetConfig, KinetUnit, UnitState, fit_feature_plane, unit_forward


@dataclass
class Case:
    name: str
    run: Callable[[int], float]


def _rng(seed):
    return np.random.default_rng(seed)


def _op(fn, *shapes, positive=False):
    def run(seed):
        r = _rng(seed)
        xs = [r.standard_normal(s) for s in shapes]
        if positive:
            xs = [np.abs(x) + 0.5 for x in xs]
        return T.gradcheck(fn, xs, seed=seed)
    return run


def _relu(seed):
    # keep inputs away from the kink
    x = _rng(seed).standard_normal((4, 5))
    x = np.where(np.abs(x) < 0.05, 0.3, x)
    return T.gradcheck(T.relu, [x], seed=seed)


def _reduce_max(seed):
    # distinct entries so the argmax is stable under +-h
    x = _rng(seed).permutation(24).reshape(3, 8).astype(float) * 0.1
    return T.gradcheck(lambda a: T.reduce_max(a, axis=1), [x], seed=seed)


def _gather(seed):
    idx = _rng(seed).integers(0, 6, size=(4, 3))
    return T.gradcheck(lambda a: T.gather(a, idx), [_rng(seed).standard_normal((6, 2))], seed=seed)


def _xent(seed):
    y = _rng(seed).integers(0, 4, size=5)
    return T.gradcheck(lambda z: T.softmax_cross_entropy(z, y), [_rng(seed).standard_normal((5, 4))], seed=seed)


def _linear_solve(seed):
    r = _rng(seed)
    M = r.standard_normal((3, 4, 4)) + 4 * np.eye(4)
    return T.gradcheck(T.linear_solve, [M, r.standard_normal((3, 4))], seed=seed)


def _fit_plane(seed):
    r = _rng(seed)
    F = r.standard_normal((2, 3, 9, 4))
    w = r.uniform(0.2, 1.0, (2, 3, 9))
    tau = np.broadcast_to(r.integers(-1, 2, 9).astype(float), (2, 3, 9)).copy()

    def fn(F_, w_):
        A, b, res = fit_feature_plane(F_, w_, tau)
        return T.concat([A, T.reshape(b, b.shape + (1,)), res], axis=-1)
    return T.gradcheck(fn, [F, w], seed=seed)


def _tiny_table(seed, T_=3, n=8):
    xyz = _rng(seed).uniform(-1, 1, (T_, n, 3))
    return neighbor_table(xyz, dr=5.0, dt=1, k_max=T_ * n)


def _unit(seed):
    cfg = KinetConfig(group_dim=4, out_dim=5, k_max=24, dr=5.0)
    unit = KinetUnit(8, cfg, prev_groups=None, rng=_rng(seed), name="u")
    table = _tiny_table(seed)
    S = _rng(seed + 1).standard_normal((24, 8))
    return T.gradcheck(lambda s: unit_forward(None, s, table, unit)[1], [S], seed=seed,
                       params=unit.parameters())


def _stack(seed):
    cfg = KinetConfig(group_dim=4, out_dim=5, k_max=24, dr=5.0)
    r = _rng(seed)
    u1 = KinetUnit(8, cfg, None, r, "u1")
    u2 = KinetUnit(8 + cfg.out_dim, cfg, u1.groups, r, "u2")
    table = _tiny_table(seed)
    S = _rng(seed + 1).standard_normal((24, 8))

    def fn(s):
        st, h = unit_forward(None, s, table, u1)
        st, h = unit_forward(UnitState(None, st.deviations), T.concat([s, h], axis=-1), table, u2)
        return h
    return T.gradcheck(fn, [S], seed=seed, params=u1.parameters() + u2.parameters())


CASES = [
    Case("add", _op(T.add, (3, 4), (4,))),
    Case("sub", _op(T.sub, (3, 1), (3, 4))),
    Case("mul", _op(T.mul, (2, 3, 4), (3, 1))),
    Case("neg", _op(T.neg, (5,))),
    Case("square", _op(T.square, (3, 4))),
    Case("reciprocal", _op(T.reciprocal, (3, 4), positive=True)),
    Case("sigmoid", _op(T.sigmoid, (3, 4))),
    Case("relu", _relu),
    Case("matmul", _op(T.matmul, (2, 3, 4), (4, 5))),
    Case("concat", _op(lambda a, b: T.concat([a, b], axis=1), (2, 3), (2, 2))),
    Case("getitem", _op(lambda a: T.getitem(a, (slice(None), [0, 2, 2])), (3, 4))),
    Case("gather", _gather),
    Case("reshape", _op(lambda a: T.reshape(a, (6, 2)), (3, 4))),
    Case("transpose", _op(lambda a: T.transpose(a, (2, 0, 1)), (2, 3, 4))),
    Case("sum", _op(lambda a: T.sum(a, axis=(0, 2)), (2, 3, 4))),
    Case("mean", _op(lambda a: T.mean(a, axis=1), (3, 4))),
    Case("reduce_max", _reduce_max),
    Case("l2_normalize", _op(T.l2_normalize, (4, 5))),
    Case("pointwise_linear", _op(T.pointwise_linear, (6, 3), (3, 4), (4,))),
    Case("softmax_cross_entropy", _xent),
    Case("linear_solve", _linear_solve),
    Case("fit_feature_plane", _fit_plane),
    Case("unit_forward", _unit),
    Case("two_unit_stack", _stack),
]


def run_all(seed=0, names=None) -> dict[str, float]:
    return {c.name: c.run(seed) for c in CASES if names is None or c.name in names}
