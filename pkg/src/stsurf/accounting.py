"""Parameter and FLOP accounting.

FLOP rules: a multiply-add counts as 2, so an (n, m) @ (m, k) product is
``2 n m k``; one dense ``s x s`` solve is ``round(2/3 s^3 + 2 s^2)``;
elementwise ops count 1 per output element.  Gathers, reshapes and concats
are free.  Neighbor lists are costed at their padded width ``k_max``.
"""
from __future__ import annotations

from dataclasses import dataclass

from .kinet_unit import KinetUnit
from .network import TwoStreamModel

FLOP_CONVENTION = "multiply-add counts as 2 FLOPs"


@dataclass(frozen=True)
class CostReport:
    parameter_count: int
    flop_estimate: int

    def lines(self):
        return [f"# {FLOP_CONVENTION}",
                f"parameter_count={self.parameter_count}",
                f"flop_estimate={self.flop_estimate}"]


def count_params(model) -> int:
    return sum(int(p.data.size) for p in model.parameters())


def recount_params(model) -> int:
    """Independent count: walk the name registry backwards, shape by shape."""
    total = 0
    named = model.named_parameters() if hasattr(model, "named_parameters") else \
        {p.name: p for p in model.parameters()}
    for name in sorted(named, reverse=True):
        n = 1
        for s in named[name].shape:
            n *= s
        total += n
    return total


def linear_flops(rows: int, n_in: int, n_out: int) -> int:
    return 2 * rows * n_in * n_out


def solve_flops(s: int) -> int:
    return round(2 * s ** 3 / 3 + 2 * s * s)


def unit_flops(unit: KinetUnit, n_points: int, k: int = None, prev_groups: int = 0) -> int:
    cfg = unit.config
    P, K = n_points, cfg.k_max if k is None else k
    G, d, c, s = unit.groups, cfg.group_dim, unit.c, cfg.group_dim + 1
    out = cfg.out_dim
    f = linear_flops(P, unit.static_dim, c)                # D
    f += linear_flops(P, unit.static_dim, out) + P * out   # R and the residual add
    if not cfg.use_normals:
        return f + P * K * c + linear_flops(P, c, out)     # neighbor max-pool, C
    if unit.H is not None:
        f += linear_flops(P, prev_groups, G) + P * G       # H and sigmoid
    f += P * G * K                                         # neighbor mask
    f += P * G * K * s                                     # weighted design
    f += 2 * P * G * K * s * s                             # Gram
    f += 2 * P * G * s + P * G * s                         # trace, ridge
    f += 2 * P * G * K * s                                 # right-hand side
    f += P * G * solve_flops(s)
    f += 3 * P * G * s                                     # normalization
    f += 2 * P * G * d + 2 * P * G                         # self-residual, square
    f += linear_flops(P, G * s, out)                       # C
    return f


def estimate_flops(model, input_shape) -> int:
    """One forward pass over a (T, n) sequence; ``model`` may also be a lone unit
    (then ``input_shape`` is the point count)."""
    if isinstance(model, KinetUnit):
        P = input_shape if isinstance(input_shape, int) else int(input_shape[0]) * int(input_shape[1])
        return unit_flops(model, P)
    if not isinstance(model, TwoStreamModel):
        raise TypeError(f"cannot cost {type(model).__name__}")
    T_, n = (int(v) for v in input_shape)
    bb = model.backbone_config
    C = model.n_classes
    flops, prev_n, in_dim, sizes = 0, n, 3, []
    for l, widths in enumerate(bb.mlps):
        n_l = min(bb.centroids[l], prev_n)
        rows = T_ * n_l * bb.nsample[l]
        flops += rows * 3                                   # relative coordinates
        d = in_dim
        for w in widths:
            flops += linear_flops(rows, d, w) + rows * w    # affine + relu
            d = w
        flops += rows * d                                   # neighbor max-pool
        sizes.append(n_l)
        prev_n, in_dim = n_l, 3 + d
    flops += T_ * sizes[-1] * bb.dims[-1] + linear_flops(T_, bb.dims[-1], C) + T_ * C
    prev_groups = 0
    for unit, n_l in zip(model.units, sizes):
        flops += unit_flops(unit, T_ * n_l, prev_groups=prev_groups)
        prev_groups = unit.groups
    out = model.kinet_config.out_dim
    flops += T_ * sizes[-1] * out + linear_flops(1, out, C)
    flops += 2 * 3 * C + C                                  # two softmaxes, mean
    return flops


def cost_report(model, input_shape) -> CostReport:
    return CostReport(count_params(model), estimate_flops(model, input_shape))
