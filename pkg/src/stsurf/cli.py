"""Command-line entry point: ``stsurf <command> [flags]``.

Exit codes: 0 success, 1 invalid input (bad flags, files, formats or
configs), 2 any other failure.
"""
from __future__ import annotations

import argparse
import sys

import numpy as np

from . import checks, pcseq
from . import tensor as T
from .accounting import cost_report
from .config import RunConfig, load_config
from .errors import InvalidInput
from .geometry import sample_sequence
from .kinet_unit import KinetUnit
from .network import TwoStreamModel, evaluate, train_two_stage
from .stsolver import normal_field
from .synth import gen_motion_dataset, stratified_split


# The solver's relative ridge (1e-8) caps how far rounding error in a
# near-singular neighborhood can be amplified: eps / 1e-8 is about 2e-8.
# Normal components below that floor print as 0 (this also folds -0.0).
NORMAL_ZERO = 1e-8


class UsageError(InvalidInput):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    if getattr(args, "frames", None) is not None:
        cfg.frames = args.frames
    if getattr(args, "points", None) is not None:
        cfg.points = args.points
    return cfg


def _open_out(path):
    return sys.stdout if path in (None, "-") else open(path, "w", encoding="utf-8")


def _fmt(v: float, eps=0.0) -> str:
    v = float(v)
    if abs(v) <= eps:
        return "0"  # also folds -0.0
    return str(int(v)) if v.is_integer() else repr(v)


# ---------------------------------------------------------------- commands

def cmd_synth(args):
    cfg = _config(args)
    ds = gen_motion_dataset(args.classes, args.per_class, seed=args.seed, T=cfg.frames,
                            n_points=cfg.points, speed=args.speed, noise_sigma=args.noise,
                            outlier_frac=args.outliers)
    out = _open_out(args.output)
    try:
        out.write(pcseq.dumps(ds.train + ds.test))
    finally:
        if out is not sys.stdout:
            out.close()


def _normals(args, refine):
    cfg = _config(args)
    seqs = pcseq.read(args.input)
    out = _open_out(args.output)
    try:
        for seq in seqs:
            coords = [f.coords for f in seq.frames]
            shift = np.concatenate(coords).mean(axis=0)
            scale = 1.0
            if not args.raw:
                # fit in a unit-sphere frame; dr is measured in those units
                scale = float(np.linalg.norm(np.concatenate(coords) - shift, axis=1).max()) or 1.0
                seq = type(seq).from_arrays([(c - shift) / scale for c in coords], seq.label)
            normals = normal_field(seq, cfg.dr, cfg.dt, refine=refine, k_max=cfg.normals_k_max or None)
            for t, (c, n) in enumerate(zip(coords, normals), start=1):
                # tau = (A/scale) x + ..., so A in raw units is A/scale; renormalize
                A = -n[:, :3] / n[:, 3:4] / scale
                raw = np.column_stack([A, -np.ones(len(A))])
                raw /= np.linalg.norm(raw, axis=1, keepdims=True)
                for p, q in zip(c, raw):
                    pos = " ".join(_fmt(v) for v in (*p, t))
                    nrm = " ".join(_fmt(v, NORMAL_ZERO) for v in q)
                    out.write(f"{pos} {nrm}\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_fit_normals(args):
    _normals(args, refine=False)


def cmd_refine(args):
    _normals(args, refine=True)


def _dataset(args, cfg):
    seqs = pcseq.read(args.input)
    if any(s.label is None for s in seqs):
        raise InvalidInput("every sequence needs a label")
    rng = np.random.default_rng(args.seed)
    seqs = [sample_sequence(s, cfg.frames, cfg.points, int(rng.integers(2 ** 31))) for s in seqs]
    return stratified_split(seqs, 0.7, args.seed)


def _model(cfg, n_classes, seed, ablation):
    return TwoStreamModel(n_classes, cfg.backbone(), cfg.kinet(ablation), seed=seed)


def cmd_train(args):
    cfg = _config(args)
    train, _ = _dataset(args, cfg)
    n_classes = max(s.label for s in train) + 1
    model = _model(cfg, n_classes, args.seed, args.ablation)
    stages = {"1": (1,), "2": (2,), "both": (1, 2)}[args.stage]
    if args.stage == "2":
        if not args.checkpoint:
            raise InvalidInput("--stage 2 needs --checkpoint with a stage-1 model")
        model.load_state_dict(T.load_checkpoint(args.checkpoint))
    out = _open_out(args.metrics)
    try:
        train_two_stage(model, train, cfg.train(args.seed), stages=stages,
                        log=lambda line: out.write(line + "\n"))
    finally:
        if out is not sys.stdout:
            out.close()
    if args.output:
        T.save_checkpoint(args.output, model.state_dict())


def cmd_eval(args):
    cfg = _config(args)
    _, test = _dataset(args, cfg)
    state = T.load_checkpoint(args.checkpoint)
    n_classes = state["temporal_head.b"].shape[0] if "temporal_head.b" in state else None
    if n_classes is None:
        raise InvalidInput("checkpoint has no temporal head")
    model = _model(cfg, n_classes, args.seed, args.ablation)
    model.load_state_dict(state)
    res = evaluate(model, test)
    out = _open_out(args.output)
    try:
        out.write(",".join(f"{k}={v!r}" for k, v in res.items()) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_bench(args):
    cfg = _config(args)
    if cfg.unit_static_dim:
        model = KinetUnit(cfg.unit_static_dim, cfg.kinet(args.ablation), rng=np.random.default_rng(0))
    else:
        model = _model(cfg, args.classes, 0, args.ablation)
    rep = cost_report(model, (cfg.frames, cfg.points))
    out = _open_out(args.output)
    try:
        out.write("\n".join(rep.lines()) + "\n")
    finally:
        if out is not sys.stdout:
            out.close()


def cmd_gradcheck(args):
    worst = 0.0
    for name, err in checks.run_all(args.seed).items():
        worst = max(worst, err)
        print(f"{name} rel_err={err:.3e} {'ok' if err < args.tol else 'FAIL'}")
    if not worst < args.tol:
        raise RuntimeError(f"gradcheck failed: worst relative error {worst:.3e}")


# ---------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="stsurf", description="Space-time surface normals and kinematic point cloud networks.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seed_required=False, io=True):
        sp.add_argument("--config", help="key=value run configuration")
        sp.add_argument("--frames", type=int)
        sp.add_argument("--points", type=int)
        sp.add_argument("--output", help="output path (default stdout)")
        if io:
            sp.add_argument("--input", required=True, help="PCSEQ file")
        if seed_required:
            sp.add_argument("--seed", type=int, required=True)

    sp = sub.add_parser("synth", help="emit the synthetic motion dataset as PCSEQ")
    common(sp, seed_required=True, io=False)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--per-class", type=int, default=50)
    sp.add_argument("--speed", type=float, default=0.15)
    sp.add_argument("--noise", type=float, default=0.0)
    sp.add_argument("--outliers", type=float, default=0.0)
    sp.set_defaults(fn=cmd_synth)

    for name, fn in (("fit-normals", cmd_fit_normals), ("refine", cmd_refine)):
        sp = sub.add_parser(name, help="per-point ST-normals as 'x y z t nx ny nz nt'")
        common(sp)
        sp.add_argument("--raw", action="store_true", help="fit in input units instead of a unit sphere")
        sp.set_defaults(fn=fn)

    for name, fn in (("train", cmd_train), ("eval", cmd_eval)):
        sp = sub.add_parser(name)
        common(sp, seed_required=True)
        sp.add_argument("--ablation", choices=("no-normal", "no-weight"))
        sp.add_argument("--checkpoint", required=(name == "eval"))
        if name == "train":
            sp.add_argument("--stage", choices=("1", "2", "both"), default="both")
            sp.add_argument("--metrics", help="metrics file (default stdout)")
        sp.set_defaults(fn=fn)

    sp = sub.add_parser("bench", help="parameter count and FLOP estimate")
    common(sp, io=False)
    sp.add_argument("--classes", type=int, default=4)
    sp.add_argument("--ablation", choices=("no-normal", "no-weight"))
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("gradcheck", help="finite-difference checks of every differentiable op")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.fn(args)
    except InvalidInput as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - exit-code contract
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
