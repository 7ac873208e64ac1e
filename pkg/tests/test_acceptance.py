"""Acceptance criteria, one test each.  Every test prints a single
``[PASS]``/``[FAIL]`` line with the measured numbers, also under pytest's
output capture.  Run directly with ``python tests/test_acceptance.py``.
"""
import contextlib
import sys
import time

import numpy as np
import pytest

from stsurf import checks, experiments as E, pcseq
from stsurf import tensor as T
from stsurf.accounting import count_params, estimate_flops, recount_params
from stsurf.cli import main
from stsurf.config import RunConfig
from stsurf.geometry import CloudSequence
from stsurf.network import TwoStreamModel

_capsys = None


@pytest.fixture(autouse=True)
def _grab_capsys(capsys):
    global _capsys
    _capsys = capsys
    yield
    _capsys = None


def report(n, name, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n} {name}: {detail}"
    ctx = _capsys.disabled() if _capsys is not None else contextlib.nullcontext()
    with ctx:
        print(line, flush=True)
    assert ok, line


def test_1_orthogonality():
    t0 = time.perf_counter()
    clean = E.orthogonality_run(0.0)
    noisy = E.orthogonality_run(0.01)
    dt = time.perf_counter() - t0
    report(1, "orthogonality", clean.mean < 1e-6 and noisy.mean < 0.1 and dt < 5,
           f"mean|cos| clean={clean.mean:.2e} noisy={noisy.mean:.2e} ({clean.count} points) in {dt:.1f}s")


def test_2_closed_form_solver():
    r = E.solver_check(100)
    report(2, "closed-form solver", r["max_normal_eq_residual"] < 1e-8 and r["max_gd_gap"] < 1e-4,
           f"normal-equation residual={r['max_normal_eq_residual']:.1e}, GD gap={r['max_gd_gap']:.1e}")


def test_3_robust_refinement():
    t0 = time.perf_counter()
    r = E.refinement_benchmark(200, 0.2)
    dt = time.perf_counter() - t0
    report(3, "robust refinement", r["win_rate"] >= 0.95 and dt < 30,
           f"refined beats LS on {r['win_rate']:.1%} of {r['trials']} trials "
           f"(median angle {r['median_plain']:.3f} -> {r['median_refined']:.4f} rad) in {dt:.1f}s")


def test_4_differentiability():
    t0 = time.perf_counter()
    errs = checks.run_all(0)
    dt = time.perf_counter() - t0
    worst = max(errs, key=errs.get)
    report(4, "differentiability", errs[worst] < 1e-4 and dt < 120,
           f"{len(errs)} checks, worst {worst} rel-err={errs[worst]:.1e} in {dt:.1f}s")


@pytest.fixture(scope="module")
def bench():
    data = E.bench_dataset()
    return data, {"full": E.run_variant("full", data)}


def test_5_two_stream_separation(bench):
    _, res = bench
    r = res["full"]
    report(5, "two-stream separation", r.acc_static <= 0.35 and r.acc_fused >= 0.9 and r.seconds < 600,
           f"static={r.acc_static:.3f} temporal={r.acc_temporal:.3f} fused={r.acc_fused:.3f} "
           f"in {r.seconds:.0f}s")


def test_6_ablation_ordering(bench):
    data, res = bench
    for v in ("no-weight", "no-normal"):
        if v not in res:
            res[v] = E.run_variant(v, data)
    acc = {v: res[v].acc_fused for v in E.VARIANTS}
    report(6, "ablation ordering", acc["full"] > acc["no-weight"] > acc["no-normal"],
           ", ".join(f"{v}={a:.3f}" for v, a in acc.items()))


def test_7_defaults():
    cfg = RunConfig()
    kc = cfg.kinet()
    got = (kc.reduce_ratio, kc.group_dim, kc.dt, kc.dr)
    report(7, "defaults", got == (0.5, 4, 1, 0.5) == (cfg.reduce_ratio, cfg.group_dim, cfg.dt, cfg.dr),
           f"ratio={got[0]} d={got[1]} dt={got[2]} dr={got[3]}")


TINY = "centroids=8,4\nradii=0.5,1.0\nnsample=4,4\nmlps=8;8\nout_dim=4\nk_max=8\n"


def _bench_count(tmp_path, capsys, text):
    path = tmp_path / "b.cfg"
    path.write_text(text)
    capsys.readouterr()
    assert main(["bench", "--config", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    return int(lines[1].split("=")[1])


def test_8_accounting(tmp_path, capsys):
    # closed forms: D s*c+c, C G*(d+1)*o+o, R s*o+o (+ H for later units)
    fixtures = {
        "unit 8->8": ("unit_static_dim=8\nout_dim=8\n", 36 + 48 + 72),
        "unit 16->8": ("unit_static_dim=16\nout_dim=8\n", 136 + 88 + 136),
        "tiny two-stream": (TINY, (32 + 96 + 36) + (48 + 24 + 48) + (64 + 24 + 64 + 2) + 20),
    }
    got = {k: _bench_count(tmp_path, capsys, text) for k, (text, _) in fixtures.items()}
    counts_ok = all(got[k] == v for k, (_, v) in fixtures.items())
    m = TwoStreamModel(4, seed=0)
    f = [estimate_flops(m, (4, n)) for n in (16, 32, 48, 64)]
    linear = f[1] - f[0] == f[2] - f[1] == f[3] - f[2] > 0
    unit = E.BENCH.kinet()
    from stsurf.kinet_unit import KinetUnit
    u = KinetUnit(16, unit)
    doubles = estimate_flops(u, 200) == 2 * estimate_flops(u, 100)
    dual = count_params(m) == recount_params(m)
    report(8, "accounting", counts_ok and linear and doubles and dual,
           f"params {got} vs closed forms {[v for _, v in fixtures.values()]}; "
           f"flop increments {f[1] - f[0]},{f[2] - f[1]},{f[3] - f[2]}; unit doubling={doubles}; "
           f"dual traversal={dual}")


def test_9_determinism_and_round_trips(tmp_path):
    cfg = tmp_path / "t.cfg"
    cfg.write_text(TINY + "epochs_static=2\nepochs_temporal=2\nbatch_size=4\nframes=3\npoints=24\n")
    data = tmp_path / "d.pcseq"
    assert main(["synth", "--seed", "5", "--per-class", "4", "--config", str(cfg), "--output", str(data)]) == 0
    blobs = []
    for k in range(2):
        metrics, ckpt = tmp_path / f"m{k}", tmp_path / f"c{k}"
        assert main(["train", "--seed", "7", "--input", str(data), "--config", str(cfg),
                     "--metrics", str(metrics), "--output", str(ckpt)]) == 0
        blobs.append((metrics.read_bytes(), ckpt.read_bytes()))
    train_same = blobs[0] == blobs[1]

    rng = np.random.default_rng(0)
    seqs = [CloudSequence.from_arrays([rng.standard_normal((int(rng.integers(1, 30)), 3)) * 10 ** rng.uniform(-5, 5)
                                       for _ in range(int(rng.integers(1, 5)))], label=int(rng.integers(0, 9)))
            for _ in range(20)]
    back = pcseq.loads(pcseq.dumps(seqs))
    pc_same = all(a.label == b.label and all(x.coords.tobytes() == y.coords.tobytes()
                                             for x, y in zip(a.frames, b.frames)) for a, b in zip(seqs, back))

    m = TwoStreamModel(4, seed=3)
    T.save_checkpoint(tmp_path / "a.ckpt", m.state_dict())
    m2 = TwoStreamModel(4, seed=4)
    m2.load_state_dict(T.load_checkpoint(tmp_path / "a.ckpt"))
    T.save_checkpoint(tmp_path / "b.ckpt", m2.state_dict())
    ck_same = (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    report(9, "determinism and round-trips", train_same and pc_same and ck_same,
           f"seeded train byte-identical={train_same}, PCSEQ lossless={pc_same}, checkpoint lossless={ck_same}")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-q"]))
