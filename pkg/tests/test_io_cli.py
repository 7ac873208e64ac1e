import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stsurf import pcseq
from stsurf import tensor as T
from stsurf.accounting import (FLOP_CONVENTION, count_params, estimate_flops, linear_flops, recount_params,
                               unit_flops)
from stsurf.cli import main
from stsurf.config import RunConfig, dump_config, parse_config
from stsurf.errors import ConfigError, InvalidInput, ParseError
from stsurf.geometry import CloudSequence
from stsurf.kinet_unit import KinetConfig, KinetUnit
from stsurf.network import TwoStreamModel

TINY_CFG = """\
centroids = 8,4
radii = 0.5,1.0
nsample = 4,4
mlps = 8;8
out_dim = 4
k_max = 8
epochs_static = 1
epochs_temporal = 1
batch_size = 4
frames = 2
points = 16
"""


@pytest.fixture
def tiny_cfg(tmp_path):
    p = tmp_path / "tiny.cfg"
    p.write_text(TINY_CFG)
    return str(p)


@pytest.fixture
def dataset(tmp_path, tiny_cfg):
    p = tmp_path / "data.pcseq"
    assert main(["synth", "--seed", "3", "--classes", "2", "--per-class", "5", "--config", tiny_cfg,
                 "--output", str(p)]) == 0
    return str(p)


def write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ------------------------------------------------------------ PCSEQ

finite = st.floats(allow_nan=False, allow_infinity=False, width=64)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.lists(st.tuples(finite, finite, finite), min_size=1, max_size=5), min_size=1, max_size=4),
       st.one_of(st.none(), st.integers(0, 99)))
def test_pcseq_round_trip(frames, label):
    seq = CloudSequence.from_arrays([np.array(f, dtype=float) for f in frames], label)
    back, = pcseq.loads(pcseq.dumps(seq))
    assert back.label == label and back.T == seq.T
    for a, b in zip(seq.frames, back.frames):
        assert a.coords.tobytes() == b.coords.tobytes()


def test_pcseq_multiple_records():
    text = "PCSEQ 1 1 0\n1\n0 0 0\n\nPCSEQ 1 2\n1\n1 2 3\n2\n4 5 6\n7 8 9\n"
    a, b = pcseq.loads(text)
    assert (a.label, b.label, b.T) == (0, None, 2)
    np.testing.assert_array_equal(b.frames[1].coords, [[4, 5, 6], [7, 8, 9]])
    assert pcseq.loads(pcseq.dumps([a, b]))[1].frames[1].coords.tolist() == [[4, 5, 6], [7, 8, 9]]


@pytest.mark.parametrize("text, line", [
    ("PCSEQ 1 1\n2\n0 0 0\n", 3),               # file ends before the second point
    ("PCSEQ 1 1\n1\n0 0\n", 3),                  # two fields
    ("PCSEQ 1 1\n1\n0 x 0\n", 3),
    ("PCSEQ 2 1\n1\n0 0 0\n", 1),
    ("PCSEQ 1 one\n", 1),
    ("PCSEQ 1 2\n1\n0 0 0\nabc\n", 4),
    ("PCSEQ 1 1\n1\n0 nan 0\n", 3),
    ("hello\n", 1),
])
def test_pcseq_errors_name_line(text, line):
    with pytest.raises(ParseError, match=f"line {line}:"):
        pcseq.loads(text)


def test_pcseq_empty_file():
    with pytest.raises(ParseError):
        pcseq.loads("\n\n")


# ------------------------------------------------------------ config

def test_config_defaults():
    cfg = RunConfig()
    assert (cfg.reduce_ratio, cfg.group_dim, cfg.dt, cfg.dr) == (0.5, 4, 1, 0.5)
    kc = cfg.kinet()
    assert (kc.reduce_ratio, kc.group_dim, kc.dt, kc.dr) == (0.5, 4, 1, 0.5)


def test_config_round_trip():
    cfg = parse_config(TINY_CFG)
    assert cfg.mlps == ((8,), (8,)) and cfg.radii == (0.5, 1.0)
    assert parse_config(dump_config(cfg)) == cfg
    assert parse_config(dump_config(RunConfig())) == RunConfig()


def test_config_rejects_unknown_key():
    with pytest.raises(ConfigError, match="line 2"):
        parse_config("dr = 1\nradius = 2\n")
    with pytest.raises(ConfigError):
        parse_config("dr = far\n")
    with pytest.raises(ConfigError):
        parse_config("no equals sign\n")


def test_config_ablations():
    cfg = RunConfig()
    assert not cfg.kinet("no-weight").use_weights and cfg.kinet("no-weight").use_normals
    assert not cfg.kinet("no-normal").use_normals
    with pytest.raises(ConfigError):
        cfg.kinet("no-backbone")


# ------------------------------------------------------------ accounting

def test_linear_flop_example():
    assert linear_flops(10, 8, 4) == 640
    assert 8 * 4 + 4 == 36


def _unit(static_dim, out_dim, **kw):
    return KinetUnit(static_dim, KinetConfig(out_dim=out_dim, **kw), rng=np.random.default_rng(0))


@pytest.mark.parametrize("static_dim, out_dim, kw, expected", [
    # D: s*c + c, C: G*(d+1)*o + o, R: s*o + o
    (8, 8, {}, (8 * 4 + 4) + (1 * 5 * 8 + 8) + (8 * 8 + 8)),
    (16, 8, {}, (16 * 8 + 8) + (2 * 5 * 8 + 8) + (16 * 8 + 8)),
    # no normals: C maps the c pooled features directly
    (16, 8, {"use_normals": False, "use_weights": False}, (16 * 8 + 8) + (8 * 8 + 8) + (16 * 8 + 8)),
])
def test_unit_param_closed_form(static_dim, out_dim, kw, expected):
    assert count_params(_unit(static_dim, out_dim, **kw)) == expected


def test_two_stream_param_closed_form():
    cfg = parse_config(TINY_CFG)
    m = TwoStreamModel(4, cfg.backbone(), cfg.kinet(), seed=0)
    backbone = (3 * 8 + 8) + (11 * 8 + 8) + (8 * 4 + 4)
    unit0 = (11 * 4 + 4) + (5 * 4 + 4) + (11 * 4 + 4)          # input: xyz + 8 features
    unit1 = (15 * 4 + 4) + (5 * 4 + 4) + (15 * 4 + 4) + (1 + 1)  # + previous output, 1->1 weight head
    head = 4 * 4 + 4
    assert count_params(m) == backbone + unit0 + unit1 + head == 458


@pytest.mark.parametrize("text, expected", [
    ("unit_static_dim = 8\nout_dim = 8\n", 156),
    ("unit_static_dim = 16\nout_dim = 8\n", 360),
    (TINY_CFG, 458),
])
def test_bench_reports_closed_form(tmp_path, capsys, text, expected):
    assert main(["bench", "--config", write(tmp_path, "b.cfg", text)]) == 0 or expected is None
    out = capsys.readouterr().out.splitlines()
    assert out[0] == f"# {FLOP_CONVENTION}"
    assert out[1] == f"parameter_count={expected}"
    assert int(out[2].split("=")[1]) > 0


def test_bench_on_tiny_config_counts_classes(tmp_path, capsys):
    main(["bench", "--classes", "4", "--config", write(tmp_path, "b.cfg", TINY_CFG)])
    assert "parameter_count=458" in capsys.readouterr().out


def test_unit_flops_double_with_points():
    u = _unit(16, 8)
    assert unit_flops(u, 200) == 2 * unit_flops(u, 100)
    v = _unit(16, 8, use_normals=False, use_weights=False)
    assert estimate_flops(v, 64) == 2 * estimate_flops(v, 32)


def test_model_flops_affine_in_points():
    m = TwoStreamModel(4, seed=0)
    f = [estimate_flops(m, (4, n)) for n in (16, 32, 48, 64)]
    # per-point terms scale; class and frame heads add a fixed offset
    assert f[1] - f[0] == f[2] - f[1] == f[3] - f[2] > 0
    assert count_params(m) == count_params(TwoStreamModel(4, seed=1))


def test_default_model_dual_traversal():
    m = TwoStreamModel(10, seed=0)
    assert count_params(m) == recount_params(m)
    total = sum(int(np.prod(a.shape)) for a in m.state_dict().values())
    assert count_params(m) == total


# ------------------------------------------------------------ checkpoints

def test_checkpoint_round_trip(tmp_path):
    m = TwoStreamModel(3, seed=5)
    p = tmp_path / "m.ckpt"
    T.save_checkpoint(p, m.state_dict())
    m2 = TwoStreamModel(3, seed=6)
    m2.load_state_dict(T.load_checkpoint(p))
    for name, arr in m.state_dict().items():
        assert arr.tobytes() == m2.state_dict()[name].tobytes()
    q = tmp_path / "m2.ckpt"
    T.save_checkpoint(q, m2.state_dict())
    assert p.read_bytes() == q.read_bytes()


def test_checkpoint_shape_mismatch(tmp_path):
    p = tmp_path / "m.ckpt"
    T.save_checkpoint(p, TwoStreamModel(3).state_dict())
    with pytest.raises(InvalidInput):
        TwoStreamModel(5).load_state_dict(T.load_checkpoint(p))


# ------------------------------------------------------------ CLI

def test_fit_normals_static(tmp_path, capsys):
    rng = np.random.default_rng(0)
    base = rng.uniform(-1, 1, (12, 3))
    path = tmp_path / "s.pcseq"
    pcseq.write(path, CloudSequence.from_arrays([base] * 3))
    assert main(["fit-normals", "--input", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 36
    assert all(line.split()[4:] == ["0", "0", "0", "-1"] for line in lines)
    assert main(["refine", "--input", str(path)]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert all(line.split()[4:] == ["0", "0", "0", "-1"] for line in lines)


def test_fit_normals_static_many_seeds(tmp_path, capsys):
    path = tmp_path / "s.pcseq"
    for seed in range(20):
        base = np.random.default_rng(seed).uniform(-1, 1, (int(8 + seed), 3))
        pcseq.write(path, CloudSequence.from_arrays([base] * 4))
        assert main(["fit-normals", "--input", str(path)]) == 0
        assert {tuple(l.split()[4:]) for l in capsys.readouterr().out.splitlines()} == {("0", "0", "0", "-1")}


def test_fit_normals_capped_neighborhoods(tmp_path, capsys):
    base = np.random.default_rng(0).uniform(-1, 1, (12, 3))
    path = tmp_path / "s.pcseq"
    pcseq.write(path, CloudSequence.from_arrays([base] * 3))
    cfg = write(tmp_path, "c.cfg", "normals_k_max = 1\n")
    assert main(["fit-normals", "--input", str(path), "--config", cfg]) == 0
    # a lone center gives a degenerate but finite fit
    assert len(capsys.readouterr().out.splitlines()) == 36


def test_fit_normals_translation_raw(tmp_path):
    frames = [np.array([[x, y, 2.0 * t] for x in range(3) for y in range(3)], float) for t in range(3)]
    path = tmp_path / "z.pcseq"
    pcseq.write(path, CloudSequence.from_arrays(frames))
    out = tmp_path / "n.txt"
    cfg = write(tmp_path, "c.cfg", "dr = 3.0\n")
    assert main(["fit-normals", "--raw", "--input", str(path), "--config", cfg, "--output", str(out)]) == 0
    rows = np.loadtxt(out)
    # plane tau = z / 2: normal proportional to (0, 0, 0.5, -1)
    np.testing.assert_allclose(rows[:, 4:], np.tile([0, 0, 0.5, -1] / np.sqrt(1.25), (27, 1)), atol=1e-9)
    np.testing.assert_array_equal(rows[:, 3], np.repeat([1, 2, 3], 9))


def test_train_is_byte_identical(tmp_path, dataset, tiny_cfg):
    outs = []
    for k in range(2):
        metrics, ckpt = tmp_path / f"m{k}.txt", tmp_path / f"c{k}.ckpt"
        assert main(["train", "--seed", "7", "--input", dataset, "--config", tiny_cfg,
                     "--metrics", str(metrics), "--output", str(ckpt)]) == 0
        outs.append((metrics.read_bytes(), ckpt.read_bytes()))
    assert outs[0] == outs[1]
    lines = outs[0][0].decode().splitlines()
    assert len(lines) == 2 and lines[0].startswith("epoch=1,stage=1,loss=")


def test_train_then_eval(tmp_path, dataset, tiny_cfg, capsys):
    ckpt = tmp_path / "c.ckpt"
    assert main(["train", "--seed", "1", "--input", dataset, "--config", tiny_cfg, "--stage", "1",
                 "--metrics", str(tmp_path / "m1"), "--output", str(ckpt)]) == 0
    assert main(["train", "--seed", "1", "--input", dataset, "--config", tiny_cfg, "--stage", "2",
                 "--checkpoint", str(ckpt), "--metrics", str(tmp_path / "m2"), "--output", str(ckpt)]) == 0
    capsys.readouterr()
    assert main(["eval", "--seed", "1", "--input", dataset, "--config", tiny_cfg, "--checkpoint", str(ckpt)]) == 0
    out = capsys.readouterr().out
    assert out.startswith("acc_static=") and "n=2" in out


def test_synth_is_seeded(tmp_path, tiny_cfg):
    a, b, c = (tmp_path / n for n in "abc")
    for path, seed in ((a, 1), (b, 1), (c, 2)):
        assert main(["synth", "--seed", str(seed), "--per-class", "2", "--config", tiny_cfg,
                     "--output", str(path)]) == 0
    assert a.read_bytes() == b.read_bytes() != c.read_bytes()
    assert len(pcseq.read(a)) == 8


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--seed", "0"]) == 0
    out = capsys.readouterr().out
    assert "linear_solve" in out and "FAIL" not in out


def test_gradcheck_command_failure_is_internal(capsys):
    assert main(["gradcheck", "--tol", "1e-300"]) == 2


@pytest.mark.parametrize("argv", [
    [],
    ["frobnicate"],
    ["synth"],                                             # --seed is required
    ["train", "--input", "x.pcseq"],                       # --seed is required
    ["fit-normals"],
    ["fit-normals", "--input", "/nonexistent/file.pcseq"],
    ["refine", "--input", "/nonexistent/file.pcseq"],
    ["eval", "--seed", "0", "--input", "/nonexistent.pcseq", "--checkpoint", "x"],
    ["bench", "--config", "/nonexistent.cfg"],
    ["bench", "--ablation", "no-everything"],
    ["gradcheck", "--tol", "small"],
])
def test_invalid_input_exit_code(argv):
    assert main(argv) == 1


def test_malformed_file_reports_line(tmp_path, capsys):
    path = write(tmp_path, "bad.pcseq", "PCSEQ 1 1\n2\n0 0 0\n1 1\n")
    assert main(["fit-normals", "--input", path]) == 1
    assert "line 4" in capsys.readouterr().err


def test_unknown_config_key_exit(tmp_path):
    assert main(["bench", "--config", write(tmp_path, "c.cfg", "colour = red\n")]) == 1


def test_train_error_paths(tmp_path, dataset, tiny_cfg):
    unlabeled = tmp_path / "u.pcseq"
    pcseq.write(unlabeled, CloudSequence.from_arrays([np.zeros((4, 3))]))
    assert main(["train", "--seed", "0", "--input", str(unlabeled), "--config", tiny_cfg]) == 1
    assert main(["train", "--seed", "0", "--input", dataset, "--config", tiny_cfg, "--stage", "2"]) == 1
    bad = write(tmp_path, "bad.ckpt", "not a checkpoint")
    assert main(["eval", "--seed", "0", "--input", dataset, "--config", tiny_cfg, "--checkpoint", bad]) == 1


def test_eval_with_mismatched_checkpoint(tmp_path, dataset, tiny_cfg):
    ckpt = tmp_path / "other.ckpt"
    T.save_checkpoint(ckpt, TwoStreamModel(2, seed=0).state_dict())  # default-size model
    assert main(["eval", "--seed", "0", "--input", dataset, "--config", tiny_cfg, "--checkpoint", str(ckpt)]) == 1


def test_internal_error_exit(monkeypatch):
    import stsurf.cli as cli

    def boom(args):
        raise ZeroDivisionError("boom")
    monkeypatch.setattr(cli, "cmd_bench", boom)
    assert main(["bench"]) == 2


def test_shipped_bench_config_matches_experiments():
    from pathlib import Path
    from stsurf.config import load_config
    from stsurf.experiments import BENCH
    assert load_config(Path(__file__).parents[1] / "configs" / "bench.cfg") == BENCH
