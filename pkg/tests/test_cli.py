import hashlib

import numpy as np
import pytest

from sigmanet.checkpoint import load_checkpoint
from sigmanet.cli import main
from sigmanet.data import read_cube

PRETRAIN = ["pretrain.size=16", "pretrain.channels=8", "pretrain.source_channels=12", "pretrain.depth=4",
            "pretrain.dim=16", "pretrain.heads=2", "pretrain.patch=4", "pretrain.n_spec=8", "pretrain.decoder_dim=8",
            "pretrain.decoder_heads=2", "pretrain.batch=2"]
UNMIX = ["unmix.n_endmembers=3", "unmix.epochs=3", "unmix.dim=8", "unmix.heads=2", "unmix.patch=2",
         "unmix.n_spec=6", "unmix.reduced_dim=8", "unmix.n_points=2"]
SEG = ["seg.epochs=3", "seg.dim=8", "seg.heads=2", "seg.patch=4", "seg.n_spec=4", "seg.reduced_dim=4",
       "seg.hidden=8", "seg.n_points=2"]


def sets(items):
    out = []
    for item in items:
        out += ["--set", item]
    return out


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def test_gen_synth_header_and_determinism(tmp_path, capsys):
    for name in ("a", "b"):
        assert main(["gen-synth", "--out", str(tmp_path / f"{name}.hsig")]) == 0
    cube = read_cube(tmp_path / "a.hsig")
    assert cube.shape == (64, 64, 100)
    assert digest(tmp_path / "a.hsig") == digest(tmp_path / "b.hsig")
    assert main(["gen-synth", "--seed", "1", "--h", "8", "--w", "8", "--c", "5", "--out", str(tmp_path / "c.hsig")]) == 0
    assert "(8, 8, 5)" in capsys.readouterr().out


def test_gen_synth_mixture_writes_truth(tmp_path):
    out = tmp_path / "m.hsig"
    assert main(["gen-synth", "--h", "8", "--w", "8", "--c", "12", "--ca", "3", "--out", str(out)]) == 0
    E = np.loadtxt(tmp_path / "m.endmembers.csv", delimiter=",")
    A = read_cube(tmp_path / "m.abundances.hsig")
    assert E.shape == (3, 12) and A.shape == (8, 8, 3)


def test_usage_errors_exit_2(tmp_path, capsys):
    assert main(["gen-synth", "--h", "0", "--out", str(tmp_path / "x.hsig")]) == 2
    assert main(["gen-synth", "--set", "synth.bogus=1", "--out", str(tmp_path / "x.hsig")]) == 2
    assert "unknown config key" in capsys.readouterr().err
    assert main(["finetune-unmix", "--data", str(tmp_path / "none.hsig"), "--out", str(tmp_path / "o")]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["pretrain"])
    assert exc.value.code == 2


def test_corrupt_input_exits_1(tmp_path):
    bad = tmp_path / "bad.hsig"
    bad.write_bytes(b"JUNKJUNKJUNK")
    assert main(["finetune-unmix", "--data", str(bad), "--out", str(tmp_path / "o")]) == 1


def test_pretrain_zero_steps(tmp_path):
    out = tmp_path / "p0"
    assert main(["pretrain", "--steps", "0", "--out", str(out), *sets(PRETRAIN)]) == 0
    assert (out / "loss.csv").read_text() == "step,loss\n"
    assert "spat.patch_embed.weight" in load_checkpoint(out / "checkpoint.sgmc")
    assert "pretrain.steps = 0" in (out / "config.txt").read_text()


@pytest.mark.parametrize("kind", ["spatial", "spectral"])
def test_pretrain_bit_identical_runs(tmp_path, kind):
    for name in ("a", "b"):
        argv = ["pretrain", "--kind", kind, "--steps", "2", "--out", str(tmp_path / name), *sets(PRETRAIN)]
        assert main(argv) == 0
    for f in ("checkpoint.sgmc", "loss.csv", "summary.txt", "config.txt"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
    assert (tmp_path / "a" / "timing.txt").exists()


def test_finetune_unmix_from_checkpoint(tmp_path):
    data = tmp_path / "m.hsig"
    main(["gen-synth", "--h", "8", "--w", "8", "--c", "12", "--ca", "3", "--out", str(data)])
    main(["pretrain", "--steps", "0", "--out", str(tmp_path / "p"), *sets(PRETRAIN)])
    for name in ("a", "b"):
        argv = ["finetune-unmix", "--ckpt", str(tmp_path / "p" / "checkpoint.sgmc"), "--data", str(data),
                "--out", str(tmp_path / name), *sets(UNMIX)]
        assert main(argv) == 0
    a = tmp_path / "a"
    for f in ("abundances.hsig", "endmembers.csv", "metrics.csv", "loss.csv", "adaptation.csv", "config.txt"):
        assert digest(a / f) == digest(tmp_path / "b" / f)
    metrics = (a / "metrics.csv").read_text()
    assert "abundance_mse" in metrics and "mean_sad" in metrics
    assert "reinitialized" in (a / "adaptation.csv").read_text()
    assert read_cube(a / "abundances.hsig").shape == (8, 8, 3)


def _seg_inputs(tmp_path):
    data = tmp_path / "s.hsig"
    main(["gen-synth", "--h", "8", "--w", "8", "--c", "6", "--out", str(data)])
    labels = np.zeros((8, 8), int)
    labels[:, 4:] = 1
    labels[0, 0] = -1
    np.savetxt(tmp_path / "labels.csv", labels, delimiter=",", fmt="%d")
    return data, tmp_path / "labels.csv"


def test_finetune_seg_deterministic(tmp_path):
    data, labels = _seg_inputs(tmp_path)
    for name in ("a", "b"):
        argv = ["finetune-seg", "--data", str(data), "--labels", str(labels), "--test-labels", str(labels),
                "--out", str(tmp_path / name), *sets(SEG)]
        assert main(argv) == 0
    for f in ("predictions.csv", "metrics.csv", "loss.csv", "config.txt"):
        assert digest(tmp_path / "a" / f) == digest(tmp_path / "b" / f)
    assert np.loadtxt(tmp_path / "a" / "predictions.csv", delimiter=",").shape == (8, 8)


def test_finetune_seg_label_mismatch(tmp_path, capsys):
    data, _ = _seg_inputs(tmp_path)
    np.savetxt(tmp_path / "small.csv", np.zeros((4, 8)), delimiter=",", fmt="%d")
    argv = ["finetune-seg", "--data", str(data), "--labels", str(tmp_path / "small.csv"), "--out", str(tmp_path / "o")]
    assert main(argv) == 2
    err = capsys.readouterr().err
    assert "(4, 8)" in err and "(8, 8)" in err


def test_bench_attn_csv(tmp_path):
    out = tmp_path / "bench.csv"
    argv = ["bench-attn", "--mech", "ssa,full", "--nlist", "4,8,16,36", "--dp", "4", "--np", "2", "--out", str(out)]
    assert main(argv) == 0
    rows = [line.split(",") for line in out.read_text().splitlines()]
    assert len(rows) == 9 and all(len(r) == 8 for r in rows)
    assert all(r[4] == r[5] for r in rows[1:])
    summary = (tmp_path / "bench.summary.txt").read_text()
    assert "flops_exact=True" in summary and "bench.dp = 4" in summary
    assert main(["bench-attn", "--mech", "linear", "--out", str(out)]) == 2
    assert main(["bench-attn", "--nlist", "4,8", "--out", str(out)]) == 2


def test_grad_check_passes(tmp_path, capsys):
    assert main(["grad-check", "--trials", "2", "--out", str(tmp_path / "g.txt")]) == 0
    table = (tmp_path / "g.txt").read_text()
    assert table.count("PASS") == 12 and "FAIL" not in table
    assert main(["grad-check", "--trials", "0"]) == 2


def test_inspect_offsets_zero_init(tmp_path):
    data = tmp_path / "i.hsig"
    main(["gen-synth", "--h", "16", "--w", "16", "--c", "10", "--out", str(data)])
    common = sets(["inspect.dim=16", "inspect.heads=2", "inspect.n_spec=10", "inspect.n_points=3"])
    out = tmp_path / "off.csv"
    assert main(["inspect-offsets", "--data", str(data), "--layer", "3", "--out", str(out), *common]) == 0
    rows = np.loadtxt(out, delimiter=",", skiprows=1)
    assert rows.shape == (4 * 3, 4)
    # zero-initialised predictors sample at the query's own grid position
    q = rows[:, 0].astype(int)
    np.testing.assert_array_equal(rows[:, 2], q % 2)
    np.testing.assert_array_equal(rows[:, 3], q // 2)
    assert main(["inspect-offsets", "--data", str(data), "--layer", "2", "--out", str(out), *common]) == 2
    assert main(["inspect-offsets", "--data", str(data), "--head", "5", "--out", str(out), *common]) == 2


def test_bad_thread_env(tmp_path, monkeypatch):
    monkeypatch.setenv("SIGMA_THREADS", "zero")
    assert main(["gen-synth", "--h", "2", "--w", "2", "--c", "2", "--out", str(tmp_path / "t.hsig")]) == 2
