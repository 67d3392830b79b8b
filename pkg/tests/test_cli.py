import hashlib
import json

import pytest

from tervit.cli import run

CONFIG = """
[model]
image_size = 16
patch_size = 8
embed_dim = 16
depth = 2
num_heads = 2
mlp_ratio = 4.0
num_classes = 2

[schedule]
phase_a_epochs = 2
phase_b_epochs = 4
seed = 0

[data]
kind = synthetic
seed = 0
num_samples = 120
"""

COMMANDS = ("train", "progressive", "ablate", "eval", "quantize", "size", "diagnose",
            "landscape", "bench")


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "run.ini"
    path.write_text(CONFIG)
    return path


@pytest.fixture
def real_ckpt(tmp_path, config):
    out = tmp_path / "real.ckpt"
    assert run(["train", "--config", str(config), "--mode", "real32", "--out", str(out)]) == 0
    return out


def test_size_deit_tiny(capsys):
    assert run(["size", "--config", "deit-t", "--policy", "ternary"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0] == "real-valued: 22.87 MB"
    assert out[1] == "quantized: 1.68 MB"
    assert out[2] == "compression: 13.57x"
    payload = json.loads(out[-1])
    assert payload["real_bytes"] > payload["quantized_bytes"]


def test_train_then_eval_on_training_data(tmp_path, capsys):
    # the toy-task smoke budget: 200 samples, 30 real-valued epochs
    config = tmp_path / "smoke.ini"
    config.write_text(CONFIG.replace("phase_a_epochs = 2", "phase_a_epochs = 0")
                      .replace("phase_b_epochs = 4", "phase_b_epochs = 30")
                      .replace("num_samples = 120", "num_samples = 200"))
    ckpt = tmp_path / "smoke.ckpt"
    assert run(["train", "--config", str(config), "--mode", "real32", "--out", str(ckpt)]) == 0
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(ckpt), "--data", str(config)]) == 0
    result = json.loads(capsys.readouterr().out)
    assert result["samples"] == 200
    assert result["accuracy"] > 0.9


def test_quantize_then_eval(tmp_path, real_ckpt, capsys):
    q = tmp_path / "tern.ckpt"
    assert run(["quantize", "--ckpt", str(real_ckpt), "--policy", "ternary", "--out", str(q)]) == 0
    assert q.stat().st_size < real_ckpt.stat().st_size
    capsys.readouterr()
    assert run(["eval", "--ckpt", str(q), "--data", "synthetic:0:40"]) == 0
    assert json.loads(capsys.readouterr().out)["samples"] == 40


def test_diagnose_and_landscape(tmp_path, real_ckpt, capsys):
    d = tmp_path / "diag"
    assert run(["diagnose", "--ckpt", str(real_ckpt), "--reference", str(real_ckpt),
                "--hessian", "--batch", "8", "--iters", "2", "--out", str(d)]) == 0
    assert (d / "cam.csv").read_text().startswith("layer,channel,cam\n")
    sdam_rows = (d / "sdam.csv").read_text().splitlines()
    assert all(row.split(",")[3] for row in sdam_rows[1:])
    grid = tmp_path / "grid.csv"
    assert run(["landscape", "--ckpt", str(real_ckpt), "--resolution", "3", "--span", "0.5",
                "--batch", "8", "--out", str(grid)]) == 0
    assert len(grid.read_text().splitlines()) == 4


def test_ablate_writes_tables(tmp_path, config):
    out = tmp_path / "abl"
    assert run(["ablate", "--config", str(config), "--out", str(out)]) == 0
    assert len((out / "ablation.csv").read_text().splitlines()) == 6
    assert len(list(out.glob("trace_*.csv"))) == 5
    assert (out / "table.txt").exists()


def test_bench_csv(tmp_path):
    out = tmp_path / "bench.csv"
    assert run(["bench", "--shapes", "4x16x8", "--reps", "1", "--out", str(out)]) == 0
    assert len(out.read_text().splitlines()) == 4


@pytest.mark.parametrize("command", COMMANDS)
def test_help_exits_zero(command, capsys):
    assert run([command, "--help"]) == 0
    assert "usage:" in capsys.readouterr().out


def test_usage_errors_exit_one(config, capsys):
    assert run(["train", "--config", str(config), "--mode", "real32", "--out", "x",
                "--bogus"]) == 1
    assert run(["size", "--config", "deit-t"]) == 1
    assert run(["size", "--config", "deit-t", "--policy", "nonsense"]) == 1
    assert "usage:" in capsys.readouterr().err


def test_runtime_errors_exit_two(tmp_path):
    assert run(["eval", "--ckpt", str(tmp_path / "missing.ckpt")]) == 2


def test_progressive_runs_are_reproducible(tmp_path, config, capsys):
    digests = []
    for i in range(2):
        ckpt, trace = tmp_path / f"p{i}.ckpt", tmp_path / f"p{i}.csv"
        assert run(["progressive", "--config", str(config), "--out", str(ckpt),
                    "--trace", str(trace)]) == 0
        assert json.loads(capsys.readouterr().out)["handoff_exact"] is True
        digests.append((hashlib.sha256(ckpt.read_bytes()).hexdigest(), trace.read_bytes()))
    assert digests[0] == digests[1]
    # a different seed gives a different run
    other = tmp_path / "other.csv"
    assert run(["progressive", "--config", str(config), "--out", str(tmp_path / "o.ckpt"),
                "--trace", str(other), "--seed", "5"]) == 0
    assert other.read_bytes() != digests[0][1]
