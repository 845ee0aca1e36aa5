import subprocess
import sys

import pytest

from bvsviz.cli import run
from bvsviz.config import read_kv


@pytest.fixture(scope="module")
def small_data(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    spec = root / "spec.txt"
    spec.write_text("slices_per_pullback = 3\n")
    assert run(["phantom-gen", "--preset", "desk", "--spec", str(spec), "--pullbacks", "6", "--seed", "3",
                "--out", str(root / "data")]) == 0
    return root


def test_phantom_gen_outputs(small_data, capsys):
    data = small_data / "data"
    assert (data / "manifest.txt").exists() and (data / "pb000" / "slice_0002.png").exists()
    snap = read_kv(data / "config.txt")
    assert snap["command"] == "phantom-gen" and snap["phantom.slices_per_pullback"] == "3"


def test_train_then_eval(small_data, capsys):
    out = small_data / "run"
    assert run(["train", "--preset", "desk", "--data", str(small_data / "data"), "--out", str(out),
                "--epochs", "2", "--eval-every", "1", "--stratify", "true"]) == 0
    logged = capsys.readouterr().out
    assert "epoch=1 " in logged and "loss=" in logged
    assert (out / "model.ckpt").exists() and (out / "split.txt").exists()
    assert run(["eval", "--checkpoint", str(out / "model.ckpt"), "--data", str(small_data / "data")]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert any(line.startswith("accuracy=") for line in lines)


def test_saliency_and_render(small_data, capsys):
    ckpt = small_data / "run" / "model.ckpt"
    if not ckpt.exists():
        run(["train", "--preset", "desk", "--data", str(small_data / "data"), "--out", str(small_data / "run"),
             "--epochs", "1"])
    sal = small_data / "sal"
    pb = small_data / "data" / "pb001"
    assert run(["saliency", "--checkpoint", str(ckpt), "--in", str(pb), "--k", "2", "--out", str(sal)]) == 0
    assert len(list(sal.glob("*.sal"))) == 3 and len(list(sal.glob("slice_*.png"))) == 3
    rend = small_data / "render"
    assert run(["render", "--saliency-dir", str(sal), "--oct-dir", str(pb), "--out", str(rend), "--size", "64",
                "--volume"]) == 0
    assert (rend / "saliency_volume" / "volume.raw").stat().st_size == 3 * 64 * 64 * 4
    assert len(list((rend / "overlay").glob("*.png"))) == 3


def test_gradcheck_command(capsys):
    assert run(["gradcheck", "--instances", "2"]) == 0
    out = capsys.readouterr().out
    assert "check=conv2d" in out and out.strip().endswith("gradcheck=pass")


def test_missing_input_exit_code(tmp_path, capsys):
    assert run(["eval", "--checkpoint", str(tmp_path / "nope.ckpt"), "--data", str(tmp_path)]) == 2
    assert "error" in capsys.readouterr().err


def test_missing_required_option(capsys):
    assert run(["saliency", "--in", "x"]) == 2
    assert "--checkpoint" in capsys.readouterr().err


def test_config_written_by_other_command(small_data, capsys):
    cfg = small_data / "data" / "config.txt"
    assert run(["train", "--config", str(cfg), "--out", str(small_data / "x")]) == 2


def test_unknown_subcommand_prints_usage():
    proc = subprocess.run([sys.executable, "-m", "bvsviz.cli", "frobnicate"], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "usage:" in proc.stderr
