import json
import subprocess
import sys

import numpy as np
import pytest

from defocus.cli import main
from defocus.diagnostics import read_pnm, write_pgm
from defocus.network import DefocusBlockConfig, DefocusNetwork, ModelConfig, load_checkpoint, save_checkpoint
from defocus.training import make_bar_blob_dataset, write_dataset


@pytest.fixture
def ckpt(tmp_path):
    cfg = ModelConfig(image_size=8, patch_size=2, depth=2, block=DefocusBlockConfig(model_dim=16, num_heads=2))
    path = tmp_path / "m.ckpt"
    save_checkpoint(DefocusNetwork.init(cfg, 0), path)
    return path


@pytest.fixture
def image(tmp_path, rng):
    path = tmp_path / "img.pgm"
    write_pgm(path, rng.random((8, 8)))
    return path


def test_analyze_filter_low_pass(tmp_path):
    out = tmp_path / "r.csv"
    assert main(["analyze-filter", "--lambda", "-1", "--theta", "0", "--out", str(out)]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "omega,analytic_mag,numerical_mag" and len(lines) == 513
    data = np.loadtxt(out, delimiter=",", skiprows=1)
    peak = np.argmax(data[:, 1])
    assert data[peak, 0] == 0.0 and data[peak, 1] == 1.0
    assert np.argmax(data[:, 2]) == peak


def test_analyze_filter_options_and_warning(tmp_path, capsys):
    out = tmp_path / "r.csv"
    assert main(["analyze-filter", "--lambda", "-0.01", "--theta", "1.0", "--kernel-len", "32",
                 "--samples", "64", "--out", str(out)]) == 0
    assert "warning" in capsys.readouterr().err
    assert len(out.read_text().splitlines()) == 65


def test_analyze_filter_domain_error(tmp_path, capsys):
    assert main(["analyze-filter", "--lambda", "0.5", "--theta", "0", "--out", str(tmp_path / "r.csv")]) == 1
    assert capsys.readouterr().err.startswith("error:")


def test_visualize_attention_pgm(ckpt, image, tmp_path):
    out = tmp_path / "a.pgm"
    assert main(["visualize", "--ckpt", str(ckpt), "--image", str(image), "--layer", "1",
                 "--kind", "attention", "--out", str(out)]) == 0
    m = read_pnm(out)[0]
    assert m.shape == (17, 17)
    assert np.all(np.diag(m) == 0) and np.all(np.triu(m, 1) == 0) and m.max() == 1.0


@pytest.mark.parametrize("kind", ["receptive", "gradient"])
def test_visualize_token_maps_csv(kind, ckpt, image, tmp_path):
    out = tmp_path / "m.csv"
    assert main(["visualize", "--ckpt", str(ckpt), "--image", str(image), "--layer", "0",
                 "--kind", kind, "--label", "2", "--out", str(out)]) == 0
    vals = np.loadtxt(out, delimiter=",")
    assert vals.shape == (17,) and vals.max() == 1.0 and vals.min() >= 0


def test_visualize_bad_layer(ckpt, image, tmp_path):
    assert main(["visualize", "--ckpt", str(ckpt), "--image", str(image), "--layer", "5",
                 "--kind", "receptive", "--out", str(tmp_path / "x.pgm")]) == 1


def test_transfer_resolution(ckpt, tmp_path):
    out = tmp_path / "t.ckpt"
    assert main(["transfer-resolution", "--ckpt", str(ckpt), "--ratio", "2", "--out", str(out)]) == 0
    assert load_checkpoint(out).config.position_scale == 0.25
    assert main(["transfer-resolution", "--ckpt", str(ckpt), "--ratio", "1", "--out", str(out)]) == 0
    assert out.read_bytes() == ckpt.read_bytes()
    assert main(["transfer-resolution", "--ckpt", str(ckpt), "--ratio", "2", "--pos-scale", "r",
                 "--out", str(out)]) == 0
    assert load_checkpoint(out).config.position_scale == 0.5
    (tmp_path / "bad.ckpt").write_bytes(b"nope")
    assert main(["transfer-resolution", "--ckpt", str(tmp_path / "bad.ckpt"), "--ratio", "2",
                 "--out", str(out)]) == 1


def test_train(tmp_path):
    images, labels = make_bar_blob_dataset(16, seed=0, image_size=8)
    write_dataset(tmp_path / "d.dfa", images, labels, 4)
    (tmp_path / "cfg.json").write_text(json.dumps({
        "model": {"image_size": 8, "patch_size": 4, "depth": 1, "block": {"model_dim": 8, "num_heads": 2}},
        "train": {"total_steps": 3, "batch_size": 4, "seed": 1},
    }))
    args = ["train", "--config", str(tmp_path / "cfg.json"), "--data", str(tmp_path / "d.dfa"),
            "--out", str(tmp_path / "m.ckpt"), "--metrics", str(tmp_path / "m.csv")]
    assert main(args) == 0
    assert len((tmp_path / "m.csv").read_text().splitlines()) == 4
    first = (tmp_path / "m.ckpt").read_bytes()
    assert main(args) == 0
    assert (tmp_path / "m.ckpt").read_bytes() == first
    (tmp_path / "d.dfa").write_bytes(b"XXXX" + (tmp_path / "d.dfa").read_bytes()[4:])
    assert main(args) == 1


def test_selftest(capsys):
    assert main(["selftest"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and out.count("PASS") >= 5


@pytest.mark.parametrize("argv", [[], ["frobnicate"], ["analyze-filter", "--theta", "0", "--out", "x.csv"],
                                  ["visualize", "--ckpt", "a", "--image", "b", "--layer", "0", "--kind", "x",
                                   "--out", "c"]])
def test_usage_errors_exit_2(argv):
    with pytest.raises(SystemExit) as exc:
        main(argv)
    assert exc.value.code == 2


def test_module_entry_point(tmp_path):
    ok = subprocess.run([sys.executable, "-m", "defocus", "analyze-filter", "--lambda", "-2", "--theta", "1",
                         "--out", str(tmp_path / "r.csv")], capture_output=True)
    assert ok.returncode == 0
    bad = subprocess.run([sys.executable, "-m", "defocus", "nonsense"], capture_output=True)
    assert bad.returncode == 2
