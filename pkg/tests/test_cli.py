import json
import subprocess
import sys

import numpy as np
import pytest

from conftest import MNIST_IMAGES
from ifsfit.cli import build_parser, main
from ifsfit.data_io import load_target, read_idx_images, write_pgm
from ifsfit.grad import evaluate_batch, mse_loss
from ifsfit.ifs import FractalSystem, sample_index_batch, sample_start_points, transform_probabilities
from ifsfit.render import RenderConfig

QUICK = ["--steps", "6", "--batch-size", "2", "--t-len", "40", "--eval-samples", "3", "--seed", "4"]


@pytest.fixture
def digit(tmp_path):
    path = tmp_path / "digit.pgm"
    write_pgm(path, read_idx_images(MNIST_IMAGES)[0])
    return path


def test_invert_writes_artifacts(tmp_path, digit, capsys):
    out = tmp_path / "run"
    code = main(["invert", str(digit), "--out-dir", str(out), "--objective", "expectation",
                 "--clamp", "--noise", *QUICK])
    assert code == 0
    for name in ("learned.json", "loss.csv", "best_render.pgm", "manifest.json"):
        assert (out / name).exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["seed"] == 4 and manifest["status"] == "ok"
    assert manifest["config"]["steps"] == 6
    assert len((out / "loss.csv").read_text().splitlines()) == 7
    assert "min-MSE over 3 samples" in capsys.readouterr().out


def test_invert_zero_steps(tmp_path, digit):
    out = tmp_path / "run"
    assert main(["invert", str(digit), "--out-dir", str(out), *QUICK, "--steps", "0"]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    learned = FractalSystem.from_json((out / "learned.json").read_text())
    assert learned == FractalSystem.from_dict(manifest["initial_system"])
    assert (out / "loss.csv").read_text().splitlines() == ["step,loss,lr,noise_applied"]


def test_invert_records_drawn_seed(tmp_path, digit):
    out = tmp_path / "run"
    args = [a for a in QUICK if a not in ("--seed", "4")]
    assert main(["invert", str(digit), "--out-dir", str(out), *args]) == 0
    assert isinstance(json.loads((out / "manifest.json").read_text())["seed"], int)


def test_invert_explosion_exit_code(tmp_path, digit):
    out = tmp_path / "run"
    code = main(["invert", str(digit), "--out-dir", str(out), "--raw-matrices", "--lr", "50", "--no-noise",
                 "--steps", "200", "--batch-size", "2", "--height", "16", "--width", "16", "--seed", "0",
                 "--n-transforms", "3"])
    assert code == 2
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"].startswith("aborted")
    FractalSystem.from_json((out / "learned.json").read_text())


def test_invert_from_idx(tmp_path):
    out = tmp_path / "run"
    assert main(["invert", str(MNIST_IMAGES), "--idx-index", "3", "--out-dir", str(out), *QUICK]) == 0
    assert json.loads((out / "manifest.json").read_text())["target"].endswith("#3")


def test_missing_target_is_io_error(tmp_path, capsys):
    assert main(["invert", str(tmp_path / "nope.pgm"), "--out-dir", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_corrupt_params_is_io_error(tmp_path):
    bad = tmp_path / "p.json"
    bad.write_text("{\"n\": 1}")
    assert main(["render", str(bad), "--out", str(tmp_path / "x.pgm")]) == 1


# -- generate -----------------------------------------------------------------------------------

def test_generate_zero(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--count", "0", "--out-dir", str(out), "--seed", "1"]) == 0
    assert not out.exists() or not any(out.iterdir())


def test_generate_reproducible(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        assert main(["generate", "--count", "3", "--out-dir", str(d), "--seed", "8"]) == 0
    for f in sorted(a.iterdir()):
        assert f.read_bytes() == (b / f.name).read_bytes()


def test_generate_hundred(tmp_path):
    out = tmp_path / "gen"
    assert main(["generate", "--count", "100", "--out-dir", str(out), "--seed", "2"]) == 0
    assert len(list(out.glob("fractal_*.pgm"))) == 100
    assert len(list(out.glob("fractal_*.json"))) == 100


# -- render / eval / gradcheck ------------------------------------------------------------------------

@pytest.fixture
def params(tmp_path):
    out = tmp_path / "gen"
    main(["generate", "--count", "1", "--out-dir", str(out), "--seed", "5"])
    return out / "fractal_0000.json"


def test_render_reproducible(tmp_path, params):
    a, b = tmp_path / "a.pgm", tmp_path / "b.pgm"
    for path in (a, b):
        assert main(["render", str(params), "--out", str(path), "--seed", "3"]) == 0
    assert a.read_bytes() == b.read_bytes()
    assert main(["render", str(params), "--out", str(a), "--seed", "3", "--ascii"]) == 0
    assert a.read_bytes().startswith(b"P2")


def test_eval_single_sample_is_direct_mse(tmp_path, params, capsys):
    target_path = params.with_suffix(".pgm")
    assert main(["eval", str(params), str(target_path), "-n", "1", "--seed", "6"]) == 0
    reported = float(capsys.readouterr().out.split(":")[1].split()[0])
    system = FractalSystem.from_json(params.read_text())
    rng = np.random.default_rng(6)
    z = sample_index_batch(transform_probabilities(system), 1, 300, rng)
    v0 = sample_start_points(rng, 1)
    target = load_target(target_path).canvas
    img = evaluate_batch(system.params, system.flips, z, v0, target, RenderConfig(), need_grad=False).pixels[0]
    assert reported == pytest.approx(mse_loss(img, target)[0], abs=1e-6)


def test_gradcheck_default_passes(capsys):
    assert main(["gradcheck"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_gradcheck_fails_on_impossible_threshold():
    assert main(["gradcheck", "--configs", "2", "--threshold", "0"]) == 2


def test_help_lists_every_flag():
    parser = build_parser()
    sub = parser._subparsers._group_actions[0].choices
    for name, p in sub.items():
        for action in p._actions:
            if action.option_strings and action.dest != "help":
                assert action.help, f"{name} {action.option_strings} has no help"
    text = sub["invert"].format_help()
    for flag in ("--objective", "--noise", "--steps", "--batch-size", "--lr", "--tau", "--clamp", "--fast",
                 "--threads", "--seed", "--raw-matrices", "--n-transforms"):
        assert flag in text


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "ifsfit", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "gradcheck" in proc.stdout
