import json
import subprocess
import sys

import numpy as np
import pytest

import rim.cli as cli
from rim.checkpoint import load_checkpoint
from rim.imageio import read_image, write_image
from rim.training import TrainingDiverged


@pytest.fixture
def workspace(tmp_path):
    rng = np.random.default_rng(0)
    for split, n in (("train", 3), ("val", 2)):
        (tmp_path / split).mkdir()
        for i in range(n):
            write_image(tmp_path / split / f"im{i}.pgm", rng.uniform(size=(1, 12, 12)))
    doc = {
        "model": {"widths": [2, 4, 2]},
        "train": {"steps": 4, "tasks": ["denoise:sigma=0.1"], "updates": 3, "batch_size": 4,
                  "val_every": 2, "val_patches": 4},
        "data": {"train_dir": "train", "val_dir": "val", "patch_size": 8, "train_stride": 2, "val_stride": 4},
        "output_dir": "run",
        "seed": 0,
    }
    (tmp_path / "cfg.json").write_text(json.dumps(doc))
    return tmp_path


def _train(ws, *extra):
    return cli.main(["train", "--config", str(ws / "cfg.json"), *extra])


def test_train_writes_outputs(workspace, capsys):
    assert _train(workspace) == 0
    run = workspace / "run"
    assert {p.name for p in run.iterdir()} == {"checkpoint.rim", "train.csv", "val.csv", "config.json"}
    assert (run / "val.csv").read_text().splitlines()[0] == "update_index,psnr_mean"
    assert len((run / "val.csv").read_text().splitlines()) == 1 + 3  # updates 0, 2, 3
    assert len((run / "train.csv").read_text().splitlines()) == 1 + 3
    ck = load_checkpoint(run / "checkpoint.rim")
    assert ck.step == 3 and ck.extra["train"]["steps"] == 4
    assert "final validation PSNR" in capsys.readouterr().out


def test_deterministic_runs_are_byte_identical(workspace):
    assert _train(workspace, "--deterministic") == 0
    first = {n: (workspace / "run" / n).read_bytes() for n in ("val.csv", "checkpoint.rim")}
    assert _train(workspace, "--deterministic") == 0
    for name, data in first.items():
        assert (workspace / "run" / name).read_bytes() == data


def test_missing_dataset_is_exit_2(workspace, capsys):
    doc = json.loads((workspace / "cfg.json").read_text())
    doc["data"]["train_dir"] = "nowhere"
    (workspace / "cfg.json").write_text(json.dumps(doc))
    assert _train(workspace) == 2
    err = capsys.readouterr().err
    assert "dataset path not found" in err and "nowhere" in err


@pytest.mark.parametrize("edit", [
    lambda d: d.update(bogus=1),
    lambda d: d["train"].update(tasks=["blur:sigma=1"]),
    lambda d: d["model"].update(channels=3),
])
def test_bad_configs_are_exit_2(workspace, edit):
    doc = json.loads((workspace / "cfg.json").read_text())
    edit(doc)
    (workspace / "cfg.json").write_text(json.dumps(doc))
    assert _train(workspace) == 2
    assert cli.main(["train", "--config", str(workspace / "absent.json")]) == 2


def test_divergence_is_exit_3(workspace, monkeypatch):
    def diverge(*args, **kwargs):
        raise TrainingDiverged("loss became nan at update 2")

    monkeypatch.setattr(cli, "train", diverge)
    assert _train(workspace) == 3


@pytest.fixture
def checkpoint(workspace):
    assert _train(workspace) == 0
    return workspace / "run" / "checkpoint.rim"


def test_eval_writes_metrics_and_curve(workspace, checkpoint):
    out = workspace / "ev"
    args = ["eval", "--checkpoint", str(checkpoint), "--task", "inpaint:p=0.5,seed=1",
            "--images", str(workspace / "val"), "--out", str(out)]
    assert cli.main(args) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "image_id,psnr,ssim" and lines[1].startswith("im0.pgm,")
    assert [ln.split(",")[0] for ln in lines[3:]] == ["mean", "sem"]
    curve = (out / "curve.csv").read_text().splitlines()
    assert curve[0] == "step,psnr_mean" and len(curve) == 1 + 4 + 1  # x_0 .. x_T with T from training
    first = (out / "metrics.csv").read_bytes()
    assert cli.main(args + ["--steps", "6"]) == 0
    assert len((out / "curve.csv").read_text().splitlines()) == 1 + 7
    assert cli.main(args) == 0 and (out / "metrics.csv").read_bytes() == first


def test_eval_skips_indivisible_sr_images(workspace, checkpoint):
    write_image(workspace / "val" / "odd.pgm", np.full((1, 13, 12), 0.5))
    with pytest.warns(UserWarning, match="odd.pgm"):
        code = cli.main(["eval", "--checkpoint", str(checkpoint), "--task", "sr:factor=2,sigma=0.01",
                         "--images", str(workspace / "val"), "--out", str(workspace / "ev")])
    assert code == 0
    ids = [ln.split(",")[0] for ln in (workspace / "ev" / "metrics.csv").read_text().splitlines()[1:]]
    assert "odd.pgm" not in ids and "im0.pgm" in ids


def test_reconstruct_keeps_format_and_writes_filmstrip(workspace, checkpoint):
    src = workspace / "val" / "im1.pgm"
    out = workspace / "rec"
    assert cli.main(["reconstruct", "--checkpoint", str(checkpoint), "--input", str(src),
                     "--task", "denoise:sigma=0.1", "--out", str(out)]) == 0
    frames = sorted(p.name for p in out.glob("im1_t*.pgm"))
    assert frames == ["im1_t000.pgm", "im1_t002.pgm", "im1_t004.pgm"]  # T / 2 + 1 frames
    assert read_image(out / "im1_rec.pgm").shape == (1, 12, 12)
    png = workspace / "in.png"
    write_image(png, read_image(src))
    assert cli.main(["reconstruct", "--checkpoint", str(checkpoint), "--input", str(png), "--task",
                     "sr:factor=2,sigma=0.01", "--out", str(out), "--filmstrip-stride", "0"]) == 0
    assert (out / "in_rec.png").exists() and not list(out.glob("in_t*"))


def test_reconstruct_measured_input(workspace, checkpoint):
    small = workspace / "small.pgm"
    write_image(small, np.full((1, 6, 6), 0.4))
    out = workspace / "rec"
    assert cli.main(["reconstruct", "--checkpoint", str(checkpoint), "--input", str(small),
                     "--task", "sr:factor=2,sigma=0.01", "--out", str(out), "--measured"]) == 0
    assert read_image(out / "small_rec.pgm").shape == (1, 12, 12)
    assert cli.main(["reconstruct", "--checkpoint", str(checkpoint), "--input", str(small),
                     "--task", "inpaint:p=0.5,seed=0", "--out", str(out), "--measured"]) == 2


@pytest.mark.parametrize("argv", [
    ["eval", "--checkpoint", "CKPT", "--task", "denoise:sigma=x", "--images", "IMG", "--out", "O"],
    ["eval", "--checkpoint", "missing.rim", "--task", "denoise:sigma=0.1", "--images", "IMG", "--out", "O"],
    ["eval", "--checkpoint", "CKPT", "--task", "denoise:sigma=0.1", "--images", "nowhere", "--out", "O"],
    ["reconstruct", "--checkpoint", "CKPT", "--input", "missing.pgm", "--task", "denoise:sigma=0.1", "--out", "O"],
])
def test_usage_errors_are_exit_2(workspace, checkpoint, argv, capsys):
    subs = {"CKPT": str(checkpoint), "IMG": str(workspace / "val"), "O": str(workspace / "o")}
    assert cli.main([subs.get(a, a) for a in argv]) == 2
    assert capsys.readouterr().err.startswith("error:")


def test_argparse_errors_exit_2(checkpoint):
    with pytest.raises(SystemExit) as exc:
        cli.main(["eval", "--checkpoint", str(checkpoint)])
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        cli.main(["reconstruct", "--checkpoint", "c", "--input", "i", "--task", "t", "--out", "o", "--steps", "0"])


def test_rim_threads_env(workspace, monkeypatch):
    monkeypatch.setenv("RIM_THREADS", "zero")
    assert _train(workspace) == 2
    monkeypatch.setenv("RIM_THREADS", "1")
    assert _train(workspace) == 0


def test_module_entry_point():
    res = subprocess.run([sys.executable, "-m", "rim", "--help"], capture_output=True, text=True, check=False)
    assert res.returncode == 0 and "reconstruct" in res.stdout
