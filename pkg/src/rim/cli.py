"""Command line entry point: ``python -m rim {train,eval,reconstruct}``.

Exit codes: 0 success, 1 runtime failure, 2 bad arguments, config or
missing data, 3 training diverged.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
import warnings
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig
from .evaluation import reconstruct
from .imageio import ImageDecodeError, load_images, read_image, write_image
from .likelihood import Observation, observe
from .metrics import MetricReport, psnr, quantize_8bit, ssim
from .tasks import Task, parse_task
from .training import TrainingDiverged, extract_patches, train

logger = logging.getLogger("rim")


class UsageError(Exception):
    """Reported with exit code 2."""


def _thread_limit(deterministic: bool):
    """Cap BLAS/OpenMP pools: one thread when deterministic, else ``RIM_THREADS`` if set."""
    from threadpoolctl import threadpool_limits

    if deterministic:
        return threadpool_limits(1)
    value = os.environ.get("RIM_THREADS")
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"RIM_THREADS must be a positive integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"RIM_THREADS must be a positive integer, got {value!r}")
    return threadpool_limits(n)


def _images_or_fail(path: Path, what: str):
    if not path.exists():
        raise UsageError(f"{what} not found: {path}")
    try:
        return load_images(path)
    except (ValueError, FileNotFoundError) as exc:
        raise UsageError(str(exc)) from None


def _write_text(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _load_params(path: str):
    if not Path(path).is_file():
        raise UsageError(f"checkpoint not found: {path}")
    try:
        return load_checkpoint(path)
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def _task(spec: str) -> Task:
    try:
        return parse_task(spec)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


# ---------------------------------------------------------------------------
# commands

def cmd_train(args) -> int:
    try:
        cfg = ExperimentConfig.load(args.config)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {args.config}") from None
    except ConfigError as exc:
        raise UsageError(f"{args.config}: {exc}") from None
    data = cfg.data
    train_dir = cfg.resolve(data.train_dir)
    names, images = _images_or_fail(train_dir, "dataset path")
    channels = images[0].shape[0]
    if channels != cfg.model.channels:
        raise UsageError(f"{train_dir}: images have {channels} channels, model expects {cfg.model.channels}")
    try:
        dataset = extract_patches(images, data.patch_size, data.train_stride, names)
        val = None
        if data.val_dir is not None:
            val_dir = cfg.resolve(data.val_dir)
            vnames, vimages = _images_or_fail(val_dir, "validation dataset path")
            val = extract_patches(vimages, data.patch_size, data.val_stride, vnames, "val")
            # spread the fixed validation subset over all held-out images
            val.patches = val.patches[np.random.default_rng(cfg.train.val_seed).permutation(len(val))]
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = cfg.resolve(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    tcfg = cfg.train_config()
    logger.info("training on %d patches from %d images", len(dataset), len(names))
    params, log = train(tcfg, dataset, cfg.model, val)
    save_checkpoint(out / "checkpoint.rim", params, step=tcfg.updates, extra={"train": tcfg.to_dict()})
    _write_text(out / "train.csv", log.train_csv())
    _write_text(out / "val.csv", log.val_csv())
    _write_text(out / "config.json", cfg.to_json())
    if log.val_rows:
        print(f"final validation PSNR {log.val_rows[-1][1]:.3f} dB")
    print(f"wrote {out / 'checkpoint.rim'}")
    return 0


def _default_steps(ckpt) -> int:
    return int(ckpt.extra.get("train", {}).get("steps", 10))


def _simulate(task: Task, image: np.ndarray, seed: int, dtype):
    op = task.make_operator(image.shape)
    rng = np.random.default_rng(seed)
    sigma = task.sample_sigma(rng, 1)
    x = image[None].astype(dtype)
    return op, observe(op, x, sigma, int(rng.integers(2 ** 31 - 1)), quantize=task.quantize)


def cmd_eval(args) -> int:
    ckpt = _load_params(args.checkpoint)
    task = _task(args.task)
    names, images = _images_or_fail(Path(args.images), "image directory")
    steps = args.steps or _default_steps(ckpt)
    params = ckpt.params
    dtype = params["conv_in.w"].dtype
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = MetricReport()
    curves = []
    seeds = np.random.SeedSequence(args.seed).generate_state(len(images))
    for name, image, seed in zip(names, images, seeds):
        c, h, w = image.shape
        if c != params.config.channels:
            raise UsageError(f"{name}: has {c} channels, model expects {params.config.channels}")
        if task.factor and (h % task.factor or w % task.factor):
            warnings.warn(f"skipping {name}: {h}x{w} is not divisible by factor {task.factor}", stacklevel=1)
            continue
        op, obs = _simulate(task, image, int(seed), dtype)
        xs = reconstruct(params, op, obs, steps)
        curves.append([psnr(x[0], image) for x in xs])
        final = quantize_8bit(xs[-1][0])
        report.add(name, psnr(final, image), ssim(final, image))
    if not report.image_ids:
        raise UsageError(f"no evaluable images in {args.images}")
    _write_text(out / "metrics.csv", report.to_csv())
    curve = np.mean(curves, axis=0)
    _write_text(out / "curve.csv", "step,psnr_mean\n" + "".join(f"{t},{v:.6f}\n" for t, v in enumerate(curve)))
    agg = report.aggregate()
    print(f"{task.spec()} T={steps}: PSNR {agg['psnr_mean']:.3f} +- {agg['psnr_sem']:.3f} dB, "
          f"SSIM {agg['ssim_mean']:.4f} over {len(report.image_ids)} images")
    return 0


def cmd_reconstruct(args) -> int:
    ckpt = _load_params(args.checkpoint)
    task = _task(args.task)
    src = Path(args.input)
    if not src.is_file():
        raise UsageError(f"input image not found: {src}")
    try:
        image = read_image(src)
    except ImageDecodeError as exc:
        raise UsageError(str(exc)) from None
    params = ckpt.params
    dtype = params["conv_in.w"].dtype
    if image.shape[0] != params.config.channels:
        raise UsageError(f"{src}: has {image.shape[0]} channels, model expects {params.config.channels}")
    steps = args.steps or _default_steps(ckpt)
    if args.measured:
        # the input already is y; only pixel-grid measurements can be read from an image
        if task.name == "denoise":
            op = task.make_operator(image.shape)
        elif task.name == "sr":
            c, h, w = image.shape
            op = task.make_operator((c, h * task.factor, w * task.factor))
        else:
            raise UsageError(f"--measured needs a denoise or sr task, got {task.name!r}")
        sigma = task.sigmas[0]
        obs = Observation(image[None].astype(dtype), sigma, task.quantize, op.descriptor())
    else:
        if task.factor and (image.shape[1] % task.factor or image.shape[2] % task.factor):
            raise UsageError(f"{src}: size {image.shape[1:]} is not divisible by factor {task.factor}")
        op, obs = _simulate(task, image, args.seed, dtype)
    xs = reconstruct(params, op, obs, steps)
    out = Path(args.out)
    suffix = src.suffix.lower()
    try:
        out.mkdir(parents=True, exist_ok=True)
        write_image(out / f"{src.stem}_rec{suffix}", xs[-1][0])
        if args.filmstrip_stride:
            for t in range(0, steps + 1, args.filmstrip_stride):
                write_image(out / f"{src.stem}_t{t:03d}{suffix}", xs[t][0])
    except OSError as exc:
        print(f"error: cannot write to {out}: {exc}", file=sys.stderr)
        return 1
    if not args.measured:
        print(f"PSNR x_0 {psnr(xs[0][0], image):.3f} dB -> x_{steps} {psnr(quantize_8bit(xs[-1][0]), image):.3f} dB")
    print(f"wrote {out / (src.stem + '_rec' + suffix)}")
    return 0


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--deterministic", action="store_true",
                        help="single-threaded numerics for bitwise reproducible runs")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress")

    parser = argparse.ArgumentParser(prog="rim", description="Train and run recurrent inference machines.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", parents=[common], help="train a model from a JSON config")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="corrupt a set of images and score the reconstructions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--task", required=True, help="e.g. denoise:sigma=0.098 or inpaint:p=0.2,seed=0")
    p.add_argument("--images", required=True, help="directory of PGM/PPM/PNG images")
    p.add_argument("--steps", type=int, default=None, help="rollout length (default: training T)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0, help="noise seed")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("reconstruct", parents=[common], help="reconstruct one image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--input", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--measured", action="store_true",
                   help="treat the input as the corrupted measurement instead of a clean image")
    p.add_argument("--filmstrip-stride", type=int, default=2,
                   help="also write every k-th estimate x_0, x_k, ...; 0 disables")
    p.set_defaults(func=cmd_reconstruct)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if getattr(args, "steps", None) is not None and args.steps < 1:
        parser.error("--steps must be >= 1")
    if getattr(args, "filmstrip_stride", 0) < 0:
        parser.error("--filmstrip-stride must be >= 0")
    try:
        with _thread_limit(args.deterministic):
            return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TrainingDiverged as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return 3
    except (MemoryError, ValueError, ImageDecodeError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
