"""Patch datasets, the per-step loss, Adam, and the BPTT training loop."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .evaluation import evaluate_patches
from .likelihood import observe
from .models import RimConfig, RimParams, Trajectory, rim_init, rim_rollout
from .tasks import Task, parse_task

__all__ = [
    "PatchDataset",
    "TrainConfig",
    "TrainingLog",
    "AdamState",
    "TrainingDiverged",
    "extract_patches",
    "patch_count",
    "total_loss",
    "clip_global_norm",
    "optimizer_step",
    "sample_tasks",
    "train",
]

logger = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class PatchDataset:
    patches: np.ndarray  # (N, C, P, P) in [0, 1]
    manifest: list[str] = field(default_factory=list)
    split: str = "train"

    def __len__(self) -> int:
        return len(self.patches)

    @property
    def patch_shape(self) -> tuple[int, int, int]:
        return tuple(self.patches.shape[1:])


def patch_count(h: int, w: int, size: int, stride: int) -> int:
    return ((h - size) // stride + 1) * ((w - size) // stride + 1)


def extract_patches(images, size: int, stride: int, names=None, split: str = "train") -> PatchDataset:
    """All ``size x size`` windows on a ``stride`` grid from each image.

    Images are ``(H, W)`` or ``(C, H, W)`` arrays with values in [0, 1]; all
    must share the channel count.
    """
    out = []
    manifest = []
    channels = None
    for i, img in enumerate(images):
        img = np.asarray(img, dtype=np.float32)
        if img.ndim == 2:
            img = img[None]
        label = names[i] if names is not None else f"image{i}"
        if img.min() < 0 or img.max() > 1:
            raise ValueError(f"{label}: pixel values must lie in [0, 1]")
        c, h, w = img.shape
        if channels is None:
            channels = c
        elif c != channels:
            raise ValueError(f"{label}: has {c} channels, expected {channels}")
        if h < size or w < size:
            raise ValueError(f"{label}: image {h}x{w} is smaller than patch size {size}")
        win = np.lib.stride_tricks.sliding_window_view(img, (size, size), axis=(1, 2))[:, ::stride, ::stride]
        out.append(win.transpose(1, 2, 0, 3, 4).reshape(-1, c, size, size))
        manifest.append(label)
    if not out:
        raise ValueError("no images given")
    return PatchDataset(np.ascontiguousarray(np.concatenate(out)), manifest, split)


@dataclass
class TrainConfig:
    steps: int = 10
    weights: list[float] | None = None
    tasks: list[str] = field(default_factory=lambda: ["denoise:sigma=0.0980392"])
    task_probs: list[float] | None = None
    batch_size: int = 16
    updates: int = 3000
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    clip_norm: float | None = 1.0
    seed: int = 0
    precision: str = "float32"
    quantize: bool = False
    val_every: int = 500
    val_patches: int = 200
    val_seed: int = 1234

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError(f"steps must be >= 1, got {self.steps}")
        if self.weights is not None:
            if len(self.weights) != self.steps:
                raise ValueError(f"need {self.steps} loss weights, got {len(self.weights)}")
            if min(self.weights) < 0 or max(self.weights) <= 0:
                raise ValueError("loss weights must be non-negative with at least one positive")
        if not self.tasks:
            raise ValueError("at least one task is required")
        for t in self.tasks:
            parse_task(t)
        if self.task_probs is not None:
            if len(self.task_probs) != len(self.tasks) or min(self.task_probs) < 0:
                raise ValueError("task_probs must give one non-negative probability per task")
            if not math.isclose(sum(self.task_probs), 1.0, abs_tol=1e-9):
                raise ValueError(f"task probabilities must sum to 1, got {sum(self.task_probs)}")
        if self.batch_size < 1 or self.updates < 0:
            raise ValueError("batch_size must be positive and updates non-negative")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")

    @property
    def loss_weights(self) -> np.ndarray:
        return np.ones(self.steps) if self.weights is None else np.asarray(self.weights, dtype=np.float64)

    @property
    def probabilities(self) -> np.ndarray:
        if self.task_probs is None:
            return np.full(len(self.tasks), 1 / len(self.tasks))
        return np.asarray(self.task_probs, dtype=np.float64)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainingLog:
    rows: list[tuple[int, str, float, float]] = field(default_factory=list)
    val_rows: list[tuple[int, float]] = field(default_factory=list)

    def train_csv(self) -> str:
        lines = ["update_index,task,loss,wall_time"]
        lines += [f"{i},{t},{loss:.8e},{wall:.3f}" for i, t, loss, wall in self.rows]
        return "\n".join(lines) + "\n"

    def val_csv(self) -> str:
        lines = ["update_index,psnr_mean"]
        lines += [f"{i},{p:.6f}" for i, p in self.val_rows]
        return "\n".join(lines) + "\n"


def total_loss(traj: Trajectory, x_true, weights) -> ad.Tensor:
    """``sum_t w_t mse(x_t, x_true)`` over ``t = 1 .. T`` (the initial guess is not penalized)."""
    weights = np.asarray(weights, dtype=np.float64)
    preds = traj.xs[1:]
    if len(weights) != len(preds):
        raise ValueError(f"{len(weights)} weights for {len(preds)} predicted steps")
    target = x_true if isinstance(x_true, ad.Tensor) else ad.Tensor(np.asarray(x_true, dtype=preds[0].dtype))
    loss = None
    for w, x in zip(weights, preds):
        if w == 0:
            continue
        term = ad.scale(ad.mse(x, target), float(w))
        loss = term if loss is None else ad.add(loss, term)
    return loss


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def clip_global_norm(grads: dict[str, np.ndarray], max_norm: float | None) -> tuple[dict[str, np.ndarray], float]:
    """Rescale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = math.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values()))
    if max_norm is None or norm <= max_norm:
        return grads, norm
    factor = max_norm / norm
    return {k: g * g.dtype.type(factor) for k, g in grads.items()}, norm


def optimizer_step(params: RimParams, grads: dict[str, np.ndarray], state: AdamState, hyper: TrainConfig) -> AdamState:
    """Adam update with bias correction, applied in place to the parameter tensors."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient for {name} at optimizer step {state.step + 1}")
    grads, _ = clip_global_norm(grads, hyper.clip_norm)
    state.step += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1 - b1 ** state.step
    c2 = 1 - b2 ** state.step
    for name, g in grads.items():
        p = params[name]
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            v = state.v[name] = np.zeros_like(p.data)
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        update = hyper.learning_rate * (m / c1) / (np.sqrt(v / c2) + hyper.adam_eps)
        p.data = np.asarray(p.data - update, dtype=p.dtype)
    return state


def sample_tasks(rng: np.random.Generator, probabilities, n: int) -> np.ndarray:
    return rng.choice(len(probabilities), size=n, p=np.asarray(probabilities))


def train(config: TrainConfig, dataset: PatchDataset, model: RimConfig | None = None,
          val_dataset: PatchDataset | None = None, params: RimParams | None = None,
          callback: Callable[[int, float], None] | None = None) -> tuple[RimParams, TrainingLog]:
    """Back-propagation through time over ``config.updates`` Adam steps.

    Each update draws a batch, a task (by ``task_probs``), a fresh operator
    and fresh noise from one seeded generator, so runs are reproducible.
    Validation PSNR of ``x_T`` is logged at update 0, every ``val_every``
    updates and at the end.
    """
    with ad.precision(config.precision):
        if params is None:
            if model is None:
                model = RimConfig(channels=dataset.patch_shape[0])
            params = rim_init(model, config.seed)
        tasks: list[Task] = [parse_task(t) for t in config.tasks]
        if config.quantize:
            tasks = [Task(**{**asdict(t), "quantize": True}) if t.name in ("denoise", "sr", "inpaint") else t
                     for t in tasks]
        probs = config.probabilities
        weights = config.loss_weights
        rng = np.random.default_rng(config.seed)
        dtype = ad.get_dtype()
        state = AdamState()
        log = TrainingLog()
        val_patches = None
        if val_dataset is not None and config.val_patches > 0:
            val_patches = val_dataset.patches[: config.val_patches]

        def validate(update: int) -> None:
            if val_patches is None:
                return
            res = evaluate_patches(params, val_patches, tasks, config.steps, seed=config.val_seed)
            log.val_rows.append((update, res.final_mean))
            logger.info("update %d: validation PSNR %.3f dB", update, res.final_mean)

        validate(0)
        start = time.perf_counter()
        for update in range(1, config.updates + 1):
            idx = rng.integers(0, len(dataset), size=config.batch_size)
            x_true = dataset.patches[idx].astype(dtype, copy=False)
            task = tasks[int(sample_tasks(rng, probs, 1)[0])]
            op_seed, noise_seed = (int(s) for s in rng.integers(0, 2 ** 31 - 1, size=2))
            op = task.make_operator(x_true.shape[1:], seed=op_seed)
            sigma = task.sample_sigma(rng, config.batch_size)
            obs = observe(op, x_true, sigma, noise_seed, quantize=task.quantize)
            with ad.new_graph() as graph:
                try:
                    traj = rim_rollout(params, op, obs, config.steps)
                    loss = total_loss(traj, x_true, weights)
                except FloatingPointError as exc:
                    raise TrainingDiverged(f"non-finite activations at update {update}: {exc}") from None
                loss_value = loss.item()
                if not math.isfinite(loss_value):
                    raise TrainingDiverged(f"loss became {loss_value} at update {update}")
                grads = ad.backward(loss, graph)
            named = {name: grads[t] for name, t in params.tensors.items() if t in grads}
            for t in params.values():
                t.grad = None
            optimizer_step(params, named, state, config)
            log.rows.append((update, task.spec(), loss_value, time.perf_counter() - start))
            if callback is not None:
                callback(update, loss_value)
            if config.val_every and update % config.val_every == 0 and update != config.updates:
                validate(update)
        if config.updates > 0:
            validate(config.updates)
    return params, log
