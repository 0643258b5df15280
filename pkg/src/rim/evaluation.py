"""Inference-only rollouts and PSNR bookkeeping over patch or image sets."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .likelihood import observe
from .metrics import psnr
from .models import RimParams, rim_rollout
from .tasks import Task, parse_task

__all__ = ["EvalResult", "reconstruct", "evaluate_patches", "batch_psnr"]


def reconstruct(params: RimParams, op, obs, T: int, eta0=None) -> list[np.ndarray]:
    """Estimates ``x_0 .. x_T`` as numpy arrays (no graph is recorded)."""
    with ad.no_grad():
        traj = rim_rollout(params, op, obs, T, eta0)
    return [x.data for x in traj.xs]


def batch_psnr(x: np.ndarray, ref: np.ndarray) -> np.ndarray:
    return np.array([psnr(a, b) for a, b in zip(x, ref)])


@dataclass
class EvalResult:
    """Per-step mean PSNR (``curve[t]`` for ``x_t``) and per-example values."""

    curve: np.ndarray
    final: np.ndarray
    initial: np.ndarray
    measured: np.ndarray | None
    tasks: list[str]

    @property
    def final_mean(self) -> float:
        return float(np.mean(self.final))

    @property
    def initial_mean(self) -> float:
        return float(np.mean(self.initial))

    @property
    def measured_mean(self) -> float | None:
        return None if self.measured is None else float(np.mean(self.measured))


def evaluate_patches(params: RimParams, patches: np.ndarray, tasks, T: int, seed: int = 0,
                     batch_size: int = 50) -> EvalResult:
    """Corrupt fixed chunks of ``patches`` and run the model for ``T`` steps.

    Chunk ``j`` uses task ``j mod len(tasks)`` and its own operator and noise
    seeds derived from ``seed``, so repeated calls see identical inputs.
    ``measured`` holds the PSNR of the raw measurement for same-shape pixel
    tasks (denoising) and is ``None`` otherwise.
    """
    tasks = [parse_task(t) for t in tasks]
    dtype = params["conv_in.w"].dtype
    n = len(patches)
    chunks = range(0, n, batch_size)
    seeds = np.random.SeedSequence(seed).spawn(len(chunks))
    curve_rows, initial, final, measured, labels = [], [], [], [], []
    all_measured = True
    for j, start in enumerate(chunks):
        x_true = np.asarray(patches[start:start + batch_size], dtype=dtype)
        task: Task = tasks[j % len(tasks)]
        op_seed, noise_seed, sigma_seed = seeds[j].generate_state(3)
        op = task.make_operator(x_true.shape[1:], seed=int(op_seed))
        sigma = task.sample_sigma(np.random.default_rng(sigma_seed), len(x_true))
        obs = observe(op, x_true, sigma, int(noise_seed), quantize=task.quantize)
        xs = reconstruct(params, op, obs, T)
        per_step = np.stack([batch_psnr(x, x_true) for x in xs])
        curve_rows.append(per_step)
        initial.append(per_step[0])
        final.append(per_step[-1])
        labels.extend([task.spec()] * len(x_true))
        if op.kind == "identity":
            measured.append(batch_psnr(obs.y, x_true))
        else:
            all_measured = False
    per_step = np.concatenate(curve_rows, axis=1)
    return EvalResult(
        curve=per_step.mean(axis=1),
        final=np.concatenate(final),
        initial=np.concatenate(initial),
        measured=np.concatenate(measured) if all_measured and measured else None,
        tasks=labels,
    )
