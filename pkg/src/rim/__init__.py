"""Recurrent inference machines for linear inverse problems in images, on a
small numpy reverse-mode autodiff engine."""

from . import autodiff
from .checkpoint import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .evaluation import evaluate_patches, reconstruct
from .likelihood import Observation, grad_loglik_eta, grad_loglik_x, link_forward, link_inverse, observe
from .metrics import MetricReport, bootstrap_sem, psnr, quantize_8bit, ssim
from .models import RimConfig, RimParams, param_count, rim_init, rim_rollout
from .operators import LinearOperator, make_operator
from .tasks import Task, parse_task
from .training import PatchDataset, TrainConfig, extract_patches, train

__version__ = "0.1.0"

__all__ = [
    "autodiff",
    "load_checkpoint",
    "save_checkpoint",
    "ExperimentConfig",
    "evaluate_patches",
    "reconstruct",
    "Observation",
    "grad_loglik_eta",
    "grad_loglik_x",
    "link_forward",
    "link_inverse",
    "observe",
    "MetricReport",
    "bootstrap_sem",
    "psnr",
    "quantize_8bit",
    "ssim",
    "RimConfig",
    "RimParams",
    "param_count",
    "rim_init",
    "rim_rollout",
    "LinearOperator",
    "make_operator",
    "Task",
    "parse_task",
    "PatchDataset",
    "TrainConfig",
    "extract_patches",
    "train",
]
