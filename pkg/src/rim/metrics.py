"""Reconstruction quality metrics: PSNR, SSIM, 8-bit quantization, bootstrap SEM."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "psnr",
    "ssim",
    "quantize_8bit",
    "bootstrap_sem",
    "gaussian_window",
    "MetricReport",
]


def psnr(x, ref, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB over all elements jointly.

    Identical inputs give ``inf``.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"psnr: shape mismatch {x.shape} vs {ref.shape}")
    err = np.mean((x - ref) ** 2)
    if err == 0:
        return math.inf
    return float(10 * np.log10(max_val ** 2 / err))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    win = np.outer(g, g)
    return win / win.sum()


def _ssim_2d(a, b, win, c1, c2):
    k = win.shape[0]
    pa = sliding_window_view(a, (k, k))
    pb = sliding_window_view(b, (k, k))

    def filt(p):
        return np.einsum("ijkl,kl->ij", p, win)

    mu_a, mu_b = filt(pa), filt(pb)
    var_a = filt(pa * pa) - mu_a ** 2
    var_b = filt(pb * pb) - mu_b ** 2
    cov = filt(pa * pb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def ssim(x, ref, data_range: float = 1.0, window: int = 11, sigma: float = 1.5) -> float:
    """Mean windowed SSIM with a Gaussian window (valid region only).

    Accepts ``(H, W)`` or channel-first ``(C, H, W)``; channels are averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if x.shape != ref.shape:
        raise ValueError(f"ssim: shape mismatch {x.shape} vs {ref.shape}")
    if x.ndim == 2:
        x, ref = x[None], ref[None]
    if x.ndim != 3:
        raise ValueError(f"ssim expects (H, W) or (C, H, W), got {x.shape}")
    if min(x.shape[1:]) < window:
        raise ValueError(f"image {x.shape[1:]} is smaller than the {window}x{window} SSIM window")
    win = gaussian_window(window, sigma)
    c1 = (0.01 * data_range) ** 2
    c2 = (0.03 * data_range) ** 2
    return float(np.mean([_ssim_2d(a, b, win, c1, c2) for a, b in zip(x, ref)]))


def quantize_8bit(x):
    """Round to the 256-level lattice on [0, 1]: ``round(clip(x, 0, 1) 255) / 255``."""
    arr = np.asarray(x)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    return (np.round(np.clip(arr, 0, 1) * 255) / 255).astype(dtype, copy=False)


def bootstrap_sem(values, n_resamples: int = 10_000, seed: int = 0) -> float:
    """Standard deviation of bootstrap-resampled means."""
    values = np.asarray(values, dtype=np.float64).ravel()
    if values.size < 2:
        raise ValueError("bootstrap needs at least two values")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, values.size, size=(n_resamples, values.size))
    shifted = values - values[0]  # std is shift invariant; this keeps constant inputs exactly 0
    return float(np.std(shifted[idx].mean(axis=1)))


@dataclass
class MetricReport:
    image_ids: list[str] = field(default_factory=list)
    psnr: list[float] = field(default_factory=list)
    ssim: list[float] = field(default_factory=list)
    n_resamples: int = 10_000
    seed: int = 0

    def add(self, image_id: str, psnr_value: float, ssim_value: float) -> None:
        self.image_ids.append(image_id)
        self.psnr.append(float(psnr_value))
        self.ssim.append(float(ssim_value))

    def aggregate(self) -> dict[str, float]:
        out = {"psnr_mean": float(np.mean(self.psnr)), "ssim_mean": float(np.mean(self.ssim))}
        if len(self.psnr) >= 2:
            out["psnr_sem"] = bootstrap_sem(self.psnr, self.n_resamples, self.seed)
            out["ssim_sem"] = bootstrap_sem(self.ssim, self.n_resamples, self.seed)
        else:
            out["psnr_sem"] = out["ssim_sem"] = 0.0
        return out

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["image_id", "psnr", "ssim"])
        for row in zip(self.image_ids, self.psnr, self.ssim):
            writer.writerow([row[0], f"{row[1]:.6f}", f"{row[2]:.6f}"])
        agg = self.aggregate()
        writer.writerow(["mean", f"{agg['psnr_mean']:.6f}", f"{agg['ssim_mean']:.6f}"])
        writer.writerow(["sem", f"{agg['psnr_sem']:.6f}", f"{agg['ssim_sem']:.6f}"])
        return buf.getvalue()
