"""Gaussian measurement model, its log-likelihood gradient and the link function."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .metrics import quantize_8bit
from .operators import LinearOperator

__all__ = [
    "Observation",
    "DEFAULT_MARGIN",
    "observe",
    "grad_loglik_x",
    "grad_loglik_eta",
    "link_forward",
    "link_inverse",
    "link_deriv",
    "make_eps",
    "noise_precision",
]

DEFAULT_MARGIN = 1e-3


@dataclass
class Observation:
    """Measurement ``y = A x + sigma z``.

    ``sigma`` is a float or one value per batch element.
    """

    y: np.ndarray
    sigma: float | np.ndarray
    quantized: bool = False
    operator: dict = field(default_factory=dict)

    def sigma2(self, batch: int) -> np.ndarray:
        s = np.broadcast_to(np.asarray(self.sigma, dtype=np.float64), (batch,))
        return s * s


def observe(op: LinearOperator, x_true, sigma, seed, quantize: bool = False) -> Observation:
    """Simulate a noisy (optionally 8-bit quantized) measurement of ``x_true``.

    ``sigma`` may be a scalar or a per-example array for batched input.
    """
    x = np.asarray(x_true.data if isinstance(x_true, ad.Tensor) else x_true)
    sig = np.asarray(sigma, dtype=np.float64)
    if np.any(sig < 0):
        raise ValueError(f"noise level must be non-negative, got {sigma}")
    if quantize and not op.pixel_domain:
        raise ValueError(f"8-bit quantization needs a pixel-valued measurement, not {op.kind}")
    clean = op.apply(x)
    rng = np.random.default_rng(seed)
    noise = rng.standard_normal(clean.shape)
    if sig.ndim:
        if clean.ndim != len(op.output_shape) + 1 or sig.shape != (clean.shape[0],):
            raise ValueError(f"per-example sigma {sig.shape} does not match batch {clean.shape}")
        sig = sig.reshape((-1,) + (1,) * (clean.ndim - 1))
    y = (clean + sig * noise).astype(x.dtype, copy=False)
    if quantize:
        y = quantize_8bit(y)
    sigma_out = float(sigma) if np.ndim(sigma) == 0 else np.asarray(sigma, dtype=np.float64)
    return Observation(y=y, sigma=sigma_out, quantized=quantize, operator=op.descriptor())


def make_eps(phi_eps):
    """Noise stabilizer ``softplus(phi_eps)``; keeps gradients finite at sigma = 0."""
    if isinstance(phi_eps, ad.Tensor):
        return ad.softplus(phi_eps)
    return float(np.logaddexp(0.0, phi_eps))


def noise_precision(sigma2: np.ndarray, eps) -> ad.Tensor:
    """Per-example ``1 / (sigma^2 + eps)`` as a ``(B,)`` tensor.

    Differentiable in ``eps`` when it is a scalar tensor.
    """
    sigma2 = np.asarray(sigma2, dtype=np.float64)
    if isinstance(eps, ad.Tensor):
        e = eps.data.reshape(())
        denom = sigma2 + e
        out = (1.0 / denom).astype(eps.dtype)
        shape = eps.shape

        def bw(g):
            return (np.reshape(-np.sum(g / (denom * denom)), shape).astype(eps.dtype),)

        return ad.record(out, (eps,), bw)
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    return ad.Tensor(1.0 / (sigma2 + eps))


def _as_tensor(x):
    return x if isinstance(x, ad.Tensor) else ad.Tensor(x)


def grad_loglik_x(op: LinearOperator, obs: Observation, x, eps) -> ad.Tensor:
    """``A^T (y - A x) / (sigma^2 + eps)`` for a batch ``x`` shaped ``(B, C, H, W)``."""
    x = _as_tensor(x)
    if x.shape[1:] != op.input_shape:
        raise ValueError(f"signal shape {x.shape[1:]} does not match operator input {op.input_shape}")
    y = np.asarray(obs.y)
    if y.shape != (x.shape[0],) + op.output_shape:
        raise ValueError(f"measurement shape {y.shape} does not match operator output {op.output_shape}")
    residual = ad.sub(ad.Tensor(y.astype(x.dtype, copy=False)), op.apply(x))
    weight = noise_precision(obs.sigma2(x.shape[0]), eps)
    return ad.batch_scale(op.adjoint(residual), weight)


def link_forward(eta):
    if isinstance(eta, ad.Tensor):
        return ad.sigmoid(eta)
    return ad._sigmoid(np.asarray(eta, dtype=np.float64))


def link_inverse(x, margin: float = DEFAULT_MARGIN):
    """Logit of ``x`` after clipping into ``[margin, 1 - margin]``."""
    if margin <= 0:
        raise ValueError(f"clamp margin must be positive, got {margin}")
    arr = np.asarray(x.data if isinstance(x, ad.Tensor) else x)
    dtype = arr.dtype if arr.dtype.kind == "f" else np.float64
    c = np.clip(arr, margin, 1 - margin)
    return (np.log(c) - np.log1p(-c)).astype(dtype, copy=False)


def link_deriv(eta):
    """``psi'(eta) = psi(eta) (1 - psi(eta))``."""
    if isinstance(eta, ad.Tensor):
        x = ad.sigmoid(eta)
        return ad.mul(x, ad.add_scalar(ad.neg(x), 1.0))
    x = link_forward(eta)
    return x * (1 - x)


def grad_loglik_eta(op: LinearOperator, obs: Observation, eta, eps) -> ad.Tensor:
    """Likelihood gradient pulled back through the link: ``psi'(eta) * grad_x``."""
    eta = _as_tensor(eta)
    x = ad.sigmoid(eta)
    deriv = ad.mul(x, ad.add_scalar(ad.neg(x), 1.0))
    return ad.mul(deriv, grad_loglik_x(op, obs, x, eps))
