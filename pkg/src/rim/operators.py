"""Linear forward models ``A`` with exact adjoints.

Signals are images shaped ``(B, C, H, W)``; every operator acts on each
channel independently with the same underlying map.  Measurements keep the
batch and channel axes:

========== ======================== =========================
kind       measurement shape        notes
========== ======================== =========================
identity   (B, C, H, W)             denoising
mask       (B, C, m)                kept pixels, m = round(p d)
gaussian   (B, C, m)                N(0, 1) / sqrt(d)
bernoulli  (B, C, m)                +-1 / sqrt(d)
fourier    (B, C, 2 m)              real parts then imaginary parts
bicubic    (B, C, H / f, W / f)     anti-aliased Keys kernel
========== ======================== =========================

Here ``d = H W`` is the per-channel signal dimension.
"""

from __future__ import annotations

import math

import numpy as np

from . import autodiff as ad

__all__ = [
    "LinearOperator",
    "IdentityOperator",
    "MaskOperator",
    "DenseOperator",
    "FourierOperator",
    "BicubicDownsample",
    "make_identity",
    "make_mask",
    "make_gaussian_ensemble",
    "make_bernoulli_ensemble",
    "make_fourier_ensemble",
    "make_bicubic_downsample",
    "make_operator",
    "apply",
    "adjoint",
    "cubic_kernel",
    "bicubic_weights",
    "MAX_DENSE_ENTRIES",
]

# memory budget for a dense ensemble matrix (entries, float64)
MAX_DENSE_ENTRIES = 64_000_000


def _shape3(shape) -> tuple[int, int, int]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 2:
        shape = (1,) + shape
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"signal shape must be (C, H, W) with positive extents, got {shape}")
    return shape


def _check_fraction(p: float) -> float:
    p = float(p)
    if not 0 < p <= 1:
        raise ValueError(f"keep fraction must lie in (0, 1], got {p}")
    return p


class LinearOperator:
    """Base class: subclasses implement ``_forward`` and ``_adjoint`` on
    ``(B, C, ...)`` numpy arrays.

    ``input_shape`` and ``output_shape`` are per-example, channel-first.
    """

    kind = "abstract"
    pixel_domain = False

    def __init__(self, input_shape, output_shape, seed: int | None = None):
        self.input_shape = tuple(input_shape)
        self.output_shape = tuple(output_shape)
        self.seed = seed

    @property
    def d(self) -> int:
        return math.prod(self.input_shape[1:])

    @property
    def m(self) -> int:
        return math.prod(self.output_shape[1:])

    def descriptor(self) -> dict:
        return {"kind": self.kind, "seed": self.seed}

    def _forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _adjoint(self, y: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _batched(self, arr, expected, what):
        arr = np.asarray(arr)
        if arr.shape[1:] == expected:
            return arr, False
        if arr.shape == expected:
            return arr[None], True
        raise ValueError(f"{self.kind} {what}: expected (B, {expected}) got {arr.shape}")

    def apply(self, x):
        if isinstance(x, ad.Tensor):
            self._batched(x.data, self.input_shape, "apply")
            return ad.linear_map(x, self.apply, self.adjoint)
        arr, squeeze = self._batched(x, self.input_shape, "apply")
        out = self._forward(arr)
        return out[0] if squeeze else out

    def adjoint(self, y):
        if isinstance(y, ad.Tensor):
            self._batched(y.data, self.output_shape, "adjoint")
            return ad.linear_map(y, self.adjoint, self.apply)
        arr, squeeze = self._batched(y, self.output_shape, "adjoint")
        out = self._adjoint(arr)
        return out[0] if squeeze else out

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.input_shape} -> {self.output_shape}, seed={self.seed})"


class IdentityOperator(LinearOperator):
    kind = "identity"
    pixel_domain = True

    def __init__(self, shape):
        shape = _shape3(shape)
        super().__init__(shape, shape)

    def _forward(self, x):
        return x.copy()

    def _adjoint(self, y):
        return y.copy()


class MaskOperator(LinearOperator):
    """Keeps ``round(p d)`` pixel positions, the same set in every channel."""

    kind = "mask"
    pixel_domain = True

    def __init__(self, shape, p: float, seed: int):
        c, h, w = _shape3(shape)
        self.p = _check_fraction(p)
        d = h * w
        m = max(1, int(round(self.p * d)))
        rng = np.random.default_rng(seed)
        self.indices = np.sort(rng.choice(d, size=m, replace=False))
        super().__init__((c, h, w), (c, m), seed)

    def descriptor(self):
        return {"kind": self.kind, "p": self.p, "seed": self.seed}

    def _forward(self, x):
        return x.reshape(x.shape[0], x.shape[1], -1)[:, :, self.indices]

    def _adjoint(self, y):
        b, c = y.shape[:2]
        out = np.zeros((b, c, self.d), dtype=y.dtype)
        out[:, :, self.indices] = y
        return out.reshape((b,) + self.input_shape)


class DenseOperator(LinearOperator):
    """Dense ``m x d`` matrix applied to each flattened channel."""

    def __init__(self, shape, matrix: np.ndarray, kind: str, seed: int | None):
        c, h, w = _shape3(shape)
        if matrix.shape[1] != h * w:
            raise ValueError(f"matrix has {matrix.shape[1]} columns, signal has {h * w} pixels")
        self.kind = kind
        self.matrix = matrix
        self._cache = {}
        super().__init__((c, h, w), (c, matrix.shape[0]), seed)

    def descriptor(self):
        return {"kind": self.kind, "m": self.m, "seed": self.seed}

    def _mat(self, dtype):
        mat = self._cache.get(dtype)
        if mat is None:
            mat = self._cache[dtype] = self.matrix.astype(dtype)
        return mat

    def _forward(self, x):
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        return flat @ self._mat(x.dtype).T

    def _adjoint(self, y):
        out = y @ self._mat(y.dtype)
        return out.reshape((y.shape[0],) + self.input_shape)


def _check_budget(m: int, d: int) -> None:
    if m < 1:
        raise ValueError(f"number of measurements must be >= 1, got {m}")
    if m * d > MAX_DENSE_ENTRIES:
        raise MemoryError(f"dense ensemble of {m} x {d} exceeds budget of {MAX_DENSE_ENTRIES} entries")


class FourierOperator(LinearOperator):
    """Random rows of the unitary DFT of the flattened channel, realified.

    Output is ``[Re(F_S x), Im(F_S x)]``; the adjoint is
    ``Re(F_S^H (a + i b))``.
    """

    kind = "fourier"

    def __init__(self, shape, p: float, seed: int):
        c, h, w = _shape3(shape)
        self.p = _check_fraction(p)
        d = h * w
        m = max(1, int(round(self.p * d)))
        rng = np.random.default_rng(seed)
        self.rows = np.sort(rng.choice(d, size=m, replace=False))
        super().__init__((c, h, w), (c, 2 * m), seed)

    def descriptor(self):
        return {"kind": self.kind, "p": self.p, "seed": self.seed}

    def _forward(self, x):
        flat = x.reshape(x.shape[0], x.shape[1], -1)
        spec = np.fft.fft(flat, axis=-1, norm="ortho")[:, :, self.rows]
        return np.concatenate([spec.real, spec.imag], axis=-1).astype(x.dtype, copy=False)

    def _adjoint(self, y):
        b, c = y.shape[:2]
        k = len(self.rows)
        full = np.zeros((b, c, self.d), dtype=np.complex128)
        full[:, :, self.rows] = y[:, :, :k] + 1j * y[:, :, k:]
        out = np.fft.ifft(full, axis=-1, norm="ortho").real.astype(y.dtype, copy=False)
        return out.reshape((b,) + self.input_shape)


def cubic_kernel(t: np.ndarray, a: float = -0.5) -> np.ndarray:
    """Keys cubic convolution kernel."""
    t = np.abs(t)
    t2, t3 = t * t, t * t * t
    return np.where(
        t <= 1,
        (a + 2) * t3 - (a + 3) * t2 + 1,
        np.where(t < 2, a * t3 - 5 * a * t2 + 8 * a * t - 4 * a, 0.0),
    )


def bicubic_weights(n_in: int, factor: int) -> np.ndarray:
    """Row-normalized ``(n_in // factor) x n_in`` resampling matrix.

    The kernel is widened by ``factor`` for anti-aliasing and out-of-range
    taps are folded back by symmetric reflection, as in the conventional
    imresize implementation.
    """
    n_out = n_in // factor
    scale = 1.0 / factor
    width = 4.0 * factor
    u = np.arange(1, n_out + 1) / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    weights = scale * cubic_kernel(scale * (u[:, None] - idx))
    weights /= weights.sum(axis=1, keepdims=True)
    # 1-based indices -> 0-based with symmetric padding
    idx = idx.astype(int) - 1
    period = 2 * n_in
    idx = np.mod(idx, period)
    idx = np.where(idx >= n_in, period - 1 - idx, idx)
    mat = np.zeros((n_out, n_in))
    np.add.at(mat, (np.repeat(np.arange(n_out), taps), idx.ravel()), weights.ravel())
    return mat


class BicubicDownsample(LinearOperator):
    kind = "bicubic"
    pixel_domain = True

    def __init__(self, shape, factor: int):
        c, h, w = _shape3(shape)
        if factor not in (2, 3, 4):
            raise ValueError(f"super-resolution factor must be 2, 3 or 4, got {factor}")
        if h % factor or w % factor:
            raise ValueError(f"image {h}x{w} is not divisible by factor {factor}")
        self.factor = factor
        self.rows_h = bicubic_weights(h, factor)
        self.rows_w = bicubic_weights(w, factor)
        super().__init__((c, h, w), (c, h // factor, w // factor), None)

    def descriptor(self):
        return {"kind": self.kind, "factor": self.factor}

    def _forward(self, x):
        wh = self.rows_h.astype(x.dtype)
        ww = self.rows_w.astype(x.dtype)
        return np.einsum("ih,bchw,jw->bcij", wh, x, ww, optimize=True)

    def _adjoint(self, y):
        wh = self.rows_h.astype(y.dtype)
        ww = self.rows_w.astype(y.dtype)
        return np.einsum("ih,bcij,jw->bchw", wh, y, ww, optimize=True)


def make_identity(shape) -> IdentityOperator:
    return IdentityOperator(shape)


def make_mask(shape, p: float, seed: int) -> MaskOperator:
    return MaskOperator(shape, p, seed)


def make_gaussian_ensemble(shape, m: int, seed: int) -> DenseOperator:
    c, h, w = _shape3(shape)
    d = h * w
    _check_budget(m, d)
    rng = np.random.default_rng(seed)
    return DenseOperator((c, h, w), rng.standard_normal((m, d)) / math.sqrt(d), "gaussian", seed)


def make_bernoulli_ensemble(shape, m: int, seed: int) -> DenseOperator:
    c, h, w = _shape3(shape)
    d = h * w
    _check_budget(m, d)
    rng = np.random.default_rng(seed)
    signs = np.where(rng.random((m, d)) < 0.5, -1.0, 1.0)
    return DenseOperator((c, h, w), signs / math.sqrt(d), "bernoulli", seed)


def make_fourier_ensemble(shape, p: float, seed: int) -> FourierOperator:
    return FourierOperator(shape, p, seed)


def make_bicubic_downsample(shape, factor: int) -> BicubicDownsample:
    return BicubicDownsample(shape, factor)


def make_operator(descriptor: dict, shape) -> LinearOperator:
    """Rebuild an operator from its ``{kind, p | m | factor, seed}`` descriptor."""
    kind = descriptor["kind"]
    if kind == "identity":
        return make_identity(shape)
    if kind == "mask":
        return make_mask(shape, descriptor["p"], descriptor["seed"])
    if kind == "fourier":
        return make_fourier_ensemble(shape, descriptor["p"], descriptor["seed"])
    if kind == "bicubic":
        return make_bicubic_downsample(shape, descriptor["factor"])
    if kind in ("gaussian", "bernoulli"):
        c, h, w = _shape3(shape)
        m = descriptor.get("m")
        if m is None:
            m = max(1, int(round(_check_fraction(descriptor["p"]) * h * w)))
        maker = make_gaussian_ensemble if kind == "gaussian" else make_bernoulli_ensemble
        return maker((c, h, w), int(m), descriptor["seed"])
    raise ValueError(f"unknown operator kind {kind!r}")


def apply(op: LinearOperator, x):
    return op.apply(x)


def adjoint(op: LinearOperator, y):
    return op.adjoint(y)
