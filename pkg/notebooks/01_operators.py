# %% [markdown]
# # Forward operators and their adjoints
#
# Every corruption is a linear map ``y = A x + noise``. This script builds
# one operator of each kind on a 24x24 grayscale image, checks the adjoint
# identity ``<A x, y> = <x, A^T y>`` and reports how many measurements each
# operator keeps.

# %%
import numpy as np

from rim import operators as ops
from rim.likelihood import observe
from rim.metrics import psnr

shape = (1, 24, 24)
rng = np.random.default_rng(0)
yy, xx = np.mgrid[0:24, 0:24] / 23
image = (0.5 + 0.4 * np.sin(6 * xx) * np.cos(4 * yy))[None]

examples = {
    "identity": ops.make_identity(shape),
    "mask p=0.2": ops.make_mask(shape, 0.2, seed=1),
    "gaussian p=0.5": ops.make_gaussian_ensemble(shape, 288, seed=2),
    "bernoulli p=0.5": ops.make_bernoulli_ensemble(shape, 288, seed=3),
    "fourier p=0.5": ops.make_fourier_ensemble(shape, 0.5, seed=4),
    "bicubic x3": ops.make_bicubic_downsample(shape, 3),
}

# %%
for name, op in examples.items():
    x = rng.standard_normal((8,) + op.input_shape)
    y = rng.standard_normal((8,) + op.output_shape)
    lhs, rhs = np.vdot(op.apply(x), y), np.vdot(x, op.adjoint(y))
    obs = observe(op, image[None], 0.05, seed=0)
    back = op.adjoint(obs.y)[0]
    print(f"{name:16s} m={op.m:4d}  adjoint mismatch {abs(lhs - rhs) / abs(lhs):.1e}  "
          f"PSNR of A^T y {psnr(np.clip(back, 0, 1), image):6.2f} dB")

# %% [markdown]
# The adjoint image ``A^T y`` is what the recurrent model starts from; for
# the random ensembles it is a noisy, scaled backprojection, for the mask it
# is the image with most pixels zeroed.
