# %% [markdown]
# # Training a small denoiser
#
# Builds the demo corpus from the photos bundled with scikit-image, trains
# a desk-scale model on 16x16 patches for a few hundred updates and writes
# a filmstrip of the estimates ``x_0, x_2, ..., x_T`` for one held-out tile.
# Expect a few minutes on one CPU core.

# %%
import logging
import sys
from pathlib import Path

import numpy as np

from rim.corpus import build_demo_corpus
from rim.evaluation import evaluate_patches, reconstruct
from rim.imageio import load_images, write_image
from rim.likelihood import observe
from rim.metrics import psnr
from rim.models import DESK_WIDTHS, RimConfig
from rim.tasks import parse_task
from rim.training import TrainConfig, extract_patches, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
out = Path(sys.argv[1] if len(sys.argv) > 1 else "toy_denoiser_out")
train_dir, val_dir = build_demo_corpus(out / "corpus")
names, images = load_images(train_dir)
vnames, vimages = load_images(val_dir)
dataset = extract_patches(images, 16, 4, names)
val = extract_patches(vimages, 16, 8, vnames, split="val")
print(f"{len(dataset)} training patches, {len(val)} validation patches")

# %%
task = "denoise:sigma=0.0980392"
cfg = TrainConfig(steps=10, tasks=[task], updates=400, val_every=100, val_patches=200)
params, log = train(cfg, dataset, RimConfig(widths=DESK_WIDTHS), val)
print(log.val_csv())

# %%
res = evaluate_patches(params, val.patches[:400], [task], 10, seed=1)
print(f"noisy input {res.measured_mean:.2f} dB -> x_T {res.final_mean:.2f} dB")
print("mean PSNR per step:", np.round(res.curve, 2))

# %% [markdown]
# The model is fully convolutional, so the same parameters run on a whole
# 96x96 tile even though training only saw 16x16 patches.

# %%
tile = vimages[0]
t = parse_task(task)
op = t.make_operator(tile.shape)
obs = observe(op, tile[None], t.sigmas[0], seed=3)
xs = reconstruct(params, op, obs, 10)
for step in range(0, 11, 2):
    write_image(out / f"tile_t{step:03d}.pgm", xs[step][0])
print(f"tile: noisy {psnr(np.clip(obs.y[0], 0, 1), tile):.2f} dB, x_T {psnr(xs[-1][0], tile):.2f} dB")
print(f"filmstrip written to {out}")
