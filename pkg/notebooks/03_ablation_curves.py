# %% [markdown]
# # RIM versus its ablations, over time and across tasks
#
# Loads the models trained by ``tests/acceptance_runs.py`` (three seeds of
# RIM, GDN and FFN on the Gaussian/Bernoulli/Fourier mixture) and prints
# the mean PSNR of ``x_t`` for ``t = 0 .. 2T``. Steps beyond ``T`` were
# never trained. It then swaps in the inpainting likelihood, a task none
# of the models saw. Run the cache script first: this one only evaluates.

# %%
import sys
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "tests"))
from rim.evaluation import evaluate_patches  # noqa: E402

import acceptance_runs as runs  # noqa: E402

_, patches, _ = runs.datasets()
T = runs.STEPS

# %%
curves = {}
for kind in runs.KINDS:
    per_seed = [evaluate_patches(runs.run(runs.MIXTURE, kind, s)[0], patches, runs.MIXTURE, 2 * T, seed=2024).curve
                for s in runs.SEEDS]
    curves[kind] = np.mean(per_seed, axis=0)
print("step " + " ".join(f"{k:>7s}" for k in runs.KINDS))
for t in range(2 * T + 1):
    marker = "  <- last trained step" if t == T else ""
    print(f"{t:4d} " + " ".join(f"{curves[k][t]:7.2f}" for k in runs.KINDS) + marker)

# %%
for kind in runs.KINDS:
    res = [evaluate_patches(runs.run(runs.MIXTURE, kind, s)[0], patches, ["inpaint:p=0.2,seed=0"], T, seed=2024)
           for s in runs.SEEDS]
    print(f"inpainting p=0.2 {kind}: x_0 {np.mean([r.initial_mean for r in res]):.2f} dB -> "
          f"x_T {np.mean([r.final_mean for r in res]):.2f} dB")
