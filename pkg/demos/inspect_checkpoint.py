# %% [markdown]
# # Looking inside a trained model
#
# Load the checkpoint written by `toy_two_tasks.py`, read back the inducing
# inputs of each task, and map predictive entropy over a grid. Entropy should
# be low near the training blobs and close to 1 far from them.

# %%
from pathlib import Path

import numpy as np
import torch

from vargp import checkpoint
from vargp.evaluation import normalized_entropy, predict_proba, read_inducing

run_dir = next(Path("runs/demo-toy").glob("toy-vargp-*"))
state = checkpoint.load(run_dir / "checkpoint.vgp")
for t, Z in enumerate(read_inducing(run_dir / "inducing")):
    print(f"task {t}: {len(Z)} inducing inputs, centroid {np.round(Z.mean(0), 2)}")

# %%
g = np.linspace(-4, 4, 41)
grid = np.stack(np.meshgrid(g, g), -1).reshape(-1, 2)
probs = predict_proba(state, grid, 30, torch.Generator().manual_seed(0))
ent = normalized_entropy(probs).reshape(41, 41)
print("min / median / max entropy:", np.round([ent.min(), np.median(ent), ent.max()], 3))
