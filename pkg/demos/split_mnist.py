# %% [markdown]
# # Split MNIST at desk scale
#
# Five tasks of two digits each. Set `VARGP_DATA_DIR` to a folder holding the
# four MNIST IDX files. To get a small stand-in, build the 5000-image sample
# that ships with mlxtend:
#
#     python3 tools/make_mnist_subset.py data/mnist5k
#     export VARGP_DATA_DIR=data/mnist5k
#
# Dividing the pixels by 5 keeps the unit initial lengthscales sensible for
# 784 inputs. One run takes about a minute and a half on a single core.

# %%
import os

from vargp import ExperimentConfig, run_experiment

settings = {
    "benchmark": "split_mnist", "eta": 0.003, "batch_size": 64, "max_epochs": 50,
    "patience": 50, "num_inducing": 30, "beta": 10.0, "seed": 0, "val_total": 500,
    "desk_scale_cap": 2000, "test_cap": 500, "input_scale": 5.0,
    "data_dir": os.environ.get("VARGP_DATA_DIR", "data/mnist5k"),
    "output_dir": "runs/demo-split",
}
cfg = ExperimentConfig.from_dict({**settings, "variant": "vargp"})
state, report, run_dir = run_experiment(cfg)

# %%
for t in range(report.num_tasks):
    print(f"after task {t}: seen-task mean accuracy {report.seen_mean_accuracy(t):.3f}")
