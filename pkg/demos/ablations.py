# %% [markdown]
# # Comparing the bound variants
#
# The same Split MNIST run with each variant of the continual bound:
#
# * `vargp` keeps the full auto-regressive coupling between task blocks;
# * `block_diag` samples the earlier blocks and uses them only for conditioning;
# * `global` re-fits one block per class, plus a correction term;
# * `mle_hypers` uses point estimates for the kernel hyperparameters.
#
# Expect `mle_hypers` to forget almost everything. At this data size
# `block_diag` and `vargp` end up close.

# %%
import os

from vargp import ExperimentConfig, run_experiment

base = {
    "benchmark": "split_mnist", "eta": 0.003, "batch_size": 64, "max_epochs": 50,
    "patience": 50, "num_inducing": 30, "beta": 10.0, "seed": 0, "val_total": 500,
    "desk_scale_cap": 2000, "test_cap": 500, "input_scale": 5.0,
    "data_dir": os.environ.get("VARGP_DATA_DIR", "data/mnist5k"),
    "output_dir": "runs/demo-ablations",
}

results = {}
for variant in ("vargp", "block_diag", "global", "mle_hypers"):
    _, report, _ = run_experiment(ExperimentConfig.from_dict({**base, "variant": variant}))
    results[variant] = [report.seen_mean_accuracy(t) for t in range(report.num_tasks)]

# %%
for variant, curve in results.items():
    print(f"{variant:>11}: " + "  ".join(f"{a:.3f}" for a in curve))
