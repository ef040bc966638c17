"""Continual classification with sparse Gaussian processes and auto-regressive inducing posteriors."""

from .checkpoint import checkpoint_roundtrip
from .data import TaskDataset, TaskStream, gen_toy, load_idx, load_mnist, make_permuted_tasks, make_split_tasks
from .errors import (CheckpointError, ConfigError, DataFormatError, DegenerateKernelError, DimensionError,
                     NonFiniteError, NumericalDegeneracyError, VargpError)
from .evaluation import EvalReport, classify, export_inducing, normalized_entropy, predict_proba, update_report
from .experiment import ExperimentConfig, run_experiment
from .gaussian import DiagGaussian, GaussianDist, ar_join, condition, kl_diag, kl_full, sample_reparam
from .kernel import HyperParams, eq_kernel, jittered_chol
from .model import ContinualState, InducingBlock, predictive_marginals, variational_joint
from .objective import ElboConfig, dt_kl, elbo_block_diag, elbo_continual, elbo_first, elbo_global
from .trainer import TrainConfig, new_state, train_task, yogi_step

__version__ = "0.1.0"
