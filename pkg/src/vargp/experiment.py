"""Experiment orchestration: config parsing, stream construction and the task loop."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch

from . import checkpoint
from .data import TaskStream, data_dir_from_env, gen_toy, load_mnist, make_permuted_tasks, make_split_tasks
from .errors import ConfigError
from .evaluation import (EVAL_SAMPLES, EvalReport, classify, export_inducing, normalized_entropy,
                         predict_proba, update_report)
from .model import VARIANTS
from .trainer import TrainConfig, new_state, train_task

BENCHMARKS = ("toy", "split_mnist", "permuted_mnist")

# (low, high) bounds for warnings; values outside are used as given
SANITY_RANGES = {
    "eta": (0.001, 0.01),
    "num_inducing": (40, 200),
    "beta": (1.0, 10.0),
    "batch_size": (512, 512),
    "max_epochs": (500, 500),
    "patience": (200, 200),
    "delta": (1e-4, 1e-4),
}

_TRAIN_FIELDS = ("eta", "batch_size", "max_epochs", "patience", "delta", "beta", "num_inducing",
                 "seed", "num_theta_samples", "val_samples", "val_subset")
# keys that do not change any report cell stay out of the digest, so a truncated run
# and its resumed continuation share one run directory
_UNHASHED = ("output_dir", "resume_from", "data_dir", "data_parallel", "num_tasks")


@dataclass
class ExperimentConfig:
    benchmark: str
    variant: str = "vargp"
    eta: float = 0.003
    batch_size: int = 512
    max_epochs: int = 500
    patience: int = 200
    delta: float = 1e-4
    beta: float = 1.0
    num_inducing: int = 60
    seed: int = 0
    num_theta_samples: int = 3
    val_samples: int = EVAL_SAMPLES
    val_subset: int = 1000
    eval_samples: int = EVAL_SAMPLES
    data_dir: Optional[str] = None
    desk_scale_cap: Optional[int] = None
    test_cap: Optional[int] = None
    val_total: int = 10000
    # divisor applied to every input feature before training
    input_scale: float = 1.0
    num_permuted_tasks: int = 10
    # train only the first ``num_tasks`` tasks of the stream (all when None)
    num_tasks: Optional[int] = None
    output_dir: str = "runs"
    resume_from: Optional[str] = None
    data_parallel: bool = False

    def __post_init__(self):
        if self.benchmark not in BENCHMARKS:
            raise ConfigError(f"unknown benchmark {self.benchmark!r}; expected one of {BENCHMARKS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.input_scale <= 0:
            raise ConfigError("input_scale must be positive")
        if self.num_tasks is not None and self.num_tasks < 1:
            raise ConfigError("num_tasks must be >= 1")
        try:
            self.train_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "benchmark" not in d:
            raise ConfigError("config is missing 'benchmark'")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        try:
            d = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config is not valid JSON: {exc}") from exc
        return cls.from_dict(d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def digest(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.output_dir) / f"{self.benchmark}-{self.variant}-{self.digest()[:12]}"

    def train_config(self, **extra) -> TrainConfig:
        return TrainConfig(**{k: getattr(self, k) for k in _TRAIN_FIELDS}, **extra)

    def warnings(self) -> list:
        out = []
        for key, (lo, hi) in SANITY_RANGES.items():
            value = getattr(self, key)
            if not lo <= value <= hi:
                span = f"{lo}" if lo == hi else f"[{lo}, {hi}]"
                out.append(f"{key}={value} is outside the reference setting {span}")
        return out


def build_stream(cfg: ExperimentConfig) -> TaskStream:
    if cfg.benchmark == "toy":
        stream = gen_toy(cfg.seed)
    else:
        data_dir = data_dir_from_env(cfg.data_dir)
        if data_dir is None:
            raise ConfigError("MNIST benchmarks need 'data_dir' in the config or VARGP_DATA_DIR")
        Xtr, ytr, Xte, yte = load_mnist(data_dir)
        Xtr, Xte = Xtr / cfg.input_scale, Xte / cfg.input_scale
        caps = dict(train_cap=cfg.desk_scale_cap, test_cap=cfg.test_cap)
        if cfg.benchmark == "split_mnist":
            return make_split_tasks(Xtr, ytr, Xte, yte, cfg.val_total, cfg.seed, **caps)
        return make_permuted_tasks(Xtr, ytr, Xte, yte, cfg.num_permuted_tasks, cfg.val_total,
                                   cfg.seed, **caps)
    if cfg.input_scale != 1.0:
        for task in stream:
            task.X_train, task.X_val, task.X_test = (task.X_train / cfg.input_scale,
                                                    task.X_val / cfg.input_scale,
                                                    task.X_test / cfg.input_scale)
    return stream


def _emit(log: Optional[Callable[[str], None]], record: dict) -> None:
    if log is not None:
        log(json.dumps(record, sort_keys=True))


def run_experiment(cfg: ExperimentConfig, log: Optional[Callable[[str], None]] = None,
                   stream: Optional[TaskStream] = None):
    """Train the configured stream task by task.

    After each task the state is checkpointed to ``checkpoint_task<t>.vgp``
    (and ``checkpoint.vgp``), the report row is filled and ``report.json``
    rewritten, and the inducing inputs are exported.  Returns
    ``(state, report, run_dir)``.
    """
    torch.set_num_threads((os.cpu_count() or 1) if cfg.data_parallel else 1)
    for message in cfg.warnings():
        _emit(log, {"event": "warning", "message": message})
    if stream is None:
        stream = build_stream(cfg)
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.json").write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")
    metadata = {"seed": cfg.seed, "config_digest": cfg.digest(), "benchmark": cfg.benchmark,
                "variant": cfg.variant}

    if cfg.resume_from:
        state = checkpoint.load(cfg.resume_from)
        _check_compatible(state, stream, cfg)
        prior_report = Path(cfg.resume_from).parent / "report.json"
        report = EvalReport.load(prior_report) if prior_report.exists() else EvalReport.empty(stream, metadata)
        report.metadata = metadata
        if report.accuracy.shape[0] != len(stream):
            raise ConfigError("the report next to the checkpoint belongs to a different stream")
        _emit(log, {"event": "resume", "tasks_done": state.num_tasks, "from": str(cfg.resume_from)})
    else:
        state = new_state(stream.num_classes, stream.input_dim, cfg.variant)
        report = EvalReport.empty(stream, metadata)

    last = len(stream) if cfg.num_tasks is None else min(cfg.num_tasks, len(stream))
    tcfg = cfg.train_config(log_stream=log, dump_dir=str(run_dir))
    for t in range(state.num_tasks, last):
        _emit(log, {"event": "task_start", "task": t, "num_train": stream[t].num_train})
        state = train_task(state, stream[t], tcfg)
        checkpoint.save(state, run_dir / f"checkpoint_task{t}.vgp")
        checkpoint.save(state, run_dir / "checkpoint.vgp")
        update_report(report, state, stream, t, cfg.eval_samples)
        report.save(run_dir / "report.json")
        export_inducing(state, run_dir / "inducing")
        _emit(log, {"event": "task_done", "task": t,
                    "accuracy": [round(a, 6) for a in report.accuracy[t, : t + 1].tolist()],
                    "seen_mean_accuracy": round(report.seen_mean_accuracy(t), 6),
                    "epochs": len(state.meta["history"][-1]["elbo"])})
    return state, report, run_dir


def _check_compatible(state, stream, cfg):
    if state.variant != cfg.variant:
        raise ConfigError(f"checkpoint variant {state.variant!r} differs from config {cfg.variant!r}")
    if (state.num_classes, state.input_dim) != (stream.num_classes, stream.input_dim):
        raise ConfigError("checkpoint dimensions do not match the configured benchmark")
    if state.num_tasks > len(stream):
        raise ConfigError("checkpoint has more tasks than the configured stream")


def evaluate_checkpoint(state, stream: TaskStream, num_samples: int = EVAL_SAMPLES, seed: int = 0) -> dict:
    """Accuracy and mean normalized entropy of ``state`` on every task's test split."""
    gen = torch.Generator().manual_seed(seed)
    acc, ent = [], []
    for task in stream:
        probs = predict_proba(state, task.X_test, num_samples, gen)
        acc.append(float(np.mean(classify(probs) == task.y_test)))
        ent.append(float(np.mean(normalized_entropy(probs))))
    return {"tasks_trained": state.num_tasks, "accuracy": acc, "entropy": ent}
