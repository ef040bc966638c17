"""Posterior-predictive classification and continual-learning metrics."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .gaussian import DTYPE
from .model import ContinualState, predictive_marginals

EVAL_SAMPLES = 10
CHUNK = 2048


@torch.no_grad()
def predict_proba(state: ContinualState, Xstar, num_samples: int = EVAL_SAMPLES,
                  generator=None) -> np.ndarray:
    """Monte Carlo posterior predictive class probabilities, shape (P, K).

    Each sample draws theta from the hyperparameter posterior and one value
    of every latent function at every point, then applies the softmax.
    """
    if num_samples < 1:
        raise ValueError("num_samples must be >= 1")
    if generator is None:
        generator = torch.Generator().manual_seed(0)
    X = torch.as_tensor(np.asarray(Xstar), dtype=DTYPE)
    K, P = state.num_classes, X.shape[0]
    probs = torch.zeros(P, K, dtype=DTYPE)
    for _ in range(num_samples):
        eps = torch.randn(state.hyper_q.dim, generator=generator, dtype=DTYPE)
        theta = state.theta_sample(eps)
        noise = torch.randn(K, P, generator=generator, dtype=DTYPE)
        for start in range(0, P, CHUNK):
            sl = slice(start, start + CHUNK)
            mean, var = predictive_marginals(state, theta, X[sl])
            f = mean + var.sqrt() * noise[:, sl]
            probs[sl] += torch.softmax(f.T, dim=-1)
    return (probs / num_samples).numpy()


def classify(probs) -> np.ndarray:
    """Row-wise argmax; ties go to the lowest class index."""
    return np.argmax(np.asarray(probs), axis=1)


def normalized_entropy(probs) -> np.ndarray:
    """Per-row Shannon entropy divided by ``ln K``."""
    probs = np.asarray(probs)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(probs > 0, probs * np.log(probs), 0.0)
    return -terms.sum(axis=1) / math.log(probs.shape[1])


@dataclass
class EvalReport:
    """T x T accuracy and normalized-entropy matrices.

    Row ``t`` is written once, right after task ``t`` is trained.  Accuracy
    covers the tasks seen so far; entropy covers every task.
    """

    accuracy: np.ndarray
    entropy: np.ndarray
    per_task_n: np.ndarray
    metadata: dict = field(default_factory=dict)

    @classmethod
    def empty(cls, stream, metadata=None) -> "EvalReport":
        T = len(stream)
        return cls(np.full((T, T), np.nan), np.full((T, T), np.nan),
                   np.array([task.X_test.shape[0] for task in stream]), dict(metadata or {}))

    @property
    def num_tasks(self) -> int:
        return self.accuracy.shape[0]

    def seen_mean_accuracy(self, t: int) -> float:
        """Mean test accuracy over tasks ``0..t`` after training task ``t``."""
        return float(np.mean(self.accuracy[t, : t + 1]))

    def rows_filled(self) -> int:
        return int((~np.isnan(self.accuracy[:, 0])).sum())

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy.tolist(),
            "entropy": self.entropy.tolist(),
            "per_task_n": self.per_task_n.tolist(),
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "EvalReport":
        d = json.loads(Path(path).read_text())
        return cls(np.array(d["accuracy"], dtype=float), np.array(d["entropy"], dtype=float),
                   np.array(d["per_task_n"], dtype=int), d.get("metadata", {}))


def update_report(report: EvalReport, state: ContinualState, stream, t: int,
                  num_samples: int = EVAL_SAMPLES, generator=None) -> EvalReport:
    """Fill row ``t`` of ``report`` from ``state`` trained through task ``t``."""
    T = len(stream)
    if report.accuracy.shape != (T, T):
        raise ValueError(f"report is {report.accuracy.shape[0]}x{report.accuracy.shape[1]} "
                         f"but the stream has {T} tasks")
    if not 0 <= t < T:
        raise ValueError(f"task index {t} out of range for {T} tasks")
    if not np.all(np.isnan(report.accuracy[t])) or not np.all(np.isnan(report.entropy[t])):
        raise ValueError(f"row {t} of the report is already finalized")
    if generator is None:
        generator = torch.Generator().manual_seed(10_000 + t)
    for j, task in enumerate(stream):
        probs = predict_proba(state, task.X_test, num_samples, generator)
        report.entropy[t, j] = float(np.mean(normalized_entropy(probs)))
        if j <= t:
            report.accuracy[t, j] = float(np.mean(classify(probs) == task.y_test))
    return report


def export_inducing(state: ContinualState, out_dir) -> Path:
    """Write each task's inducing inputs to ``task_<t>.csv`` plus ``manifest.json``."""
    if not state.blocks:
        raise ValueError("state has no inducing blocks to export")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for t, block in enumerate(state.blocks):
        Z = block.Z.detach().numpy()
        name = f"task_{t}.csv"
        np.savetxt(out / name, Z, fmt="%.17g", delimiter=",")
        entries.append({"task": t, "file": name, "rows": int(Z.shape[0]), "cols": int(Z.shape[1])})
    manifest = {"num_tasks": len(entries), "variant": state.variant, "tasks": entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def read_inducing(out_dir) -> list:
    """Load the arrays written by :func:`export_inducing`."""
    out = Path(out_dir)
    manifest = json.loads((out / "manifest.json").read_text())
    return [np.loadtxt(out / e["file"], delimiter=",", ndmin=2) for e in manifest["tasks"]]
