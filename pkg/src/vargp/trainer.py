"""Per-task training: Yogi updates, early stopping, freeze-and-advance."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Optional

import numpy as np
import torch

from .errors import NonFiniteError
from .evaluation import EVAL_SAMPLES, classify, predict_proba
from .gaussian import DTYPE, DiagGaussian
from .model import ContinualState, InducingBlock
from .objective import ElboConfig, elbo_for

log = logging.getLogger(__name__)

YOGI_BETAS = (0.9, 0.999)
YOGI_EPS = 1e-3


@dataclass
class TrainConfig:
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
    # size of the training subset used for early stopping when a task has no validation split
    val_subset: int = 1000
    log_stream: Optional[object] = None
    dump_dir: Optional[str] = None

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 1:
            raise ValueError("batch_size, max_epochs and patience must be >= 1")
        if self.delta < 0:
            raise ValueError("delta must be non-negative")
        if self.num_inducing < 1:
            raise ValueError("num_inducing must be >= 1")


@dataclass
class OptState:
    m: Dict[str, torch.Tensor] = field(default_factory=dict)
    v: Dict[str, torch.Tensor] = field(default_factory=dict)
    step: int = 0


def yogi_step(params: Dict[str, torch.Tensor], grads: Dict[str, torch.Tensor], opt: OptState,
              eta: float, betas=YOGI_BETAS, eps: float = YOGI_EPS):
    """One bias-corrected Yogi descent step; returns ``(new_params, new_opt)``.

    The second moment moves additively towards ``g**2`` by
    ``(1 - beta2) * sign(g**2 - v) * g**2``, so it can shrink as well as grow.
    """
    b1, b2 = betas
    step = opt.step + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        m = opt.m.get(name, torch.zeros_like(p))
        v = opt.v.get(name, torch.zeros_like(p))
        g2 = g * g
        m = b1 * m + (1 - b1) * g
        v = v + (1 - b2) * torch.sign(g2 - v) * g2
        m_hat = m / (1 - b1**step)
        v_hat = v / (1 - b2**step)
        new_params[name] = p - eta * m_hat / (v_hat.sqrt() + eps)
        new_m[name], new_v[name] = m, v
    return new_params, OptState(new_m, new_v, step)


def prior_hyper(D: int) -> DiagGaussian:
    """Standard-normal prior over ``D`` log-lengthscales and the log-scale."""
    return DiagGaussian(torch.zeros(D + 1, dtype=DTYPE), torch.zeros(D + 1, dtype=DTYPE))


def init_hyper_posterior(D: int) -> DiagGaussian:
    if D < 1:
        raise ValueError("input dimension must be >= 1")
    return DiagGaussian(torch.zeros(D + 1, dtype=DTYPE),
                        torch.full((D + 1,), math.log(0.1), dtype=DTYPE))


def new_state(num_classes: int, input_dim: int, variant: str = "vargp") -> ContinualState:
    return ContinualState([], init_hyper_posterior(input_dim), prior_hyper(input_dim),
                          num_classes, input_dim, variant)


def select_inducing(X, y, M: int, rng) -> np.ndarray:
    """Row indices of the initial inducing inputs.

    Label-stratified when every present class has at least ``M / n_classes``
    examples, otherwise a uniform subset without replacement.
    """
    N = X.shape[0]
    if M > N:
        raise ValueError(f"cannot pick {M} inducing points from {N} training examples")
    classes, counts = np.unique(y, return_counts=True)
    if counts.min() * len(classes) < M:
        return np.sort(rng.choice(N, size=M, replace=False))
    quota = np.full(len(classes), M // len(classes))
    quota[: M - quota.sum()] += 1
    picks = [rng.choice(np.flatnonzero(y == c), size=q, replace=False) for c, q in zip(classes, quota)]
    return np.sort(np.concatenate(picks))


def _emit(cfg: TrainConfig, record: dict) -> None:
    if cfg.log_stream is None:
        return
    line = json.dumps(record, sort_keys=True)
    if callable(cfg.log_stream):
        cfg.log_stream(line)
    else:
        cfg.log_stream.write(line + "\n")
        cfg.log_stream.flush()


def _seed(cfg: TrainConfig, task_index: int, stream: int) -> int:
    return int(np.random.SeedSequence([cfg.seed, task_index, stream]).generate_state(1)[0])


def _view(state: ContinualState, frozen, params, hyper_prev, learn_std: bool) -> ContinualState:
    block = InducingBlock(params["Z"], params["m"], params["S_raw"])
    log_std = params["hyper_log_std"] if learn_std else state.hyper_q.log_std
    return ContinualState(frozen + [block], DiagGaussian(params["hyper_mean"], log_std), hyper_prev,
                          state.num_classes, state.input_dim, state.variant, state.meta)


def _dump_and_raise(cfg, message, dump):
    if cfg.dump_dir:
        path = Path(cfg.dump_dir)
        path.mkdir(parents=True, exist_ok=True)
        (path / f"nonfinite_task{dump['task']}_epoch{dump['epoch']}.json").write_text(
            json.dumps(dump, indent=2, default=str))
    raise NonFiniteError(message, dump)


def train_task(state: ContinualState, task, cfg: TrainConfig) -> ContinualState:
    """Append, fit and freeze the inducing block for ``task``.

    Returns a new state; the input state is not modified.  Per-epoch
    history is stored under ``state.meta["history"]``.
    """
    if any(not b.frozen for b in state.blocks):
        raise ValueError("all existing inducing blocks must be frozen before training a new task")
    t = state.num_tasks
    rng = np.random.default_rng(_seed(cfg, t, 0))
    gen = torch.Generator().manual_seed(_seed(cfg, t, 1))
    val_gen_seed = _seed(cfg, t, 2)

    X = torch.as_tensor(task.X_train, dtype=DTYPE)
    y = torch.as_tensor(task.y_train, dtype=torch.long)
    N = X.shape[0]
    Z0 = X[select_inducing(task.X_train, task.y_train, cfg.num_inducing, rng)]
    if task.X_val.shape[0] > 0:
        X_val, y_val = task.X_val, task.y_val
    else:
        sub = np.sort(rng.choice(N, size=min(N, cfg.val_subset), replace=False))
        X_val, y_val = task.X_train[sub], task.y_train[sub]

    hyper_prev = state.hyper_prev if t == 0 else state.hyper_q.detach()
    learn_std = not state.point_hypers
    block = InducingBlock.initial(Z0, state.num_classes)
    params = {"Z": block.Z, "m": block.m, "S_raw": block.S_raw,
              "hyper_mean": state.hyper_q.mean.detach().clone()}
    if learn_std:
        params["hyper_log_std"] = state.hyper_q.log_std.detach().clone()
    frozen = list(state.blocks)
    objective = elbo_for(_view(state, frozen, params, hyper_prev, learn_std))
    opt = OptState()
    history = {"elbo": [], "val_acc": []}

    for epoch in range(1, cfg.max_epochs + 1):
        order = rng.permutation(N)
        elbos = []
        for start in range(0, N, cfg.batch_size):
            idx = torch.as_tensor(order[start:start + cfg.batch_size])
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            view = _view(state, frozen, leaves, hyper_prev, learn_std)
            ecfg = ElboConfig(cfg.beta, cfg.num_theta_samples, N / len(idx))
            elbo = objective(view, (X[idx], y[idx]), ecfg, gen)
            (-elbo).backward()
            grads = {k: torch.zeros_like(v) if v.grad is None else v.grad for k, v in leaves.items()}
            if not math.isfinite(elbo.item()) or not all(bool(torch.isfinite(g).all()) for g in grads.values()):
                _dump_and_raise(cfg, f"non-finite loss or gradient in task {t}, epoch {epoch}", {
                    "task": t, "epoch": epoch, "batch_start": start, "elbo": elbo.item(),
                    "param_norms": {k: float(v.norm()) for k, v in params.items()},
                    "grad_finite": {k: bool(torch.isfinite(g).all()) for k, g in grads.items()},
                })
            params, opt = yogi_step({k: v.detach() for k, v in params.items()},
                                    grads, opt, cfg.eta)
            elbos.append(elbo.item())
        view = _view(state, frozen, params, hyper_prev, learn_std)
        probs = predict_proba(view, X_val, cfg.val_samples, torch.Generator().manual_seed(val_gen_seed))
        acc = float(np.mean(classify(probs) == y_val))
        history["elbo"].append(float(np.mean(elbos)))
        history["val_acc"].append(acc)
        _emit(cfg, {"event": "epoch", "task": t, "epoch": epoch, "elbo": history["elbo"][-1],
                    "val_acc": acc})
        if epoch > cfg.patience and abs(acc - history["val_acc"][epoch - 1 - cfg.patience]) < cfg.delta:
            break

    final = InducingBlock(params["Z"], params["m"], params["S_raw"]).freeze()
    log_std = params["hyper_log_std"] if learn_std else state.hyper_q.log_std
    meta = dict(state.meta)
    meta["history"] = list(meta.get("history", [])) + [history]
    return ContinualState(frozen + [final], DiagGaussian(params["hyper_mean"].detach().clone(),
                                                         log_std.detach().clone()),
                          hyper_prev, state.num_classes, state.input_dim, state.variant, meta)
