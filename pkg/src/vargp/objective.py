"""Variational lower bounds.

All bounds share the same Monte Carlo layout: ``num_theta_samples``
hyperparameter draws, and per draw one reparameterized sample of every
latent function at every batch point.  Noise is drawn from the supplied
``torch.Generator`` in a fixed order (theta, f, then any variant-specific
inducing-output noise) so that different bounds evaluated from the same seed
share their theta and f noise.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import torch

from .errors import DimensionError
from .gaussian import DTYPE, DiagGaussian, GaussianDist, kl_diag, kl_full, log_prob, sample_reparam
from .kernel import HyperParams, eq_kernel, jittered_chol
from .model import ContinualState, PriorFactors, prior_conditional, prior_factors, predictive_marginals


@dataclass(frozen=True)
class ElboConfig:
    beta: float = 1.0
    num_theta_samples: int = 3
    batch_scale: float = 1.0

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        if self.num_theta_samples < 1:
            raise ValueError("num_theta_samples must be >= 1")
        if self.batch_scale <= 0:
            raise ValueError("batch_scale must be positive")


def _randn(generator, *shape) -> torch.Tensor:
    return torch.randn(*shape, generator=generator, dtype=DTYPE)


def _as_batch(batch):
    X, y = batch
    X = torch.as_tensor(X, dtype=DTYPE)
    y = torch.as_tensor(y, dtype=torch.long)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DimensionError(f"batch shapes X {tuple(X.shape)}, y {tuple(y.shape)} are inconsistent")
    return X, y


def draw_thetas(state: ContinualState, num: int, generator) -> list:
    eps = _randn(generator, num, state.hyper_q.dim)
    return [state.theta_sample(e) for e in eps]


def expected_loglik(batch, state: ContinualState, theta_samples, noise, batch_scale: float = 1.0,
                    factors=None):
    """Monte Carlo estimate of the data term, scaled to the full task size.

    ``noise`` has shape ``(S, K, B)``: one standard-normal draw per theta
    sample, class and point.  ``factors`` optionally supplies precomputed
    :class:`PriorFactors` per theta sample.
    """
    X, y = _as_batch(batch)
    K = state.num_classes
    if bool(((y < 0) | (y >= K)).any()):
        raise ValueError(f"labels must lie in [0, {K})")
    noise = torch.as_tensor(noise, dtype=DTYPE)
    if noise.shape != (len(theta_samples), K, X.shape[0]):
        raise DimensionError(f"noise shape {tuple(noise.shape)} does not match (S, K, B)")
    total = 0.0
    for s, theta in enumerate(theta_samples):
        fac = None if factors is None else factors[s]
        mean, var = predictive_marginals(state, theta, X, factors=fac)
        f = mean + var.sqrt() * noise[s]
        logp = torch.log_softmax(f.T, dim=-1)
        total = total + logp.gather(1, y[:, None]).mean()
    return batch_scale * X.shape[0] * total / len(theta_samples)


def _hyper_kl(state: ContinualState, cfg: ElboConfig):
    if state.point_hypers:
        return torch.zeros((), dtype=DTYPE)
    return cfg.beta * kl_diag(state.hyper_q, state.hyper_prev)


def dt_kl(state: ContinualState, theta: HyperParams, class_k: Optional[int] = None, factors=None):
    """KL between the variational and prior conditionals of the newest block.

    Under the auto-regressive parametrization both conditionals share the
    mean shift ``A_t u_<t``, so the divergence reduces to
    KL[N(m_t, S_t) || N(0, C_t)] and takes no ``u_<t`` argument.
    Summed over classes when ``class_k`` is None.
    """
    if state.num_tasks < 2:
        raise ValueError("dt_kl needs at least two tasks")
    if factors is None:
        factors = prior_factors(theta, state.blocks)
    block = state.blocks[-1]
    c_chol = factors.conditionals[-1][1]
    kl = kl_full(block.marginal(), GaussianDist(torch.zeros_like(block.means), c_chol))
    return kl.sum() if class_k is None else kl[class_k]


def _first_task_kl(state: ContinualState, theta_samples, factors) -> torch.Tensor:
    block = state.blocks[-1]
    q = block.marginal()
    total = 0.0
    for fac in factors:
        total = total + kl_full(q, GaussianDist(torch.zeros_like(q.mean), fac.chol)).sum()
    return total / len(theta_samples)


def _sample_batch_noise(state, generator, cfg, batch_size):
    thetas = draw_thetas(state, cfg.num_theta_samples, generator)
    f_noise = _randn(generator, cfg.num_theta_samples, state.num_classes, batch_size)
    return thetas, f_noise


def elbo_first(state: ContinualState, batch, cfg: ElboConfig, generator) -> torch.Tensor:
    """Bound for the first task: data term minus hyperparameter and inducing KLs."""
    if state.num_tasks != 1:
        raise ValueError(f"elbo_first requires exactly one task, state has {state.num_tasks}")
    X, y = _as_batch(batch)
    thetas, f_noise = _sample_batch_noise(state, generator, cfg, X.shape[0])
    factors = [prior_factors(th, state.blocks) for th in thetas]
    ell = expected_loglik((X, y), state, thetas, f_noise, cfg.batch_scale, factors)
    return ell - _hyper_kl(state, cfg) - _first_task_kl(state, thetas, factors)


def _check_history(state: ContinualState):
    if state.num_tasks < 2:
        raise ValueError("continual bounds require at least two tasks")
    if not all(b.frozen for b in state.blocks[:-1]):
        raise ValueError("all earlier inducing blocks must be frozen")


def elbo_continual(state: ContinualState, batch, cfg: ElboConfig, generator) -> torch.Tensor:
    """Continual bound for task ``t >= 2`` with the auto-regressive posterior."""
    _check_history(state)
    X, y = _as_batch(batch)
    thetas, f_noise = _sample_batch_noise(state, generator, cfg, X.shape[0])
    factors = [prior_factors(th, state.blocks) for th in thetas]
    ell = expected_loglik((X, y), state, thetas, f_noise, cfg.batch_scale, factors)
    d_t = sum(dt_kl(state, th, factors=fac) for th, fac in zip(thetas, factors)) / len(thetas)
    return ell - _hyper_kl(state, cfg) - d_t


def sampled_dt_kl(state: ContinualState, factors: PriorFactors, u_prev) -> torch.Tensor:
    """KL[N(m_t, S_t) || N(A_t u_<t, C_t)] summed over classes.

    ``u_prev`` has shape ``(K, n_<t)``.  Used by the block-diagonal bound,
    where the variational mean carries no ``A_t u_<t`` shift.
    """
    block = state.blocks[-1]
    A, c_chol = factors.conditionals[-1]
    prior_mean = u_prev @ A.T
    return kl_full(block.marginal(), GaussianDist(prior_mean, c_chol)).sum()


def elbo_block_diag(state: ContinualState, batch, cfg: ElboConfig, generator) -> torch.Tensor:
    """Ablation with q(u_t | u_<t) = N(m_t, S_t).

    The prior conditional keeps its ``A_t u_<t`` mean, so the divergence
    depends on ``u_<t``, drawn once per theta sample from the frozen
    block-diagonal joint.
    """
    if state.variant != "block_diag":
        raise ValueError("elbo_block_diag requires a state with variant 'block_diag'")
    if state.num_tasks == 1:
        return elbo_first(state, batch, cfg, generator)
    _check_history(state)
    X, y = _as_batch(batch)
    thetas, f_noise = _sample_batch_noise(state, generator, cfg, X.shape[0])
    n_prev = sum(b.num_inducing for b in state.blocks[:-1])
    u_noise = _randn(generator, cfg.num_theta_samples, state.num_classes, n_prev)
    factors = [prior_factors(th, state.blocks) for th in thetas]
    ell = expected_loglik((X, y), state, thetas, f_noise, cfg.batch_scale, factors)
    prev = _block_diag_prev(state)
    d_t = 0.0
    for s, fac in enumerate(factors):
        u_prev = sample_reparam(prev, u_noise[s])
        d_t = d_t + sampled_dt_kl(state, fac, u_prev)
    return ell - _hyper_kl(state, cfg) - d_t / len(thetas)


def _block_diag_prev(state: ContinualState) -> GaussianDist:
    blocks = state.blocks[:-1]
    means = torch.cat([b.means for b in blocks], dim=-1)
    chols = [b.chols for b in blocks]
    per_class = [torch.block_diag(*[c[k] for c in chols]) for k in range(state.num_classes)]
    return GaussianDist(means, torch.stack(per_class))


def global_correction(state: ContinualState, theta: HyperParams, u_noise, prev_noise):
    """One-sample estimate of E[ln q(u_{t-1}) - ln p(u_{t-1} | theta)], summed over classes.

    ``u_t ~ q(u_t)`` from ``u_noise`` (K, M_t); ``u_{t-1} ~ p(u_{t-1} | u_t, theta)``
    from ``prev_noise`` (K, M_{t-1}).
    """
    cur, prev = state.blocks[-1], state.blocks[-2]
    u_t = sample_reparam(cur.marginal(), u_noise)
    A, c_chol = prior_conditional(theta, prev.Z, cur.Z)
    u_prev = u_t @ A.T + (c_chol @ prev_noise.unsqueeze(-1)).squeeze(-1)
    prior_prev = GaussianDist(torch.zeros(prev.num_inducing, dtype=DTYPE),
                              jittered_chol(eq_kernel(theta, prev.Z), name="K_prev"))
    return (log_prob(prev.marginal(), u_prev) - log_prob(prior_prev, u_prev)).sum()


def elbo_global(state: ContinualState, batch, cfg: ElboConfig, generator) -> torch.Tensor:
    """Ablation with a single set of inducing points per step.

    Prediction uses only the newest block; the previous block enters through
    a sampled log-ratio correction.
    """
    if state.variant != "global":
        raise ValueError("elbo_global requires a state with variant 'global'")
    if state.num_tasks == 1:
        return elbo_first(state, batch, cfg, generator)
    if not state.blocks[-2].frozen:
        raise ValueError("the previous-task snapshot must be frozen")
    X, y = _as_batch(batch)
    thetas, f_noise = _sample_batch_noise(state, generator, cfg, X.shape[0])
    S, K = cfg.num_theta_samples, state.num_classes
    u_noise = _randn(generator, S, K, state.blocks[-1].num_inducing)
    prev_noise = _randn(generator, S, K, state.blocks[-2].num_inducing)
    factors = [prior_factors(th, state.blocks[-1:]) for th in thetas]
    ell = expected_loglik((X, y), state, thetas, f_noise, cfg.batch_scale, factors)
    kl_u = _first_task_kl(state, thetas, factors)
    corr = sum(global_correction(state, th, u_noise[s], prev_noise[s])
               for s, th in enumerate(thetas)) / S
    return ell - _hyper_kl(state, cfg) - kl_u + corr


def elbo_for(state: ContinualState):
    """The bound a state's variant trains with at its current task."""
    if state.variant == "block_diag":
        return elbo_block_diag
    if state.variant == "global":
        return elbo_global
    return elbo_first if state.num_tasks == 1 else elbo_continual
