"""Continual sparse-GP state and the auto-regressive variational joint.

Each task contributes an :class:`InducingBlock` holding inducing inputs ``Z``,
per-class variational means and per-class covariance factors.  For task ``t``
the variational conditional is

    q(u_t | u_<t, theta) = N(A_t u_<t + m_t, S_t),   A_t = K_{t,<t} K_{<t,<t}^{-1}

and the joint over all blocks is assembled in closed form by folding blocks
with :func:`vargp.gaussian.ar_join`.

Three state layouts are supported through ``ContinualState.variant``:

``"vargp"`` / ``"mle_hypers"``
    auto-regressive joint over all blocks.
``"block_diag"``
    blocks folded with ``A_t = 0`` (independent per-task posteriors).
``"global"``
    only the most recent block is used for prediction; older blocks are kept
    as frozen snapshots.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import List, Optional

import torch

from .errors import DimensionError, NumericalDegeneracyError
from .gaussian import (
    DiagGaussian,
    GaussianDist,
    INV_SOFTPLUS_ONE,
    ar_join,
    as_tensor,
    build_chol,
    condition,
)
from .kernel import HyperParams, eq_kernel, eq_kernel_diag, jittered_chol

VARIANTS = ("vargp", "block_diag", "global", "mle_hypers")

NEG_VAR_TOL = 1e-8
MIN_VAR = 1e-12


@dataclass
class InducingBlock:
    """Variational parameters of one task.

    Z : (M, D) inducing inputs
    m : (M, K) per-class variational means
    S_raw : (K, M, M) unconstrained Cholesky parameters, see ``build_chol``
    """

    Z: torch.Tensor
    m: torch.Tensor
    S_raw: torch.Tensor
    frozen: bool = False

    def __post_init__(self):
        self.Z, self.m, self.S_raw = as_tensor(self.Z), as_tensor(self.m), as_tensor(self.S_raw)
        M = self.Z.shape[0]
        if M < 1:
            raise DimensionError("an inducing block needs at least one inducing point")
        if self.m.shape[0] != M or self.S_raw.shape != (self.m.shape[1], M, M):
            raise DimensionError(
                f"inconsistent block shapes: Z {tuple(self.Z.shape)}, m {tuple(self.m.shape)}, "
                f"S_raw {tuple(self.S_raw.shape)}"
            )

    @classmethod
    def initial(cls, Z, num_classes: int) -> "InducingBlock":
        """Zero means and identity covariances at inducing inputs ``Z``."""
        Z = as_tensor(Z).clone()
        M = Z.shape[0]
        S_raw = torch.diag_embed(torch.full((num_classes, M), INV_SOFTPLUS_ONE, dtype=Z.dtype))
        return cls(Z, torch.zeros(M, num_classes, dtype=Z.dtype), S_raw)

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def means(self) -> torch.Tensor:
        """(K, M) class-major means."""
        return self.m.T

    @property
    def chols(self) -> torch.Tensor:
        """(K, M, M) covariance factors."""
        return build_chol(self.S_raw)

    def marginal(self) -> GaussianDist:
        """Per-class N(m, S) of this block alone, batched over classes."""
        return GaussianDist(self.means, self.chols)

    def freeze(self) -> "InducingBlock":
        return InducingBlock(
            self.Z.detach().clone(), self.m.detach().clone(), self.S_raw.detach().clone(), True
        )


@dataclass
class ContinualState:
    """The full model after ``t`` tasks."""

    blocks: List[InducingBlock]
    hyper_q: DiagGaussian
    hyper_prev: DiagGaussian
    num_classes: int
    input_dim: int
    variant: str = "vargp"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.num_classes < 2:
            raise DimensionError("at least two classes are required")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for block in self.blocks[:-1]:
            if not block.frozen:
                raise ValueError("only the last inducing block may be unfrozen")

    @property
    def num_tasks(self) -> int:
        return len(self.blocks)

    @property
    def point_hypers(self) -> bool:
        return self.variant == "mle_hypers"

    def theta_sample(self, eps: Optional[torch.Tensor] = None) -> HyperParams:
        """Reparameterized hyperparameter draw (the mean for point estimates)."""
        if eps is None or self.point_hypers:
            return HyperParams.from_vector(self.hyper_q.mean)
        return HyperParams.from_vector(self.hyper_q.mean + self.hyper_q.std * eps)

    def with_blocks(self, blocks) -> "ContinualState":
        return replace(self, blocks=list(blocks))


def active_blocks(state: ContinualState) -> List[InducingBlock]:
    """Blocks that parametrize the current posterior over f."""
    if not state.blocks:
        raise ValueError("state has no inducing blocks")
    if state.variant == "global":
        return state.blocks[-1:]
    return state.blocks


def stacked_inputs(blocks) -> torch.Tensor:
    return torch.cat([b.Z for b in blocks], dim=0)


@dataclass
class PriorFactors:
    """Prior p(u | theta) over stacked inducing outputs and its conditionals.

    ``chol`` factors the jittered K_ZZ; ``conditionals[j]`` is ``(A_j, C_j chol)``
    for blocks ``j >= 1`` (``None`` for the first block).
    """

    Z: torch.Tensor
    chol: torch.Tensor
    sizes: List[int]
    conditionals: list


def prior_factors(theta: HyperParams, blocks) -> PriorFactors:
    """Factor the prior over all blocks with one jittered Cholesky.

    The Cholesky factor of the leading ``n`` rows of K_ZZ factors the leading
    principal block, so every conditional p(u_j | u_<j) is read off the
    single factor via :func:`vargp.gaussian.condition`.
    """
    Z = stacked_inputs(blocks)
    L = jittered_chol(eq_kernel(theta, Z), name="K_ZZ")
    sizes = [b.num_inducing for b in blocks]
    conditionals = [None]
    offset = sizes[0]
    zero_mean = L.new_zeros(L.shape[0])
    for size in sizes[1:]:
        end = offset + size
        sub = GaussianDist(zero_mean[:end], L[:end, :end])
        _, A, _, c_chol = condition(sub, offset)
        conditionals.append((A, c_chol))
        offset = end
    return PriorFactors(Z, L, sizes, conditionals)


def prior_conditional(theta: HyperParams, Z_new, Z_old):
    """``(A, C_chol)`` of p(u_new | u_old) = N(A u_old, C)."""
    Z_new, Z_old = as_tensor(Z_new), as_tensor(Z_old)
    if Z_old.shape[0] == 0:
        raise DimensionError("Z_old must be non-empty")
    if Z_new.shape[1] != Z_old.shape[1]:
        raise DimensionError("Z_new and Z_old have different input dimensions")
    Z = torch.cat([Z_old, Z_new], dim=0)
    L = jittered_chol(eq_kernel(theta, Z), name="K_[old,new]")
    _, A, _, c_chol = condition(GaussianDist(L.new_zeros(L.shape[0]), L), Z_old.shape[0])
    return A, c_chol


def fold_joint(blocks, factors: PriorFactors, coupled: bool = True) -> GaussianDist:
    """Variational joint over stacked blocks, batched over classes.

    With ``coupled=False`` the blocks are folded with zero coefficients,
    giving a block-diagonal covariance.
    """
    joint = blocks[0].marginal()
    for block, cond in zip(blocks[1:], factors.conditionals[1:]):
        A = cond[0]
        if not coupled:
            A = torch.zeros_like(A)
        joint = ar_join(joint, A, block.means, block.chols)
    return joint


def variational_joint(
    state: ContinualState, theta: HyperParams, class_k: Optional[int] = None, factors=None
) -> GaussianDist:
    """q(u_<=t | theta); all classes batched when ``class_k`` is None."""
    blocks = active_blocks(state)
    if factors is None:
        factors = prior_factors(theta, blocks)
    joint = fold_joint(blocks, factors, coupled=state.variant != "block_diag")
    if class_k is None:
        return joint
    return GaussianDist(joint.mean[class_k], joint.chol[class_k])


def predictive_marginals(state: ContinualState, theta: HyperParams, Xstar, factors=None):
    """Per-class predictive mean and variance of f at ``Xstar``.

    Returns two ``(K, P)`` tensors.
    """
    Xstar = as_tensor(Xstar)
    if Xstar.ndim != 2 or Xstar.shape[0] < 1:
        raise DimensionError(f"Xstar must be a non-empty matrix, got {tuple(Xstar.shape)}")
    blocks = active_blocks(state)
    if factors is None:
        factors = prior_factors(theta, blocks)
    q = fold_joint(blocks, factors, coupled=state.variant != "block_diag")
    L = factors.chol
    Kzs = eq_kernel(theta, factors.Z, Xstar)
    W = torch.linalg.solve_triangular(L, Kzs, upper=False)
    B = torch.linalg.solve_triangular(L.T, W, upper=True)
    mean = q.mean @ B
    proj = q.chol.transpose(-1, -2) @ B
    var = eq_kernel_diag(theta, Xstar) - (W**2).sum(0) + (proj**2).sum(-2)
    if bool((var < -NEG_VAR_TOL).any()):
        raise NumericalDegeneracyError(
            f"predictive variance {float(var.min()):.3e} below tolerance -{NEG_VAR_TOL:g}"
        )
    return mean, var.clamp_min(MIN_VAR)
