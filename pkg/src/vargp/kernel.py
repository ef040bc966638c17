"""Exponentiated-quadratic ARD kernel and jittered Cholesky factorization."""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateKernelError, DimensionError
from .gaussian import as_tensor

JITTER_STEPS = (1e-8, 1e-6, 1e-4)


@dataclass(frozen=True)
class HyperParams:
    """Log-parametrized kernel hyperparameters.

    ``log_lengthscales`` has one entry per input dimension, or a single entry
    that is shared by all dimensions (isotropic kernel).
    """

    log_lengthscales: torch.Tensor
    log_scale: torch.Tensor

    def __post_init__(self):
        object.__setattr__(self, "log_lengthscales", as_tensor(self.log_lengthscales).reshape(-1))
        object.__setattr__(self, "log_scale", as_tensor(self.log_scale).reshape(()))

    @classmethod
    def from_vector(cls, theta) -> "HyperParams":
        """Split a flat ``[log_lengthscales..., log_scale]`` vector."""
        theta = as_tensor(theta)
        return cls(theta[:-1], theta[-1])

    def to_vector(self) -> torch.Tensor:
        return torch.cat([self.log_lengthscales, self.log_scale.reshape(1)])

    @property
    def lengthscales(self) -> torch.Tensor:
        return torch.exp(self.log_lengthscales)

    @property
    def scale(self) -> torch.Tensor:
        return torch.exp(self.log_scale)


def _scaled(theta: HyperParams, X: torch.Tensor) -> torch.Tensor:
    X = as_tensor(X)
    if X.ndim != 2:
        raise DimensionError(f"inputs must be a matrix, got shape {tuple(X.shape)}")
    n_ls = theta.log_lengthscales.shape[0]
    if n_ls not in (1, X.shape[1]):
        raise DimensionError(f"{n_ls} lengthscales for {X.shape[1]}-dimensional inputs")
    if not bool(torch.isfinite(X).all()):
        raise ValueError("kernel inputs contain non-finite values")
    return X * torch.exp(-theta.log_lengthscales)


def eq_kernel(theta: HyperParams, X, Y=None) -> torch.Tensor:
    """``k(x, y) = scale * exp(-0.5 * sum_d ((x_d - y_d) / l_d) ** 2)``.

    With ``Y`` omitted the symmetric matrix ``k(X, X)`` is returned, with an
    exactly zero distance on the diagonal.
    """
    if not bool(torch.isfinite(theta.to_vector()).all()):
        raise ValueError("hyperparameters contain non-finite values")
    xs = _scaled(theta, X)
    ys = xs if Y is None else _scaled(theta, Y)
    sq = (xs**2).sum(-1, keepdim=True) + (ys**2).sum(-1) - 2.0 * xs @ ys.T
    if Y is None:
        sq = 0.5 * (sq + sq.T)
        sq = sq - torch.diag_embed(torch.diagonal(sq))
    sq = sq.clamp_min(0.0)
    return theta.scale * torch.exp(-0.5 * sq)


def eq_kernel_diag(theta: HyperParams, X) -> torch.Tensor:
    """Diagonal of ``eq_kernel(theta, X)``; constant for a stationary kernel."""
    X = as_tensor(X)
    return theta.scale * X.new_ones(X.shape[0])


def jittered_chol(K, name: str = "K") -> torch.Tensor:
    """Cholesky factor of ``K + eps * I`` with escalating ``eps``.

    ``eps`` runs through ``JITTER_STEPS`` times the mean of diag(K); batched
    inputs escalate together.
    """
    K = as_tensor(K)
    n = K.shape[-1]
    eye = torch.eye(n, dtype=K.dtype)
    mean_diag = torch.diagonal(K, dim1=-2, dim2=-1).mean(-1)[..., None, None]
    for step in JITTER_STEPS:
        L, info = torch.linalg.cholesky_ex(K + step * mean_diag * eye)
        if not bool((info != 0).any()) and bool(torch.isfinite(L).all()):
            return L
    raise DegenerateKernelError(
        f"matrix {name!r} ({n}x{n}) is not positive definite even with jitter "
        f"{JITTER_STEPS[-1]:g} * mean(diag)"
    )
