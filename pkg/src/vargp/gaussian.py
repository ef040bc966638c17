"""Multivariate Gaussian algebra on Cholesky factors.

Every covariance is carried as a lower-triangular factor ``L`` with
``cov = L @ L.T``.  All routines accept optional leading batch dimensions
(``mean`` of shape ``(..., n)``, ``chol`` of shape ``(..., n, n)``), which is
how the per-class quantities of the model are handled.

Tensors are float64 throughout; the functions are differentiable with torch
autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .errors import DimensionError, NumericalDegeneracyError

DTYPE = torch.float64

#: ``softplus(INV_SOFTPLUS_ONE) == 1``; raw diagonal value giving an identity factor.
INV_SOFTPLUS_ONE = math.log(math.e - 1.0)


def as_tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x if x.dtype == DTYPE else x.to(DTYPE)
    return torch.as_tensor(x, dtype=DTYPE)


def _check_finite(x: torch.Tensor, what: str) -> None:
    if not bool(torch.isfinite(x).all()):
        raise ValueError(f"{what} contains non-finite values")


@dataclass(frozen=True)
class GaussianDist:
    """N(mean, chol @ chol.T) with ``chol`` lower-triangular, positive diagonal."""

    mean: torch.Tensor
    chol: torch.Tensor

    def __post_init__(self):
        mean, chol = as_tensor(self.mean), as_tensor(self.chol)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "chol", chol)
        if chol.ndim < 2 or chol.shape[-1] != chol.shape[-2]:
            raise DimensionError(f"chol must be square, got shape {tuple(chol.shape)}")
        if mean.shape[-1:] != chol.shape[-1:]:
            raise DimensionError(
                f"mean length {mean.shape[-1]} does not match chol dimension {chol.shape[-1]}"
            )
        with torch.no_grad():
            if not bool((torch.diagonal(chol, dim1=-2, dim2=-1) > 0).all()):
                raise NumericalDegeneracyError("chol diagonal must be strictly positive")
            if bool((torch.triu(chol, diagonal=1) != 0).any()):
                raise DimensionError("chol must be lower-triangular")

    @property
    def dim(self) -> int:
        return self.chol.shape[-1]

    @property
    def covariance(self) -> torch.Tensor:
        return self.chol @ self.chol.transpose(-1, -2)

    def detach(self) -> "GaussianDist":
        return GaussianDist(self.mean.detach(), self.chol.detach())


@dataclass(frozen=True)
class DiagGaussian:
    """Mean-field Gaussian N(mean, diag(exp(log_std) ** 2))."""

    mean: torch.Tensor
    log_std: torch.Tensor

    def __post_init__(self):
        mean, log_std = as_tensor(self.mean), as_tensor(self.log_std)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "log_std", log_std)
        if mean.shape != log_std.shape:
            raise DimensionError(
                f"mean shape {tuple(mean.shape)} != log_std shape {tuple(log_std.shape)}"
            )

    @property
    def dim(self) -> int:
        return self.mean.shape[-1]

    @property
    def std(self) -> torch.Tensor:
        return torch.exp(self.log_std)

    def detach(self) -> "DiagGaussian":
        return DiagGaussian(self.mean.detach().clone(), self.log_std.detach().clone())

    def to_full(self) -> GaussianDist:
        return GaussianDist(self.mean, torch.diag_embed(self.std))


def build_chol(raw) -> torch.Tensor:
    """Map an unconstrained square matrix to a valid Cholesky factor.

    The strictly-lower triangle is passed through, the diagonal goes through
    ``softplus`` and the upper triangle is discarded.
    """
    raw = as_tensor(raw)
    if raw.ndim < 2 or raw.shape[-1] != raw.shape[-2]:
        raise DimensionError(f"raw must be square, got shape {tuple(raw.shape)}")
    tri = torch.tril(raw)
    _check_finite(tri, "raw Cholesky parameters")
    diag = torch.diagonal(tri, dim1=-2, dim2=-1)
    return torch.tril(tri, diagonal=-1) + torch.diag_embed(F.softplus(diag))


def inverse_build_chol(chol) -> torch.Tensor:
    """Raw parameters ``r`` with ``build_chol(r) == chol``."""
    chol = as_tensor(chol)
    diag = torch.diagonal(chol, dim1=-2, dim2=-1)
    # softplus^{-1}(y) = y + log(-expm1(-y)), stable for large y
    raw_diag = diag + torch.log(-torch.expm1(-diag))
    return torch.tril(chol, diagonal=-1) + torch.diag_embed(raw_diag)


def _logdet(chol: torch.Tensor) -> torch.Tensor:
    return 2.0 * torch.log(torch.diagonal(chol, dim1=-2, dim2=-1)).sum(-1)


def kl_full(q: GaussianDist, p: GaussianDist) -> torch.Tensor:
    """KL[q || p] between full-covariance Gaussians.

    Computed with triangular solves against ``p.chol``; never inverts a
    covariance explicitly.
    """
    if q.dim != p.dim:
        raise DimensionError(f"dimension mismatch: q has {q.dim}, p has {p.dim}")
    n = q.dim
    batch = torch.broadcast_shapes(
        p.chol.shape[:-2], q.chol.shape[:-2], p.mean.shape[:-1], q.mean.shape[:-1]
    )
    lp = p.chol.expand(*batch, n, n)
    lq = q.chol.expand(*batch, n, n)
    m = torch.linalg.solve_triangular(lp, lq, upper=False)
    trace = (m**2).sum((-1, -2))
    diff = (p.mean - q.mean).expand(*batch, n).unsqueeze(-1)
    d = torch.linalg.solve_triangular(lp, diff, upper=False)
    maha = (d**2).sum((-1, -2))
    return 0.5 * (trace + maha - n + _logdet(lp) - _logdet(lq))


def kl_diag(q: DiagGaussian, p: DiagGaussian) -> torch.Tensor:
    """KL[q || p] for mean-field Gaussians, summed over dimensions."""
    if q.mean.shape != p.mean.shape:
        raise DimensionError(
            f"length mismatch: q has {tuple(q.mean.shape)}, p has {tuple(p.mean.shape)}"
        )
    var_ratio = torch.exp(2.0 * (q.log_std - p.log_std))
    maha = ((q.mean - p.mean) * torch.exp(-p.log_std)) ** 2
    return 0.5 * (var_ratio + maha - 1.0).sum(-1) + (p.log_std - q.log_std).sum(-1)


def log_prob(dist: GaussianDist, x: torch.Tensor) -> torch.Tensor:
    """Log density of ``dist`` at ``x`` (broadcast over leading dims)."""
    x = as_tensor(x)
    diff = (x - dist.mean).unsqueeze(-1)
    chol = dist.chol.expand(*diff.shape[:-2], dist.dim, dist.dim)
    white = torch.linalg.solve_triangular(chol, diff, upper=False).squeeze(-1)
    return -0.5 * (white**2).sum(-1) - 0.5 * _logdet(chol) - 0.5 * dist.dim * math.log(2 * math.pi)


def condition(joint: GaussianDist, k: int):
    """Factor ``joint`` as p(first k) * N(rest; A @ first + b, C).

    Returns ``(marginal, A, b, cond_chol)`` with ``C = cond_chol @ cond_chol.T``.
    The blocks are read directly off the joint Cholesky factor: the leading
    block of ``L`` factors the marginal, ``A = L21 @ inv(L11)`` and ``L22``
    factors the Schur complement.
    """
    n = joint.dim
    if not 0 < k < n:
        raise DimensionError(f"split index must satisfy 0 < k < {n}, got {k}")
    chol = joint.chol
    l11 = chol[..., :k, :k]
    l21 = chol[..., k:, :k]
    l22 = chol[..., k:, k:]
    coeffs = torch.linalg.solve_triangular(l11, l21, upper=False, left=False)
    if not bool(torch.isfinite(coeffs).all()):
        raise NumericalDegeneracyError("leading block of the joint is singular")
    mu1, mu2 = joint.mean[..., :k], joint.mean[..., k:]
    shift = mu2 - (coeffs @ mu1.unsqueeze(-1)).squeeze(-1)
    return GaussianDist(mu1, l11), coeffs, shift, l22


def ar_join(prev: GaussianDist, coeffs, m, s_chol) -> GaussianDist:
    """Joint of ``prev`` and N(new; coeffs @ prev + m, s_chol @ s_chol.T).

    The joint covariance ``[[S_p, S_p A^T], [A S_p, S + A S_p A^T]]`` has the
    exact lower-triangular factor ``[[L_p, 0], [A L_p, L_s]]``, so no
    refactorization (and no jitter) is needed.
    """
    coeffs, m, s_chol = as_tensor(coeffs), as_tensor(m), as_tensor(s_chol)
    n_prev, n_new = prev.dim, m.shape[-1]
    if coeffs.shape[-2:] != (n_new, n_prev):
        raise DimensionError(
            f"coeffs must have shape ({n_new}, {n_prev}), got {tuple(coeffs.shape[-2:])}"
        )
    if s_chol.shape[-2:] != (n_new, n_new):
        raise DimensionError(f"s_chol must be {n_new}x{n_new}, got {tuple(s_chol.shape[-2:])}")
    batch = torch.broadcast_shapes(
        prev.mean.shape[:-1], coeffs.shape[:-2], m.shape[:-1], s_chol.shape[:-2]
    )
    lp = prev.chol.expand(*batch, n_prev, n_prev)
    mu_p = prev.mean.expand(*batch, n_prev)
    a = coeffs.expand(*batch, n_new, n_prev)
    mu_new = (a @ mu_p.unsqueeze(-1)).squeeze(-1) + m
    top = torch.cat([lp, lp.new_zeros(*batch, n_prev, n_new)], dim=-1)
    bottom = torch.cat([a @ lp, s_chol.expand(*batch, n_new, n_new)], dim=-1)
    chol = torch.cat([top, bottom], dim=-2)
    return GaussianDist(torch.cat([mu_p, mu_new], dim=-1), chol)


def sample_reparam(dist, noise) -> torch.Tensor:
    """Reparameterized draw ``mean + L @ noise`` (or ``mean + std * noise``)."""
    noise = as_tensor(noise)
    if noise.shape[-1] != dist.dim:
        raise DimensionError(f"noise length {noise.shape[-1]} != dimension {dist.dim}")
    if isinstance(dist, DiagGaussian):
        return dist.mean + dist.std * noise
    return dist.mean + (dist.chol @ noise.unsqueeze(-1)).squeeze(-1)
