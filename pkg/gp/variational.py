"""
Gaussian variational factors, KL divergences to zero-mean priors, expected
log-likelihoods and the whitening transform shared by SVGP and SOLVE-GP.
"""

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Tuple, Union

import numpy as np
import torch

from gp.errors import ArgumentError
from gp.linalg import DTYPE, as_tensor, column_sq_sum, cross_product, logdet_from_cholesky, scalar_value, tri_solve

DEFAULT_QUADRATURE_NODES = 20
_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class CholeskyGaussian:
    """N(mean, scale scale^T) with lower-triangular scale"""
    mean: torch.Tensor
    scale: torch.Tensor

    def __post_init__(self):
        self.mean = as_tensor(self.mean).reshape(-1)
        self.scale = as_tensor(self.scale)
        n = self.mean.shape[0]
        if self.scale.shape != (n, n):
            raise ArgumentError(f"scale shape {tuple(self.scale.shape)} does not match mean length {n}")

    @property
    def dim(self) -> int:
        return self.mean.shape[0]

    @property
    def covariance(self) -> torch.Tensor:
        return self.scale @ self.scale.T

    def validate(self):
        if not torch.equal(self.scale, torch.tril(self.scale)):
            raise ArgumentError("scale must be lower-triangular")
        if self.dim and not bool((self.scale.diagonal() > 0).all()):
            raise ArgumentError("scale must have a strictly positive diagonal")

    def detach(self) -> 'CholeskyGaussian':
        return CholeskyGaussian(self.mean.detach().clone(), self.scale.detach().clone())

    @classmethod
    def prior(cls, prior_scale: torch.Tensor) -> 'CholeskyGaussian':
        """Factor equal to N(0, L0 L0^T)"""
        prior_scale = as_tensor(prior_scale)
        return cls(torch.zeros(prior_scale.shape[0], dtype=DTYPE), prior_scale.detach().clone())

    @classmethod
    def standard(cls, dim: int) -> 'CholeskyGaussian':
        """Whitened prior N(0, I)"""
        return cls(torch.zeros(dim, dtype=DTYPE), torch.eye(dim, dtype=DTYPE))


@dataclass(frozen=True)
class GaussianLikelihood:
    noise_variance: Union[float, torch.Tensor] = 0.1

    def __post_init__(self):
        if not scalar_value(self.noise_variance) > 0:
            raise ArgumentError(f"noise_variance must be positive, got {scalar_value(self.noise_variance)}")

    def log_density(self, y, f) -> torch.Tensor:
        s2 = as_tensor(self.noise_variance)
        r = as_tensor(y) - as_tensor(f)
        return -0.5 * (_LOG_2PI + torch.log(s2)) - 0.5 * r * r / s2


def kl_to_prior(q: CholeskyGaussian, prior_scale: Optional[torch.Tensor]) -> torch.Tensor:
    """KL[N(m, L L^T) || N(0, L0 L0^T)]; prior_scale None means the identity."""
    M = q.dim
    if M == 0:
        return torch.zeros((), dtype=DTYPE)
    if prior_scale is None:
        P, a = q.scale, q.mean
        log_det_term = -torch.log(q.scale.diagonal()).sum()
    else:
        if prior_scale.shape != (M, M):
            raise ArgumentError(f"prior scale {tuple(prior_scale.shape)} does not match factor dim {M}")
        P = tri_solve(prior_scale, q.scale)
        a = tri_solve(prior_scale, q.mean)
        log_det_term = torch.log(prior_scale.diagonal()).sum() - torch.log(q.scale.diagonal()).sum()
    return log_det_term + 0.5 * ((P * P).sum() + a @ a - M)


def expected_log_lik_gaussian(y, mu, var_q, lik: GaussianLikelihood) -> torch.Tensor:
    """E_{f ~ N(mu, var_q)} log N(y | f, s2), elementwise"""
    s2 = as_tensor(lik.noise_variance)
    return lik.log_density(y, mu) - 0.5 * as_tensor(var_q) / s2


@lru_cache(maxsize=16)
def _hermgauss(nodes: int) -> Tuple[np.ndarray, np.ndarray]:
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return x, w


def gauss_hermite(nodes: int = DEFAULT_QUADRATURE_NODES) -> Tuple[torch.Tensor, torch.Tensor]:
    """Nodes and weights for E_{e ~ N(0,1)} g(e) ~= sum_i w_i g(x_i)"""
    if nodes < 1:
        raise ArgumentError(f"quadrature needs at least one node, got {nodes}")
    x, w = _hermgauss(int(nodes))
    return (torch.as_tensor(x * math.sqrt(2.0), dtype=DTYPE),
            torch.as_tensor(w / math.sqrt(math.pi), dtype=DTYPE))


def expected_log_lik_quadrature(y, mu, var_q, log_density: Callable[[torch.Tensor, torch.Tensor], torch.Tensor],
                                nodes: int = DEFAULT_QUADRATURE_NODES) -> torch.Tensor:
    """Gauss-Hermite estimate of E_{f ~ N(mu, var_q)} log p(y | f)"""
    x, w = gauss_hermite(nodes)
    y = as_tensor(y)
    mu = as_tensor(mu)
    std = torch.sqrt(as_tensor(var_q).clamp_min(0.0))
    f = mu.unsqueeze(-1) + std.unsqueeze(-1) * x
    values = log_density(y.unsqueeze(-1), f)
    return (values * w).sum(dim=-1)


def whiten_map(q_white: CholeskyGaussian, prior_scale: torch.Tensor) -> CholeskyGaussian:
    """Whitened (m, L) -> unwhitened (L0 m, L0 L); L0 L is lower with positive diagonal"""
    if q_white.dim == 0:
        return q_white
    return CholeskyGaussian(prior_scale @ q_white.mean, prior_scale @ q_white.scale)


def unwhiten_inverse(q: CholeskyGaussian, prior_scale: torch.Tensor) -> CholeskyGaussian:
    """Inverse of whiten_map"""
    if q.dim == 0:
        return q
    return CholeskyGaussian(tri_solve(prior_scale, q.mean), tri_solve(prior_scale, q.scale))


def project_factor(prior_scale: torch.Tensor, projected: torch.Tensor, q: CholeskyGaussian,
                   whitened: bool) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    One variational block of the marginal computation.

    `projected` is L0 \\ K_block,f. Returns the mean contribution and the factor F
    whose column sums of squares give the variational variance term:
    unwhitened E = L0^T \\ projected, mean E^T m, F = L^T E; whitened mean
    projected^T m, F = L^T projected.
    """
    if whitened:
        E = projected
    else:
        E = tri_solve(prior_scale, projected, transpose=True)
    return cross_product(E, q.mean), cross_product(q.scale, E)


def variance_terms(F: torch.Tensor, projected: torch.Tensor) -> torch.Tensor:
    """rowsq(F) - rowsq(projected) in the notation of the Cholesky algorithm"""
    return column_sq_sum(F) - column_sq_sum(projected)


def gaussian_log_density_from_cholesky(y: torch.Tensor, mean: torch.Tensor, L: torch.Tensor) -> torch.Tensor:
    """log N(y | mean, L L^T)"""
    a = tri_solve(L, y - mean)
    n = y.shape[0]
    return -0.5 * (n * _LOG_2PI + logdet_from_cholesky(L) + a @ a)


def prior_factor(prior_scale: torch.Tensor, whitened: bool) -> CholeskyGaussian:
    """Default initialisation: the prior, in the requested parameterization"""
    if whitened:
        return CholeskyGaussian.standard(prior_scale.shape[0])
    return CholeskyGaussian.prior(prior_scale)
