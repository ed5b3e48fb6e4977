"""
Sparse variational GP with a single inducing set Z.

The uncollapsed bound follows the Cholesky algorithm with the orthogonal
block removed (one factorization of size M per evaluation); the collapsed
bound is the optimal-q(u) form for a Gaussian likelihood on the full batch.
"""

import math
from dataclasses import dataclass, field, replace
from typing import Tuple

import torch

from gp.errors import ArgumentError
from gp.exact_gp import GaussianDensity
from gp.kernels import KernelSpec, kernel_diag, kernel_matrix
from gp.linalg import (
    DTYPE,
    as_tensor,
    column_sq_sum,
    cross_product,
    jitter_cholesky,
    logdet_from_cholesky,
    matmul,
    tri_solve,
)
from gp.variational import (
    CholeskyGaussian,
    GaussianLikelihood,
    expected_log_lik_gaussian,
    kl_to_prior,
    project_factor,
    variance_terms,
)
from performance.metrics import op_monitor

_LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class SvgpState:
    """Inducing inputs Z, variational factor q(u), kernel, likelihood"""
    Z: torch.Tensor
    q_u: CholeskyGaussian
    kernel: KernelSpec
    likelihood: GaussianLikelihood = field(default_factory=GaussianLikelihood)
    whitened: bool = False

    def __post_init__(self):
        self.Z = as_tensor(self.Z)
        if self.Z.dim() != 2 or self.Z.shape[0] < 1:
            raise ArgumentError("Z must be a matrix with at least one inducing point")
        if self.q_u.dim != self.Z.shape[0]:
            raise ArgumentError(f"q_u has dimension {self.q_u.dim} but there are {self.Z.shape[0]} inducing points")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    def with_params(self, **changes) -> 'SvgpState':
        return replace(self, **changes)


def check_batch(X, y, input_dim: int) -> Tuple[torch.Tensor, torch.Tensor]:
    X = as_tensor(X)
    y = as_tensor(y).reshape(-1)
    if X.dim() == 1 and X.shape[0] == 0:
        X = X.reshape(0, input_dim)
    if X.dim() != 2 or X.shape[0] != y.shape[0]:
        raise ArgumentError(f"expected X of shape (N, d) and y of length N, got {tuple(X.shape)} and {y.shape[0]}")
    if X.shape[1] != input_dim:
        raise ArgumentError(f"input dimension mismatch: data has {X.shape[1]}, model has {input_dim}")
    return X, y


def svgp_marginals_with_factor(state: SvgpState, L_u0: torch.Tensor, X: torch.Tensor):
    """Per-point mean and variance of q(f(x_n)) given the factor of K_uu"""
    B = tri_solve(L_u0, kernel_matrix(state.kernel, state.Z, X))
    mean, F = project_factor(L_u0, B, state.q_u, state.whitened)
    var = kernel_diag(state.kernel, X) + variance_terms(F, B)
    return mean, var.clamp_min(0.0)


def _kl_u(state: SvgpState, L_u0: torch.Tensor) -> torch.Tensor:
    return kl_to_prior(state.q_u, None if state.whitened else L_u0)


@op_monitor
def svgp_bound(state: SvgpState, X, y, scale: float = 1.0) -> torch.Tensor:
    """scale * sum_n E_q[log p(y_n | f_n)] - KL[q(u) || p(u)]"""
    X, y = check_batch(X, y, state.Z.shape[1])
    if scale < 1:
        raise ArgumentError(f"minibatch scale must be >= 1, got {scale}")
    L_u0 = jitter_cholesky(kernel_matrix(state.kernel, state.Z, state.Z))
    kl = _kl_u(state, L_u0)
    if X.shape[0] == 0:
        return -kl
    mean, var = svgp_marginals_with_factor(state, L_u0, X)
    data_term = expected_log_lik_gaussian(y, mean, var, state.likelihood).sum()
    return scale * data_term - kl


def svgp_marginals(state: SvgpState, X) -> Tuple[torch.Tensor, torch.Tensor]:
    X = as_tensor(X)
    L_u0 = jitter_cholesky(kernel_matrix(state.kernel, state.Z, state.Z))
    return svgp_marginals_with_factor(state, L_u0, X)


@op_monitor
def svgp_predict(state: SvgpState, Xstar) -> GaussianDensity:
    """Joint predictive N(K_*u K_uu^-1 m_u, K_** - Q_** + K_*u K_uu^-1 S_u K_uu^-1 K_u*)"""
    Xstar = as_tensor(Xstar)
    L_u0 = jitter_cholesky(kernel_matrix(state.kernel, state.Z, state.Z))
    B = tri_solve(L_u0, kernel_matrix(state.kernel, state.Z, Xstar))
    mean, F = project_factor(L_u0, B, state.q_u, state.whitened)
    cov = kernel_matrix(state.kernel, Xstar, Xstar) + cross_product(F, F) - cross_product(B, B)
    return GaussianDensity(mean, cov)


def nystrom_terms(kernel: KernelSpec, Z, X):
    """L_u0 and B = L_u0 \\ K_uf; Q_ff = B^T B"""
    Z = as_tensor(Z)
    L_u0 = jitter_cholesky(kernel_matrix(kernel, Z, Z))
    B = tri_solve(L_u0, kernel_matrix(kernel, Z, X))
    return L_u0, B


def woodbury_log_density(residual: torch.Tensor, B: torch.Tensor, noise_variance) -> Tuple[torch.Tensor, torch.Tensor]:
    """
    log N(residual | 0, B^T B + s2 I) through the M x M inner matrix
    I + B B^T / s2. Returns the log density and the inner factor.
    """
    s2 = as_tensor(noise_variance)
    M, N = B.shape
    inner = torch.eye(M, dtype=DTYPE) + matmul(B, B.T) / s2
    L_inner = jitter_cholesky(inner)
    c = tri_solve(L_inner, matmul(B, residual)) / s2
    quad = residual @ residual / s2 - c @ c
    logdet = N * torch.log(s2) + logdet_from_cholesky(L_inner)
    return -0.5 * (N * _LOG_2PI + logdet + quad), L_inner


@op_monitor
def titsias_collapsed_bound(kernel: KernelSpec, Z, X, y, likelihood: GaussianLikelihood) -> torch.Tensor:
    """log N(y | 0, Q_ff + s2 I) - tr(K_ff - Q_ff) / (2 s2), full batch only"""
    X, y = check_batch(X, y, as_tensor(Z).shape[1])
    if X.shape[0] == 0:
        return torch.zeros((), dtype=DTYPE)
    s2 = as_tensor(likelihood.noise_variance)
    _, B = nystrom_terms(kernel, Z, X)
    log_density, _ = woodbury_log_density(y, B, s2)
    trace = kernel_diag(kernel, X).sum() - column_sq_sum(B).sum()
    return log_density - 0.5 * trace / s2
