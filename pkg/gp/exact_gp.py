"""
Dense exact GP regression, the ground-truth oracle for every bound.

Cubic in N; intended for N <= 2000 (not enforced).
"""

import math
from dataclasses import dataclass
from typing import Optional

import torch

from gp.errors import ArgumentError
from gp.kernels import KernelSpec, kernel_matrix
from gp.linalg import as_tensor, cross_product, jitter_cholesky, tri_solve
from gp.variational import gaussian_log_density_from_cholesky


@dataclass
class GaussianDensity:
    """Mean and covariance; the lower factor is computed on demand"""
    mean: torch.Tensor
    covariance: torch.Tensor
    _scale: Optional[torch.Tensor] = None

    @property
    def scale(self) -> torch.Tensor:
        if self._scale is None:
            self._scale = jitter_cholesky(self.covariance)
        return self._scale

    @property
    def variance(self) -> torch.Tensor:
        return self.covariance.diagonal()


def _check_data(X, y, noise_variance):
    X = as_tensor(X)
    y = as_tensor(y).reshape(-1)
    if X.dim() != 2 or X.shape[0] != y.shape[0]:
        raise ArgumentError(f"expected X of shape (N, d) and y of length N, got {tuple(X.shape)} and {y.shape[0]}")
    if not float(noise_variance) > 0:
        raise ArgumentError("noise_variance must be positive")
    return X, y


def _noisy_cholesky(spec: KernelSpec, X: torch.Tensor, noise_variance) -> torch.Tensor:
    K = kernel_matrix(spec, X, X)
    K = K + as_tensor(noise_variance) * torch.eye(X.shape[0], dtype=K.dtype)
    return jitter_cholesky(K)


def dense_log_marginal(spec: KernelSpec, X, y, noise_variance) -> torch.Tensor:
    """log N(y | 0, K_ff + s2 I)"""
    X, y = _check_data(X, y, noise_variance)
    if X.shape[0] == 0:
        return torch.zeros((), dtype=y.dtype)
    L = _noisy_cholesky(spec, X, noise_variance)
    return gaussian_log_density_from_cholesky(y, torch.zeros_like(y), L)


def exact_posterior(spec: KernelSpec, X, y, noise_variance, Xstar) -> GaussianDensity:
    """p(f* | y): mean K_*f (K_ff + s2 I)^-1 y, covariance K_** - K_*f (K_ff + s2 I)^-1 K_f*"""
    X, y = _check_data(X, y, noise_variance)
    Xstar = as_tensor(Xstar)
    K_ss = kernel_matrix(spec, Xstar, Xstar)
    if X.shape[0] == 0:
        return GaussianDensity(torch.zeros(Xstar.shape[0], dtype=K_ss.dtype), K_ss)
    L = _noisy_cholesky(spec, X, noise_variance)
    K_fs = kernel_matrix(spec, X, Xstar)
    V = tri_solve(L, K_fs)
    alpha = tri_solve(L, y)
    return GaussianDensity(cross_product(V, alpha), K_ss - cross_product(V, V))


def exact_predictive_log_density(spec: KernelSpec, X, y, noise_variance, Xstar, ystar) -> torch.Tensor:
    """Mean over test points of log N(y* | mu*, var* + s2)"""
    post = exact_posterior(spec, X, y, noise_variance, Xstar)
    var = post.variance.clamp_min(0.0) + as_tensor(noise_variance)
    r = as_tensor(ystar).reshape(-1) - post.mean
    return (-0.5 * (math.log(2.0 * math.pi) + torch.log(var) + r * r / var)).mean()
