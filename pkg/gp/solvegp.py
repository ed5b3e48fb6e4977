"""
SOLVE-GP: sparse variational GP with a second, orthogonal inducing set O.

The prior splits into a part spanned by k(., Z) and an independent residual
process with covariance c(x, x') = k(x, x') - k(x, Z) K_uu^-1 k(Z, x'). The
variational posterior is q(u) q(v_perp) p_perp(f_perp | v_perp) with
v_perp = f_perp(O). Evaluating the bound needs two Cholesky factorizations,
of K_uu (size M) and of C_vv (size M2).

Prior covariances entering every formula are the jittered ones actually
factorized (L_u0 L_u0^T and L_v0 L_v0^T), so all derived quantities are
mutually consistent to round-off.
"""

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Tuple

import torch

from gp.errors import ArgumentError
from gp.exact_gp import GaussianDensity
from gp.kernels import KernelSpec, kernel_diag, kernel_matrix
from gp.linalg import DTYPE, as_tensor, column_sq_sum, cross_product, jitter_cholesky, matmul, tri_solve
from gp.svgp import SvgpState, check_batch, nystrom_terms, woodbury_log_density
from gp.variational import (
    CholeskyGaussian,
    GaussianLikelihood,
    expected_log_lik_gaussian,
    gaussian_log_density_from_cholesky,
    kl_to_prior,
    project_factor,
    variance_terms,
    whiten_map,
)
from performance.metrics import op_monitor

logger = logging.getLogger(__name__)


class OrthogonalMode(str, Enum):
    FREE = 'Free'
    ODVGP_FROZEN = 'OdvgpFrozen'


@dataclass
class SolveGpState:
    """Inducing sets Z and O, factors q(u) and q(v_perp), kernel, likelihood, mode flags"""
    Z: torch.Tensor
    O: torch.Tensor
    q_u: CholeskyGaussian
    q_v: CholeskyGaussian
    kernel: KernelSpec
    likelihood: GaussianLikelihood = field(default_factory=GaussianLikelihood)
    mode: OrthogonalMode = OrthogonalMode.FREE
    whitened: bool = False

    def __post_init__(self):
        self.Z = as_tensor(self.Z)
        self.O = as_tensor(self.O)
        self.mode = OrthogonalMode(self.mode)
        if self.Z.dim() != 2 or self.Z.shape[0] < 1:
            raise ArgumentError("Z must be a matrix with at least one inducing point")
        if self.O.numel() == 0:
            self.O = self.O.reshape(0, self.Z.shape[1])
        if self.O.dim() != 2 or self.O.shape[1] != self.Z.shape[1]:
            raise ArgumentError(f"O must have {self.Z.shape[1]} columns, got shape {tuple(self.O.shape)}")
        if self.q_u.dim != self.Z.shape[0]:
            raise ArgumentError(f"q_u has dimension {self.q_u.dim} but Z has {self.Z.shape[0]} points")
        if self.q_v.dim != self.O.shape[0]:
            raise ArgumentError(f"q_v has dimension {self.q_v.dim} but O has {self.O.shape[0]} points")

    @property
    def num_inducing(self) -> int:
        return self.Z.shape[0]

    @property
    def num_orthogonal(self) -> int:
        return self.O.shape[0]

    def with_params(self, **changes) -> 'SolveGpState':
        return replace(self, **changes)

    def to_svgp(self) -> SvgpState:
        return SvgpState(self.Z, self.q_u, self.kernel, self.likelihood, self.whitened)


@dataclass
class GramCache:
    """Kernel and orthogonal-covariance matrices for one evaluation"""
    K_uu: torch.Tensor
    L_u0: torch.Tensor
    K_uv: torch.Tensor
    A: torch.Tensor
    C_vv: torch.Tensor
    L_v0: torch.Tensor
    X: Optional[torch.Tensor] = None
    K_uf: Optional[torch.Tensor] = None
    B: Optional[torch.Tensor] = None
    C_vf: Optional[torch.Tensor] = None
    D: Optional[torch.Tensor] = None
    K_ff_diag: Optional[torch.Tensor] = None

    @property
    def num_orthogonal(self) -> int:
        return self.L_v0.shape[0]


@op_monitor
def build_gram_cache(state: SolveGpState, X_batch=None) -> GramCache:
    """Factorizations of K_uu and C_vv = K_vv - A^T A, plus the per-batch cross terms"""
    kernel = state.kernel
    K_uu = kernel_matrix(kernel, state.Z, state.Z)
    L_u0 = jitter_cholesky(K_uu)
    K_uv = kernel_matrix(kernel, state.Z, state.O)
    A = tri_solve(L_u0, K_uv)
    if state.num_orthogonal:
        C_vv = kernel_matrix(kernel, state.O, state.O) - cross_product(A, A)
    else:
        C_vv = K_uv.new_zeros((0, 0))
    L_v0 = jitter_cholesky(C_vv)
    cache = GramCache(K_uu=K_uu, L_u0=L_u0, K_uv=K_uv, A=A, C_vv=C_vv, L_v0=L_v0)
    if X_batch is None:
        return cache

    X = as_tensor(X_batch)
    K_uf = kernel_matrix(kernel, state.Z, X)
    B = tri_solve(L_u0, K_uf)
    if state.num_orthogonal:
        C_vf = kernel_matrix(kernel, state.O, X) - cross_product(A, B)
    else:
        C_vf = K_uf.new_zeros((0, X.shape[0]))
    D = tri_solve(L_v0, C_vf)
    cache.X = X
    cache.K_uf = K_uf
    cache.B = B
    cache.C_vf = C_vf
    cache.D = D
    cache.K_ff_diag = kernel_diag(kernel, X)
    return cache


def effective_qv(state: SolveGpState, cache: GramCache) -> CholeskyGaussian:
    """q(v_perp) as used by the bound; the frozen mode pins its scale to the prior"""
    if state.mode is OrthogonalMode.ODVGP_FROZEN:
        M2 = state.num_orthogonal
        scale = torch.eye(M2, dtype=DTYPE) if state.whitened else cache.L_v0
        return CholeskyGaussian(state.q_v.mean, scale)
    return state.q_v


def _orthogonal_block(state: SolveGpState, cache: GramCache, D: torch.Tensor):
    return project_factor(cache.L_v0, D, effective_qv(state, cache), state.whitened)


def marginal_q_f(state: SolveGpState, cache: GramCache, X_batch) -> Tuple[torch.Tensor, torch.Tensor]:
    """Mean and variance of q(f(x_n)) at every batch point"""
    if cache.B is None or cache.X is None or cache.X.shape != as_tensor(X_batch).shape:
        raise ArgumentError("gram cache was not built for this batch")
    mean, F = project_factor(cache.L_u0, cache.B, state.q_u, state.whitened)
    var = cache.K_ff_diag + variance_terms(F, cache.B)
    if state.num_orthogonal:
        mean_v, H = _orthogonal_block(state, cache, cache.D)
        mean = mean + mean_v
        var = var + variance_terms(H, cache.D)
    return mean, var.clamp_min(0.0)


def kl_terms(state: SolveGpState, cache: GramCache) -> Tuple[torch.Tensor, torch.Tensor]:
    kl_u = kl_to_prior(state.q_u, None if state.whitened else cache.L_u0)
    kl_v = kl_to_prior(effective_qv(state, cache), None if state.whitened else cache.L_v0)
    return kl_u, kl_v


@op_monitor
def solvegp_bound(state: SolveGpState, X, y, scale: float = 1.0) -> torch.Tensor:
    """scale * sum_n E_q[log p(y_n | f_n)] - KL[q(u) || p(u)] - KL[q(v_perp) || p_perp(v_perp)]"""
    X, y = check_batch(X, y, state.Z.shape[1])
    if scale < 1:
        raise ArgumentError(f"minibatch scale must be >= 1, got {scale}")
    cache = build_gram_cache(state, X)
    kl_u, kl_v = kl_terms(state, cache)
    if X.shape[0] == 0:
        return -kl_u - kl_v
    mean, var = marginal_q_f(state, cache, X)
    data_term = expected_log_lik_gaussian(y, mean, var, state.likelihood).sum()
    return scale * data_term - kl_u - kl_v


@op_monitor
def solvegp_predict(state: SolveGpState, Xstar) -> GaussianDensity:
    """
    mu* = K_*u K_uu^-1 m_u + C_*v C_vv^-1 m_v
    S*  = K_*u K_uu^-1 S_u K_uu^-1 K_u* + C_** - C_*v C_vv^-1 (C_vv - S_v) C_vv^-1 C_v*
    """
    Xstar = as_tensor(Xstar)
    cache = build_gram_cache(state, Xstar)
    mean, F = project_factor(cache.L_u0, cache.B, state.q_u, state.whitened)
    cov = kernel_matrix(state.kernel, Xstar, Xstar) + cross_product(F, F) - cross_product(cache.B, cache.B)
    if state.num_orthogonal:
        mean_v, H = _orthogonal_block(state, cache, cache.D)
        mean = mean + mean_v
        cov = cov + cross_product(H, H) - cross_product(cache.D, cache.D)
    return GaussianDensity(mean, cov)


def _orthogonal_terms(kernel: KernelSpec, Z, O, X):
    """Factors shared by the collapsed bounds and the optimal q(v_perp)"""
    Z = as_tensor(Z)
    O = as_tensor(O).reshape(-1, Z.shape[1])
    L_u0, B = nystrom_terms(kernel, Z, X)
    A = tri_solve(L_u0, kernel_matrix(kernel, Z, O))
    C_vv = kernel_matrix(kernel, O, O) - cross_product(A, A)
    L_v0 = jitter_cholesky(C_vv)
    C_vf = kernel_matrix(kernel, O, X) - cross_product(A, B)
    D = tri_solve(L_v0, C_vf)
    return L_u0, B, L_v0, D


@op_monitor
def collapsed_solvegp_bound(kernel: KernelSpec, Z, O, q_v: CholeskyGaussian, X, y,
                            likelihood: GaussianLikelihood, whitened: bool = False,
                            covariance_frozen: bool = False) -> torch.Tensor:
    """
    log N(y | C_fv C_vv^-1 m_v, Q_ff + s2 I) - tr(S_fperp) / (2 s2) - KL[N(m_v, S_v) || N(0, C_vv)]

    With covariance_frozen the scale of q_v is ignored and S_v = C_vv, which
    leaves tr(K_ff - Q_ff) / (2 s2) and m_v^T C_vv^-1 m_v / 2 as the penalties.
    Full batch and Gaussian likelihood only.
    """
    X, y = check_batch(X, y, as_tensor(Z).shape[1])
    s2 = as_tensor(likelihood.noise_variance)
    L_u0, B, L_v0, D = _orthogonal_terms(kernel, Z, O, X)
    if q_v.dim != L_v0.shape[0]:
        raise ArgumentError(f"q_v has dimension {q_v.dim} but O has {L_v0.shape[0]} points")

    if covariance_frozen:
        a = q_v.mean if whitened else tri_solve(L_v0, q_v.mean)
        mean_f = cross_product(D, a)
        extra_trace = torch.zeros((), dtype=DTYPE)
        kl_v = 0.5 * (a @ a)
    else:
        mean_f, H = project_factor(L_v0, D, q_v, whitened)
        extra_trace = variance_terms(H, D).sum()
        kl_v = kl_to_prior(q_v, None if whitened else L_v0)

    log_density, _ = woodbury_log_density(y - mean_f, B, s2)
    trace = kernel_diag(kernel, X).sum() - column_sq_sum(B).sum() + extra_trace
    return log_density - 0.5 * trace / s2 - kl_v


def _apply_noisy_nystrom_inverse(B: torch.Tensor, L_inner: torch.Tensor, s2, R: torch.Tensor) -> torch.Tensor:
    """(B^T B + s2 I)^-1 R by the matrix inversion lemma, never forming N x N"""
    inner = tri_solve(L_inner, tri_solve(L_inner, matmul(B, R)), transpose=True)
    return R / s2 - cross_product(B, inner) / (s2 * s2)


@op_monitor
def optimal_qv(kernel: KernelSpec, Z, O, X, y, likelihood: GaussianLikelihood) -> CholeskyGaussian:
    """
    Maximiser of the collapsed bound over q(v_perp), unwhitened:
        m_v* = C_vv [C_vv + C_vf A^-1 C_fv]^-1 C_vf A^-1 y,   A = Q_ff + s2 I
        S_v* = C_vv [C_vv + C_vf C_fv / s2]^-1 C_vv
    evaluated through D = L_v0 \\ C_vf, i.e. m_v* = L_v0 (I + D A^-1 D^T)^-1 D A^-1 y
    and S_v* = L_v0 (I + D D^T / s2)^-1 L_v0^T.
    """
    X, y = check_batch(X, y, as_tensor(Z).shape[1])
    s2 = as_tensor(likelihood.noise_variance)
    _, B, L_v0, D = _orthogonal_terms(kernel, Z, O, X)
    M2 = L_v0.shape[0]
    if M2 == 0:
        return CholeskyGaussian(torch.zeros(0, dtype=DTYPE), torch.zeros((0, 0), dtype=DTYPE))
    logger.debug(f"optimal q(v_perp) for M2 = {M2} on {X.shape[0]} points")
    eye = torch.eye(M2, dtype=DTYPE)
    L_inner = jitter_cholesky(torch.eye(B.shape[0], dtype=DTYPE) + matmul(B, B.T) / s2)

    rhs = torch.cat([D.T, y.unsqueeze(1)], dim=1)
    solved = _apply_noisy_nystrom_inverse(B, L_inner, s2, rhs)
    Ainv_Dt, Ainv_y = solved[:, :M2], solved[:, M2]
    L_P = jitter_cholesky(eye + matmul(D, Ainv_Dt))
    w = tri_solve(L_P, tri_solve(L_P, matmul(D, Ainv_y)), transpose=True)
    mean = matmul(L_v0, w)

    L_R = jitter_cholesky(eye + matmul(D, D.T) / s2)
    T = tri_solve(L_R, L_v0.T)
    S = cross_product(T, T)
    return CholeskyGaussian(mean, jitter_cholesky(0.5 * (S + S.T)))


def optimal_collapsed_bound(kernel: KernelSpec, Z, O, X, y, likelihood: GaussianLikelihood) -> torch.Tensor:
    """Collapsed bound at the optimal q(v_perp)"""
    q_star = optimal_qv(kernel, Z, O, X, y, likelihood)
    return collapsed_solvegp_bound(kernel, Z, O, q_star, X, y, likelihood)


@op_monitor
def tighter_bound_appendixA(kernel: KernelSpec, Z, X, y, likelihood: GaussianLikelihood,
                            form: str = 'woodbury') -> torch.Tensor:
    """
    log N(y | 0, Q_ff + s2 I) - tr[(Q_ff + s2 I)^-1 (K_ff - Q_ff)] / 2, the bound with
    q(u) set to the exact conditional p(u | f_perp, y).

    form='woodbury' evaluates the Titsias bound plus the non-negative correction
    tr[K_fu (K_uu + K_uf K_fu / s2)^-1 K_uf (K_ff - Q_ff)] / (2 s2^2); form='dense'
    factorizes the N x N matrix directly. Both need O(N^2) memory.
    """
    X, y = check_batch(X, y, as_tensor(Z).shape[1])
    s2 = as_tensor(likelihood.noise_variance)
    _, B = nystrom_terms(kernel, Z, X)
    N = X.shape[0]
    residual = kernel_matrix(kernel, X, X) - cross_product(B, B)

    if form == 'dense':
        logger.debug(f"dense tighter bound factorizes the full {N} x {N} matrix")
        L_A = jitter_cholesky(cross_product(B, B) + s2 * torch.eye(N, dtype=DTYPE))
        log_density = gaussian_log_density_from_cholesky(y, torch.zeros_like(y), L_A)
        Ainv_R = tri_solve(L_A, tri_solve(L_A, residual), transpose=True)
        return log_density - 0.5 * Ainv_R.diagonal().sum()
    if form != 'woodbury':
        raise ArgumentError(f"unknown form '{form}', expected 'woodbury' or 'dense'")

    log_density, L_inner = woodbury_log_density(y, B, s2)
    titsias = log_density - 0.5 * residual.diagonal().sum() / s2
    return titsias + 0.5 * nystrom_trace_correction(B, L_inner, residual) / (s2 * s2)


def nystrom_trace_correction(B: torch.Tensor, L_inner: torch.Tensor, residual: torch.Tensor) -> torch.Tensor:
    """tr[B^T (I + B B^T / s2)^-1 B R]; non-negative for PSD R"""
    V = tri_solve(L_inner, B)
    return (matmul(V, residual) * V).sum()


def _joint_prior_blocks(state: SolveGpState, cache: GramCache):
    W = tri_solve(cache.L_u0, cache.A, transpose=True)
    q_u = whiten_map(state.q_u, cache.L_u0) if state.whitened else state.q_u
    q_v = effective_qv(state, cache)
    if state.whitened:
        q_v = whiten_map(q_v, cache.L_v0)
    return W, q_u, q_v


def _assemble_joint(mean_u, mean_v, S_uu, S_uv, S_vv) -> GaussianDensity:
    mean = torch.cat([mean_u, mean_v])
    top = torch.cat([S_uu, S_uv], dim=1)
    bottom = torch.cat([S_uv.T, S_vv], dim=1)
    cov = torch.cat([top, bottom], dim=0)
    return GaussianDensity(mean, 0.5 * (cov + cov.T))


def structured_joint(state: SolveGpState) -> GaussianDensity:
    """q(u, v) over v = f(O) implied by q(u) q(v_perp)"""
    cache = build_gram_cache(state)
    W, q_u, q_v = _joint_prior_blocks(state, cache)
    S_u = q_u.covariance
    S_uv = S_u @ W
    return _assemble_joint(q_u.mean, q_v.mean + W.T @ q_u.mean, S_u, S_uv,
                           q_v.covariance + W.T @ S_u @ W)


def odvgp_joint(state: SolveGpState) -> GaussianDensity:
    """Joint q'(u, v) with bottom-right block K_vv + K_vu K_uu^-1 (S_u - K_uu) K_uu^-1 K_uv"""
    if state.mode is not OrthogonalMode.ODVGP_FROZEN:
        raise ArgumentError("odvgp_joint requires a state in OdvgpFrozen mode")
    cache = build_gram_cache(state)
    W, q_u, _ = _joint_prior_blocks(state, cache)
    K_uu = cache.L_u0 @ cache.L_u0.T
    K_vv = cache.L_v0 @ cache.L_v0.T + cross_product(cache.A, cache.A)
    mean_v = state.q_v.mean if not state.whitened else cache.L_v0 @ state.q_v.mean
    S_u = q_u.covariance
    return _assemble_joint(q_u.mean, mean_v + W.T @ q_u.mean, S_u, S_u @ W,
                           K_vv + W.T @ (S_u - K_uu) @ W)


def prior_state(kernel: KernelSpec, Z, O, likelihood: GaussianLikelihood,
                mode: OrthogonalMode = OrthogonalMode.FREE, whitened: bool = False) -> SolveGpState:
    """State with both factors at their priors"""
    Z = as_tensor(Z)
    O = as_tensor(O).reshape(-1, Z.shape[1])
    if whitened:
        q_u = CholeskyGaussian.standard(Z.shape[0])
        q_v = CholeskyGaussian.standard(O.shape[0])
    else:
        template = SolveGpState(Z, O, CholeskyGaussian.standard(Z.shape[0]),
                             CholeskyGaussian.standard(O.shape[0]), kernel, likelihood)
        cache = build_gram_cache(template)
        q_u = CholeskyGaussian.prior(cache.L_u0.detach())
        q_v = CholeskyGaussian.prior(cache.L_v0.detach())
    return SolveGpState(Z, O, q_u, q_v, kernel, likelihood, mode, whitened)
