"""
Unit tests for the SOLVE-GP bound, predictive, collapsed bounds and joint views.
"""

import logging
import re

import numpy as np
import pytest
import torch

from gp.errors import ArgumentError
from gp.exact_gp import dense_log_marginal
from gp.kernels import kernel_matrix
from gp.linalg import JITTER_MAX, JITTER_START, jitter_cholesky, jitter_scope
from gp.solvegp import (
    OrthogonalMode,
    SolveGpState,
    build_gram_cache,
    collapsed_solvegp_bound,
    kl_terms,
    marginal_q_f,
    nystrom_trace_correction,
    odvgp_joint,
    optimal_collapsed_bound,
    optimal_qv,
    prior_state,
    solvegp_bound,
    solvegp_predict,
    structured_joint,
    tighter_bound_appendixA,
)
from gp.svgp import SvgpState, nystrom_terms, svgp_bound, svgp_predict, titsias_collapsed_bound
from gp.variational import (
    CholeskyGaussian,
    GaussianLikelihood,
    expected_log_lik_gaussian,
    expected_log_lik_quadrature,
    whiten_map,
)
from performance.metrics import count_ops
from tests.oracles import (
    dense_collapsed_solvegp,
    dense_optimal_qv,
    dense_tighter_bound,
    gaussian_kl,
    random_factor,
    random_instance,
    random_solvegp_state,
)

pytestmark = pytest.mark.unit


def instance_for(seed, max_n=30, max_m=5, max_m2=4):
    rng = np.random.default_rng(500 + seed)
    return random_instance(seed, N=int(rng.integers(8, max_n + 1)), M=int(rng.integers(1, max_m + 1)),
                           M2=int(rng.integers(1, max_m2 + 1)), d=int(rng.integers(1, 4)))


def with_prior_qv(state: SolveGpState) -> SolveGpState:
    if state.whitened:
        return state.with_params(q_v=CholeskyGaussian.standard(state.num_orthogonal))
    return state.with_params(q_v=CholeskyGaussian.prior(build_gram_cache(state).L_v0))


def svgp_over_joint(state: SolveGpState) -> SvgpState:
    joint = structured_joint(state)
    q = CholeskyGaussian(joint.mean, torch.linalg.cholesky(joint.covariance))
    return SvgpState(torch.cat([state.Z, state.O]), q, state.kernel, state.likelihood)


class TestSolveGpState:
    """Test state validation and conversions."""

    def test_orthogonal_columns_must_match(self, instance):
        """Test O must live in the same input space as Z."""
        with pytest.raises(ArgumentError):
            SolveGpState(instance.Z, np.zeros((2, 3)), CholeskyGaussian.standard(len(instance.Z)),
                         CholeskyGaussian.standard(2), instance.kernel)

    def test_factor_dimensions(self, instance):
        """Test q_v must match the number of orthogonal points."""
        with pytest.raises(ArgumentError, match='q_v'):
            SolveGpState(instance.Z, instance.O, CholeskyGaussian.standard(len(instance.Z)),
                         CholeskyGaussian.standard(len(instance.O) + 1), instance.kernel)

    def test_mode_from_string(self, solvegp_state):
        """Test the mode tag accepts its string value."""
        state = solvegp_state.with_params(mode='OdvgpFrozen')
        assert state.mode is OrthogonalMode.ODVGP_FROZEN

    def test_prior_state_has_zero_kl(self, instance):
        """Test a prior state's bound on an empty batch is zero."""
        for whitened in (False, True):
            state = prior_state(instance.kernel, instance.Z, instance.O, instance.likelihood, whitened=whitened)
            assert abs(float(solvegp_bound(state, instance.X[:0], instance.y[:0]))) < 1e-10


class TestGramCache:
    """Test the shared Gram computations."""

    def test_two_factorizations(self, instance, solvegp_state):
        """Test one cache factorizes K_uu and C_vv only."""
        with count_ops() as counter:
            build_gram_cache(solvegp_state, instance.X)
        assert counter.chol_sizes() == sorted([len(instance.Z), len(instance.O)])

    def test_orthogonal_covariance_is_residual(self, instance, solvegp_state):
        """Test C_vv equals K_vv minus the Nystrom part."""
        cache = build_gram_cache(solvegp_state)
        K_vv = cache.A.T @ cache.A + cache.C_vv
        assert torch.allclose(K_vv, kernel_matrix(instance.kernel, instance.O, instance.O), atol=1e-12)

    def test_marginals_need_batch_cache(self, instance, solvegp_state):
        """Test marginal_q_f refuses a cache without batch terms."""
        with pytest.raises(ArgumentError, match='gram cache'):
            marginal_q_f(solvegp_state, build_gram_cache(solvegp_state), instance.X)


class TestReductionToSvgp:
    """Test the bound reduces to SVGP when q(v_perp) is the prior."""

    @pytest.mark.parametrize('seed', range(50))
    def test_prior_qv_equals_svgp(self, seed):
        """Test |solvegp_bound - svgp_bound| < 1e-10 with q_v at the prior."""
        inst = instance_for(seed)
        state = with_prior_qv(random_solvegp_state(inst, seed, whitened=bool(seed % 2)))
        difference = solvegp_bound(state, inst.X, inst.y) - svgp_bound(state.to_svgp(), inst.X, inst.y)
        assert abs(float(difference)) < 1e-10

    def test_empty_orthogonal_set(self):
        """Test M2 = 0 is plain SVGP."""
        inst = random_instance(5, M2=0)
        state = random_solvegp_state(inst, seed=5)
        assert state.num_orthogonal == 0
        difference = solvegp_bound(state, inst.X, inst.y) - svgp_bound(state.to_svgp(), inst.X, inst.y)
        assert abs(float(difference)) < 1e-12


class TestStructuredEquivalence:
    """Test SOLVE-GP equals SVGP over Z and O with the structured joint q(u, v)."""

    @pytest.mark.parametrize('seed', range(20))
    def test_bound_and_predictive(self, seed, rng):
        """Test bound and predictive agree with the dense SVGP over Z and O."""
        inst = instance_for(seed)
        state = random_solvegp_state(inst, seed, whitened=bool(seed % 2))
        Xstar = rng.uniform(-3, 3, size=(4, inst.X.shape[1]))
        with jitter_scope(1e-14):
            dense = svgp_over_joint(state)
            assert float(solvegp_bound(state, inst.X, inst.y)) == pytest.approx(
                float(svgp_bound(dense, inst.X, inst.y)), abs=1e-8)
            ours = solvegp_predict(state, Xstar)
            reference = svgp_predict(dense, Xstar)
        assert torch.allclose(ours.mean, reference.mean, atol=1e-8)
        assert torch.allclose(ours.covariance, reference.covariance, atol=1e-8)

    def test_marginals_match_predictive(self, instance, solvegp_state):
        """Test per-point marginals equal the joint predictive diagonal."""
        mean, var = marginal_q_f(solvegp_state, build_gram_cache(solvegp_state, instance.X), instance.X)
        pred = solvegp_predict(solvegp_state, instance.X)
        assert torch.allclose(mean, pred.mean, atol=1e-12)
        assert torch.allclose(var, pred.variance, atol=1e-10)


class TestOdvgp:
    """Test the frozen-covariance special case."""

    @pytest.mark.parametrize('seed', range(20))
    def test_odvgp_joint_is_structured_joint(self, seed):
        """Test odvgp_joint equals structured_joint with S_v = C_vv."""
        inst = instance_for(seed)
        whitened = bool(seed % 2)
        frozen = random_solvegp_state(inst, seed, whitened=whitened, mode=OrthogonalMode.ODVGP_FROZEN)
        cache = build_gram_cache(frozen)
        scale = torch.eye(frozen.num_orthogonal, dtype=torch.float64) if whitened else cache.L_v0
        free = frozen.with_params(mode=OrthogonalMode.FREE, q_v=CholeskyGaussian(frozen.q_v.mean, scale))
        a, b = odvgp_joint(frozen), structured_joint(free)
        assert float((a.mean - b.mean).abs().max()) < 1e-10
        assert float((a.covariance - b.covariance).abs().max()) < 1e-10

    def test_frozen_bound_ignores_qv_scale(self, instance):
        """Test the frozen bound uses the prior scale whatever q_v.scale holds."""
        frozen = random_solvegp_state(instance, 4, mode=OrthogonalMode.ODVGP_FROZEN)
        cache = build_gram_cache(frozen)
        free = frozen.with_params(mode=OrthogonalMode.FREE, q_v=CholeskyGaussian(frozen.q_v.mean, cache.L_v0))
        assert float(solvegp_bound(frozen, instance.X, instance.y)) == pytest.approx(
            float(solvegp_bound(free, instance.X, instance.y)), abs=1e-12)

    def test_odvgp_joint_requires_frozen_mode(self, solvegp_state):
        """Test odvgp_joint rejects a free state."""
        with pytest.raises(ArgumentError):
            odvgp_joint(solvegp_state)


class TestWhiteningInvariance:
    """Test whitened and mapped-unwhitened states give the same bound."""

    @pytest.mark.parametrize('seed', range(20))
    def test_whitened_vs_mapped(self, seed):
        """Test the bound agrees within 1e-8 after mapping both factors."""
        inst = instance_for(seed)
        white = random_solvegp_state(inst, seed, whitened=True)
        cache = build_gram_cache(white)
        mapped = white.with_params(q_u=whiten_map(white.q_u, cache.L_u0),
                                   q_v=whiten_map(white.q_v, cache.L_v0), whitened=False)
        assert float(solvegp_bound(white, inst.X, inst.y)) == pytest.approx(
            float(solvegp_bound(mapped, inst.X, inst.y)), abs=1e-8)


class TestCollapsedBounds:
    """Test the collapsed SOLVE-GP bound, optimal q(v_perp) and the tighter bound."""

    @pytest.mark.parametrize('seed', range(5))
    def test_collapsed_matches_dense(self, seed):
        """Test the collapsed bound against explicit inverses."""
        inst = instance_for(seed)
        q_v = random_factor(np.random.default_rng(seed), len(inst.O))
        value = collapsed_solvegp_bound(inst.kernel, inst.Z, inst.O, q_v, inst.X, inst.y, inst.likelihood)
        expected = dense_collapsed_solvegp(inst.kernel, inst.Z, inst.O, q_v.mean.numpy(), q_v.covariance.numpy(),
                                           inst.X, inst.y, inst.noise)
        assert float(value) == pytest.approx(expected, abs=1e-7)

    def test_collapsed_at_prior_is_titsias(self, instance):
        """Test a zero-mean frozen q_v reduces the collapsed bound to Titsias."""
        q_v = CholeskyGaussian.standard(len(instance.O))
        frozen = collapsed_solvegp_bound(instance.kernel, instance.Z, instance.O, q_v, instance.X, instance.y,
                                         instance.likelihood, whitened=True, covariance_frozen=True)
        titsias = titsias_collapsed_bound(instance.kernel, instance.Z, instance.X, instance.y, instance.likelihood)
        assert float(frozen) == pytest.approx(float(titsias), abs=1e-10)

    def test_collapsed_dominates_uncollapsed(self, instance, solvegp_state):
        """Test collapsing q(u) never lowers the bound."""
        collapsed = collapsed_solvegp_bound(instance.kernel, instance.Z, instance.O, solvegp_state.q_v,
                                            instance.X, instance.y, instance.likelihood)
        assert float(solvegp_bound(solvegp_state, instance.X, instance.y)) <= float(collapsed) + 1e-8

    @pytest.mark.parametrize('seed', range(5))
    def test_optimal_qv_matches_dense(self, seed):
        """Test m_v* and S_v* against the closed-form display equations."""
        inst = instance_for(seed)
        q = optimal_qv(inst.kernel, inst.Z, inst.O, inst.X, inst.y, inst.likelihood)
        m, S = dense_optimal_qv(inst.kernel, inst.Z, inst.O, inst.X, inst.y, inst.noise)
        np.testing.assert_allclose(q.mean.numpy(), m, atol=1e-7)
        np.testing.assert_allclose(q.covariance.numpy(), S, atol=1e-7)

    @pytest.mark.parametrize('seed', range(10))
    def test_optimal_qv_is_stationary(self, seed):
        """Test the collapsed bound's gradient vanishes at the optimal q(v_perp)."""
        inst = instance_for(seed)
        q = optimal_qv(inst.kernel, inst.Z, inst.O, inst.X, inst.y, inst.likelihood)
        mean = q.mean.clone().requires_grad_(True)
        scale = q.scale.clone().requires_grad_(True)
        value = collapsed_solvegp_bound(inst.kernel, inst.Z, inst.O, CholeskyGaussian(mean, scale),
                                        inst.X, inst.y, inst.likelihood)
        grad_mean, grad_scale = torch.autograd.grad(value, (mean, scale))
        assert float(grad_mean.abs().max()) < 1e-5
        assert float(torch.tril(grad_scale).abs().max()) < 1e-5

    @pytest.mark.parametrize('seed', range(50))
    def test_bound_ordering(self, seed):
        """Test titsias <= collapsed(optimal) <= log ML and titsias <= tighter <= log ML."""
        inst = instance_for(seed)
        titsias = float(titsias_collapsed_bound(inst.kernel, inst.Z, inst.X, inst.y, inst.likelihood))
        collapsed = float(optimal_collapsed_bound(inst.kernel, inst.Z, inst.O, inst.X, inst.y, inst.likelihood))
        tighter = float(tighter_bound_appendixA(inst.kernel, inst.Z, inst.X, inst.y, inst.likelihood))
        exact = float(dense_log_marginal(inst.kernel, inst.X, inst.y, inst.noise))
        slack = 1e-8
        assert titsias <= collapsed + slack
        assert collapsed <= exact + slack
        assert titsias <= tighter + slack
        assert tighter <= exact + slack

    @pytest.mark.parametrize('seed', range(5))
    def test_tighter_bound_forms_agree(self, seed):
        """Test the Woodbury and dense forms against each other and the oracle."""
        inst = instance_for(seed)
        woodbury = tighter_bound_appendixA(inst.kernel, inst.Z, inst.X, inst.y, inst.likelihood)
        dense = tighter_bound_appendixA(inst.kernel, inst.Z, inst.X, inst.y, inst.likelihood, form='dense')
        assert float(woodbury) == pytest.approx(float(dense), abs=1e-8)
        assert float(woodbury) == pytest.approx(dense_tighter_bound(inst.kernel, inst.Z, inst.X, inst.y, inst.noise),
                                                abs=1e-7)

    def test_correction_non_negative(self, instance):
        """Test the correction term is non-negative."""
        _, B = nystrom_terms(instance.kernel, instance.Z, instance.X)
        L_inner = jitter_cholesky(torch.eye(B.shape[0], dtype=torch.float64) + B @ B.T / instance.noise)
        residual = kernel_matrix(instance.kernel, instance.X, instance.X) - B.T @ B
        assert float(nystrom_trace_correction(B, L_inner, residual)) >= -1e-12

    def test_unknown_form(self, instance):
        """Test an unknown evaluation form is rejected."""
        with pytest.raises(ArgumentError):
            tighter_bound_appendixA(instance.kernel, instance.Z, instance.X, instance.y, instance.likelihood,
                                    form='cg')


class TestGramCacheLimits:
    """Test the orthogonal covariance at its two limits."""

    def test_distant_orthogonal_set_decouples(self, instance):
        """Test O far from Z gives C_vv = K_vv, and the bound is SVGP minus KL[q(v_perp)]."""
        far = instance.Z + 100.0
        state = random_solvegp_state(instance, seed=8).with_params(O=torch.as_tensor(far))
        cache = build_gram_cache(state, instance.X)
        assert float(cache.A.abs().max()) < 1e-12
        assert torch.allclose(cache.C_vv, kernel_matrix(instance.kernel, far, far), atol=1e-12)
        assert float(cache.D.abs().max()) < 1e-12
        _, kl_v = kl_terms(state, cache)
        expected = svgp_bound(state.to_svgp(), instance.X, instance.y) - kl_v
        assert abs(float(solvegp_bound(state, instance.X, instance.y) - expected)) < 1e-10

    def test_coincident_sets_factorize_with_recorded_jitter(self, instance, caplog):
        """Test O = Z leaves C_vv at jitter level and its factor matches the logged jitter."""
        M = len(instance.Z)
        with caplog.at_level(logging.WARNING, logger='gp.linalg'):
            jitter_cholesky(kernel_matrix(instance.kernel, instance.Z, instance.Z))
        assert caplog.records == []

        state = SolveGpState(instance.Z, instance.Z.copy(), CholeskyGaussian.standard(M),
                             CholeskyGaussian.standard(M), instance.kernel, instance.likelihood)
        with caplog.at_level(logging.WARNING, logger='gp.linalg'):
            cache = build_gram_cache(state)
        escalations = [re.search(r'Cholesky of size (\d+) needed jitter (\S+)', record.getMessage())
                       for record in caplog.records]
        jitters = [float(match.group(2)) for match in escalations if match]
        assert len(jitters) <= 1
        jitter = jitters[0] if jitters else JITTER_START
        assert JITTER_START <= jitter <= JITTER_MAX

        signal_variance = float(instance.kernel.signal_variance)
        assert float(cache.C_vv.abs().max()) < 1e-8 * signal_variance
        scale = float(cache.C_vv.diagonal().abs().mean()) or 1.0
        expected = cache.C_vv + jitter * scale * torch.eye(M, dtype=torch.float64)
        assert torch.allclose(cache.L_v0 @ cache.L_v0.T, expected, rtol=0, atol=1e-18)


class TestMarginalPath:
    """Test the bound is the expected log-likelihood of the marginals minus both KL terms."""

    @pytest.mark.parametrize('seed', range(10))
    def test_marginals_reassemble_bound(self, seed):
        """Test marginal_q_f, the closed-form expectation and kl_terms rebuild solvegp_bound."""
        inst = instance_for(seed)
        state = random_solvegp_state(inst, seed, whitened=bool(seed % 2))
        scale = 1.0 + seed
        cache = build_gram_cache(state, inst.X)
        mean, var = marginal_q_f(state, cache, inst.X)
        data_term = expected_log_lik_gaussian(torch.as_tensor(inst.y), mean, var, inst.likelihood).sum()
        kl_u, kl_v = kl_terms(state, cache)
        rebuilt = scale * data_term - kl_u - kl_v
        assert abs(float(rebuilt) - float(solvegp_bound(state, inst.X, inst.y, scale))) < 1e-10

    def test_quadrature_agrees_with_closed_form(self, instance, solvegp_state):
        """Test Gauss-Hermite expectation of the Gaussian log density over q(f_n) matches the closed form."""
        cache = build_gram_cache(solvegp_state, instance.X)
        mean, var = marginal_q_f(solvegp_state, cache, instance.X)
        y = torch.as_tensor(instance.y)
        closed = expected_log_lik_gaussian(y, mean, var, instance.likelihood)
        quadrature = expected_log_lik_quadrature(y, mean, var, instance.likelihood.log_density)
        assert torch.allclose(closed, quadrature, rtol=0, atol=1e-10)


class TestCollapseDominance:
    """Test the collapsed bound dominates the uncollapsed one for every q(u)."""

    @pytest.mark.parametrize('seed', range(100))
    def test_any_q_u_is_dominated(self, seed):
        """Test solvegp_bound(q_u, q_v) <= collapsed(q_v) for a random q_u."""
        inst = random_instance(seed % 10, N=15, M=4, M2=3, d=2)
        rng = np.random.default_rng(3000 + seed)
        whitened = bool(seed % 2)
        q_u = random_factor(rng, 4, spread=float(rng.uniform(0.1, 2.0)))
        q_v = random_factor(rng, 3)
        state = SolveGpState(inst.Z, inst.O, q_u, q_v, inst.kernel, inst.likelihood, whitened=whitened)
        collapsed = collapsed_solvegp_bound(inst.kernel, inst.Z, inst.O, q_v, inst.X, inst.y, inst.likelihood,
                                            whitened=whitened)
        assert float(solvegp_bound(state, inst.X, inst.y)) <= float(collapsed) + 1e-8


class TestOptimalQvLimits:
    """Test the optimal q(v_perp) against its limits and a numerical optimum."""

    def test_large_noise_recovers_prior(self, instance):
        """Test s2 -> infinity drives q(v_perp) to the prior N(0, C_vv)."""
        likelihood = GaussianLikelihood(1e8)
        q = optimal_qv(instance.kernel, instance.Z, instance.O, instance.X, instance.y, likelihood)
        L_v0 = build_gram_cache(prior_state(instance.kernel, instance.Z, instance.O, likelihood)).L_v0
        prior_cov = L_v0 @ L_v0.T
        assert float(q.mean.abs().max()) < 1e-6
        assert float((q.covariance - prior_cov).norm() / prior_cov.norm()) < 1e-6

    @pytest.mark.parametrize('seed', range(3))
    def test_matches_numerical_ascent(self, seed):
        """Test L-BFGS ascent of the collapsed bound lands on the closed-form optimum."""
        inst = random_instance(seed, N=15, M=3, M2=2, d=1)
        target = optimal_qv(inst.kernel, inst.Z, inst.O, inst.X, inst.y, inst.likelihood)
        L_v0 = build_gram_cache(prior_state(inst.kernel, inst.Z, inst.O, inst.likelihood)).L_v0
        M2 = len(inst.O)
        mean = torch.zeros(M2, dtype=torch.float64, requires_grad=True)
        off_diagonal = torch.tril(L_v0, -1).clone().requires_grad_(True)
        log_diagonal = torch.log(L_v0.diagonal()).clone().requires_grad_(True)

        def factor():
            scale = torch.tril(off_diagonal, -1) + torch.diag(torch.exp(log_diagonal))
            return CholeskyGaussian(mean, scale)

        def bound(q):
            return collapsed_solvegp_bound(inst.kernel, inst.Z, inst.O, q, inst.X, inst.y, inst.likelihood)

        optimizer = torch.optim.LBFGS([mean, off_diagonal, log_diagonal], lr=1.0, max_iter=500,
                                      tolerance_grad=1e-12, tolerance_change=1e-16, history_size=50,
                                      line_search_fn='strong_wolfe')

        def closure():
            optimizer.zero_grad()
            loss = -bound(factor())
            loss.backward()
            return loss

        for _ in range(5):
            optimizer.step(closure)
        found = factor().detach()
        np.testing.assert_allclose(found.mean.numpy(), target.mean.numpy(), atol=1e-5)
        np.testing.assert_allclose(found.covariance.numpy(), target.covariance.numpy(), atol=1e-5)
        assert float(bound(found)) <= float(bound(target)) + 1e-9
        assert float(bound(found)) == pytest.approx(float(bound(target)), abs=1e-7)


class TestJointComposition:
    """Test the joint q(u, v) views are built from the right blocks."""

    @pytest.mark.parametrize('seed', range(10))
    def test_u_block_is_q_u(self, seed):
        """Test the u marginal of the structured joint is q(u) itself."""
        inst = instance_for(seed)
        state = random_solvegp_state(inst, seed)
        joint = structured_joint(state)
        M = state.num_inducing
        assert torch.allclose(joint.mean[:M], state.q_u.mean, atol=1e-12)
        assert torch.allclose(joint.covariance[:M, :M], state.q_u.covariance, atol=1e-12)

    @pytest.mark.parametrize('seed', range(10))
    def test_prior_factors_give_prior_joint(self, seed):
        """Test prior q(u) and q(v_perp) compose to the prior over f(Z) and f(O), in both joint views."""
        inst = instance_for(seed)
        whitened = bool(seed % 2)
        inputs = np.concatenate([inst.Z, inst.O])
        prior = kernel_matrix(inst.kernel, inputs, inputs)
        free = prior_state(inst.kernel, inst.Z, inst.O, inst.likelihood, whitened=whitened)
        frozen = prior_state(inst.kernel, inst.Z, inst.O, inst.likelihood, OrthogonalMode.ODVGP_FROZEN, whitened)
        for joint in (structured_joint(free), odvgp_joint(frozen)):
            assert float(joint.mean.abs().max()) < 1e-12
            assert torch.allclose(joint.covariance, prior, atol=1e-8)

    @pytest.mark.parametrize('seed', range(10))
    def test_joint_kl_is_sum_of_kl_terms(self, seed):
        """Test KL of the joint against the joint prior equals KL_u + KL_v."""
        inst = instance_for(seed, max_m=4, max_m2=3)
        state = random_solvegp_state(inst, seed)
        joint = structured_joint(state)
        prior = structured_joint(prior_state(inst.kernel, inst.Z, inst.O, inst.likelihood))
        kl_u, kl_v = kl_terms(state, build_gram_cache(state))
        dense = gaussian_kl(joint.mean.numpy(), joint.covariance.numpy(), prior.covariance.numpy())
        assert dense == pytest.approx(float(kl_u + kl_v), abs=1e-6)

    @pytest.mark.parametrize('seed', range(10))
    def test_kl_invariant_under_whitening(self, seed):
        """Test both KL terms and the joint are unchanged when the factors are mapped out of whitened form."""
        inst = instance_for(seed)
        white = random_solvegp_state(inst, seed, whitened=True)
        cache = build_gram_cache(white)
        mapped = white.with_params(q_u=whiten_map(white.q_u, cache.L_u0),
                                   q_v=whiten_map(white.q_v, cache.L_v0), whitened=False)
        for ours, theirs in zip(kl_terms(white, cache), kl_terms(mapped, cache)):
            assert float(ours) == pytest.approx(float(theirs), abs=1e-9)
        a, b = structured_joint(white), structured_joint(mapped)
        assert torch.allclose(a.mean, b.mean, atol=1e-10)
        assert torch.allclose(a.covariance, b.covariance, atol=1e-10)
