"""Model layer: densities, transforms, covariance machinery, gradients.

Expected numbers marked "frozen" were computed once from independent
oracles (scipy.stats densities, closed forms) and pasted in as
literals; the implementation under test never produces its own
reference values.
"""

from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from biaslearn import model as bm
from biaslearn.model import (
    BiasClass,
    Hyperparams,
    JointTarget,
    LatentState,
    SingularCovarianceError,
    build_correlation,
    build_covariance,
    combine_biases,
    constrain,
    constrain_batch,
    constrained_names,
    correlation_bounds,
    dirichlet_logpdf,
    log_joint,
    mvn_logpdf,
    power_transform,
    sample_dirichlet,
    sigma_prior_logpdf,
    state_to_vector,
    transform_log_jacobian,
    truncated_normal_logpdf,
    unconstrain,
    unconstrained_dim,
)

from conftest import draw_state, make_hyper


class TestBiasClass:
    def test_concentration_table(self):
        assert np.array_equal(BiasClass.RIGHT.concentration(2), [1.0, 10.0])
        assert np.array_equal(BiasClass.NONE.concentration(2), [10.0, 10.0])
        assert np.array_equal(BiasClass.WRONG.concentration(2), [10.0, 1.0])

    def test_diagnostic_feature_placement(self):
        alpha = BiasClass.RIGHT.concentration(3, diagnostic_feature=2)
        assert np.array_equal(alpha, [10.0, 10.0, 1.0])

    def test_orientation_swap(self):
        fwd = BiasClass.RIGHT.concentration(2)
        rev = BiasClass.RIGHT.concentration(2, diagnostic_first=False)
        assert np.array_equal(fwd, rev[::-1])
        assert np.array_equal(
            BiasClass.WRONG.concentration(2, diagnostic_first=False), [1.0, 10.0]
        )


class TestValidation:
    def test_hyper_rejects_bad_values(self):
        with pytest.raises(ValueError):
            make_hyper(alpha_domain=(1.0, 0.0))
        with pytest.raises(ValueError):
            make_hyper(gamma=0.5)
        with pytest.raises(ValueError):
            make_hyper(noise_var=0.0)
        with pytest.raises(ValueError):
            make_hyper(n_categories=1)

    def test_zero_weight_scale_permitted(self):
        hyper = make_hyper(weight_scale=0.0)
        assert not hyper.weight_is_free

    def test_latent_state_invariants(self):
        good = dict(
            domain_bias=[0.5, 0.5],
            label_bias=[0.5, 0.5],
            domain_weight=0.3,
            sigma=np.ones((2, 2)),
            mu=np.zeros((2, 2)),
        )
        LatentState(**good)
        with pytest.raises(ValueError):
            LatentState(**{**good, "domain_bias": [0.6, 0.5]})
        with pytest.raises(ValueError):
            LatentState(**{**good, "domain_weight": -0.1})
        with pytest.raises(ValueError):
            LatentState(**{**good, "sigma": np.array([[1.0, -1.0], [1.0, 1.0]])})


class TestDirichlet:
    def test_uniform_density_is_one(self):
        assert dirichlet_logpdf(np.array([0.3, 0.7]), np.array([1.0, 1.0])) == 0.0

    def test_frozen_values(self):
        # frozen scipy.stats.dirichlet.logpdf
        assert dirichlet_logpdf(
            np.array([0.5, 0.5]), np.array([10.0, 10.0])
        ) == pytest.approx(1.259579976957541, abs=1e-12)
        assert dirichlet_logpdf(
            np.array([0.2, 0.8]), np.array([1.0, 10.0])
        ) == pytest.approx(0.2942931311661594, abs=1e-12)
        assert dirichlet_logpdf(
            np.array([0.2, 0.3, 0.5]), np.array([1.0, 2.0, 3.0])
        ) == pytest.approx(1.5040773967762737, abs=1e-12)

    def test_boundary_is_zero_density(self):
        assert dirichlet_logpdf(np.array([0.0, 1.0]), np.array([10.0, 1.0])) == -np.inf

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            dirichlet_logpdf(np.array([0.5, 0.5]), np.array([1.0, 1.0, 1.0]))
        with pytest.raises(ValueError):
            dirichlet_logpdf(np.array([0.5, 0.5]), np.array([1.0, 0.0]))


class TestSampleDirichlet:
    def test_simplex_closure(self, rng):
        for alpha in ([1.0, 10.0], [0.5, 0.5, 2.0]):
            x = sample_dirichlet(np.array(alpha), rng)
            assert abs(float(x.sum()) - 1.0) < 1e-12
            assert np.all(x >= 0)

    def test_monte_carlo_means(self, rng):
        n = 100_000
        draws = np.array([sample_dirichlet(np.array([1.0, 10.0]), rng)[0] for _ in range(n)])
        assert abs(draws.mean() - 1.0 / 11.0) < 0.005
        draws = np.array([sample_dirichlet(np.array([10.0, 10.0]), rng)[0] for _ in range(n)])
        assert abs(draws.mean() - 0.5) < 0.005

    def test_rejects_bad_alpha(self, rng):
        with pytest.raises(ValueError):
            sample_dirichlet(np.array([1.0, -1.0]), rng)


class TestTruncatedNormal:
    def test_frozen_values(self):
        # frozen scipy.stats.truncnorm.logpdf, lower truncation at 0
        assert truncated_normal_logpdf(0.3, 0.3, 0.03) == pytest.approx(
            2.587619364115309, abs=1e-12
        )
        assert truncated_normal_logpdf(0.05, 0.02, 0.1) == pytest.approx(
            1.884650913512147, abs=1e-12
        )

    def test_outside_support(self):
        assert truncated_normal_logpdf(-0.1, 0.3, 0.1) == -np.inf

    def test_negligible_truncation_matches_plain_normal(self):
        # loc/scale = 50: the tail correction is below float resolution
        expected = -math.log(0.01 * math.sqrt(2 * math.pi))
        assert truncated_normal_logpdf(0.5, 0.5, 0.01) == pytest.approx(
            expected, abs=1e-12
        )

    def test_zero_scale_rejected(self):
        with pytest.raises(ValueError):
            truncated_normal_logpdf(0.3, 0.3, 0.0)


class TestCombineBiases:
    def test_identical_inputs(self):
        out = combine_biases(np.array([0.5, 0.5]), np.array([0.5, 0.5]), 0.3)
        assert np.allclose(out, [0.5, 0.5], atol=1e-15)

    def test_arithmetic(self):
        out = combine_biases(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.25)
        assert np.allclose(out, [0.25, 0.75], atol=1e-15)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            combine_biases(np.array([1.0, 0.0]), np.array([0.2, 0.3, 0.5]), 0.5)

    @given(
        st.lists(st.floats(0.01, 10.0), min_size=2, max_size=5),
        st.lists(st.floats(0.01, 10.0), min_size=2, max_size=5),
        st.floats(0.0, 1.0),
    )
    @settings(max_examples=200, deadline=None)
    def test_conservation_of_belief(self, raw_p, raw_k, omega):
        n = min(len(raw_p), len(raw_k))
        p = np.array(raw_p[:n]) / np.sum(raw_p[:n])
        k = np.array(raw_k[:n]) / np.sum(raw_k[:n])
        assert abs(float(combine_biases(p, k, omega).sum()) - 1.0) < 1e-12


class TestPowerTransform:
    def test_endpoints(self):
        for gamma in (1.0, 2.0, 10.0, 50.0):
            assert power_transform(1.0, gamma) == pytest.approx(1.0, abs=1e-15)
            assert power_transform(0.0, gamma) == pytest.approx(-1.0, abs=1e-15)

    def test_linear_case(self):
        assert power_transform(0.25, 1.0) == pytest.approx(-0.5, abs=1e-15)
        xs = np.linspace(0, 1, 11)
        assert np.allclose([power_transform(x, 1.0) for x in xs], 2 * (xs - 0.5))

    def test_frozen_value(self):
        # frozen high-precision scalar: 2*(0.5**0.1 - 0.5)
        assert power_transform(0.5, 10.0) == pytest.approx(
            0.8660659830736148, abs=1e-12
        )

    def test_monotone(self):
        xs = np.linspace(0.0, 1.0, 201)
        for gamma in (1.0, 3.0, 10.0):
            vals = [power_transform(x, gamma) for x in xs]
            assert np.all(np.diff(vals) >= 0)

    def test_steepness_near_zero(self):
        h = 1e-5

        def slope(x):
            return (power_transform(x + h, 10.0) - power_transform(x - h, 10.0)) / (2 * h)

        assert abs(slope(0.01)) > abs(slope(0.5))

    def test_domain_errors(self):
        with pytest.raises(ValueError):
            power_transform(1.1, 10.0)
        with pytest.raises(ValueError):
            power_transform(0.5, 0.9)

    def test_boundary_slack_accepted(self):
        # inputs leaking past [0,1] by <= 1e-12 are clamped, not rejected
        assert power_transform(1.0 + 1e-13, 2.0) == pytest.approx(1.0, abs=1e-12)
        assert power_transform(-1e-13, 2.0) == pytest.approx(-1.0, abs=1e-12)


class TestBuildCorrelation:
    def test_direct_construction(self):
        R = build_correlation(0.3, 2)
        assert np.allclose(R, [[1.0, 0.3], [0.3, 1.0]], atol=1e-15)

    def test_negative_clamp_keeps_pd(self):
        R = build_correlation(-0.9, 3)
        assert R[0, 1] == pytest.approx(-0.5 + 1e-6, abs=1e-15)
        assert np.linalg.eigvalsh(R).min() > 0

    def test_extreme_negative_two_categories(self):
        R = build_correlation(-1.0, 2)
        assert R[0, 1] == pytest.approx(-1.0 + 1e-6, abs=1e-15)
        np.linalg.cholesky(R)

    def test_too_few_categories(self):
        with pytest.raises(ValueError):
            build_correlation(0.0, 1)

    @given(st.floats(-1.0, 1.0), st.integers(2, 6))
    @settings(max_examples=200, deadline=None)
    def test_always_choleskyable(self, r, C):
        np.linalg.cholesky(build_correlation(r, C))

    def test_bounds_match_equicorrelation_support(self):
        lo, hi = correlation_bounds(3)
        assert lo == pytest.approx(-0.5 + 1e-6)
        assert hi == pytest.approx(1.0 - 1e-6)


class TestBuildCovariance:
    def test_arithmetic(self):
        cov = build_covariance(np.array([1.0, 2.0]), build_correlation(0.5, 2))
        assert np.allclose(cov, [[1.0, 1.0], [1.0, 4.0]], atol=1e-15)

    def test_identity_case(self):
        cov = build_covariance(np.array([1.0, 1.0]), build_correlation(0.0, 2))
        assert np.allclose(cov, np.eye(2), atol=1e-15)

    def test_definition_exact(self, rng):
        sigma = rng.uniform(0.2, 3.0, size=4)
        R = build_correlation(0.4, 4)
        cov = build_covariance(sigma, R)
        assert np.array_equal(cov, np.outer(sigma, sigma) * R)

    def test_rejects_nonpositive_sigma(self):
        with pytest.raises(ValueError):
            build_covariance(np.array([1.0, 0.0]), np.eye(2))


class TestMvnLogpdf:
    def test_frozen_values(self):
        # frozen scipy.stats.multivariate_normal.logpdf
        assert mvn_logpdf(np.zeros(1), np.zeros(1), np.eye(1)) == pytest.approx(
            -0.9189385332046727, abs=1e-12
        )
        assert mvn_logpdf(np.zeros(2), np.zeros(2), np.eye(2)) == pytest.approx(
            -1.8378770664093453, abs=1e-12
        )
        assert mvn_logpdf(
            np.array([0.3, -0.4]),
            np.array([0.1, 0.2]),
            np.array([[2.0, 0.6], [0.6, 1.0]]),
        ) == pytest.approx(-2.36083494342496, abs=1e-11)

    def test_matches_dense_inverse_oracle(self, rng):
        for _ in range(20):
            A = rng.normal(size=(3, 3))
            cov = A @ A.T + 0.5 * np.eye(3)
            x = rng.normal(size=3)
            mean = rng.normal(size=3)
            resid = x - mean
            direct = -0.5 * (
                3 * np.log(2 * np.pi)
                + np.log(np.linalg.det(cov))
                + resid @ np.linalg.inv(cov) @ resid
            )
            assert mvn_logpdf(x, mean, cov) == pytest.approx(direct, abs=1e-10)

    def test_singular_covariance_raises(self):
        with pytest.raises(SingularCovarianceError):
            mvn_logpdf(np.zeros(2), np.zeros(2), np.array([[1.0, 1.0], [1.0, 1.0]]))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            mvn_logpdf(np.zeros(2), np.zeros(3), np.eye(3))


class TestSigmaPrior:
    def test_frozen_half_normal_value(self):
        # frozen scipy.stats.halfnorm.logpdf(0.7)
        assert sigma_prior_logpdf(np.array([[0.7]])) == pytest.approx(
            -0.4707913526447274, abs=1e-12
        )

    def test_sums_over_entries(self):
        single = sigma_prior_logpdf(np.array([[0.7]]))
        assert sigma_prior_logpdf(np.full((2, 3), 0.7)) == pytest.approx(
            6 * single, abs=1e-12
        )


def _component_sum_oracle(state, observations, hyper):
    """Assemble the joint log density term by term, independently."""
    lp = dirichlet_logpdf(state.domain_bias, hyper.alpha_domain)
    lp += dirichlet_logpdf(state.label_bias, hyper.alpha_label)
    if hyper.weight_is_free:
        lp += truncated_normal_logpdf(
            state.domain_weight, hyper.weight_loc, hyper.weight_scale
        )
    lp += sigma_prior_logpdf(state.sigma)
    b = combine_biases(state.domain_bias, state.label_bias, state.domain_weight)
    for i in range(hyper.n_features):
        r = power_transform(min(max(float(b[i]), 0.0), 1.0), hyper.gamma)
        cov = build_covariance(
            state.sigma[i], build_correlation(r, hyper.n_categories)
        )
        lp += mvn_logpdf(state.mu[i], np.zeros(hyper.n_categories), cov)
        obs_cov = np.diag(state.sigma[i] ** 2 + hyper.noise_var)
        for y in observations[i]:
            lp += mvn_logpdf(y, state.mu[i], obs_cov)
    return lp


class TestLogJoint:
    def test_component_sum_oracle(self, rng):
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0), make_hyper(n_features=3, alpha_domain=(3.0, 1.5, 1.0), alpha_label=(0.8, 2.2, 1.1), n_categories=3)):
            obs = rng.normal(size=(hyper.n_features, 4, hyper.n_categories))
            for _ in range(17):
                state = draw_state(hyper, rng)
                mine = log_joint(state, obs, hyper)
                ref = _component_sum_oracle(state, obs, hyper)
                assert mine == pytest.approx(ref, abs=1e-10)

    def test_dataset_doubling_doubles_likelihood_only(self, rng):
        hyper = make_hyper()
        obs = rng.normal(size=(2, 5, 2))
        state = draw_state(hyper, rng)
        single = log_joint(state, obs, hyper)
        double = log_joint(state, np.tile(obs, (1, 2, 1)), hyper)
        lik = sum(
            mvn_logpdf(y, state.mu[i], np.diag(state.sigma[i] ** 2 + hyper.noise_var))
            for i in range(2)
            for y in obs[i]
        )
        assert double - single == pytest.approx(lik, abs=1e-10)

    def test_forced_invalid_state_returns_neg_inf(self, hyper_free):
        # bypass construction validation to probe the density's own guard
        state = object.__new__(LatentState)
        object.__setattr__(state, "domain_bias", np.array([0.5, 0.5]))
        object.__setattr__(state, "label_bias", np.array([0.5, 0.5]))
        object.__setattr__(state, "domain_weight", 0.3)
        object.__setattr__(state, "sigma", np.array([[1.0, -1.0], [1.0, 1.0]]))
        object.__setattr__(state, "mu", np.zeros((2, 2)))
        obs = np.zeros((2, 1, 2))
        assert log_joint(state, obs, hyper_free) == -np.inf

    def test_singularity_absorbed_and_counted(self, hyper_free, rng, monkeypatch):
        state = draw_state(hyper_free, rng)
        obs = np.zeros((2, 1, 2))
        singular = np.ones((2, 2))
        monkeypatch.setattr(bm, "build_covariance", lambda s, R: singular)
        bm.reset_singularity_count()
        assert log_joint(state, obs, hyper_free) == -np.inf
        assert bm.singularity_count() == 1

    def test_shape_validation(self, hyper_free, rng):
        state = draw_state(hyper_free, rng)
        with pytest.raises(ValueError):
            log_joint(state, np.zeros((2, 3)), hyper_free)
        with pytest.raises(ValueError):
            log_joint(state, np.zeros((3, 1, 2)), hyper_free)


class TestUnconstrainConstrain:
    def test_round_trip(self, rng):
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0), make_hyper(n_features=4, alpha_domain=(3.0, 1.5, 1.0, 2.0), alpha_label=(0.8, 2.2, 1.1, 0.9), n_categories=3)):
            worst = 0.0
            for _ in range(100):
                state = draw_state(hyper, rng)
                back = constrain(unconstrain(state, hyper), hyper)
                for a, b in (
                    (state.domain_bias, back.domain_bias),
                    (state.label_bias, back.label_bias),
                    (np.atleast_1d(state.domain_weight), np.atleast_1d(back.domain_weight)),
                    (state.sigma, back.sigma),
                    (state.mu, back.mu),
                ):
                    worst = max(worst, float(np.abs(np.asarray(a) - np.asarray(b)).max()))
            assert worst < 1e-10

    def test_zero_vector_gives_valid_state(self, hyper_free):
        state = constrain(np.zeros(unconstrained_dim(hyper_free)), hyper_free)
        # the stick offsets make z=0 the uniform simplex
        assert np.allclose(state.domain_bias, 0.5, atol=1e-12)
        assert np.allclose(state.label_bias, 0.5, atol=1e-12)
        assert np.all(state.sigma > 0)

    def test_uniform_simplex_maps_to_zero_sticks(self):
        # stick coordinate y_j = logit(x_j / remaining) + log(K - 1 - j)
        # vanishes at the uniform point, the reference property of the
        # offset convention
        hyper = make_hyper(
            n_features=4,
            alpha_domain=(1.0, 1.0, 1.0, 1.0),
            alpha_label=(1.0, 1.0, 1.0, 1.0),
        )
        state = LatentState(
            domain_bias=np.full(4, 0.25),
            label_bias=np.full(4, 0.25),
            domain_weight=0.3,
            sigma=np.ones((4, 2)),
            mu=np.zeros((4, 2)),
        )
        z = unconstrain(state, hyper)
        assert np.allclose(z[:3], 0.0, atol=1e-12)
        assert np.allclose(z[3:6], 0.0, atol=1e-12)

    def test_boundary_state_rejected(self, hyper_free):
        state = LatentState(
            domain_bias=np.array([1.0, 0.0]),
            label_bias=np.array([0.5, 0.5]),
            domain_weight=0.3,
            sigma=np.ones((2, 2)),
            mu=np.zeros((2, 2)),
        )
        with pytest.raises(ValueError):
            unconstrain(state, hyper_free)


def _minimal_coordinates(state: LatentState, hyper: Hyperparams) -> np.ndarray:
    """Square chart of the constrained state: drop the last simplex entry."""
    parts = [state.domain_bias[:-1], state.label_bias[:-1]]
    if hyper.weight_is_free:
        parts.append(np.atleast_1d(state.domain_weight))
    parts += [state.sigma.ravel(), state.mu.ravel()]
    return np.concatenate(parts)


class TestTransformJacobian:
    def test_matches_finite_difference_determinant(self, rng):
        # constrain restricted to a square chart; central-difference
        # Jacobian determinant must agree with the analytic log-Jacobian
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0)):
            for _ in range(5):
                z = unconstrain(draw_state(hyper, rng), hyper)
                dim = z.size
                J = np.empty((dim, dim))
                h = 1e-6
                for j in range(dim):
                    zp, zm = z.copy(), z.copy()
                    zp[j] += h
                    zm[j] -= h
                    J[:, j] = (
                        _minimal_coordinates(constrain(zp, hyper), hyper)
                        - _minimal_coordinates(constrain(zm, hyper), hyper)
                    ) / (2 * h)
                sign, logdet = np.linalg.slogdet(J)
                assert sign > 0
                assert logdet == pytest.approx(
                    transform_log_jacobian(z, hyper), rel=1e-5, abs=1e-5
                )


class TestJointTarget:
    def test_density_equals_constrained_joint_plus_jacobian(self, rng):
        # two independent routes to the same number: the target's fast
        # path versus the plain composition it is documented to equal
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0)):
            obs = rng.normal(size=(2, 6, 2))
            target = JointTarget(hyper, obs)
            for _ in range(30):
                z = unconstrain(draw_state(hyper, rng), hyper)
                fast = target.log_density(z)
                ref = log_joint(constrain(z, hyper), obs, hyper) + transform_log_jacobian(
                    z, hyper
                )
                assert abs(fast - ref) < 1e-8 * max(1.0, abs(ref))

    def test_gradient_matches_finite_differences(self, rng):
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0)):
            obs = rng.normal(size=(2, 6, 2))
            target = JointTarget(hyper, obs)
            for _ in range(10):
                z = unconstrain(draw_state(hyper, rng), hyper)
                _, grad = target.log_density_and_grad(z)
                for j in range(z.size):
                    h = 1e-4

                    def f(t):
                        zz = z.copy()
                        zz[j] = t
                        return target.log_density(zz)

                    x = z[j]
                    fd = (
                        f(x - 2 * h) - 8 * f(x - h) + 8 * f(x + h) - f(x + 2 * h)
                    ) / (12 * h)
                    assert grad[j] == pytest.approx(fd, rel=1e-6, abs=1e-6)

    def test_value_and_grad_agree_with_value(self, rng, hyper_free):
        obs = rng.normal(size=(2, 4, 2))
        target = JointTarget(hyper_free, obs)
        for _ in range(5):
            z = unconstrain(draw_state(hyper_free, rng), hyper_free)
            lp, _ = target.log_density_and_grad(z)
            assert lp == pytest.approx(target.log_density(z), rel=1e-12)


class TestEquicorrCholesky:
    def test_matches_numpy_cholesky(self, rng):
        for C in (2, 3, 5):
            lo, hi = correlation_bounds(C)
            rs = rng.uniform(lo, hi, size=8)
            diag, below = bm._equicorr_chol(rs, C)
            for idx, r in enumerate(rs):
                L_ref = np.linalg.cholesky(build_correlation(float(r), C))
                L = np.zeros((C, C))
                L[np.diag_indices(C)] = diag[idx]
                for j in range(C - 1):
                    L[j + 1 :, j] = below[idx, j]
                assert np.abs(L - L_ref).max() < 1e-12

    def test_derivative_matches_cholesky_differential(self, rng):
        # oracle: dL = L * Phi(L^-1 dR L^-T), Phi = tril strictly + half diag,
        # evaluated with dense numpy linear algebra
        for C in (2, 4):
            lo, hi = correlation_bounds(C)
            rs = rng.uniform(lo * 0.9, hi * 0.9, size=6)
            diag, below, ddiag, dbelow = bm._equicorr_chol(rs, C, want_grad=True)
            dR = np.ones((C, C)) - np.eye(C)
            for idx, r in enumerate(rs):
                L = np.linalg.cholesky(build_correlation(float(r), C))
                M = np.linalg.solve(L, np.linalg.solve(L, dR).T).T
                Phi = np.tril(M, -1) + np.diag(np.diag(M)) / 2.0
                dL_ref = L @ Phi
                dL = np.zeros((C, C))
                dL[np.diag_indices(C)] = ddiag[idx]
                for j in range(C - 1):
                    dL[j + 1 :, j] = dbelow[idx, j]
                assert np.abs(dL - dL_ref).max() < 1e-10


class TestCategoryReflection:
    def _target(self, hyper, n_obs=0, rng=None):
        if n_obs:
            obs = rng.normal(size=(hyper.n_features, n_obs, hyper.n_categories))
        else:
            obs = np.zeros((hyper.n_features, 0, hyper.n_categories))
        return JointTarget(hyper, obs)

    def test_involution(self, rng):
        for C in (2, 3):
            hyper = make_hyper(
                n_categories=C,
            )
            target = self._target(hyper, n_obs=4, rng=rng)
            for _ in range(10):
                z = unconstrain(draw_state(hyper, rng), hyper)
                zz = target.category_reflection(target.category_reflection(z))
                assert np.abs(zz - z).max() < 1e-10

    def test_constrained_semantics(self, rng, hyper_free):
        # reflected draw has category order reversed: sigma reversed,
        # mu reversed and negated, everything else untouched
        target = self._target(hyper_free, n_obs=3, rng=rng)
        z = unconstrain(draw_state(hyper_free, rng), hyper_free)
        a = constrain(z, hyper_free)
        b = constrain(target.category_reflection(z), hyper_free)
        assert np.allclose(b.sigma, a.sigma[:, ::-1], atol=1e-12)
        assert np.allclose(b.mu, -a.mu[:, ::-1], atol=1e-10)
        assert np.allclose(b.domain_bias, a.domain_bias, atol=1e-15)
        assert b.domain_weight == pytest.approx(a.domain_weight, abs=1e-15)

    def test_unit_jacobian(self, rng, hyper_free):
        target = self._target(hyper_free, n_obs=2, rng=rng)
        z = unconstrain(draw_state(hyper_free, rng), hyper_free)
        dim = z.size
        J = np.empty((dim, dim))
        h = 1e-6
        for j in range(dim):
            zp, zm = z.copy(), z.copy()
            zp[j] += h
            zm[j] -= h
            J[:, j] = (
                target.category_reflection(zp) - target.category_reflection(zm)
            ) / (2 * h)
        _, logdet = np.linalg.slogdet(J)
        assert abs(logdet) < 1e-6

    def test_prior_invariance_without_data(self, rng):
        # with no observations the joint is category-symmetric, so the
        # reflection must preserve the density exactly
        for ws in (0.03, 0.0):
            hyper = make_hyper(weight_scale=ws)
            target = self._target(hyper)
            for _ in range(10):
                z = unconstrain(draw_state(hyper, rng), hyper)
                lp = target.log_density(z)
                lp_ref = target.log_density(target.category_reflection(z))
                assert lp_ref == pytest.approx(lp, rel=1e-10, abs=1e-8)


class TestConstrainBatch:
    def test_matches_loop(self, rng):
        for hyper in (make_hyper(), make_hyper(weight_scale=0.0)):
            zs = np.stack(
                [unconstrain(draw_state(hyper, rng), hyper) for _ in range(25)]
            )
            batch = constrain_batch(zs, hyper)
            for i, z in enumerate(zs):
                ref = state_to_vector(constrain(z, hyper))
                assert np.abs(batch[i] - ref).max() < 1e-12

    def test_names_align_with_vector(self, hyper_free):
        names = constrained_names(hyper_free)
        assert names == [
            "p_0", "p_1", "k_0", "k_1", "omega",
            "sigma_0_0", "sigma_0_1", "sigma_1_0", "sigma_1_1",
            "mu_0_0", "mu_0_1", "mu_1_0", "mu_1_1",
        ]
        z = np.zeros(unconstrained_dim(hyper_free))
        assert constrain_batch(z[None, :], hyper_free).shape == (1, len(names))
