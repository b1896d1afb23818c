import numpy as np
import pytest
from scipy import integrate as sq

from igsmc.core import (
    BoundaryError,
    CapabilityError,
    ConfigurationError,
    DegenerateTruncationError,
    SingularMetricError,
)
from igsmc.metric import (
    NoiseModel,
    PriorSpec,
    TruncationTerms,
    fisher_metric,
    fisher_metric_extended,
    prior_hessian,
    regularize,
    standard_normal_hazard,
    truncated_normal_moments,
    truncation_terms,
)
from igsmc.ode import fitzhugh_nagumo_system, integrate_with_sensitivities

FN = fitzhugh_nagumo_system()
FN_X0 = np.array([-1.0, 1.0])
FN_TIMES = np.linspace(0.5, 10.0, 12)
MVN3 = PriorSpec.mvn([0.2, 0.2, 3.0], np.diag([0.3**2, 0.3**2, 1.5**2]))


def fn_sens(xi, order=2, rtol=1e-10):
    return integrate_with_sensitivities(FN, FN_X0, np.asarray(xi, dtype=float), FN_TIMES,
                                        order=order, t0=0.0, rtol=rtol, atol=rtol * 1e-2)


class TestPriorHessian:
    def test_uniform_is_zero(self):
        prior = PriorSpec.uniform([0.0, 0.0], [1.0, 2.0])
        h, dh = prior_hessian(prior, [0.5, 0.5])
        assert np.all(h == 0.0) and np.all(dh == 0.0)

    def test_uniform_boundary_error(self):
        prior = PriorSpec.uniform([0.0], [1.0])
        with pytest.raises(BoundaryError):
            prior_hessian(prior, [1.0])
        with pytest.raises(BoundaryError):
            prior_hessian(prior, [-0.3])

    def test_mvn_precision(self):
        h, dh = prior_hessian(MVN3, [0.1, 0.1, 2.0])
        assert np.allclose(np.diag(h), [11.111111, 11.111111, 0.444444], atol=1e-5)
        assert np.all(dh == 0.0)

    def test_cw_lognormal_at_median(self):
        prior = PriorSpec.cw_lognormal([0.3, -0.2], [0.5, 1.2])
        xi = np.exp([0.3, -0.2])
        h, _ = prior_hessian(prior, xi)
        assert np.allclose(np.diag(h), 1.0 / (xi * np.array([0.5, 1.2])) ** 2)

    def test_cw_lognormal_dh_matches_fd(self):
        prior = PriorSpec.cw_lognormal([0.1, 0.4], [0.6, 0.9])
        xi = np.array([1.3, 0.7])
        _, dh = prior_hessian(prior, xi)
        h = 1e-6
        for k in range(2):
            step = np.zeros(2)
            step[k] = h
            fd = (prior_hessian(prior, xi + step)[0] - prior_hessian(prior, xi - step)[0]) / (2 * h)
            assert np.allclose(dh[k], fd, rtol=1e-5, atol=1e-8)


class TestFisherMetric:
    def test_phi_zero_equals_prior_term(self):
        sens = fn_sens([0.2, 0.2, 3.0])
        bundle = fisher_metric(0.0, sens, NoiseModel(sigma=[0.3, 0.3]), MVN3, [0.2, 0.2, 3.0])
        assert np.allclose(bundle.g, np.linalg.inv(MVN3.cov))

    def test_uniform_prior_phi_zero_flags_singular(self):
        # Acceptance: the assembled metric is exactly zero and the
        # regularizer reports the singularity.
        sens = fn_sens([0.2, 0.2, 3.0])
        prior = PriorSpec.uniform([0.0, 0.0, 0.0], [1.0, 1.0, 7.0])
        bundle = fisher_metric(0.0, sens, NoiseModel(sigma=[0.3, 0.3]), prior, [0.2, 0.2, 3.0])
        assert np.all(bundle.g == 0.0)
        reg = regularize(bundle.g)
        assert reg.flagged_singular and reg.jitter == pytest.approx(1e-12)

    def test_single_term_contraction_by_hand(self):
        class Sens:
            X = np.zeros((1, 2))
            S = np.eye(2)[None, :, :]  # one time point, S[0, i, d] = delta_id
            dS = np.zeros((1, 2, 2, 2))

        prior = PriorSpec.uniform([-1.0, -1.0], [1.0, 1.0])
        bundle = fisher_metric(1.0, Sens(), NoiseModel(sigma=[2.0, 2.0]), prior, [0.0, 0.0])
        assert np.allclose(bundle.g, 0.25 * np.eye(2))

    def test_dg_matches_finite_differences(self, rng):
        for _ in range(5):
            xi = np.array([rng.uniform(0.1, 0.4), rng.uniform(0.1, 0.4), rng.uniform(2, 4)])
            noise = NoiseModel(sigma=[np.sqrt(0.05), np.sqrt(0.05)])
            dg = fisher_metric(0.8, fn_sens(xi), noise, MVN3, xi).dg
            h = 1e-4
            for k in range(3):
                step = np.zeros(3)
                step[k] = h * max(1.0, xi[k])
                gp = fisher_metric(0.8, fn_sens(xi + step, order=1), noise, MVN3, xi + step,
                                   with_derivative=False).g
                gm = fisher_metric(0.8, fn_sens(xi - step, order=1), noise, MVN3, xi - step,
                                   with_derivative=False).g
                fd = (gp - gm) / (2 * step[k])
                scale = max(1.0, np.max(np.abs(fd)))
                assert np.max(np.abs(dg[k] - fd)) / scale < 1e-4

    def test_monotone_information(self):
        xi = np.array([0.25, 0.15, 2.8])
        sens = fn_sens(xi)
        noise = NoiseModel(sigma=[0.3, 0.3])
        g1 = fisher_metric(0.2, sens, noise, MVN3, xi).g
        g2 = fisher_metric(0.9, sens, noise, MVN3, xi).g
        eigs = np.linalg.eigvalsh(g2 - g1)
        assert np.all(eigs > -1e-10)

    def test_positive_definite_on_random_points(self, rng):
        noise = NoiseModel(sigma=[0.3, 0.3])
        for _ in range(100):
            xi = np.array([rng.uniform(0.05, 0.5), rng.uniform(0.05, 0.5), rng.uniform(1.5, 4.5)])
            phi = rng.uniform(0, 1)
            g = fisher_metric(phi, fn_sens(xi, order=1, rtol=1e-8), noise, MVN3, xi,
                              with_derivative=False).g
            assert np.allclose(g, g.T)
            np.linalg.cholesky(g)  # must succeed without jitter

    def test_lognormal_noise_via_log_transform(self):
        # The lognormal Fisher term equals the normal-noise term with
        # sensitivities divided by the state.
        xi = np.array([0.2, 0.2, 3.0])
        sens = fn_sens(xi)

        class Shifted:
            # shift states positive so the log transform applies
            X = sens.X + 3.0
            S = sens.S
            dS = sens.dS

        g_log = fisher_metric(1.0, Shifted(), NoiseModel(sigma=[0.3, 0.3], kind="lognormal"),
                              MVN3, xi, with_derivative=False).g

        class Manual:
            X = Shifted.X
            S = sens.S / Shifted.X[:, None, :]
            dS = None

        g_ref = fisher_metric(1.0, Manual(), NoiseModel(sigma=[0.3, 0.3]), MVN3, xi,
                              with_derivative=False).g
        assert np.allclose(g_log, g_ref)

    def test_requires_plain_noise(self):
        sens = fn_sens([0.2, 0.2, 3.0])
        with pytest.raises(ConfigurationError):
            fisher_metric(0.5, sens, NoiseModel(sigma=[0.3, 0.3], hetero_sigma=[0.1, 0.1]),
                          MVN3, [0.2, 0.2, 3.0])


class TestExtendedMetric:
    HET = NoiseModel(sigma=[0.3, 0.3], hetero_sigma=[0.15, 0.1], lower_bound=0.0)

    def test_reduces_to_plain_metric_exactly(self):
        xi = np.array([0.2, 0.2, 3.0])
        sens = fn_sens(xi, order=3)
        noise = NoiseModel(sigma=[0.3, 0.3])
        a = fisher_metric_extended(0.7, sens, noise, MVN3, xi)
        b = fisher_metric(0.7, sens, noise, MVN3, xi)
        assert np.array_equal(a.g, b.g) or np.allclose(a.g, b.g, atol=1e-15)
        assert np.allclose(a.dg, b.dg, atol=1e-15)

    def test_continuous_limit(self):
        xi = np.array([0.2, 0.2, 3.0])
        sens = fn_sens(xi, order=3)
        plain = fisher_metric(0.7, sens, NoiseModel(sigma=[0.3, 0.3]), MVN3, xi)
        near = NoiseModel(sigma=[0.3, 0.3], hetero_sigma=[0.0, 0.0],
                          lower_bound=-1e10 * 0.3)
        ext = fisher_metric_extended(0.7, sens, near, MVN3, xi)
        assert np.max(np.abs(ext.g - plain.g)) < 1e-8
        assert np.max(np.abs(ext.dg - plain.dg)) < 1e-8

    def test_hazard_at_zero(self):
        assert standard_normal_hazard(0.0) == pytest.approx(0.7978845608, abs=1e-8)

    def test_hazard_deep_tail_stable(self):
        lam = standard_normal_hazard(np.array([-30.0, -100.0]))
        # asymptotically lambda(a) ~ -a for a -> -inf
        assert np.all(np.isfinite(lam))
        assert lam[0] == pytest.approx(30.0, rel=1e-2)

    def test_truncation_terms_at_zero_state(self):
        terms = truncation_terms(np.zeros(3), np.full(3, 2.0), 0.0)
        assert isinstance(terms, TruncationTerms)
        assert np.allclose(terms.J, terms.K)  # alpha = 0 kills the correction

    def test_dg_matches_finite_differences(self, rng):
        noise = self.HET
        for _ in range(3):
            xi = np.array([rng.uniform(0.15, 0.3), rng.uniform(0.15, 0.3), rng.uniform(2.5, 3.5)])
            dg = fisher_metric_extended(0.8, fn_sens(xi, order=3), noise, MVN3, xi).dg
            h = 1e-4
            for k in range(3):
                step = np.zeros(3)
                step[k] = h * max(1.0, xi[k])
                gp = fisher_metric_extended(0.8, fn_sens(xi + step, order=2), noise, MVN3,
                                            xi + step, with_derivative=False).g
                gm = fisher_metric_extended(0.8, fn_sens(xi - step, order=2), noise, MVN3,
                                            xi - step, with_derivative=False).g
                fd = (gp - gm) / (2 * step[k])
                scale = max(1.0, np.max(np.abs(fd)))
                assert np.max(np.abs(dg[k] - fd)) / scale < 1e-4

    def test_deep_truncation_raises_with_index(self):
        class Sens:
            X = np.array([[5.0, -50.0]])  # far below the bound: mass underflows
            S = np.zeros((1, 2, 2))
            dS = np.zeros((1, 2, 2, 2))
            ddS = np.zeros((1, 2, 2, 2, 2))

        noise = NoiseModel(sigma=[1.0, 1.0], lower_bound=0.0)
        prior = PriorSpec.mvn([0.0, 0.0], np.eye(2))
        with pytest.raises(DegenerateTruncationError):
            fisher_metric_extended(1.0, Sens(), noise, prior, [0.0, 0.0])

    def test_needs_third_order_for_derivative(self):
        xi = np.array([0.2, 0.2, 3.0])
        with pytest.raises(CapabilityError):
            fisher_metric_extended(0.5, fn_sens(xi, order=2), self.HET, MVN3, xi)


class TestTruncatedNormalMoments:
    def test_untruncated_limit(self):
        mean, var = truncated_normal_moments(1.3, 2.0, -np.inf, np.inf)
        assert mean == pytest.approx(1.3) and var == pytest.approx(4.0)

    def test_symmetric_interval(self):
        mean, var = truncated_normal_moments(0.0, 1.0, -1.7, 1.7)
        assert mean == pytest.approx(0.0, abs=1e-15)
        assert var < 1.0

    def test_half_normal(self):
        mean, var = truncated_normal_moments(0.0, 1.0, 0.0, np.inf)
        assert mean == pytest.approx(0.7978845608, abs=1e-6)
        assert var == pytest.approx(0.3633802276, abs=1e-6)

    @pytest.mark.parametrize("mu,sigma,a,b", [
        (0.0, 1.0, 0.0, np.inf),
        (2.0, 0.7, 1.0, 3.0),
        (-1.0, 2.5, -2.0, 0.5),
        (0.0, 1.0, -0.5, 4.0),
    ])
    def test_against_quadrature(self, mu, sigma, a, b):
        hi = b if np.isfinite(b) else mu + 40 * sigma
        lo = a if np.isfinite(a) else mu - 40 * sigma

        def pdf(x):
            return np.exp(-0.5 * ((x - mu) / sigma) ** 2)

        z, _ = sq.quad(pdf, lo, hi)
        m1, _ = sq.quad(lambda x: x * pdf(x), lo, hi)
        m1 /= z
        m2, _ = sq.quad(lambda x: (x - m1) ** 2 * pdf(x), lo, hi)
        m2 /= z
        mean, var = truncated_normal_moments(mu, sigma, a, b)
        assert abs(mean - m1) / max(1e-10, abs(m1)) < 1e-8 or abs(mean - m1) < 1e-10
        assert abs(var - m2) / m2 < 1e-8

    def test_degenerate_interval(self):
        with pytest.raises(DegenerateTruncationError):
            truncated_normal_moments(0.0, 1.0, 50.0, 51.0)
        with pytest.raises(ConfigurationError):
            truncated_normal_moments(0.0, 1.0, 2.0, 1.0)


class TestRegularize:
    def test_identity_untouched(self):
        reg = regularize(np.eye(3))
        assert reg.jitter == 0.0 and not reg.flagged_singular
        assert np.array_equal(reg.matrix, np.eye(3))

    def test_zero_matrix_floor(self):
        reg = regularize(np.zeros((2, 2)))
        assert reg.flagged_singular
        assert np.allclose(reg.matrix, 1e-12 * np.eye(2))

    def test_ladder_on_near_singular(self):
        reg = regularize(np.diag([1.0, 1e-16]))
        assert reg.flagged_singular or reg.jitter == 0.0
        np.linalg.cholesky(reg.matrix)

    def test_indefinite_raises(self):
        with pytest.raises(SingularMetricError):
            regularize(np.diag([1.0, -1.0]))

    def test_asymmetric_rejected(self):
        with pytest.raises(ConfigurationError):
            regularize(np.array([[1.0, 0.5], [0.2, 1.0]]))
