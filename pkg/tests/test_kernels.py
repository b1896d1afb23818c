import numpy as np
import pytest
from scipy import integrate as sq
from scipy import linalg as sla

from igsmc.core import ConfigurationError, DegeneratePopulationError, IgsmcError
from igsmc.kernels import (
    AdaptiveMVNKernel,
    KernelProposal,
    MmalaKernel,
    MoveRecord,
    UniformRWKernel,
    adaptive_mvn_proposal,
    mh_step,
    mmala_drift_rate,
    mmala_euler_proposal,
    mmala_ozaki_proposal,
    mmala_simplified_proposal,
    phi1m,
    rw_uniform_kernel_density,
    rw_uniform_kernel_density_matrix,
    rw_uniform_propose,
    rw_uniform_rejection_mass,
)
from igsmc.smc import TemperedTarget


class ConstantMetricModel:
    """Gaussian target N(0, I) with a constant (possibly non-unit) metric."""

    def __init__(self, g):
        self.g = np.atleast_2d(np.asarray(g, dtype=float))
        self.dim = self.g.shape[0]

    def support_check(self, xi):
        return True

    def prepare(self, xi, order=0):
        return None

    def log_gamma(self, xi, phi=1.0, prep=None):
        xi = np.atleast_1d(xi)
        return float(-0.5 * xi @ xi)

    def grad_log_gamma(self, xi, phi=1.0, prep=None):
        return -np.atleast_1d(np.asarray(xi, dtype=float))

    def metric_bundle(self, xi, phi=1.0, with_derivative=True, prep=None):
        from igsmc.metric import MetricBundle

        dg = np.zeros((self.dim,) * 3) if with_derivative else None
        return MetricBundle(g=self.g.copy(), dg=dg)

    def sample_prior(self, rng, n):
        return rng.standard_normal((n, self.dim))


class TestUniformRW:
    def test_draws_inside_box(self, rng):
        xi = np.array([2.0, -1.0])
        for _ in range(200):
            prop = rw_uniform_propose(xi, 2.0, rng)
            assert np.all(np.abs(prop - xi) <= 1.0)

    def test_moments(self, rng):
        draws = np.array([rw_uniform_propose([0.0], 2.0, rng)[0] for _ in range(100000)])
        # uniform on [-1, 1]: variance 1/3
        assert abs(draws.mean()) < 4 * np.sqrt(1 / 3 / draws.size)
        assert abs(draws.var() - 1 / 3) / (1 / 3) < 0.02

    def test_width_validation(self, rng):
        with pytest.raises(ConfigurationError):
            rw_uniform_propose([0.0], 0.0, rng)


class TestUniformKernelDensity:
    def test_uphill_move(self):
        val = rw_uniform_kernel_density(0.0, 0.5, mu=0.0, sigma=1.0, width=2.0)
        assert val == pytest.approx(0.5 * np.exp(-0.125), abs=1e-10)
        assert val == pytest.approx(0.4412, abs=1e-4)

    def test_downhill_move_accepts_fully(self):
        val = rw_uniform_kernel_density(3.0, 2.0, mu=0.0, sigma=1.0, width=2.0)
        assert val == pytest.approx(0.5)

    def test_outside_box_zero(self):
        assert rw_uniform_kernel_density(0.0, 1.5, mu=0.0, sigma=1.0, width=2.0) == 0.0

    @pytest.mark.parametrize("xi,mu,sigma,width", [
        (0.0, 0.0, 1.0, 2.0),
        (1.3, 0.0, 1.0, 2.0),
        (4.0, 0.0, 1.0, 1.0),
        (-2.0, 1.0, 0.5, 3.0),
        (0.2, 0.0, 2.0, 0.5),
    ])
    def test_total_mass_one(self, xi, mu, sigma, width):
        cont, _ = sq.quad(
            lambda z: rw_uniform_kernel_density(xi, z, mu, sigma, width),
            xi - width / 2, xi + width / 2, points=[xi], limit=200,
        )
        atom = rw_uniform_rejection_mass(xi, mu, sigma, width)
        assert cont + atom == pytest.approx(1.0, abs=1e-6)

    def test_matrix_matches_scalar(self, rng):
        prev = rng.normal(0, 1, 8)
        new = prev + rng.uniform(-0.5, 0.5, 8)
        new[3] = prev[3]  # a rejected move
        mat = rw_uniform_kernel_density_matrix(new, prev, mu=0.3, sigma=1.2, width=1.4)
        for i in range(8):
            for j in range(8):
                assert mat[i, j] == pytest.approx(
                    rw_uniform_kernel_density(prev[j], new[i], 0.3, 1.2, 1.4), abs=1e-14
                )

    def test_far_from_mode_stable(self):
        # exp(m^2/2 sigma^2) overflows naively at 40 sigma; the log-space path must not
        val = rw_uniform_rejection_mass(40.0, 0.0, 1.0, 2.0)
        assert 0.0 <= val <= 1.0 and np.isfinite(val)


class TestAdaptiveMVN:
    def test_scale_factor(self, rng):
        # With unit weighted sample covariance the proposal is (2.38^2/D) I.
        n = 200000
        x = rng.standard_normal((n, 4))
        prop = adaptive_mvn_proposal(x, np.full(n, 1.0 / n))
        assert np.allclose(prop.cov, (2.38**2 / 4) * np.eye(4), atol=2e-2)
        assert (2.38**2 / 4) == pytest.approx(1.41610)

    def test_identical_particles_error(self):
        x = np.ones((50, 3))
        with pytest.raises(DegeneratePopulationError):
            adaptive_mvn_proposal(x, np.full(50, 0.02))

    def test_rank_deficient_regularized(self, rng):
        base = rng.standard_normal(3)
        x = np.vstack([base, base + [1.0, 0.0, 0.0], base, base + [2.0, 0.0, 0.0]])
        prop = adaptive_mvn_proposal(x, np.full(4, 0.25))
        np.linalg.cholesky(prop.cov)
        assert prop.jitter > 0.0


class TestMmalaEuler:
    def test_constant_metric_zero_gradient(self):
        class Flat(ConstantMetricModel):
            def grad_log_gamma(self, xi, phi=1.0, prep=None):
                return np.zeros(self.dim)

        model = Flat(np.diag([2.0, 0.5]))
        xi = np.array([0.7, -0.3])
        prop = mmala_euler_proposal(model, xi, 1.0, 0.3)
        assert np.allclose(prop.mean, xi)
        assert np.allclose(prop.cov, 0.09 * np.linalg.inv(model.g))

    def test_scalar_standard_normal(self):
        model = ConstantMetricModel([[1.0]])
        eps = 0.4
        for x in (-1.3, 0.0, 2.2):
            prop = mmala_euler_proposal(model, [x], 1.0, eps)
            assert prop.mean[0] == pytest.approx(x * (1 - eps**2 / 2))
            assert prop.cov[0, 0] == pytest.approx(eps**2)

    def test_simplified_equals_euler_for_constant_metric(self):
        model = ConstantMetricModel(np.diag([1.5, 0.8]))
        xi = np.array([0.4, 1.0])
        a = mmala_euler_proposal(model, xi, 1.0, 0.5)
        b = mmala_simplified_proposal(model, xi, 1.0, 0.5)
        assert np.allclose(a.mean, b.mean) and np.allclose(a.cov, b.cov)

    def test_euler_vs_simplified_difference_is_curvature_term(self, uni_model):
        # The gap between the two variants must equal the metric-derivative
        # drift terms recomputed independently from the bundle.
        xi = np.array([47.0, 9.0])
        phi, eps = 0.8, 0.4
        full = mmala_euler_proposal(uni_model, xi, phi, eps)
        simp = mmala_simplified_proposal(uni_model, xi, phi, eps)
        bundle = uni_model.metric_bundle(xi, phi)
        ginv = np.linalg.inv(bundle.g)
        v2 = np.einsum("ik,jkl,lj->i", ginv, bundle.dg, ginv)
        v3 = np.einsum("ij,jkl,kl->i", ginv, bundle.dg, ginv)
        expected_gap = eps**2 * (-v2 + 0.5 * v3)
        assert np.allclose(full.mean - simp.mean, expected_gap, atol=1e-12)
        assert np.allclose(full.cov, simp.cov)

    def test_christoffel_form_halves_curvature_drift(self, uni_model):
        xi = np.array([47.0, 9.0])
        full = mmala_euler_proposal(uni_model, xi, 0.8, 0.4, drift_form="expanded")
        half = mmala_euler_proposal(uni_model, xi, 0.8, 0.4, drift_form="christoffel")
        simp = mmala_simplified_proposal(uni_model, xi, 0.8, 0.4)
        gap_full = full.mean - simp.mean
        gap_half = half.mean - simp.mean
        assert np.allclose(gap_half, 0.5 * gap_full, atol=1e-14)


class TestPhi1m:
    def test_identity_relation(self, rng):
        for _ in range(20):
            m = rng.normal(0, 1, (3, 3))
            out = phi1m(m)
            assert np.allclose(m @ out, sla.expm(m) - np.eye(3), atol=1e-12)

    def test_zero_matrix(self):
        assert np.allclose(phi1m(np.zeros((2, 2))), np.eye(2))


class TestOzaki:
    def test_constant_drift_recovers_euler(self):
        # A linear-drift-free toy: b independent of xi makes J = 0 exactly.
        class Linear(ConstantMetricModel):
            def grad_log_gamma(self, xi, phi=1.0, prep=None):
                return np.array([1.3])  # constant score

        model = Linear([[1.0]])
        eps = 0.3
        prop = mmala_ozaki_proposal(model, [0.5], 1.0, eps)
        euler = mmala_euler_proposal(model, [0.5], 1.0, eps)
        assert prop.mean[0] == pytest.approx(euler.mean[0], abs=1e-9)
        assert prop.cov[0, 0] == pytest.approx(euler.cov[0, 0], rel=1e-6)

    def test_ou_transition_exact(self):
        # Standard normal target with unit metric: b = -xi/2 and J = -1/2, so
        # the discretisation reproduces the exact OU transition.
        model = ConstantMetricModel([[1.0]])
        eps = 0.7
        for x in (-2.0, 0.4, 1.7):
            prop = mmala_ozaki_proposal(model, [x], 1.0, eps)
            assert prop.mean[0] == pytest.approx(x * np.exp(-(eps**2) / 2), abs=1e-10)
            assert prop.cov[0, 0] == pytest.approx(1.0 - np.exp(-(eps**2)), abs=1e-10)

    def test_short_step_expansion(self, uni_model):
        # mu^O = xi + eps^2 b + (eps^4/2) J b + O(eps^6)
        xi = np.array([48.0, 9.5])
        phi = 0.9
        eps = 0.05
        b, ginv, _ = mmala_drift_rate(uni_model, xi, phi)
        prop = mmala_ozaki_proposal(uni_model, xi, phi, eps)
        euler = mmala_euler_proposal(uni_model, xi, phi, eps)
        jac = np.empty((2, 2))
        for j in range(2):
            h = 1e-6 * max(1, abs(xi[j]))
            hi, lo = xi.copy(), xi.copy()
            hi[j] += h
            lo[j] -= h
            jac[:, j] = (mmala_drift_rate(uni_model, hi, phi)[0]
                         - mmala_drift_rate(uni_model, lo, phi)[0]) / (2 * h)
        second_order = 0.5 * eps**4 * jac @ b
        gap = prop.mean - euler.mean
        assert np.allclose(gap, second_order, rtol=1e-3)

    def test_euler_limit_order_four(self, uni_model):
        # log-log slope of ||mu_O - mu_E|| and ||cov_O - cov_E|| vs eps is 4.
        xi = np.array([52.0, 11.0])
        phi = 1.0
        eps_grid = np.array([0.2, 0.1, 0.05, 0.025])
        dmu, dcov = [], []
        for eps in eps_grid:
            o = mmala_ozaki_proposal(uni_model, xi, phi, eps)
            e = mmala_euler_proposal(uni_model, xi, phi, eps)
            dmu.append(np.linalg.norm(o.mean - e.mean))
            dcov.append(np.linalg.norm(o.cov - e.cov))
        slope_mu = np.polyfit(np.log(eps_grid), np.log(dmu), 1)[0]
        slope_cov = np.polyfit(np.log(eps_grid), np.log(dcov), 1)[0]
        assert abs(slope_mu - 4.0) < 0.8
        assert abs(slope_cov - 4.0) < 0.8


class TestMhStep:
    def test_symmetric_equal_density_always_accepts(self, rng):
        log_target = lambda x: 0.0  # flat target

        def proposal(x):
            return KernelProposal(mean=np.atleast_1d(x), cov=np.eye(1) * 0.25)

        rec = mh_step(log_target, [0.0], proposal, rng)
        assert isinstance(rec, MoveRecord)
        assert rec.log_alpha == pytest.approx(0.0, abs=1e-12)
        assert rec.accepted

    def test_out_of_support_rejected(self, rng):
        def log_target(x):
            return 0.0 if x[0] > 0 else float("-inf")

        def proposal(x):
            return KernelProposal(mean=np.atleast_1d(x) - 5.0, cov=np.eye(1) * 1e-6)

        rec = mh_step(log_target, [0.5], proposal, rng)
        assert not rec.accepted
        assert rec.log_alpha == float("-inf")

    def test_log_alpha_capped(self, rng, gauss1d_model):
        def proposal(x):
            return mmala_euler_proposal(gauss1d_model, x, 1.0, 0.8)

        for _ in range(50):
            rec = mh_step(lambda x: gauss1d_model.log_gamma(x), [rng.normal()], proposal, rng)
            assert rec.log_alpha <= 0.0

    def test_non_finite_target_at_current_is_contract_violation(self, rng):
        with pytest.raises(IgsmcError):
            mh_step(lambda x: float("-inf"), [0.0],
                    lambda x: KernelProposal(mean=np.atleast_1d(x), cov=np.eye(1)), rng)


class TestKernelClasses:
    def test_proposal_densities_integrate_to_one(self, gauss1d_model):
        # 1-d quadrature mass of each proposal's log-density.
        props = [
            mmala_euler_proposal(gauss1d_model, [0.7], 1.0, 0.5),
            mmala_simplified_proposal(gauss1d_model, [0.7], 1.0, 0.5),
            mmala_ozaki_proposal(gauss1d_model, [0.7], 1.0, 0.5),
        ]
        for prop in props:
            mass, _ = sq.quad(lambda z: np.exp(prop.log_density([z])), -12, 12)
            assert mass == pytest.approx(1.0, abs=1e-6)

    def test_move_outcome_counts(self, gauss1d_model, rng):
        kern = MmalaKernel(epsilon=0.5, steps=3)
        target = TemperedTarget(model=gauss1d_model, phi=1.0)
        out = kern.move(target, np.array([0.2]), None, rng, None)
        assert out.attempts == 3
        assert 0 <= out.accepted <= 3

    def test_required_orders(self):
        assert UniformRWKernel(1.0).required_order == 0
        assert AdaptiveMVNKernel().required_order == 0
        assert MmalaKernel(0.5, variant="euler").required_order == 2
        assert MmalaKernel(0.5, variant="simplified").required_order == 1
        assert MmalaKernel(0.5, variant="ozaki").required_order == 2
