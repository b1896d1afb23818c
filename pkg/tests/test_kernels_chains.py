"""Long-run invariance checks: each kernel must leave its target invariant.

Chains are driven through the kernel classes exactly as the SMC engine does,
and the first two stationary moments are compared against independent
oracles (exact moments for the standard normal, dense-grid quadrature for
the univariate inference posterior) within four Monte-Carlo standard errors
estimated by batch means.
"""

import numpy as np
import pytest

from igsmc.kernels import AdaptiveMVNKernel, MmalaKernel, UniformRWKernel
from igsmc.smc import TemperedTarget


def run_chain(kernel, target, x0, n_steps, seed=0):
    rng = np.random.default_rng(seed)
    ctx = kernel.make_context(target, np.array([[x] for x in (x0[0] - 1, x0[0], x0[0] + 1)]),
                              np.full(3, 1 / 3)) if isinstance(kernel, AdaptiveMVNKernel) else None
    x = np.asarray(x0, dtype=float)
    prep = None
    out = np.empty((n_steps, x.size))
    for t in range(n_steps):
        res = kernel.move(target, x, prep, rng, ctx)
        x, prep = res.position, res.prep
        out[t] = x
    return out


def batch_mcse(values, n_batches=50):
    n = values.shape[0] // n_batches * n_batches
    batches = values[:n].reshape(n_batches, -1)
    return batches.mean(axis=1).std(ddof=1) / np.sqrt(n_batches)


@pytest.mark.slow
class TestStandardNormalInvariance:
    """Acceptance property suite: detailed balance on the 1-d Gaussian target."""

    KERNELS = {
        "rw_uniform": (UniformRWKernel(width=2.5), 100_000),
        "adaptive_frozen": (AdaptiveMVNKernel(), 100_000),
        "mmala_euler": (MmalaKernel(epsilon=0.9, variant="euler"), 100_000),
        "mmala_simplified": (MmalaKernel(epsilon=0.9, variant="simplified"), 100_000),
        "mmala_ozaki": (MmalaKernel(epsilon=0.9, variant="ozaki"), 30_000),
    }

    @pytest.mark.parametrize("name", sorted(KERNELS))
    def test_first_two_moments(self, name, gauss1d_model):
        kernel, steps = self.KERNELS[name]
        target = TemperedTarget(model=gauss1d_model, phi=1.0)
        chain = run_chain(kernel, target, [0.3], steps, seed=42)[:, 0]
        chain = chain[steps // 10:]  # drop warmup
        for stat, truth in ((chain, 0.0), (chain**2, 1.0)):
            se = batch_mcse(stat)
            assert abs(stat.mean() - truth) < 4 * se, (name, stat.mean(), truth, se)


@pytest.mark.slow
class TestUnivariatePosteriorInvariance:
    """10^5-step chains on the phi = 1 tempered posterior vs a grid oracle."""

    @pytest.fixture(scope="class")
    def oracle(self, uni_model):
        mus = np.linspace(40.0, 60.0, 400)
        sigmas = np.linspace(5.0, 18.0, 400)
        mm, ss = np.meshgrid(mus, sigmas, indexing="ij")
        logp = np.empty_like(mm)
        resid2 = uni_model.data[None, None, :] - mm[..., None]
        logp = (
            -0.5 * ((mm - uni_model.u1) / uni_model.v1) ** 2
            - 0.5 * ((ss - uni_model.u2) / uni_model.v2) ** 2
            - uni_model.S * np.log(ss)
            - 0.5 * np.sum(resid2**2, axis=-1) / ss**2
        )
        w = np.exp(logp - logp.max())
        w /= w.sum()
        mean_mu = float(np.sum(w * mm))
        mean_sigma = float(np.sum(w * ss))
        sd_mu = float(np.sqrt(np.sum(w * (mm - mean_mu) ** 2)))
        sd_sigma = float(np.sqrt(np.sum(w * (ss - mean_sigma) ** 2)))
        return mean_mu, mean_sigma, sd_mu, sd_sigma

    @pytest.mark.parametrize("name,kernel,steps", [
        ("rw", UniformRWKernel(width=6.0), 100_000),
        ("euler", MmalaKernel(epsilon=1.1, variant="euler"), 100_000),
        ("simplified", MmalaKernel(epsilon=1.1, variant="simplified"), 100_000),
        ("ozaki", MmalaKernel(epsilon=1.1, variant="ozaki"), 100_000),
    ])
    def test_posterior_moments(self, name, kernel, steps, uni_model, oracle):
        mean_mu, mean_sigma, sd_mu, sd_sigma = oracle
        target = TemperedTarget(model=uni_model, phi=1.0)
        chain = run_chain(kernel, target, [50.0, 10.0], steps, seed=7)
        chain = chain[steps // 10:]
        checks = [
            (chain[:, 0], mean_mu),
            (chain[:, 1], mean_sigma),
            ((chain[:, 0] - mean_mu) ** 2, sd_mu**2),
            ((chain[:, 1] - mean_sigma) ** 2, sd_sigma**2),
        ]
        for stat, truth in checks:
            se = batch_mcse(stat)
            assert abs(stat.mean() - truth) < 4 * se, (name, stat.mean(), truth, se)
