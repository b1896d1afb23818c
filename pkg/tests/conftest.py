import numpy as np
import pytest

from igsmc.core import data_rng
from igsmc.models import UnivariateGaussianModel


@pytest.fixture(scope="session")
def uni_model():
    """The univariate inference setup: 60 draws from N(50, 10^2), informative priors."""
    data = data_rng(0).normal(50.0, 10.0, size=60)
    return UnivariateGaussianModel(data, u1=50.0, v1=20.0, u2=10.0, v2=2.5)


@pytest.fixture()
def rng():
    return np.random.default_rng(12345)


class Gaussian1DModel:
    """Standard-normal target with unit metric; phi is ignored.

    The simplest model satisfying the tempered-model surface; used to check
    kernels against exactly known stationary moments.
    """

    dim = 1

    def support_check(self, xi):
        return True

    def prepare(self, xi, order=0):
        return None

    def log_likelihood(self, xi, prep=None):
        return 0.0

    def log_gamma(self, xi, phi=1.0, prep=None):
        x = float(np.asarray(xi).ravel()[0])
        return -0.5 * x * x

    def grad_log_gamma(self, xi, phi=1.0, prep=None):
        return -np.atleast_1d(np.asarray(xi, dtype=float))

    def metric_bundle(self, xi, phi=1.0, with_derivative=True, prep=None):
        from igsmc.metric import MetricBundle

        dg = np.zeros((1, 1, 1)) if with_derivative else None
        return MetricBundle(g=np.eye(1), dg=dg)

    def sample_prior(self, rng, n):
        return rng.standard_normal((n, 1))


@pytest.fixture(scope="session")
def gauss1d_model():
    return Gaussian1DModel()
