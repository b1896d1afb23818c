"""Fisher metrics for ODE likelihood models.

Assembles the expected Fisher information of tempered posteriors whose
likelihood comes from integrating an ODE under an observation-noise model:

    g_ij = phi * sum_d S_i,d^T Sigma_d^{-1} S_j,d  +  h_ij(prior),

together with its parameter derivative (needed by the manifold-MALA drift),
the heteroscedastic/positivity-truncated extension of that formula, the
truncated-normal moment identities the extension rests on, and a jitter
ladder that makes near-singular metrics factorizable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import special

from .core import (
    BoundaryError,
    CapabilityError,
    ConfigurationError,
    DegenerateTruncationError,
    SingularMetricError,
)

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class MetricBundle:
    """Fisher metric g and (optionally) its derivative tensor.

    Attributes:
        g: (D, D) symmetric metric.
        dg: (D, D, D) tensor with dg[k, i, j] = d g_ij / d xi^k, or None.
    """

    g: np.ndarray
    dg: np.ndarray | None = None

    @property
    def has_dg(self) -> bool:
        return self.dg is not None


@dataclass(frozen=True)
class NoiseModel:
    """Observation-noise specification for ODE likelihoods.

    Attributes:
        sigma: Per-species noise sd, shape (D_x,).
        kind: ``normal`` or ``lognormal``.
        hetero_sigma: Per-species scale of the state-proportional noise sd;
            zeros mean homoscedastic.  Variance is sigma^2 + hetero^2 * X^2.
        lower_bound: Truncation point a of the noise (observations satisfy
            Y > a); -inf disables truncation.
    """

    sigma: np.ndarray
    kind: str = "normal"
    hetero_sigma: np.ndarray | None = None
    lower_bound: float = float("-inf")

    def __post_init__(self):
        sigma = np.atleast_1d(np.asarray(self.sigma, dtype=float))
        object.__setattr__(self, "sigma", sigma)
        if np.any(sigma <= 0.0):
            raise ConfigurationError("noise sd must be positive")
        if self.kind not in ("normal", "lognormal"):
            raise ConfigurationError(f"unknown noise kind {self.kind!r}")
        hs = self.hetero_sigma
        hs = np.zeros_like(sigma) if hs is None else np.atleast_1d(np.asarray(hs, dtype=float))
        if hs.shape != sigma.shape:
            raise ConfigurationError("hetero_sigma must match sigma in shape")
        if np.any(hs < 0.0):
            raise ConfigurationError("hetero_sigma must be nonnegative")
        object.__setattr__(self, "hetero_sigma", hs)
        if self.kind == "lognormal" and (np.any(hs > 0.0) or np.isfinite(self.lower_bound)):
            raise ConfigurationError("lognormal noise excludes truncation and heteroscedasticity")

    @property
    def is_plain_normal(self) -> bool:
        return (
            self.kind == "normal"
            and not np.any(self.hetero_sigma > 0.0)
            and not np.isfinite(self.lower_bound)
        )


@dataclass(frozen=True)
class PriorSpec:
    """Prior over the D model parameters: uniform box, MVN, or CW log-normal."""

    kind: str
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    mean: np.ndarray | None = None
    cov: np.ndarray | None = None
    mu: np.ndarray | None = None
    sigma: np.ndarray | None = None

    @classmethod
    def uniform(cls, lower, upper) -> "PriorSpec":
        lower = np.asarray(lower, dtype=float)
        upper = np.asarray(upper, dtype=float)
        if np.any(lower >= upper):
            raise ConfigurationError("uniform bounds need lower < upper componentwise")
        return cls(kind="uniform", lower=lower, upper=upper)

    @classmethod
    def mvn(cls, mean, cov) -> "PriorSpec":
        mean = np.asarray(mean, dtype=float)
        cov = np.asarray(cov, dtype=float)
        if cov.shape != (mean.size, mean.size):
            raise ConfigurationError("covariance shape must match mean")
        if not np.allclose(cov, cov.T):
            raise ConfigurationError("covariance must be symmetric")
        np.linalg.cholesky(cov)  # raises LinAlgError if not positive definite
        return cls(kind="mvn", mean=mean, cov=cov)

    @classmethod
    def cw_lognormal(cls, mu, sigma) -> "PriorSpec":
        mu = np.asarray(mu, dtype=float)
        sigma = np.asarray(sigma, dtype=float)
        if np.any(sigma <= 0.0):
            raise ConfigurationError("log-normal sigma must be positive")
        return cls(kind="cw_lognormal", mu=mu, sigma=sigma)

    @property
    def dim(self) -> int:
        if self.kind == "uniform":
            return self.lower.size
        if self.kind == "mvn":
            return self.mean.size
        return self.mu.size

    # -- density surface used by the sampling models ---------------------------

    def support(self, xi) -> bool:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "uniform":
            return bool(np.all(xi > self.lower) and np.all(xi < self.upper))
        if self.kind == "cw_lognormal":
            return bool(np.all(xi > 0.0))
        return True

    def log_density(self, xi) -> float:
        xi = np.asarray(xi, dtype=float)
        if not self.support(xi):
            return float("-inf")
        if self.kind == "uniform":
            return float(-np.sum(np.log(self.upper - self.lower)))
        if self.kind == "mvn":
            d = xi - self.mean
            sol = np.linalg.solve(self.cov, d)
            _, logdet = np.linalg.slogdet(self.cov)
            return float(-0.5 * (d @ sol + logdet + xi.size * 2.0 * _LOG_SQRT_2PI))
        z = (np.log(xi) - self.mu) / self.sigma
        return float(np.sum(-0.5 * z * z - np.log(xi * self.sigma) - _LOG_SQRT_2PI))

    def grad_log_density(self, xi) -> np.ndarray:
        xi = np.asarray(xi, dtype=float)
        if self.kind == "uniform":
            return np.zeros_like(xi)
        if self.kind == "mvn":
            return -np.linalg.solve(self.cov, xi - self.mean)
        return -(1.0 + (np.log(xi) - self.mu) / self.sigma**2) / xi

    def sample(self, rng, n: int) -> np.ndarray:
        if self.kind == "uniform":
            return rng.uniform(self.lower, self.upper, size=(n, self.dim))
        if self.kind == "mvn":
            return rng.multivariate_normal(self.mean, self.cov, size=n, method="cholesky")
        return np.exp(self.mu + self.sigma * rng.standard_normal((n, self.dim)))


def prior_hessian(prior: PriorSpec, xi) -> tuple[np.ndarray, np.ndarray]:
    """Prior curvature term h_ij of the Fisher metric, plus its xi-derivative.

    Uniform priors contribute nothing (away from their boundary), MVN priors
    the constant precision matrix, and componentwise log-normal priors the
    diagonal (1 - log xi^i + mu^i) / (xi^i sigma^i)^2.

    Returns:
        (h, dh) with shapes (D, D) and (D, D, D), dh[k] = d h / d xi^k.

    Raises:
        BoundaryError: For a uniform prior evaluated on or outside its box,
            where the density is not differentiable.
    """
    xi = np.asarray(xi, dtype=float)
    d = xi.size
    if prior.dim != d:
        raise ConfigurationError(f"prior is {prior.dim}-dimensional, point is {d}-dimensional")
    dh = np.zeros((d, d, d))
    if prior.kind == "uniform":
        if not prior.support(xi):
            raise BoundaryError("uniform prior curvature undefined on the support boundary")
        return np.zeros((d, d)), dh
    if prior.kind == "mvn":
        return np.linalg.inv(prior.cov), dh
    # CW log-normal; no summation over the component index.
    h = np.diag((1.0 - np.log(xi) + prior.mu) / (xi * prior.sigma) ** 2)
    ddiag = -(3.0 + 2.0 * prior.mu - 2.0 * np.log(xi)) / (prior.sigma**2 * xi**3)
    for k in range(d):
        dh[k, k, k] = ddiag[k]
    return h, dh


def standard_normal_hazard(alpha) -> np.ndarray:
    """lambda(alpha) = pdf(alpha) / cdf(alpha), stable far into the left tail."""
    alpha = np.asarray(alpha, dtype=float)
    log_pdf = -0.5 * alpha * alpha - _LOG_SQRT_2PI
    out = np.exp(log_pdf - special.log_ndtr(alpha))
    return np.where(np.isposinf(alpha), 0.0, out)


def _hazard_slope(alpha, lam):
    # d lambda / d alpha = -lambda (alpha + lambda)
    return -lam * (alpha + lam)


@dataclass(frozen=True)
class TruncationTerms:
    """Per-time-point quantities of the truncated noise model for one species.

    K is the (possibly state-dependent) noise variance, alpha the state
    standardized by the noise sd relative to the truncation point, lam the
    standard-normal hazard at alpha, and J = K * (1 - alpha * lam) the
    second moment E[(Y - X)^2] under the truncated noise.
    """

    K: np.ndarray
    alpha: np.ndarray
    lam: np.ndarray
    J: np.ndarray


def truncation_terms(x: np.ndarray, variance: np.ndarray, lower_bound: float) -> TruncationTerms:
    """Evaluate the truncation quantities for one species along the trajectory."""
    if not np.isfinite(lower_bound):
        return TruncationTerms(
            K=variance,
            alpha=np.full_like(variance, np.inf),
            lam=np.zeros_like(variance),
            J=variance.copy(),
        )
    alpha = (x - lower_bound) / np.sqrt(variance)
    log_cdf = special.log_ndtr(alpha)
    bad = log_cdf < np.log(1e-300)
    if np.any(bad):
        raise DegenerateTruncationError(
            f"truncated noise mass underflows at time index {int(np.argmax(bad))}"
        )
    lam = standard_normal_hazard(alpha)
    return TruncationTerms(K=variance, alpha=alpha, lam=lam, J=variance * (1.0 - alpha * lam))


def truncated_normal_moments(mu: float, sigma: float, a: float, b: float) -> tuple[float, float]:
    """Mean and variance of a normal restricted to the interval (a, b).

    Standard closed forms in the pdf/cdf of the standardized bounds; infinite
    bounds are handled by the limits pdf -> 0 and bound * pdf -> 0.

    Raises:
        DegenerateTruncationError: If the interval mass falls below 1e-300.
    """
    if not sigma > 0.0:
        raise ConfigurationError("sigma must be positive")
    if not a < b:
        raise ConfigurationError("need a < b")

    def _z(v):
        return (v - mu) / sigma

    def _pdf(z):
        return 0.0 if np.isinf(z) else float(np.exp(-0.5 * z * z - _LOG_SQRT_2PI))

    def _cdf(z):
        if np.isneginf(z):
            return 0.0
        if np.isposinf(z):
            return 1.0
        return float(special.ndtr(z))

    za, zb = _z(a), _z(b)
    mass = _cdf(zb) - _cdf(za)
    if mass < 1e-300:
        raise DegenerateTruncationError(f"interval ({a}, {b}) carries mass {mass}")
    pa, pb = _pdf(za), _pdf(zb)
    shift = (pa - pb) / mass
    za_pa = 0.0 if np.isinf(za) else za * pa
    zb_pb = 0.0 if np.isinf(zb) else zb * pb
    mean = mu + sigma * shift
    var = sigma * sigma * (1.0 + (za_pa - zb_pb) / mass - shift * shift)
    return float(mean), float(var)


@dataclass
class RegularizedMetric:
    """Positive-definite repair of a metric: matrix, factor and audit trail."""

    matrix: np.ndarray
    chol: np.ndarray
    jitter: float
    flagged_singular: bool


_JITTER_MULTIPLIERS = (0.0, 1e-10, 1e-8, 1e-6, 1e-4, 1e-2)
_ABSOLUTE_FLOOR = 1e-12


def regularize(g: np.ndarray) -> RegularizedMetric:
    """Make a symmetric metric factorizable with the smallest ladder jitter.

    Tries jitter values {0, 1e-10, ..., 1e-2} * trace(g)/D in turn (with an
    absolute floor of 1e-12 when the trace vanishes) until the Cholesky
    factorization succeeds.  A nonzero jitter flags the metric as singular.

    Raises:
        SingularMetricError: If the largest ladder entry still fails.
    """
    g = np.asarray(g, dtype=float)
    if g.ndim != 2 or g.shape[0] != g.shape[1]:
        raise ConfigurationError("metric must be a square matrix")
    if not np.allclose(g, g.T, atol=1e-12, rtol=1e-9):
        raise ConfigurationError("metric must be symmetric")
    d = g.shape[0]
    scale = float(np.trace(g)) / d
    eye = np.eye(d)
    for m in _JITTER_MULTIPLIERS:
        jitter = 0.0 if m == 0.0 else max(m * scale, _ABSOLUTE_FLOOR)
        try:
            chol = np.linalg.cholesky(g + jitter * eye)
        except np.linalg.LinAlgError:
            continue
        return RegularizedMetric(
            matrix=g + jitter * eye,
            chol=chol,
            jitter=jitter,
            flagged_singular=jitter > 0.0,
        )
    raise SingularMetricError(f"metric not positive definite at maximum jitter (trace {np.trace(g)})")


def _lik_terms(sens, noise: NoiseModel):
    """Sensitivities transformed so the normal-noise contraction applies.

    For log-normal noise the observations live in log space, which divides
    the state sensitivities by the state (chain rule through log X).
    """
    X = np.asarray(sens.X, dtype=float)
    S = np.asarray(sens.S, dtype=float)
    dS = None if sens.dS is None else np.asarray(sens.dS, dtype=float)
    if noise.kind == "normal":
        return S, dS
    if np.any(X <= 0.0):
        raise ConfigurationError("lognormal noise requires strictly positive states")
    St = S / X[:, None, :]
    dSt = None
    if dS is not None:
        dSt = dS / X[:, None, None, :] - np.einsum("tid,tkd->tkid", S, S) / (X**2)[:, None, None, :]
    return St, dSt


def fisher_metric(phi: float, sens, noise: NoiseModel, prior: PriorSpec, xi,
                  with_derivative: bool = True) -> MetricBundle:
    """Expected Fisher metric for homoscedastic, untruncated noise.

    Args:
        phi: Tempering exponent in [0, 1].
        sens: Sensitivity bundle with fields X (tau, D_x), S (tau, D_xi, D_x)
            and, when the derivative is requested, dS (tau, D_xi, D_xi, D_x).
        noise: Noise model; must be plain normal or lognormal.
        prior: Prior whose curvature h_ij enters additively.  The expectation
            of h_ij over data is h_ij itself since it depends on xi only.
        xi: Parameter point (for the prior term).

    Returns:
        MetricBundle with g = phi * likelihood Gram + h and, optionally,
        dg assembled from the second-order sensitivities.
    """
    if noise.kind == "normal" and not noise.is_plain_normal:
        raise ConfigurationError("use fisher_metric_extended for heteroscedastic or truncated noise")
    S, dS = _lik_terms(sens, noise)
    if S.shape[2] != noise.sigma.size:
        raise ConfigurationError(
            f"sensitivities carry {S.shape[2]} species, noise model {noise.sigma.size}"
        )
    inv_var = 1.0 / noise.sigma**2
    h, dh = prior_hessian(prior, xi)
    g = phi * np.einsum("tid,tjd,d->ij", S, S, inv_var) + h
    if not with_derivative:
        return MetricBundle(g=g)
    if dS is None:
        raise CapabilityError("metric derivative needs second-order sensitivities")
    half = np.einsum("tkid,tjd,d->kij", dS, S, inv_var)
    dg = phi * (half + half.transpose(0, 2, 1)) + dh
    return MetricBundle(g=g, dg=dg)


def fisher_metric_extended(phi: float, sens, noise: NoiseModel, prior: PriorSpec, xi,
                           with_derivative: bool = True) -> MetricBundle:
    """Fisher metric under heteroscedastic and/or positivity-truncated noise.

    Reduces exactly to ``fisher_metric`` when the heteroscedastic scale is
    zero and the truncation bound is -inf.  The derivative tensor is obtained
    by term-by-term differentiation of the metric expression (validated
    against finite differences in the test suite) and needs third-order
    sensitivities whenever the noise variance actually depends on the state.
    """
    if noise.kind != "normal":
        raise ConfigurationError("extended metric applies to normal noise only")
    X = np.asarray(sens.X, dtype=float)
    S = np.asarray(sens.S, dtype=float)
    dS = None if sens.dS is None else np.asarray(sens.dS, dtype=float)
    ddS = None if getattr(sens, "ddS", None) is None else np.asarray(sens.ddS, dtype=float)
    n_species = noise.sigma.size
    if X.shape[1] != n_species:
        raise ConfigurationError("state/noise species mismatch")
    if dS is None:
        raise CapabilityError("extended metric needs at least second-order sensitivities")
    state_dependent = bool(np.any(noise.hetero_sigma > 0.0))
    truncated = np.isfinite(noise.lower_bound)
    if with_derivative and (state_dependent or truncated) and ddS is None:
        raise CapabilityError("derivative of the extended metric needs third-order sensitivities")

    d_xi = S.shape[1]
    h, dh = prior_hessian(prior, xi)
    g = np.zeros((d_xi, d_xi))
    dg = np.zeros((d_xi, d_xi, d_xi)) if with_derivative else None

    for d in range(n_species):
        x = X[:, d]
        s = S[:, :, d]              # (tau, D_xi)
        ds = dS[:, :, :, d]         # (tau, k, i)
        dds = None if ddS is None else ddS[:, :, :, :, d]
        sig2 = noise.sigma[d] ** 2
        het2 = noise.hetero_sigma[d] ** 2

        K = sig2 + het2 * x * x
        terms = truncation_terms(x, K, noise.lower_bound)
        lam, alpha, J = terms.lam, terms.alpha, terms.J
        sqrtK = np.sqrt(K)
        shift = sqrtK * lam                      # E[Y - X] under the truncation
        Kinv = 1.0 / K

        dK = 2.0 * het2 * x[:, None] * s                        # (tau, i)
        ddK = 2.0 * het2 * (np.einsum("ti,tj->tij", s, s) + x[:, None, None] * ds.transpose(0, 2, 1))
        # ddK[t, i, j] must be symmetric; ds[t, k, i] = d_k S_i so transpose aligns (i, j).
        dKinv = -(Kinv**2)[:, None] * dK
        ddKinv = (2.0 * Kinv**3)[:, None, None] * np.einsum("ti,tj->tij", dK, dK) - (
            Kinv**2
        )[:, None, None] * ddK

        main = np.einsum("ti,tj,t->ij", s, s, Kinv)
        # L[t, i, j] = Kinv dS_ij + dKinv_i S_j + dKinv_j S_i
        L = (
            Kinv[:, None, None] * ds.transpose(0, 2, 1)
            + np.einsum("ti,tj->tij", dKinv, s)
            + np.einsum("tj,ti->tij", dKinv, s)
        )
        term2 = -np.einsum("tij,t->ij", L, shift)
        term3 = 0.5 * np.einsum("tij,t->ij", ddKinv, J)
        g += main + term2 + term3

        if not with_derivative:
            continue

        if dds is None:
            dds_t = np.zeros((x.size, d_xi, d_xi, d_xi))
        else:
            dds_t = dds  # (tau, k, i, j) -> d_k d_i S_j after transposes below
        # Third derivative of K; zero unless the variance is state dependent.
        dddK = 2.0 * het2 * (
            np.einsum("tki,tj->tkij", ds, s)
            + np.einsum("tkj,ti->tkij", ds, s)
            + np.einsum("tk,tij->tkij", s, ds.transpose(0, 2, 1))
            + x[:, None, None, None] * dds_t.transpose(0, 1, 3, 2)
        )
        dddKinv = (
            -(6.0 * Kinv**4)[:, None, None, None]
            * np.einsum("tk,ti,tj->tkij", dK, dK, dK)
            + (2.0 * Kinv**3)[:, None, None, None]
            * (
                np.einsum("tki,tj->tkij", ddK, dK)
                + np.einsum("tkj,ti->tkij", ddK, dK)
                + np.einsum("tk,tij->tkij", dK, ddK)
            )
            - (Kinv**2)[:, None, None, None] * dddK
        )
        if truncated:
            dalpha = s / sqrtK[:, None] - 0.5 * ((x - noise.lower_bound) / K**1.5)[:, None] * dK
            lam_slope = _hazard_slope(alpha, lam)
        else:
            dalpha = np.zeros_like(s)
            lam_slope = np.zeros_like(lam)
        dshift = 0.5 * (lam / sqrtK)[:, None] * dK + sqrtK[:, None] * lam_slope[:, None] * dalpha
        # J/K = 1 - alpha*lam, well defined (equal to one) without truncation
        dJ = dK * (J / K)[:, None]
        if truncated:
            dJ = dJ - (K * (lam + alpha * lam_slope))[:, None] * dalpha

        dmain = (
            np.einsum("tki,tj,t->kij", ds, s, Kinv)
            + np.einsum("tkj,ti,t->kij", ds, s, Kinv)
            + np.einsum("ti,tj,tk->kij", s, s, dKinv)
        )
        dL = (
            np.einsum("tk,tij->tkij", dKinv, ds.transpose(0, 2, 1))
            + Kinv[:, None, None, None] * dds_t.transpose(0, 1, 3, 2)
            + np.einsum("tki,tj->tkij", ddKinv, s)
            + np.einsum("ti,tkj->tkij", dKinv, ds)
            + np.einsum("tkj,ti->tkij", ddKinv, s)
            + np.einsum("tj,tki->tkij", dKinv, ds)
        )
        dterm2 = -(np.einsum("tkij,t->kij", dL, shift) + np.einsum("tij,tk->kij", L, dshift))
        dterm3 = 0.5 * (
            np.einsum("tkij,t->kij", dddKinv, J) + np.einsum("tij,tk->kij", ddKinv, dJ)
        )
        dg += dmain + dterm2 + dterm3

    g = phi * g + h
    if with_derivative:
        dg = phi * dg + dh
        return MetricBundle(g=g, dg=dg)
    return MetricBundle(g=g)
