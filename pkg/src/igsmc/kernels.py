"""Transition kernels for the SMC moves.

Provides the proposal builders (uniform random walk, globally adaptive MVN
random walk, manifold MALA with Euler / simplified / Ozaki discretisations),
the Metropolis-Hastings accept step, and thin kernel classes the sampler
engine drives one particle at a time.

The manifold-MALA proposal is the Gaussian N(mu(xi, eps), eps^2 g^{-1}) whose
drift combines the natural gradient with metric-derivative corrections:

    mu^i = xi^i + (eps^2/2) g^{ij} d_j l
           - eps^2 g^{ik} (d_j g_kl) g^{lj} + (eps^2/2) g^{ij} g^{kl} d_j g_kl.

The last two terms appear with half this weight in part of the literature;
``drift_form="christoffel"`` selects that halved variant.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg as sla
from scipy import special

from .core import (
    ConfigurationError,
    DegeneratePopulationError,
    IgsmcError,
    IntegrationError,
    SingularMetricError,
)
from .metric import regularize

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


@dataclass
class KernelProposal:
    """A Gaussian proposal: mean, covariance and log-density evaluation.

    Attributes:
        mean: Proposal mean, shape (D,).
        cov: Proposal covariance, SPD after construction-time regularization.
        jitter: Jitter the metric regularization had to add upstream (audit).
    """

    mean: np.ndarray
    cov: np.ndarray
    jitter: float = 0.0
    _chol: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        cov = 0.5 * (cov + cov.T)
        reg = regularize(cov)
        self.cov = reg.matrix
        self._chol = reg.chol

    def sample(self, rng) -> np.ndarray:
        z = rng.standard_normal(self.mean.size)
        return self.mean + self._chol @ z

    def log_density(self, at) -> float:
        d = np.atleast_1d(np.asarray(at, dtype=float)) - self.mean
        y = sla.solve_triangular(self._chol, d, lower=True)
        logdet = 2.0 * np.sum(np.log(np.diag(self._chol)))
        return float(-0.5 * y @ y - 0.5 * logdet - self.mean.size * _LOG_SQRT_2PI)


@dataclass
class MoveRecord:
    """Bookkeeping for one MH move."""

    proposed: np.ndarray
    accepted: bool
    log_alpha: float
    log_q_forward: float = float("nan")
    log_q_reverse: float = float("nan")
    failure: str | None = None


def mh_step(log_target, current, proposal_fn, rng) -> MoveRecord:
    """One Metropolis-Hastings step with asymmetric Gaussian proposals.

    Args:
        log_target: Callable xi -> unnormalized log-density; -inf outside the
            support.
        current: Current point; log_target must be finite here.
        proposal_fn: Callable xi -> KernelProposal for moves from xi.
        rng: numpy Generator.

    Returns:
        MoveRecord; out-of-support proposals are rejected with log_alpha -inf
        and no reverse-density evaluation.
    """
    current = np.atleast_1d(np.asarray(current, dtype=float))
    lt_current = float(log_target(current))
    if not np.isfinite(lt_current):
        raise IgsmcError("log-target must be finite at the current point")
    fwd = proposal_fn(current)
    proposed = fwd.sample(rng)
    log_q_fwd = fwd.log_density(proposed)
    if not np.isfinite(log_q_fwd):
        raise IgsmcError("forward proposal density is not finite (contract violation)")
    lt_prop = float(log_target(proposed))
    if lt_prop == float("-inf"):
        rng.uniform()  # burn the accept draw so move counts stay aligned
        return MoveRecord(proposed=proposed, accepted=False, log_alpha=float("-inf"),
                          log_q_forward=log_q_fwd)
    rev = proposal_fn(proposed)
    log_q_rev = rev.log_density(current)
    log_alpha = min(0.0, lt_prop + log_q_rev - lt_current - log_q_fwd)
    accepted = bool(np.log(rng.uniform()) < log_alpha)
    return MoveRecord(proposed=proposed, accepted=accepted, log_alpha=log_alpha,
                      log_q_forward=log_q_fwd, log_q_reverse=log_q_rev)


# ---------------------------------------------------------------------------
# Uniform random walk and its analytic MH kernel density on Gaussian targets
# ---------------------------------------------------------------------------

def rw_uniform_propose(xi, width: float, rng) -> np.ndarray:
    """Componentwise uniform draw on [xi - width/2, xi + width/2]."""
    if width <= 0.0:
        raise ConfigurationError("proposal width must be positive")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    return xi + width * (rng.uniform(size=xi.size) - 0.5)


def _log_gauss_mass(lo, hi):
    """log(Phi(hi) - Phi(lo)) for standardized bounds lo < hi, tail-stable."""
    if lo >= hi:
        return float("-inf")
    if lo + hi < 0.0:
        a, b = special.log_ndtr(hi), special.log_ndtr(lo)
    else:  # work in the right tail via symmetry
        a, b = special.log_ndtr(-lo), special.log_ndtr(-hi)
    if b == float("-inf"):
        return float(a)
    return float(a + np.log1p(-np.exp(b - a)))


def rw_uniform_rejection_mass(xi: float, mu: float, sigma: float, width: float) -> float:
    """Probability that a uniform-proposal MH move from xi is rejected.

    The target is N(mu, sigma^2).  Inside the proposal box, moves closer to
    the mode always accept; the remainder accepts with the Gaussian density
    ratio, whose integral has a closed form in Phi.
    """
    m = abs(xi - mu)
    half = 0.5 * width
    lo, hi = xi - half, xi + half
    inner = max(lo, mu - m), min(hi, mu + m)
    certain = max(0.0, inner[1] - inner[0])

    ratio_mass = 0.0
    log_pref = m * m / (2.0 * sigma * sigma) + _LOG_SQRT_2PI + np.log(sigma)
    for a, b in ((lo, min(hi, mu - m)), (max(lo, mu + m), hi)):
        if b > a:
            lm = _log_gauss_mass((a - mu) / sigma, (b - mu) / sigma)
            ratio_mass += np.exp(log_pref + lm)
    return float(np.clip(1.0 - (certain + ratio_mass) / width, 0.0, 1.0))


def rw_uniform_kernel_density(xi_prev: float, xi_new: float, mu: float, sigma: float,
                              width: float) -> float:
    """MH transition kernel of a uniform proposal targeting N(mu, sigma^2).

    Returns the transition density for xi_new != xi_prev (zero outside the
    proposal box) and the rejection probability mass for xi_new == xi_prev.
    """
    if width <= 0.0 or sigma <= 0.0:
        raise ConfigurationError("width and sigma must be positive")
    if xi_new == xi_prev:
        return rw_uniform_rejection_mass(xi_prev, mu, sigma, width)
    if abs(xi_new - xi_prev) > 0.5 * width:
        return 0.0
    log_ratio = ((xi_prev - mu) ** 2 - (xi_new - mu) ** 2) / (2.0 * sigma * sigma)
    return float(np.exp(min(0.0, log_ratio)) / width)


def rw_uniform_kernel_density_matrix(new_positions, prev_positions, mu: float, sigma: float,
                                     width: float) -> np.ndarray:
    """Kernel density evaluated for every (new, previous) particle pair.

    Vectorized version of ``rw_uniform_kernel_density`` used by the
    full-expression incremental weights; entry [n, m] is K(new_n | prev_m).
    """
    new = np.asarray(new_positions, dtype=float).ravel()
    prev = np.asarray(prev_positions, dtype=float).ravel()
    delta = new[:, None] - prev[None, :]
    log_ratio = ((prev[None, :] - mu) ** 2 - (new[:, None] - mu) ** 2) / (2.0 * sigma**2)
    dens = np.exp(np.minimum(0.0, log_ratio)) / width
    dens[np.abs(delta) > 0.5 * width] = 0.0
    stayed = delta == 0.0
    if np.any(stayed):
        for n, m in zip(*np.nonzero(stayed)):
            dens[n, m] = rw_uniform_rejection_mass(prev[m], mu, sigma, width)
    return dens


# ---------------------------------------------------------------------------
# Globally adaptive MVN random walk
# ---------------------------------------------------------------------------

class AdaptiveMVNProposal:
    """Zero-mean MVN perturbation scaled to the current population spread.

    The covariance is the weighted sample covariance of the particles times
    the asymptotic factor 2.38^2 / D, regularized through the jitter ladder
    when the sample covariance is rank deficient.
    """

    def __init__(self, positions, weights):
        x = np.atleast_2d(np.asarray(positions, dtype=float))
        w = np.asarray(weights, dtype=float)
        w = w / np.sum(w)
        n, d = x.shape
        if n < 2 or np.all(np.ptp(x, axis=0) == 0.0):
            raise DegeneratePopulationError(
                "adaptive proposal needs at least two distinct particles"
            )
        mean = w @ x
        centered = x - mean
        cov = (centered * w[:, None]).T @ centered
        scaled = (2.38**2 / d) * cov
        reg = regularize(scaled)
        self.cov = reg.matrix
        self.jitter = reg.jitter
        self.dim = d

    def __call__(self, xi) -> KernelProposal:
        return KernelProposal(mean=np.asarray(xi, dtype=float), cov=self.cov, jitter=self.jitter)


def adaptive_mvn_proposal(positions, weights) -> AdaptiveMVNProposal:
    """Build the adaptive-MVN proposal factory from a weighted population."""
    return AdaptiveMVNProposal(positions, weights)


# ---------------------------------------------------------------------------
# Manifold MALA proposals
# ---------------------------------------------------------------------------

def _drift_correction(ginv: np.ndarray, dg: np.ndarray) -> np.ndarray:
    """Metric-derivative part of the drift rate (full weight)."""
    # v2^i = g^{ik} (d_j g_kl) g^{lj};  v3^i = g^{ij} g^{kl} d_j g_kl
    v2 = np.einsum("ik,jkl,lj->i", ginv, dg, ginv)
    v3 = np.einsum("ij,jkl,kl->i", ginv, dg, ginv)
    return -v2 + 0.5 * v3


def mmala_drift_rate(model, xi, phi: float, drift_form: str = "expanded",
                     prep=None) -> tuple[np.ndarray, np.ndarray, float]:
    """Drift rate b(xi) of the manifold Langevin diffusion and g^{-1}.

    The Euler proposal mean is xi + eps^2 * b.  Returns (b, ginv, jitter).
    """
    if drift_form not in ("expanded", "christoffel"):
        raise ConfigurationError(f"unknown drift form {drift_form!r}")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    bundle = model.metric_bundle(xi, phi, with_derivative=True, prep=prep)
    grad = model.grad_log_gamma(xi, phi, prep=prep)
    reg = regularize(bundle.g)
    ident = np.eye(xi.size)
    ginv = sla.cho_solve((reg.chol, True), ident)
    correction = _drift_correction(ginv, bundle.dg)
    if drift_form == "christoffel":
        correction = 0.5 * correction
    b = 0.5 * ginv @ grad + correction
    return b, ginv, reg.jitter


def mmala_euler_proposal(model, xi, phi: float, epsilon: float,
                         drift_form: str = "expanded", prep=None) -> KernelProposal:
    """First-order (Euler) discretisation of the manifold Langevin diffusion."""
    if epsilon <= 0.0:
        raise ConfigurationError("epsilon must be positive")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    b, ginv, jitter = mmala_drift_rate(model, xi, phi, drift_form=drift_form, prep=prep)
    eps2 = epsilon * epsilon
    return KernelProposal(mean=xi + eps2 * b, cov=eps2 * ginv, jitter=jitter)


def mmala_simplified_proposal(model, xi, phi: float, epsilon: float, prep=None) -> KernelProposal:
    """Natural-gradient-only variant; needs the metric but not its derivative."""
    if epsilon <= 0.0:
        raise ConfigurationError("epsilon must be positive")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    bundle = model.metric_bundle(xi, phi, with_derivative=False, prep=prep)
    grad = model.grad_log_gamma(xi, phi, prep=prep)
    reg = regularize(bundle.g)
    ginv = sla.cho_solve((reg.chol, True), np.eye(xi.size))
    eps2 = epsilon * epsilon
    return KernelProposal(mean=xi + 0.5 * eps2 * ginv @ grad, cov=eps2 * ginv, jitter=reg.jitter)


def phi1m(m: np.ndarray) -> np.ndarray:
    """phi_1(M) = integral_0^1 exp(M s) ds = M^{-1} (e^M - I), defined for all M.

    Small arguments use the series sum M^k / (k+1)!; otherwise the block
    matrix [[M, I], [0, 0]] is exponentiated, whose top-right block is
    exactly phi_1(M).
    """
    m = np.atleast_2d(np.asarray(m, dtype=float))
    d = m.shape[0]
    if np.linalg.norm(m, 1) < 0.5:
        out = np.eye(d)
        term = np.eye(d)
        for k in range(2, 30):
            term = term @ m / k
            out = out + term
            if np.linalg.norm(term, 1) < 1e-17 * np.linalg.norm(out, 1):
                break
        return out
    block = np.zeros((2 * d, 2 * d))
    block[:d, :d] = m
    block[:d, d:] = np.eye(d)
    return sla.expm(block)[:d, d:]


def mmala_ozaki_proposal(model, xi, phi: float, epsilon: float,
                         drift_form: str = "expanded", fd_step: float = 1e-6,
                         prep=None) -> KernelProposal:
    """Ozaki discretisation: the drift is linearized through its Jacobian.

    mean = xi + J^{-1}(exp(eps^2 J) - I) b and cov = (1/2) g^{-1} J^{-1}
    (exp(2 eps^2 J) - I), both evaluated through phi_1 so a singular J is
    harmless.  J is obtained by central finite differences of the drift rate
    (step fd_step * max(1, |xi_j|) per coordinate).
    """
    if epsilon <= 0.0:
        raise ConfigurationError("epsilon must be positive")
    xi = np.atleast_1d(np.asarray(xi, dtype=float))
    d = xi.size
    b, ginv, jitter = mmala_drift_rate(model, xi, phi, drift_form=drift_form, prep=prep)

    jac = np.empty((d, d))
    for j in range(d):
        h = fd_step * max(1.0, abs(xi[j]))
        hi, lo = xi.copy(), xi.copy()
        hi[j] += h
        lo[j] -= h
        b_hi, _, _ = mmala_drift_rate(model, hi, phi, drift_form=drift_form,
                                      prep=model.prepare(hi, order=2))
        b_lo, _, _ = mmala_drift_rate(model, lo, phi, drift_form=drift_form,
                                      prep=model.prepare(lo, order=2))
        jac[:, j] = (b_hi - b_lo) / (2.0 * h)

    eps2 = epsilon * epsilon
    mean = xi + eps2 * phi1m(eps2 * jac) @ b
    cov = eps2 * ginv @ phi1m(2.0 * eps2 * jac)
    return KernelProposal(mean=mean, cov=0.5 * (cov + cov.T), jitter=jitter)


# ---------------------------------------------------------------------------
# Kernel classes driven by the SMC engine
# ---------------------------------------------------------------------------

@dataclass
class MoveOutcome:
    """What one particle's move(s) produced within a population."""

    position: np.ndarray
    prep: object
    accepted: int = 0
    attempts: int = 0
    jitter_events: int = 0
    failures: int = 0


class UniformRWKernel:
    """Local random walk with a fixed componentwise uniform proposal."""

    required_order = 0

    def __init__(self, width: float, steps: int = 1):
        if width <= 0.0:
            raise ConfigurationError("width must be positive")
        if steps < 1:
            raise ConfigurationError("need at least one MH step")
        self.width = float(width)
        self.steps = int(steps)

    def make_context(self, target, positions, weights):
        return None

    def move(self, target, xi, prep, rng, ctx) -> MoveOutcome:
        out = MoveOutcome(position=np.array(xi, dtype=float), prep=prep)
        lg = target.log_gamma(out.position, prep=out.prep)
        for _ in range(self.steps):
            out.attempts += 1
            prop = rw_uniform_propose(out.position, self.width, rng)
            u = rng.uniform()
            if not target.support_check(prop):
                continue
            try:
                prep_new = target.prepare(prop, order=0)
            except IntegrationError:
                out.failures += 1
                continue
            lg_new = target.log_gamma(prop, prep=prep_new)
            if np.log(u) < lg_new - lg:
                out.position, out.prep, lg = prop, prep_new, lg_new
                out.accepted += 1
        return out

    def transition_density_matrix(self, target, new_positions, prev_positions) -> np.ndarray:
        """MH transition density K(new_n | prev_m) for every particle pair.

        Available for univariate Gaussian targets (the closed form includes
        the rejection atom on the diagonal), and only for single-step moves.
        """
        if self.steps != 1:
            raise ConfigurationError("transition density covers single-step moves only")
        try:
            mu, sigma = target.mu, target.sigma
        except AttributeError as exc:
            raise CapabilityError(
                "analytic kernel density known only for univariate Gaussian targets"
            ) from exc
        return rw_uniform_kernel_density_matrix(
            np.asarray(new_positions).ravel(), np.asarray(prev_positions).ravel(),
            mu, sigma, self.width,
        )

    def transition_density_diagonal(self, target, new_positions, prev_positions) -> np.ndarray:
        """K(new_n | prev_n) for matched pairs only (cheap diagonal case)."""
        if self.steps != 1:
            raise ConfigurationError("transition density covers single-step moves only")
        try:
            mu, sigma = target.mu, target.sigma
        except AttributeError as exc:
            raise CapabilityError(
                "analytic kernel density known only for univariate Gaussian targets"
            ) from exc
        new = np.asarray(new_positions, dtype=float).ravel()
        prev = np.asarray(prev_positions, dtype=float).ravel()
        log_ratio = ((prev - mu) ** 2 - (new - mu) ** 2) / (2.0 * sigma**2)
        dens = np.exp(np.minimum(0.0, log_ratio)) / self.width
        dens[np.abs(new - prev) > 0.5 * self.width] = 0.0
        stayed = np.nonzero(new == prev)[0]
        for m in stayed:
            dens[m] = rw_uniform_rejection_mass(prev[m], mu, sigma, self.width)
        return dens


class AdaptiveMVNKernel:
    """Random walk whose covariance adapts to the population each barrier."""

    required_order = 0

    def __init__(self, steps: int = 1):
        if steps < 1:
            raise ConfigurationError("need at least one MH step")
        self.steps = int(steps)

    def make_context(self, target, positions, weights):
        return adaptive_mvn_proposal(positions, weights)

    def move(self, target, xi, prep, rng, ctx) -> MoveOutcome:
        out = MoveOutcome(position=np.array(xi, dtype=float), prep=prep)
        if ctx.jitter > 0.0:
            out.jitter_events += 1
        lg = target.log_gamma(out.position, prep=out.prep)
        chol = ctx(out.position)._chol  # same covariance for every particle
        for _ in range(self.steps):
            out.attempts += 1
            prop = out.position + chol @ rng.standard_normal(out.position.size)
            u = rng.uniform()
            if not target.support_check(prop):
                continue
            try:
                prep_new = target.prepare(prop, order=0)
            except IntegrationError:
                out.failures += 1
                continue
            lg_new = target.log_gamma(prop, prep=prep_new)
            if np.log(u) < lg_new - lg:
                out.position, out.prep, lg = prop, prep_new, lg_new
                out.accepted += 1
        return out


class MmalaKernel:
    """Manifold-MALA moves (Euler, simplified, or Ozaki discretisation)."""

    def __init__(self, epsilon: float, variant: str = "euler",
                 drift_form: str = "expanded", steps: int = 1):
        if epsilon <= 0.0:
            raise ConfigurationError("epsilon must be positive")
        if variant not in ("euler", "simplified", "ozaki"):
            raise ConfigurationError(f"unknown mMALA variant {variant!r}")
        if steps < 1:
            raise ConfigurationError("need at least one MH step")
        self.epsilon = float(epsilon)
        self.variant = variant
        self.drift_form = drift_form
        self.steps = int(steps)

    @property
    def required_order(self) -> int:
        return 1 if self.variant == "simplified" else 2

    def make_context(self, target, positions, weights):
        return None

    def _proposal(self, target, xi, prep) -> KernelProposal:
        if self.variant == "euler":
            return mmala_euler_proposal(target.model, xi, target.phi, self.epsilon,
                                        drift_form=self.drift_form, prep=prep)
        if self.variant == "simplified":
            return mmala_simplified_proposal(target.model, xi, target.phi, self.epsilon,
                                             prep=prep)
        return mmala_ozaki_proposal(target.model, xi, target.phi, self.epsilon,
                                    drift_form=self.drift_form, prep=prep)

    def move(self, target, xi, prep, rng, ctx) -> MoveOutcome:
        out = MoveOutcome(position=np.array(xi, dtype=float), prep=prep)
        lg = target.log_gamma(out.position, prep=out.prep)
        for _ in range(self.steps):
            out.attempts += 1
            fwd = self._proposal(target, out.position, out.prep)
            if fwd.jitter > 0.0:
                out.jitter_events += 1
            prop = fwd.sample(rng)
            u = rng.uniform()
            if not target.support_check(prop):
                continue
            try:
                prep_new = target.prepare(prop, order=self.required_order)
                rev = self._proposal(target, prop, prep_new)
            except (IntegrationError, SingularMetricError):
                out.failures += 1
                continue
            if rev.jitter > 0.0:
                out.jitter_events += 1
            lg_new = target.log_gamma(prop, prep=prep_new)
            log_alpha = lg_new + rev.log_density(out.position) - lg - fwd.log_density(prop)
            if np.log(u) < log_alpha:
                out.position, out.prep, lg = prop, prep_new, lg_new
                out.accepted += 1
        return out
