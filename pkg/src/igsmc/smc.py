"""The SMC sampler engine: schedule iteration, moves, weighting, resampling.

The sampler walks a weighted particle population through a sequence of
distributions on a shared support.  Each population first resamples if the
effective sample size has degenerated, then moves every particle through an
MCMC kernel targeting the next distribution, then updates the weights with
an incremental factor, either

* ``simple``      -- gamma_a(xi) / gamma_{a-1}(xi) at the pre-move position
                     (exact for MCMC kernels when adjacent targets are close), or
* ``full_kernel`` -- gamma_a(xi') / sum_m W_m K_a(xi' | xi_m), the particle
                     approximation of the full expression, needed when
                     adjacent targets may be far apart.

All weights are carried in log space; per-particle RNG streams make runs
bitwise reproducible regardless of scheduling.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    CapabilityError,
    ConfigurationError,
    DegeneratePopulationError,
    IntegrationError,
    Population,
    TemperingSchedule,
    barrier_rng,
    ess as ess_of,
    normalize_weights,
    particle_rng,
    resample_indices,
)
from .geodesic import GaussianPoint

_LOG_SQRT_2PI = 0.5 * np.log(2.0 * np.pi)


# ---------------------------------------------------------------------------
# Distribution sequences and per-population target views
# ---------------------------------------------------------------------------

@dataclass
class TemperedTarget:
    """One tempered distribution: a model bound to a fixed exponent."""

    model: object
    phi: float

    def support_check(self, xi) -> bool:
        return self.model.support_check(xi)

    def prepare(self, xi, order: int = 0):
        return self.model.prepare(xi, order=order)

    def log_gamma(self, xi, prep=None) -> float:
        return self.model.log_gamma(xi, self.phi, prep=prep)


class TemperedSequence:
    """Distribution sequence prior * likelihood^phi_a along a schedule."""

    def __init__(self, model, schedule: TemperingSchedule):
        self.model = model
        self.schedule = schedule

    def __len__(self) -> int:
        return len(self.schedule)

    def phi(self, a: int) -> float:
        return float(self.schedule.phis[a])

    def target(self, a: int) -> TemperedTarget:
        return TemperedTarget(model=self.model, phi=self.phi(a))

    def sample_initial(self, rng, n: int) -> np.ndarray:
        return self.model.sample_prior(rng, n)

    def incremental_simple(self, a: int, xi, prep=None) -> float:
        """log gamma_a - log gamma_{a-1} at xi; tempering reduces it to
        (phi_a - phi_{a-1}) * log-likelihood."""
        dphi = self.phi(a) - self.phi(a - 1)
        if dphi == 0.0:
            return 0.0
        if not self.model.support_check(xi):
            return float("-inf")
        return dphi * self.model.log_likelihood(xi, prep=prep)


class GaussianTarget1D:
    """A univariate normal used directly as an SMC target distribution."""

    def __init__(self, point: GaussianPoint):
        self.mu = point.mu
        self.sigma = point.sigma

    def support_check(self, xi) -> bool:
        return True

    def prepare(self, xi, order: int = 0):
        return None

    def log_gamma(self, xi, prep=None) -> float:
        z = (float(np.asarray(xi).ravel()[0]) - self.mu) / self.sigma
        return float(-0.5 * z * z - np.log(self.sigma) - _LOG_SQRT_2PI)


class GaussianPathSequence:
    """A sequence of univariate normals along a path in distribution space."""

    def __init__(self, points: list[GaussianPoint]):
        if len(points) < 2:
            raise ConfigurationError("a path sequence needs at least 2 distributions")
        self.points = list(points)

    def __len__(self) -> int:
        return len(self.points)

    def target(self, a: int) -> GaussianTarget1D:
        return GaussianTarget1D(self.points[a])

    def sample_initial(self, rng, n: int) -> np.ndarray:
        p0 = self.points[0]
        return (p0.mu + p0.sigma * rng.standard_normal(n)).reshape(n, 1)

    def incremental_simple(self, a: int, xi, prep=None) -> float:
        new = self.target(a).log_gamma(xi)
        old = self.target(a - 1).log_gamma(xi)
        if new == float("-inf"):
            return float("-inf")
        return new - old


# ---------------------------------------------------------------------------
# Incremental weights (standalone forms of what the engine vectorizes)
# ---------------------------------------------------------------------------

def incremental_weight_simple(sequence, xi_prev, a: int, prep=None) -> float:
    """Log incremental weight gamma_a(xi)/gamma_{a-1}(xi) at the pre-move point."""
    return sequence.incremental_simple(a, xi_prev, prep=prep)


def incremental_weight_full(sequence, prev_positions, prev_weights, xi_new, a: int,
                            kernel, prep=None) -> float:
    """Log incremental weight from the full-expression particle approximation.

    The denominator smooths the previous weighted population through the
    transition kernel's density at the new point:
    log gamma_a(xi_new) - log sum_m W_m K_a(xi_new | xi_prev_m).
    """
    target = sequence.target(a)
    dens = kernel.transition_density_matrix(
        target, np.atleast_1d(xi_new).reshape(1, -1), np.atleast_2d(prev_positions)
    )[0]
    denom = float(dens @ np.asarray(prev_weights, dtype=float))
    num = target.log_gamma(np.atleast_1d(xi_new), prep=prep)
    if denom <= 0.0 or num == float("-inf"):
        return float("-inf")
    return num - float(np.log(denom))


# ---------------------------------------------------------------------------
# Engine
# ---------------------------------------------------------------------------

@dataclass
class SmcConfig:
    """Sampler configuration.

    Attributes:
        n_particles: Population size N (>= 2).
        ess_fraction: Resample when ESS < ess_fraction * N at the loop head;
            0 disables resampling entirely.
        mcmc_steps: MH steps per particle per population.
        weight_mode: ``simple`` or ``full_kernel``.
        full_kernel_pairing: How the full-expression denominator pairs new
            with previous particles: ``smoothed`` evaluates the kernel from
            every previous particle to each new one (the density of the
            kernel-smoothed previous population, the default); ``diagonal``
            pairs each new particle with its own ancestor only, giving a
            population-wide shared denominator.
        seed: Global seed deriving every stream in the run.
        resample_method: ``multinomial`` (default) or ``systematic`` (opt-in).
        store_history: Keep (positions, weights) of every population.
    """

    n_particles: int
    ess_fraction: float = 0.3
    mcmc_steps: int = 1
    weight_mode: str = "simple"
    full_kernel_pairing: str = "smoothed"
    seed: int = 0
    resample_method: str = "multinomial"
    store_history: bool = True

    def __post_init__(self):
        if self.n_particles < 2:
            raise ConfigurationError("need at least 2 particles")
        if not 0.0 <= self.ess_fraction <= 1.0:
            raise ConfigurationError("ess_fraction must lie in [0, 1]")
        if self.mcmc_steps < 1:
            raise ConfigurationError("need at least one MCMC step per population")
        if self.weight_mode not in ("simple", "full_kernel"):
            raise ConfigurationError(f"unknown weight mode {self.weight_mode!r}")
        if self.full_kernel_pairing not in ("smoothed", "diagonal"):
            raise ConfigurationError(f"unknown pairing {self.full_kernel_pairing!r}")


@dataclass
class PopulationDiagnostics:
    population: int            # 1-based index a
    phi: float                 # tempering exponent, nan for path sequences
    ess: float
    acceptance_rate: float     # nan for the initial population
    resampled: bool
    jitter_events: int
    integration_failures: int = 0
    zero_denominator_events: int = 0


@dataclass
class SmcResult:
    """Everything a finished run produced."""

    final: Population
    diagnostics: list[PopulationDiagnostics]
    mean: np.ndarray
    covariance: np.ndarray
    history: list[tuple[np.ndarray, np.ndarray]] | None
    seed: int


def summarize(result: SmcResult) -> dict:
    """Weighted first/second moments of the final population.

    Returns:
        dict with per-parameter weighted ``mean`` and ``sd`` vectors and the
        pairwise ``correlation`` matrix (unit diagonal; zero where an sd
        vanishes).
    """
    sd = np.sqrt(np.diag(result.covariance))
    denom = np.outer(sd, sd)
    with np.errstate(invalid="ignore", divide="ignore"):
        corr = np.where(denom > 0.0, result.covariance / np.where(denom > 0, denom, 1.0), 0.0)
    np.fill_diagonal(corr, 1.0)
    return {"mean": result.mean.copy(), "sd": sd, "correlation": corr}


def _weighted_moments(positions, weights):
    mean = weights @ positions
    centered = positions - mean
    cov = (centered * weights[:, None]).T @ centered
    return mean, cov


def run(config: SmcConfig, sequence, kernel, prior_sampler=None) -> SmcResult:
    """Run the SMC sampler along a distribution sequence.

    Args:
        config: Sampler settings (see SmcConfig).
        sequence: Distribution sequence (TemperedSequence, GaussianPathSequence,
            or anything matching their surface).
        kernel: Transition kernel instance from ``igsmc.kernels``.
        prior_sampler: Optional callable (rng, n) -> (n, D) overriding the
            sequence's initial sampler.

    Raises:
        DegeneratePopulationError: If every weight vanishes; the message
            carries the population index.
    """
    n = config.n_particles
    p = len(sequence)
    if config.weight_mode == "full_kernel":
        if not hasattr(kernel, "transition_density_matrix"):
            raise CapabilityError("this kernel provides no transition density; full_kernel weights unavailable")
        if config.mcmc_steps != 1:
            raise ConfigurationError("full_kernel weights require exactly one MH step per population")

    draw = prior_sampler if prior_sampler is not None else sequence.sample_initial
    positions = np.atleast_2d(np.asarray(draw(barrier_rng(config.seed, 0), n), dtype=float))
    if positions.shape[0] != n:
        raise ConfigurationError("initial sampler returned the wrong number of particles")
    preps: list = [None] * n
    prep_orders = np.full(n, -1, dtype=int)
    alive = np.ones(n, dtype=bool)

    weights = np.full(n, 1.0 / n)
    current_ess = float(n)
    phi0 = sequence.phi(0) if hasattr(sequence, "phi") else float("nan")
    diagnostics = [
        PopulationDiagnostics(population=1, phi=phi0, ess=current_ess,
                              acceptance_rate=float("nan"), resampled=False, jitter_events=0)
    ]
    history = [(positions.copy(), weights.copy())] if config.store_history else None

    req = kernel.required_order
    for a in range(1, p):
        target = sequence.target(a)

        resampled = False
        if config.ess_fraction > 0.0 and current_ess < config.ess_fraction * n:
            idx = resample_indices(weights, n, barrier_rng(config.seed, a),
                                   method=config.resample_method)
            positions = positions[idx]
            preps = [preps[i] for i in idx]
            prep_orders = prep_orders[idx]
            alive = alive[idx]
            weights = np.full(n, 1.0 / n)
            resampled = True

        failures = 0
        # Ensure every live particle carries a bundle rich enough for the kernel.
        for m in range(n):
            if alive[m] and prep_orders[m] < req:
                try:
                    preps[m] = target.prepare(positions[m], order=req)
                    prep_orders[m] = req
                except IntegrationError:
                    alive[m] = False
                    failures += 1

        ctx = kernel.make_context(target, positions, weights)
        prev_positions = positions.copy()
        prev_weights = weights.copy()
        prev_preps = list(preps)

        accepted = attempts = jitter = 0
        for m in range(n):
            if not alive[m]:
                continue
            rng = particle_rng(config.seed, a, m)
            out = kernel.move(target, positions[m], preps[m], rng, ctx)
            positions[m] = out.position
            if out.prep is not preps[m]:
                preps[m] = out.prep
                prep_orders[m] = req
            accepted += out.accepted
            attempts += out.attempts
            jitter += out.jitter_events
            failures += out.failures

        zero_denominator = 0
        with np.errstate(divide="ignore"):
            log_w = np.log(prev_weights)
        log_w[~alive] = -np.inf
        if config.weight_mode == "simple":
            for m in range(n):
                if alive[m] and log_w[m] > -np.inf:
                    log_w[m] += sequence.incremental_simple(a, prev_positions[m],
                                                            prep=prev_preps[m])
        else:
            if config.full_kernel_pairing == "smoothed":
                dens = kernel.transition_density_matrix(target, positions, prev_positions)
                denom = dens @ prev_weights
            else:
                diag = kernel.transition_density_diagonal(target, positions, prev_positions)
                denom = np.full(n, float(diag @ prev_weights))
            for m in range(n):
                if not (alive[m] and log_w[m] > -np.inf):
                    continue
                num = target.log_gamma(positions[m], prep=preps[m])
                if denom[m] <= 0.0 or num == float("-inf"):
                    log_w[m] = -np.inf
                    zero_denominator += 1
                else:
                    log_w[m] += num - np.log(denom[m])

        try:
            weights, _ = normalize_weights(log_w)
        except DegeneratePopulationError as exc:
            raise DegeneratePopulationError(f"population {a + 1}: {exc}") from exc
        current_ess = ess_of(weights)

        diagnostics.append(PopulationDiagnostics(
            population=a + 1,
            phi=sequence.phi(a) if hasattr(sequence, "phi") else float("nan"),
            ess=current_ess,
            acceptance_rate=accepted / attempts if attempts else float("nan"),
            resampled=resampled,
            jitter_events=jitter,
            integration_failures=failures,
            zero_denominator_events=zero_denominator,
        ))
        if history is not None:
            history.append((positions.copy(), weights.copy()))

    mean, cov = _weighted_moments(positions, weights)
    final = Population.from_arrays(positions, weights, temper_index=p,
                                   acceptance_rate=diagnostics[-1].acceptance_rate)
    return SmcResult(final=final, diagnostics=diagnostics, mean=mean,
                     covariance=cov, history=history, seed=config.seed)
