"""Shared value types and weight arithmetic for SMC samplers.

Everything downstream (models, kernels, the sampler engine) builds on the
pieces here: tempering schedules, log-space weight handling, effective
sample size, resampling and deterministic RNG streams.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class IgsmcError(Exception):
    """Base class for all library errors."""


class ConfigurationError(IgsmcError, ValueError):
    """Invalid configuration value (particle count, schedule, step size...)."""


class DegeneratePopulationError(IgsmcError):
    """All particle weights are zero (log-weights all -inf)."""


class OutOfSupportError(IgsmcError, ValueError):
    """A parameter point lies outside the support of the model."""


class BoundaryError(IgsmcError, ValueError):
    """Evaluation requested on (or outside) the boundary of a uniform prior."""


class SingularMetricError(IgsmcError):
    """Metric not positive definite even after the jitter ladder."""


class DegenerateTruncationError(IgsmcError):
    """Truncation interval carries almost no probability mass."""


class CapabilityError(IgsmcError):
    """An operation needs derivatives the supplied object does not provide."""


class IntegrationError(IgsmcError, RuntimeError):
    """ODE integration failed (step-size underflow or non-finite state).

    Attributes
    ----------
    time : float
        Integration time at which the failure occurred.
    """

    def __init__(self, message, time=np.nan):
        super().__init__(message)
        self.time = float(time)


def as_parameter_point(coords) -> np.ndarray:
    """Validate and return a parameter point as a 1-d float array.

    Raises ``ConfigurationError`` on empty or non-finite input.
    """
    x = np.atleast_1d(np.asarray(coords, dtype=float))
    if x.ndim != 1 or x.size < 1:
        raise ConfigurationError("parameter point must be a 1-d vector with D >= 1")
    if not np.all(np.isfinite(x)):
        raise ConfigurationError("parameter point has non-finite entries")
    return x


@dataclass(frozen=True)
class TemperingSchedule:
    """Sequence of tempering exponents phi_1 = 0 < phi_2 < ... < phi_p = 1."""

    phis: np.ndarray
    phi2_anchor: float

    def __post_init__(self):
        phis = np.asarray(self.phis, dtype=float)
        object.__setattr__(self, "phis", phis)
        if phis.ndim != 1 or phis.size < 2:
            raise ConfigurationError("schedule needs at least 2 exponents")
        if phis[0] != 0.0 or phis[-1] != 1.0:
            raise ConfigurationError("schedule must start at 0 and end at 1")
        if np.any(np.diff(phis[1:]) <= 0.0):
            raise ConfigurationError("exponents must increase strictly from phi_2 on")

    def __len__(self):
        return self.phis.size

    def __getitem__(self, a):
        return self.phis[a]


def geometric_schedule(p: int, phi2: float) -> TemperingSchedule:
    """Geometric tempering schedule with a fixed second exponent.

    phi_1 = 0 and, for a = 2..p (1-based), phi_a = phi2 ** (1 - (a-2)/(p-2)),
    so successive ratios phi_{a+1}/phi_a are constant and phi_p = 1.

    Args:
        p: Total number of distributions, at least 3.
        phi2: Second exponent, strictly inside (0, 1).
    """
    if p < 3:
        raise ConfigurationError(f"need p >= 3 populations, got {p}")
    if not (0.0 < phi2 < 1.0):
        raise ConfigurationError(f"phi2 must lie in (0, 1), got {phi2}")
    a = np.arange(2, p + 1, dtype=float)
    phis = np.empty(p)
    phis[0] = 0.0
    phis[1:] = phi2 ** (-(a - 2.0) / (p - 2.0) + 1.0)
    phis[-1] = 1.0  # exponent is exactly 0 at a = p; pin against rounding
    return TemperingSchedule(phis=phis, phi2_anchor=float(phi2))


def ess(weights) -> float:
    """Effective sample size 1 / sum(w_n^2) of normalized weights."""
    w = np.asarray(weights, dtype=float)
    s2 = np.sum(w * w)
    if s2 <= 0.0:
        raise DegeneratePopulationError("all weights are zero")
    return float(1.0 / s2)


def normalize_weights(log_weights) -> tuple[np.ndarray, float]:
    """Normalize log-weights with a max-shift, guarding against underflow.

    Args:
        log_weights: Unnormalized log-weights; -inf marks a dead particle.

    Returns:
        Tuple of (normalized weights summing to one, log of the raw sum).

    Raises:
        DegeneratePopulationError: If every log-weight is -inf.
    """
    lw = np.asarray(log_weights, dtype=float)
    m = np.max(lw)
    if not np.isfinite(m):
        raise DegeneratePopulationError("no particle carries finite log-weight")
    w = np.exp(lw - m)
    total = np.sum(w)
    return w / total, float(m + np.log(total))


@dataclass
class Particle:
    """One weighted sample: position on the parameter manifold + log-weight."""

    position: np.ndarray
    log_weight: float


@dataclass
class Population:
    """A weighted particle population at tempering step ``temper_index``."""

    particles: list[Particle]
    temper_index: int
    ess: float
    acceptance_rate: float = float("nan")

    @classmethod
    def from_arrays(cls, positions, weights, temper_index, acceptance_rate=float("nan")):
        w = np.asarray(weights, dtype=float)
        parts = [
            Particle(position=np.array(positions[n], dtype=float), log_weight=float(lw))
            for n, lw in enumerate(np.log(np.where(w > 0.0, w, 0.0)))
        ]
        return cls(
            particles=parts,
            temper_index=int(temper_index),
            ess=ess(w),
            acceptance_rate=acceptance_rate,
        )

    def positions(self) -> np.ndarray:
        return np.array([p.position for p in self.particles])

    def weights(self) -> np.ndarray:
        w = np.exp([p.log_weight for p in self.particles])
        return np.asarray(w)


def resample_indices(weights, n: int, rng, method: str = "multinomial") -> np.ndarray:
    """Draw ancestor indices proportional to the weights.

    ``multinomial`` makes n independent draws with replacement (the default);
    ``systematic`` uses a single stratified uniform and is opt-in only.
    """
    w = np.asarray(weights, dtype=float)
    s = np.sum(w)
    if s <= 0.0:
        raise DegeneratePopulationError("cannot resample zero-mass weights")
    w = w / s
    if method == "multinomial":
        return rng.choice(w.size, size=n, replace=True, p=w)
    if method == "systematic":
        u = (rng.uniform() + np.arange(n)) / n
        return np.searchsorted(np.cumsum(w), u).clip(max=w.size - 1)
    raise ConfigurationError(f"unknown resampling method {method!r}")


def multinomial_resample(pop: Population, rng) -> Population:
    """Resample a population with replacement; output weights reset to 1/N."""
    n = len(pop.particles)
    idx = resample_indices(pop.weights(), n, rng, method="multinomial")
    particles = [
        Particle(position=pop.particles[i].position.copy(), log_weight=-np.log(n))
        for i in idx
    ]
    return Population(
        particles=particles,
        temper_index=pop.temper_index,
        ess=float(n),
        acceptance_rate=pop.acceptance_rate,
    )


# Stream tags keep particle moves, barrier operations (resampling) and data
# simulation on disjoint Philox streams for one global seed.
_PARTICLE_TAG = 0
_BARRIER_TAG = 1
_DATA_TAG = 2


def _stream(seed: int, *key) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence((int(seed),) + tuple(int(k) for k in key))))


def particle_rng(seed: int, population_index: int, particle_index: int) -> np.random.Generator:
    """Counter-based stream for one particle move, keyed by (seed, a, n)."""
    return _stream(seed, _PARTICLE_TAG, population_index, particle_index)


def barrier_rng(seed: int, population_index: int) -> np.random.Generator:
    """Stream for sequential barrier steps (resampling) of one population."""
    return _stream(seed, _BARRIER_TAG, population_index)


def data_rng(seed: int) -> np.random.Generator:
    """Stream for simulating synthetic observations."""
    return _stream(seed, _DATA_TAG)
