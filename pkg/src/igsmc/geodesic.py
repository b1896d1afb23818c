"""Closed-form geodesics on the univariate Gaussian manifold.

The Fisher metric on normal distributions N(mu, var) is, in the (mu, var)
chart, ds^2 = dmu^2/var + dvar^2/(2 var^2).  Geodesics through the
reference point N(0, 1) have a closed form in the canonical coordinates
(Delta, delta) = (1/var, mu/var); arbitrary endpoints are reached by
conjugating with the positive affine group, which acts by isometries.

Also provided: the two comparison paths used in the sampler experiments
(naive straight line in (mu, var), and a two-stage path moving mu first),
Christoffel symbols from a metric callback, and the small-perturbation
check relating KL divergence to the metric quadratic form.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigurationError

# Tolerance for clamping acosh arguments / |R| <= 1 against rounding.
_CLAMP_TOL = 1e-12


@dataclass(frozen=True)
class GaussianPoint:
    """A univariate normal distribution in the (mean, variance) chart."""

    mu: float
    var: float

    def __post_init__(self):
        if not self.var > 0.0:
            raise ConfigurationError(f"variance must be positive, got {self.var}")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.var))


@dataclass(frozen=True)
class CanonicalPoint:
    """Canonical coordinates (Delta, delta) = (1/var, mu/var)."""

    Delta: float
    delta: float

    def __post_init__(self):
        if not self.Delta > 0.0:
            raise ConfigurationError(f"Delta must be positive, got {self.Delta}")


@dataclass(frozen=True)
class AffineGroupElement:
    """Element (d, P) of the 1-d positive affine group, acting as x -> Px + d."""

    d: float
    P: float

    def __post_init__(self):
        if not self.P > 0.0:
            raise ConfigurationError(f"P must be positive, got {self.P}")


def to_canonical(p: GaussianPoint) -> CanonicalPoint:
    return CanonicalPoint(Delta=1.0 / p.var, delta=p.mu / p.var)


def from_canonical(c: CanonicalPoint) -> GaussianPoint:
    return GaussianPoint(mu=c.delta / c.Delta, var=1.0 / c.Delta)


def group_act(g: AffineGroupElement, p):
    """Apply the affine isometry to a point in either coordinate chart.

    (mu, var) maps to (P mu + d, P^2 var); the canonical chart transforms
    accordingly as (Delta, delta) -> (Delta/P^2, delta/P + Delta d/P^2).
    """
    if isinstance(p, GaussianPoint):
        return GaussianPoint(mu=g.P * p.mu + g.d, var=g.P * p.var * g.P)
    if isinstance(p, CanonicalPoint):
        P2 = g.P * g.P
        return CanonicalPoint(Delta=p.Delta / P2, delta=p.delta / g.P + p.Delta * g.d / P2)
    raise TypeError(f"cannot act on {type(p).__name__}")


def group_inverse(g: AffineGroupElement) -> AffineGroupElement:
    return AffineGroupElement(d=-g.d / g.P, P=1.0 / g.P)


def solve_RG(Delta_t: float, delta_t: float) -> tuple[float, float]:
    """Shooting parameters (R, G) of the origin geodesic hitting a target at t=1.

    The closed forms cover targets with delta' >= 0 and G > 0; targets with
    delta' < 0 are their mirror images and come out with both signs flipped
    (cosh/sinh make (R, G) -> (-R, -G) negate the delta component only).

    Raises:
        ConfigurationError: If the target is the origin (1, 0) itself, or the
            acosh argument falls below 1 by more than a rounding tolerance.
    """
    if not Delta_t > 0.0:
        raise ConfigurationError("Delta' must be positive")
    if Delta_t == 1.0 and delta_t == 0.0:
        raise ConfigurationError("target coincides with the origin; no direction defined")
    sign = 1.0 if delta_t >= 0.0 else -1.0
    d0 = abs(delta_t)

    if d0 == 0.0:
        # Pure precision change: Delta(t) = exp(-t G R) with R = -sign(Delta'-1).
        R = -1.0 if Delta_t > 1.0 else 1.0
        G = abs(np.log(Delta_t))
        return R, sign * G

    num = d0 * d0 - 2.0 * Delta_t * Delta_t + 2.0 * Delta_t
    # Denominator expands to sqrt(num^2 + 8 Delta'^2 delta'^2); hypot keeps it stable.
    den = np.hypot(num, np.sqrt(8.0) * Delta_t * d0)
    R = float(np.clip(num / den, -1.0, 1.0))

    d2 = d0 * d0
    D2 = Delta_t * Delta_t
    arg = (d2 * d2 + 4.0 * d2 * D2 + 4.0 * d2 * Delta_t + 4.0 * D2 * D2 + 4.0 * D2) / (
        8.0 * D2 * Delta_t
    )
    if arg < 1.0:
        if arg < 1.0 - _CLAMP_TOL:
            raise ConfigurationError(f"acosh argument {arg} below 1 beyond tolerance")
        arg = 1.0
    G = float(np.arccosh(arg))
    return sign * R, sign * G


def geodesic_through_origin(R: float, G: float, t: float) -> CanonicalPoint:
    """Point at parameter t on the origin geodesic with shooting pair (R, G)."""
    if abs(R) > 1.0 + _CLAMP_TOL:
        raise ConfigurationError(f"|R| must not exceed 1, got {R}")
    R = float(np.clip(R, -1.0, 1.0))
    ch = np.cosh(t * G) - 1.0
    sh = np.sinh(t * G)
    Delta = 1.0 + 0.5 * (1.0 + R * R) * ch - R * sh
    delta = np.sqrt(max(0.0, (1.0 - R * R) / 2.0)) * (-R * ch + sh)
    return CanonicalPoint(Delta=float(Delta), delta=float(delta))


def geodesic_between(p1: GaussianPoint, p2: GaussianPoint, n_points: int) -> list[GaussianPoint]:
    """Fisher-Rao geodesic from p1 to p2 sampled at uniform parameter values.

    The group element carrying the origin to p1 conjugates the problem to a
    geodesic through the origin, solved in closed form, then carried back.
    """
    if n_points < 2:
        raise ConfigurationError("a path needs at least 2 points")
    ts = np.linspace(0.0, 1.0, n_points)
    if p1.mu == p2.mu and p1.var == p2.var:
        return [p1] * n_points

    carry = AffineGroupElement(d=p1.mu, P=p1.sigma)
    target = to_canonical(group_act(group_inverse(carry), p2))
    R, G = solve_RG(target.Delta, target.delta)

    path = []
    for t in ts:
        c = geodesic_through_origin(R, G, float(t))
        path.append(group_act(carry, from_canonical(c)))
    return path


def straight_line_path(p1: GaussianPoint, p2: GaussianPoint, n: int) -> list[GaussianPoint]:
    """Naive linear interpolation in the (mu, var) chart."""
    if n < 2:
        raise ConfigurationError("a path needs at least 2 points")
    ts = np.linspace(0.0, 1.0, n)
    return [
        GaussianPoint(mu=p1.mu + t * (p2.mu - p1.mu), var=p1.var + t * (p2.var - p1.var))
        for t in ts
    ]


def two_stage_path(p1: GaussianPoint, p2: GaussianPoint, n: int) -> list[GaussianPoint]:
    """Move the mean fully over the first half, then the variance."""
    if n < 2:
        raise ConfigurationError("a path needs at least 2 points")
    ts = np.linspace(0.0, 1.0, n)
    path = []
    for t in ts:
        if t <= 0.5:
            path.append(GaussianPoint(mu=p1.mu + 2.0 * t * (p2.mu - p1.mu), var=p1.var))
        else:
            path.append(
                GaussianPoint(mu=p2.mu, var=p1.var + (2.0 * t - 1.0) * (p2.var - p1.var))
            )
    return path


def metric_mu_var(p: GaussianPoint) -> np.ndarray:
    """Fisher metric of N(mu, var) in the (mu, var) chart."""
    return np.diag([1.0 / p.var, 1.0 / (2.0 * p.var * p.var)])


def path_length(path: list[GaussianPoint], subdivisions: int = 16) -> float:
    """Fisher length of the piecewise-linear path through the given points.

    Each segment is subdivided and ds = sqrt(g_ij dxi^i dxi^j) accumulated at
    midpoints, i.e. a midpoint-rule line integral in the (mu, var) chart.
    """
    total = 0.0
    for a, b in zip(path[:-1], path[1:]):
        dmu = (b.mu - a.mu) / subdivisions
        dvar = (b.var - a.var) / subdivisions
        for k in range(subdivisions):
            mid_var = a.var + (k + 0.5) * dvar
            total += np.sqrt(dmu * dmu / mid_var + dvar * dvar / (2.0 * mid_var * mid_var))
    return float(total)


def kl_gaussian(p: GaussianPoint, q: GaussianPoint) -> float:
    """KL(p || q) between two univariate normals."""
    return float(
        0.5 * np.log(q.var / p.var)
        + (p.var + (p.mu - q.mu) ** 2) / (2.0 * q.var)
        - 0.5
    )


def kl_vs_metric_check(p: GaussianPoint, dxi) -> tuple[float, float]:
    """KL of a perturbed distribution against half the metric quadratic form.

    Args:
        p: Base point.
        dxi: Perturbation (dmu, dvar) in the (mu, var) chart.

    Returns:
        (KL(p + dxi || p), 0.5 * g_ij dxi^i dxi^j); the two agree to third
        order in the perturbation.
    """
    dxi = np.asarray(dxi, dtype=float)
    shifted = GaussianPoint(mu=p.mu + dxi[0], var=p.var + dxi[1])
    kl = kl_gaussian(shifted, p)
    g = metric_mu_var(p)
    return kl, float(0.5 * dxi @ g @ dxi)


def christoffel(g_eval, dg_eval, xi) -> np.ndarray:
    """Levi-Civita Christoffel symbols from metric callbacks.

    Args:
        g_eval: Callable xi -> (D, D) metric matrix.
        dg_eval: Callable xi -> (D, D, D) derivative tensor, dg[k, i, j]
            holding the k-th partial of g_ij.
        xi: Evaluation point.

    Returns:
        Gamma with layout [k, i, j] = Gamma^k_{ij}, using the standard +1/2
        convention, symmetric in the lower indices.
    """
    xi = np.asarray(xi, dtype=float)
    g = np.asarray(g_eval(xi), dtype=float)
    dg = np.asarray(dg_eval(xi), dtype=float)
    ginv = np.linalg.inv(g)
    # Gamma^k_ij = 1/2 g^{kl} (d_i g_jl + d_j g_il - d_l g_ij)
    gamma = 0.5 * (
        np.einsum("kl,ijl->kij", ginv, dg)
        + np.einsum("kl,jil->kij", ginv, dg)
        - np.einsum("kl,lij->kij", ginv, dg)
    )
    return gamma
