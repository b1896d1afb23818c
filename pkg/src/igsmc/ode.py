"""ODE systems, integration, and forward sensitivity analysis.

A system supplies its vector field together with analytic partial
derivatives; the sensitivities S = dX/dxi and their first and second
parameter derivatives then satisfy auxiliary linear ODEs obtained by
differentiating the vector field, which are integrated jointly with the
state ("forward sensitivity method").

Two engines produce identical interfaces: a generic adaptive RK5(4) route
through scipy for arbitrary user systems, and a compiled route for the
built-in Fitzhugh-Nagumo and Lotka-Volterra systems (used in the hot loops
of the samplers).  The two are cross-validated in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import solve_ivp

from .core import CapabilityError, ConfigurationError, IntegrationError


@dataclass
class OdeSystem:
    """An ODE dx/dt = f(x, xi, t) with analytic partial derivatives.

    Partial-derivative callbacks use the layouts (o = output component):
    fx[o, l] = df_o/dx_l, fp[o, i] = df_o/dxi_i, fxx[o, l, m], fxp[o, l, i],
    fpp[o, i, j], and for third order fxxx[o, l, m, q], fxxp[o, l, m, i],
    fxpp[o, l, i, j], fppp[o, i, j, k].  Second-order callbacks unlock
    sensitivity order 2, third-order callbacks order 3.
    """

    name: str
    n_states: int
    n_params: int
    f: Callable
    fx: Callable
    fp: Callable
    fxx: Callable | None = None
    fxp: Callable | None = None
    fpp: Callable | None = None
    fxxx: Callable | None = None
    fxxp: Callable | None = None
    fxpp: Callable | None = None
    fppp: Callable | None = None
    numba_id: int | None = None
    param_names: tuple = ()
    state_names: tuple = ()

    def max_order(self) -> int:
        if any(cb is None for cb in (self.fxx, self.fxp, self.fpp)):
            return 1
        if any(cb is None for cb in (self.fxxx, self.fxxp, self.fxpp, self.fppp)):
            return 2
        return 3


@dataclass
class Trajectory:
    """Solution values at the requested observation times."""

    times: np.ndarray
    states: np.ndarray  # (tau, D_x)


@dataclass
class SensitivityState:
    """State plus parameter sensitivities along a trajectory.

    Attributes:
        X: States, (tau, D_x).
        S: First-order sensitivities, (tau, D_xi, D_x); S[t, i, d] = dX_d/dxi^i.
        dS: Second order, (tau, D_xi, D_xi, D_x) or None.
        ddS: Third order, (tau, D_xi, D_xi, D_xi, D_x) or None.
    """

    times: np.ndarray
    X: np.ndarray
    S: np.ndarray
    dS: np.ndarray | None = None
    ddS: np.ndarray | None = None


def _check_times(times, t0):
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or times.size < 1:
        raise ConfigurationError("need at least one observation time")
    if np.any(np.diff(times) <= 0.0):
        raise ConfigurationError("observation times must increase strictly")
    t0 = float(times[0]) if t0 is None else float(t0)
    if times[0] < t0:
        raise ConfigurationError("first observation time precedes t0")
    return times, t0


def _pack_dim(dx, dp, order):
    n = dx
    if order >= 1:
        n += dp * dx
    if order >= 2:
        n += dp * dp * dx
    if order >= 3:
        n += dp * dp * dp * dx
    return n


def _scipy_rhs(system: OdeSystem, xi, order: int):
    dx, dp = system.n_states, system.n_params

    def rhs(t, y):
        x = y[:dx]
        out = np.empty_like(y)
        out[:dx] = system.f(x, xi, t)
        if order < 1:
            return out
        fx = np.asarray(system.fx(x, xi, t))
        fp = np.asarray(system.fp(x, xi, t))
        S = y[dx:dx + dp * dx].reshape(dp, dx)
        out[dx:dx + dp * dx] = (S @ fx.T + fp.T).ravel()
        if order < 2:
            return out
        fxx = np.asarray(system.fxx(x, xi, t))
        fxp = np.asarray(system.fxp(x, xi, t))
        fpp = np.asarray(system.fpp(x, xi, t))
        off2 = dx + dp * dx
        dS = y[off2:off2 + dp * dp * dx].reshape(dp, dp, dx)
        dSdot = (
            np.einsum("olm,km,il->kio", fxx, S, S)
            + np.einsum("olk,il->kio", fxp, S)
            + np.einsum("ol,kil->kio", fx, dS)
            + np.einsum("oli,kl->kio", fxp, S)
            + fpp.transpose(2, 1, 0)  # fpp[o, i, k] -> [k, i, o]
        )
        out[off2:off2 + dp * dp * dx] = dSdot.ravel()
        if order < 3:
            return out
        fxxx = np.asarray(system.fxxx(x, xi, t))
        fxxp = np.asarray(system.fxxp(x, xi, t))
        fxpp = np.asarray(system.fxpp(x, xi, t))
        fppp = np.asarray(system.fppp(x, xi, t))
        off3 = off2 + dp * dp * dx
        ddS = y[off3:].reshape(dp, dp, dp, dx)
        ddSdot = (
            np.einsum("olmj,km,il->jkio", fxxp, S, S)
            + np.einsum("olm,jkm,il->jkio", fxx, dS, S)
            + np.einsum("olm,jil,km->jkio", fxx, dS, S)
            + np.einsum("olkj,il->jkio", fxpp, S)
            + np.einsum("olk,jil->jkio", fxp, dS)
            + np.einsum("olj,kil->jkio", fxp, dS)
            + np.einsum("ol,jkil->jkio", fx, ddS)
            + np.einsum("olji,kl->jkio", fxpp, S)
            + np.einsum("oli,jkl->jkio", fxp, dS)
            + np.einsum("oijk->jkio", fppp)
            + np.einsum("olmq,jq,km,il->jkio", fxxx, S, S, S)
            + np.einsum("olqk,jq,il->jkio", fxxp, S, S)
            + np.einsum("olq,jq,kil->jkio", fxx, S, dS)
            + np.einsum("olqi,jq,kl->jkio", fxxp, S, S)
            + np.einsum("oqik,jq->jkio", fxpp, S)
        )
        out[off3:] = ddSdot.ravel()
        return out

    return rhs


def _integrate_scipy(system, x0, xi, times, order, t0, rtol, atol):
    dx, dp = system.n_states, system.n_params
    y0 = np.zeros(_pack_dim(dx, dp, order))
    y0[:dx] = x0
    rhs = _scipy_rhs(system, xi, order)
    frontier = [t0]  # deepest time the solver attempted; reported on failure

    def tracked(t, y):
        if t > frontier[0]:
            frontier[0] = t
        return rhs(t, y)

    with np.errstate(over="ignore", invalid="ignore"):
        sol = solve_ivp(
            tracked,
            (t0, float(times[-1])),
            y0,
            method="RK45",
            t_eval=times,
            rtol=rtol,
            atol=atol,
        )
    if not sol.success:
        raise IntegrationError(
            f"integration of {system.name} failed: {sol.message}", time=frontier[0]
        )
    values = sol.y.T
    if not np.all(np.isfinite(values)):
        raise IntegrationError(f"non-finite state in {system.name}", time=float(times[-1]))
    return values


def _integrate_numba(system, x0, xi, times, order, t0, rtol, atol):
    from . import _fastode

    values, status, fail_t = _fastode.integrate_sensitivities(
        system.numba_id, order, x0, xi, t0, times, rtol, atol, 1_000_000
    )
    if status != _fastode.STATUS_OK:
        reasons = {
            _fastode.STATUS_STEP_UNDERFLOW: "step size underflow",
            _fastode.STATUS_NOT_FINITE: "non-finite state",
            _fastode.STATUS_MAX_STEPS: "step budget exhausted",
        }
        raise IntegrationError(
            f"integration of {system.name} failed: {reasons[status]}", time=fail_t
        )
    return values


def _integrate_packed(system, x0, xi, times, order, t0, rtol, atol, engine):
    x0 = np.asarray(x0, dtype=float)
    xi = np.asarray(xi, dtype=float)
    if x0.size != system.n_states or xi.size != system.n_params:
        raise ConfigurationError("state/parameter dimensions do not match the system")
    if engine == "auto":
        engine = "numba" if system.numba_id is not None else "scipy"
    if engine == "numba":
        if system.numba_id is None:
            raise ConfigurationError(f"system {system.name} has no compiled path")
        return _integrate_numba(system, x0, xi, times, order, t0, rtol, atol)
    if engine == "scipy":
        return _integrate_scipy(system, x0, xi, times, order, t0, rtol, atol)
    raise ConfigurationError(f"unknown engine {engine!r}")


def integrate(system: OdeSystem, x0, xi, times, *, t0=None, rtol: float = 1e-8,
              atol: float = 1e-10, engine: str = "auto") -> Trajectory:
    """Adaptive Runge-Kutta 5(4) solution evaluated at the requested times.

    Raises:
        IntegrationError: On step-size underflow or non-finite states; the
            exception carries the failure time.
    """
    times, t0 = _check_times(times, t0)
    values = _integrate_packed(system, x0, xi, times, 0, t0, rtol, atol, engine)
    return Trajectory(times=times, states=values[:, : system.n_states])


def integrate_with_sensitivities(system: OdeSystem, x0, xi, times, order: int = 1, *,
                                 t0=None, rtol: float = 1e-8, atol: float = 1e-10,
                                 engine: str = "auto") -> SensitivityState:
    """Jointly integrate the state and its parameter sensitivities.

    Order 1 produces S, order 2 adds dS, order 3 adds ddS.  Sensitivities
    start at zero since the initial state does not depend on the parameters.

    Raises:
        CapabilityError: If the system lacks the partial derivatives the
            requested order needs.
    """
    if order not in (1, 2, 3):
        raise ConfigurationError("order must be 1, 2 or 3")
    if order > system.max_order():
        raise CapabilityError(
            f"system {system.name} provides partials up to order {system.max_order()}, "
            f"order {order} requested"
        )
    times, t0 = _check_times(times, t0)
    values = _integrate_packed(system, x0, xi, times, order, t0, rtol, atol, engine)
    dx, dp = system.n_states, system.n_params
    tau = times.size
    X = values[:, :dx]
    S = values[:, dx:dx + dp * dx].reshape(tau, dp, dx)
    dS = ddS = None
    if order >= 2:
        off2 = dx + dp * dx
        dS = values[:, off2:off2 + dp * dp * dx].reshape(tau, dp, dp, dx)
    if order >= 3:
        off3 = dx + dp * dx + dp * dp * dx
        ddS = values[:, off3:].reshape(tau, dp, dp, dp, dx)
    return SensitivityState(times=times, X=X, S=S, dS=dS, ddS=ddS)


# ---------------------------------------------------------------------------
# Built-in systems
# ---------------------------------------------------------------------------

def _fn_f(x, xi, t):
    v, r = x
    a, b, c = xi
    return np.array([c * (v - v**3 / 3.0 + r), (a - v - b * r) / c])


def _fn_fx(x, xi, t):
    v, _ = x
    _, b, c = xi
    return np.array([[c * (1.0 - v * v), c], [-1.0 / c, -b / c]])


def _fn_fp(x, xi, t):
    v, r = x
    a, b, c = xi
    return np.array([
        [0.0, 0.0, v - v**3 / 3.0 + r],
        [1.0 / c, -r / c, (v - a + b * r) / c**2],
    ])


def _fn_fxx(x, xi, t):
    v = x[0]
    c = xi[2]
    out = np.zeros((2, 2, 2))
    out[0, 0, 0] = -2.0 * c * v
    return out


def _fn_fxp(x, xi, t):
    v = x[0]
    _, b, c = xi
    out = np.zeros((2, 2, 3))
    out[0, 0, 2] = 1.0 - v * v
    out[0, 1, 2] = 1.0
    out[1, 0, 2] = 1.0 / c**2
    out[1, 1, 1] = -1.0 / c
    out[1, 1, 2] = b / c**2
    return out


def _fn_fpp(x, xi, t):
    v, r = x
    a, b, c = xi
    out = np.zeros((2, 3, 3))
    out[1, 0, 2] = out[1, 2, 0] = -1.0 / c**2
    out[1, 1, 2] = out[1, 2, 1] = r / c**2
    out[1, 2, 2] = 2.0 * (a - v - b * r) / c**3
    return out


def _fn_fxxx(x, xi, t):
    c = xi[2]
    out = np.zeros((2, 2, 2, 2))
    out[0, 0, 0, 0] = -2.0 * c
    return out


def _fn_fxxp(x, xi, t):
    v = x[0]
    out = np.zeros((2, 2, 2, 3))
    out[0, 0, 0, 2] = -2.0 * v
    return out


def _fn_fxpp(x, xi, t):
    _, b, c = xi
    out = np.zeros((2, 2, 3, 3))
    out[1, 0, 2, 2] = -2.0 / c**3
    out[1, 1, 1, 2] = out[1, 1, 2, 1] = 1.0 / c**2
    out[1, 1, 2, 2] = -2.0 * b / c**3
    return out


def _fn_fppp(x, xi, t):
    v, r = x
    a, b, c = xi
    out = np.zeros((2, 3, 3, 3))
    out[1, 0, 2, 2] = out[1, 2, 0, 2] = out[1, 2, 2, 0] = 2.0 / c**3
    out[1, 1, 2, 2] = out[1, 2, 1, 2] = out[1, 2, 2, 1] = -2.0 * r / c**3
    out[1, 2, 2, 2] = -6.0 * (a - v - b * r) / c**4
    return out


def fitzhugh_nagumo_system() -> OdeSystem:
    """Spiking-neuron voltage/recovery dynamics with parameters (a, b, c).

        dV/dt = c (V - V^3/3 + R),   dR/dt = (a - V - b R) / c

    Raises ``ConfigurationError`` at evaluation points with c = 0, where the
    vector field is singular.
    """

    def guard(cb):
        def wrapped(x, xi, t):
            if xi[2] == 0.0:
                raise ConfigurationError("Fitzhugh-Nagumo parameter c must be nonzero")
            return cb(x, xi, t)

        return wrapped

    return OdeSystem(
        name="fitzhugh_nagumo",
        n_states=2,
        n_params=3,
        f=guard(_fn_f),
        fx=guard(_fn_fx),
        fp=guard(_fn_fp),
        fxx=guard(_fn_fxx),
        fxp=guard(_fn_fxp),
        fpp=guard(_fn_fpp),
        fxxx=guard(_fn_fxxx),
        fxxp=guard(_fn_fxxp),
        fxpp=guard(_fn_fxpp),
        fppp=guard(_fn_fppp),
        numba_id=0,
        param_names=("a", "b", "c"),
        state_names=("V", "R"),
    )


def _lv_f(x, xi, t):
    px, py = x
    al, be, ga, de = xi
    return np.array([px * (al - be * py), -py * (ga - de * px)])


def _lv_fx(x, xi, t):
    px, py = x
    al, be, ga, de = xi
    return np.array([[al - be * py, -be * px], [de * py, -ga + de * px]])


def _lv_fp(x, xi, t):
    px, py = x
    return np.array([[px, -px * py, 0.0, 0.0], [0.0, 0.0, -py, px * py]])


def _lv_fxx(x, xi, t):
    _, be, _, de = xi[0], xi[1], xi[2], xi[3]
    out = np.zeros((2, 2, 2))
    out[0, 0, 1] = out[0, 1, 0] = -be
    out[1, 0, 1] = out[1, 1, 0] = de
    return out


def _lv_fxp(x, xi, t):
    px, py = x
    out = np.zeros((2, 2, 4))
    out[0, 0, 0] = 1.0
    out[0, 0, 1] = -py
    out[0, 1, 1] = -px
    out[1, 0, 3] = py
    out[1, 1, 2] = -1.0
    out[1, 1, 3] = px
    return out


def _lv_fpp(x, xi, t):
    return np.zeros((2, 4, 4))


def _lv_fxxx(x, xi, t):
    return np.zeros((2, 2, 2, 2))


def _lv_fxxp(x, xi, t):
    out = np.zeros((2, 2, 2, 4))
    out[0, 0, 1, 1] = out[0, 1, 0, 1] = -1.0
    out[1, 0, 1, 3] = out[1, 1, 0, 3] = 1.0
    return out


def _lv_fxpp(x, xi, t):
    return np.zeros((2, 2, 4, 4))


def _lv_fppp(x, xi, t):
    return np.zeros((2, 4, 4, 4))


def lotka_volterra_system() -> OdeSystem:
    """Predator-prey dynamics with parameters (alpha, beta, gamma, delta).

        dx/dt = x (alpha - beta y),   dy/dt = -y (gamma - delta x)
    """
    return OdeSystem(
        name="lotka_volterra",
        n_states=2,
        n_params=4,
        f=_lv_f,
        fx=_lv_fx,
        fp=_lv_fp,
        fxx=_lv_fxx,
        fxp=_lv_fxp,
        fpp=_lv_fpp,
        fxxx=_lv_fxxx,
        fxxp=_lv_fxxp,
        fxpp=_lv_fxpp,
        fppp=_lv_fppp,
        numba_id=1,
        param_names=("alpha", "beta", "gamma", "delta"),
        state_names=("x", "y"),
    )
