"""Compiled integration path for the built-in ODE systems.

One Dormand-Prince 5(4) driver integrates the state together with its
first-, second- and third-order parameter sensitivities.  The built-in
systems are dispatched by integer id inside jitted code so the whole stack
compiles once and caches to disk (important when experiment replicates run
in separate processes).

System ids: 0 = Fitzhugh-Nagumo (states V, R; params a, b, c),
            1 = Lotka-Volterra (states x, y; params alpha, beta, gamma, delta).
"""

from __future__ import annotations

import numpy as np
from numba import njit

FN_ID = 0
LV_ID = 1

STATUS_OK = 0
STATUS_STEP_UNDERFLOW = 1
STATUS_NOT_FINITE = 2
STATUS_MAX_STEPS = 3


@njit(cache=True)
def _fill_partials(sys_id, x, xi, order, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp):
    """Evaluate f and every partial tensor needed for the requested order."""
    fx[:] = 0.0
    fp[:] = 0.0
    if order >= 2:
        fxx[:] = 0.0
        fxp[:] = 0.0
        fpp[:] = 0.0
    if order >= 3:
        fxxx[:] = 0.0
        fxxp[:] = 0.0
        fxpp[:] = 0.0
        fppp[:] = 0.0

    if sys_id == FN_ID:
        v, r = x[0], x[1]
        a, b, c = xi[0], xi[1], xi[2]
        cube = v - v * v * v / 3.0 + r
        f[0] = c * cube
        f[1] = (a - v - b * r) / c

        fx[0, 0] = c * (1.0 - v * v)
        fx[0, 1] = c
        fx[1, 0] = -1.0 / c
        fx[1, 1] = -b / c

        fp[0, 2] = cube
        fp[1, 0] = 1.0 / c
        fp[1, 1] = -r / c
        fp[1, 2] = (v - a + b * r) / (c * c)

        if order >= 2:
            fxx[0, 0, 0] = -2.0 * c * v

            fxp[0, 0, 2] = 1.0 - v * v
            fxp[0, 1, 2] = 1.0
            fxp[1, 0, 2] = 1.0 / (c * c)
            fxp[1, 1, 1] = -1.0 / c
            fxp[1, 1, 2] = b / (c * c)

            fpp[1, 0, 2] = -1.0 / (c * c)
            fpp[1, 2, 0] = -1.0 / (c * c)
            fpp[1, 1, 2] = r / (c * c)
            fpp[1, 2, 1] = r / (c * c)
            fpp[1, 2, 2] = 2.0 * (a - v - b * r) / (c * c * c)

        if order >= 3:
            c3 = c * c * c
            fxxx[0, 0, 0, 0] = -2.0 * c
            fxxp[0, 0, 0, 2] = -2.0 * v

            fxpp[1, 0, 2, 2] = -2.0 / c3
            fxpp[1, 1, 1, 2] = 1.0 / (c * c)
            fxpp[1, 1, 2, 1] = 1.0 / (c * c)
            fxpp[1, 1, 2, 2] = -2.0 * b / c3

            fppp[1, 0, 2, 2] = 2.0 / c3
            fppp[1, 2, 0, 2] = 2.0 / c3
            fppp[1, 2, 2, 0] = 2.0 / c3
            fppp[1, 1, 2, 2] = -2.0 * r / c3
            fppp[1, 2, 1, 2] = -2.0 * r / c3
            fppp[1, 2, 2, 1] = -2.0 * r / c3
            fppp[1, 2, 2, 2] = -6.0 * (a - v - b * r) / (c3 * c)
    else:
        px, py = x[0], x[1]
        al, be, ga, de = xi[0], xi[1], xi[2], xi[3]
        f[0] = px * (al - be * py)
        f[1] = -py * (ga - de * px)

        fx[0, 0] = al - be * py
        fx[0, 1] = -be * px
        fx[1, 0] = de * py
        fx[1, 1] = -ga + de * px

        fp[0, 0] = px
        fp[0, 1] = -px * py
        fp[1, 2] = -py
        fp[1, 3] = px * py

        if order >= 2:
            fxx[0, 0, 1] = -be
            fxx[0, 1, 0] = -be
            fxx[1, 0, 1] = de
            fxx[1, 1, 0] = de

            fxp[0, 0, 0] = 1.0
            fxp[0, 0, 1] = -py
            fxp[0, 1, 1] = -px
            fxp[1, 0, 3] = py
            fxp[1, 1, 2] = -1.0
            fxp[1, 1, 3] = px

        if order >= 3:
            fxxp[0, 0, 1, 1] = -1.0
            fxxp[0, 1, 0, 1] = -1.0
            fxxp[1, 0, 1, 3] = 1.0
            fxxp[1, 1, 0, 3] = 1.0


@njit(cache=True)
def _aug_rhs(sys_id, order, y, xi, dx, dp, out,
             f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp):
    """Time derivative of the packed (state, S, dS, ddS) vector."""
    x = y[:dx]
    _fill_partials(sys_id, x, xi, order, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
    out[:dx] = f
    if order < 1:
        return

    S = y[dx:dx + dp * dx].reshape(dp, dx)
    outS = out[dx:dx + dp * dx].reshape(dp, dx)
    for i in range(dp):
        for o in range(dx):
            acc = fp[o, i]
            for l in range(dx):
                acc += fx[o, l] * S[i, l]
            outS[i, o] = acc
    if order < 2:
        return

    off2 = dx + dp * dx
    dS = y[off2:off2 + dp * dp * dx].reshape(dp, dp, dx)
    outdS = out[off2:off2 + dp * dp * dx].reshape(dp, dp, dx)
    for k in range(dp):
        for i in range(dp):
            for o in range(dx):
                acc = fpp[o, i, k]
                for l in range(dx):
                    acc += fxp[o, l, k] * S[i, l]
                    acc += fx[o, l] * dS[k, i, l]
                    acc += fxp[o, l, i] * S[k, l]
                    for m in range(dx):
                        acc += fxx[o, l, m] * S[k, m] * S[i, l]
                outdS[k, i, o] = acc
    if order < 3:
        return

    off3 = off2 + dp * dp * dx
    ddS = y[off3:off3 + dp * dp * dp * dx].reshape(dp, dp, dp, dx)
    outddS = out[off3:off3 + dp * dp * dp * dx].reshape(dp, dp, dp, dx)
    for j in range(dp):
        for k in range(dp):
            for i in range(dp):
                for o in range(dx):
                    acc = fppp[o, i, j, k]
                    for l in range(dx):
                        acc += fxpp[o, l, k, j] * S[i, l]
                        acc += fxp[o, l, k] * dS[j, i, l]
                        acc += fxp[o, l, j] * dS[k, i, l]
                        acc += fx[o, l] * ddS[j, k, i, l]
                        acc += fxpp[o, l, j, i] * S[k, l]
                        acc += fxp[o, l, i] * dS[j, k, l]
                        for m in range(dx):
                            acc += fxxp[o, l, m, j] * S[k, m] * S[i, l]
                            acc += fxx[o, l, m] * dS[j, k, m] * S[i, l]
                            acc += fxx[o, l, m] * dS[j, i, l] * S[k, m]
                    for q in range(dx):
                        inner = fxpp[o, q, i, k]
                        for l in range(dx):
                            inner += fxxp[o, l, q, k] * S[i, l]
                            inner += fxx[o, l, q] * dS[k, i, l]
                            inner += fxxp[o, l, q, i] * S[k, l]
                            for m in range(dx):
                                inner += fxxx[o, l, m, q] * S[k, m] * S[i, l]
                        acc += S[j, q] * inner
                    outddS[j, k, i, o] = acc


# Dormand-Prince coefficients.
_C2, _C3, _C4, _C5 = 0.2, 0.3, 0.8, 8.0 / 9.0
_A21 = 0.2
_A31, _A32 = 3.0 / 40.0, 9.0 / 40.0
_A41, _A42, _A43 = 44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0
_A51, _A52, _A53, _A54 = 19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0
_A61, _A62, _A63, _A64, _A65 = (
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
)
_B1, _B3, _B4, _B5, _B6 = 35.0 / 384.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0
_E1, _E3, _E4, _E5, _E6, _E7 = (
    35.0 / 384.0 - 5179.0 / 57600.0,
    500.0 / 1113.0 - 7571.0 / 16695.0,
    125.0 / 192.0 - 393.0 / 640.0,
    -2187.0 / 6784.0 + 92097.0 / 339200.0,
    11.0 / 84.0 - 187.0 / 2100.0,
    -1.0 / 40.0,
)


@njit(cache=True)
def integrate_sensitivities(sys_id, order, x0, xi, t0, times, rtol, atol, max_steps):
    """Adaptive RK5(4) integration of the augmented sensitivity system.

    Returns (values, status, fail_time); values has one packed row per
    requested time.  Sensitivities start at zero (initial state independent
    of the parameters).
    """
    dx = x0.size
    dp = xi.size
    n = dx
    if order >= 1:
        n += dp * dx
    if order >= 2:
        n += dp * dp * dx
    if order >= 3:
        n += dp * dp * dp * dx

    f = np.empty(dx)
    fx = np.empty((dx, dx))
    fp = np.empty((dx, dp))
    fxx = np.empty((dx, dx, dx))
    fxp = np.empty((dx, dx, dp))
    fpp = np.empty((dx, dp, dp))
    fxxx = np.empty((dx, dx, dx, dx))
    fxxp = np.empty((dx, dx, dx, dp))
    fxpp = np.empty((dx, dx, dp, dp))
    fppp = np.empty((dx, dp, dp, dp))

    y = np.zeros(n)
    y[:dx] = x0
    out = np.empty((times.size, n))

    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    k5 = np.empty(n)
    k6 = np.empty(n)
    k7 = np.empty(n)
    ytmp = np.empty(n)

    t = t0
    _aug_rhs(sys_id, order, y, xi, dx, dp, k1, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)

    # Initial step size from the local scale of y and f.
    d0 = 0.0
    d1 = 0.0
    for idx in range(n):
        sc = atol + rtol * abs(y[idx])
        d0 += (y[idx] / sc) ** 2
        d1 += (k1[idx] / sc) ** 2
    d0 = np.sqrt(d0 / n)
    d1 = np.sqrt(d1 / n)
    span = times[-1] - t0
    if d1 > 1e-12 and d0 > 1e-12:
        h = min(0.01 * d0 / d1, 0.1 * span)
    else:
        h = 1e-3 * span
    if h <= 0.0:
        h = 1e-6

    steps = 0
    for it in range(times.size):
        tt = times[it]
        while t < tt:
            if steps > max_steps:
                return out, STATUS_MAX_STEPS, t
            hit_end = False
            h_ctrl = h  # controller step, preserved across end-of-segment clamping
            if t + h >= tt:
                h = tt - t
                hit_end = True

            for idx in range(n):
                ytmp[idx] = y[idx] + h * _A21 * k1[idx]
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k2, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
            for idx in range(n):
                ytmp[idx] = y[idx] + h * (_A31 * k1[idx] + _A32 * k2[idx])
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k3, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
            for idx in range(n):
                ytmp[idx] = y[idx] + h * (_A41 * k1[idx] + _A42 * k2[idx] + _A43 * k3[idx])
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k4, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
            for idx in range(n):
                ytmp[idx] = y[idx] + h * (
                    _A51 * k1[idx] + _A52 * k2[idx] + _A53 * k3[idx] + _A54 * k4[idx]
                )
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k5, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
            for idx in range(n):
                ytmp[idx] = y[idx] + h * (
                    _A61 * k1[idx] + _A62 * k2[idx] + _A63 * k3[idx] + _A64 * k4[idx] + _A65 * k5[idx]
                )
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k6, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)
            for idx in range(n):
                ytmp[idx] = y[idx] + h * (
                    _B1 * k1[idx] + _B3 * k3[idx] + _B4 * k4[idx] + _B5 * k5[idx] + _B6 * k6[idx]
                )
            _aug_rhs(sys_id, order, ytmp, xi, dx, dp, k7, f, fx, fp, fxx, fxp, fpp, fxxx, fxxp, fxpp, fppp)

            err_norm = 0.0
            finite = True
            for idx in range(n):
                e = h * (
                    _E1 * k1[idx] + _E3 * k3[idx] + _E4 * k4[idx]
                    + _E5 * k5[idx] + _E6 * k6[idx] + _E7 * k7[idx]
                )
                ay = abs(y[idx])
                ay_new = abs(ytmp[idx])
                sc = atol + rtol * (ay if ay > ay_new else ay_new)
                err_norm += (e / sc) ** 2
                if not np.isfinite(ytmp[idx]):
                    finite = False
            err_norm = np.sqrt(err_norm / n)
            steps += 1

            if not finite:
                # Retry with a smaller step before declaring failure.
                h = 0.25 * h
                if h < 1e-14 * max(abs(t), 1.0):
                    return out, STATUS_NOT_FINITE, t
                continue

            if err_norm <= 1.0:
                t = tt if hit_end else t + h
                for idx in range(n):
                    y[idx] = ytmp[idx]
                    k1[idx] = k7[idx]  # first-same-as-last
                factor = 10.0 if err_norm == 0.0 else min(10.0, max(1.0, 0.9 * err_norm**-0.2))
                h = (h_ctrl if hit_end else h) * factor
            else:
                h *= max(0.2, 0.9 * err_norm**-0.2)
                if h < 1e-14 * max(abs(t), 1.0):
                    return out, STATUS_STEP_UNDERFLOW, t
        out[it] = y
    return out, STATUS_OK, t
