"""Pure-Python integration kernel: event-segmented adaptive RK45.

This is the fallback twin of the compiled kernel in _core.pyx.  The two are
written expression-for-expression identically (same operation order, same
libm calls, exp(-beta*log(x)) instead of pow) so that results agree bitwise;
the parity tests assert exact equality.  Any change here must be mirrored in
_core.pyx.

State layout: (I_p, I_i, G, h_1, h_2, h_3).  Parameter vector layout follows
ultradian.PARAM_NAMES.
"""

from __future__ import annotations

import math

STATUS_OK = 0
STATUS_INSULIN_DOMAIN = 1
STATUS_STEP_UNDERFLOW = 2
STATUS_STEP_LIMIT = 3

KERNEL_NAME = "python"

_MIN_STEP = 1e-9
_MAX_STEPS = 20_000_000
_EXP_MAX = 709.782712893384
# Contributions with exp(k*(t_j-t)) below exp(-46) ~ 1e-20 are dropped.
_NUT_CUTOFF = -46.0

# Dormand-Prince 5(4) coefficients.
_C2 = 1.0 / 5.0
_C3 = 3.0 / 10.0
_C4 = 4.0 / 5.0
_C5 = 8.0 / 9.0

_A21 = 1.0 / 5.0
_A31 = 3.0 / 40.0
_A32 = 9.0 / 40.0
_A41 = 44.0 / 45.0
_A42 = -56.0 / 15.0
_A43 = 32.0 / 9.0
_A51 = 19372.0 / 6561.0
_A52 = -25360.0 / 2187.0
_A53 = 64448.0 / 6561.0
_A54 = -212.0 / 729.0
_A61 = 9017.0 / 3168.0
_A62 = -355.0 / 33.0
_A63 = 46732.0 / 5247.0
_A64 = 49.0 / 176.0
_A65 = -5103.0 / 18656.0

_B1 = 35.0 / 384.0
_B3 = 500.0 / 1113.0
_B4 = 125.0 / 192.0
_B5 = -2187.0 / 6784.0
_B6 = 11.0 / 84.0

_E1 = 71.0 / 57600.0
_E3 = -71.0 / 16695.0
_E4 = 71.0 / 1920.0
_E5 = -17253.0 / 339200.0
_E6 = 22.0 / 525.0
_E7 = -1.0 / 40.0


def _exp(x):
    if x > _EXP_MAX:
        return math.inf
    return math.exp(x)


def _rhs(y, p, t, nut_t, nut_m, n_act, drip):
    """Model derivative; returns (dy list, ok, insulin_domain).

    n_act is the number of nutrition events with t_j <= segment start, drip
    the piecewise-constant insulin drip rate on the segment.
    """
    I_p = y[0]
    I_i = y[1]
    G = y[2]
    h_1 = y[3]
    h_2 = y[4]
    h_3 = y[5]

    V_p = p[0]
    V_i = p[1]
    V_g = p[2]
    E = p[3]
    t_p = p[4]
    t_i = p[5]
    t_d = p[6]
    k = p[7]
    R_m = p[8]
    a_1 = p[9]
    C_1 = p[10]
    C_2 = p[11]
    C_3 = p[12]
    C_4 = p[13]
    C_5 = p[14]
    U_b = p[15]
    U_0 = p[16]
    U_m = p[17]
    R_g = p[18]
    alpha = p[19]
    beta = p[20]

    if I_i <= 0.0:
        return None, False, True
    kappa = (1.0 / C_4) * (1.0 / V_i - 1.0 / (E * t_i))
    if kappa <= 0.0:
        return None, False, True

    ig = 0.0
    j = n_act - 1
    while j >= 0:
        ex = k * (nut_t[j] - t)
        if ex < _NUT_CUTOFF:
            break
        ig += (nut_m[j] * k / 60.0) * _exp(ex)
        j -= 1

    f1 = R_m / (1.0 + _exp(-G / (V_g * C_1) + a_1))
    f2 = U_b * (1.0 - _exp(-G / (C_2 * V_g)))
    f3 = (U_0 + (U_m - U_0) / (1.0 + _exp(-beta * math.log(kappa * I_i)))) / (C_3 * V_g)
    f4 = R_g / (1.0 + _exp(alpha * (h_3 / (C_5 * V_p) - 1.0)))

    exchange = E * (I_p / V_p - I_i / V_i)
    d0 = f1 - exchange - I_p / t_p + drip
    d1 = exchange - I_i / t_i
    d2 = f4 + ig - f2 - f3 * G
    d3 = (I_p - h_1) / t_d
    d4 = (h_1 - h_2) / t_d
    d5 = (h_2 - h_3) / t_d

    ok = (math.isfinite(d0) and math.isfinite(d1) and math.isfinite(d2)
          and math.isfinite(d3) and math.isfinite(d4) and math.isfinite(d5))
    return [d0, d1, d2, d3, d4, d5], ok, False


def advance(y0, params, t0, t1, nut_t, nut_m, drip_t, drip_r, bol_t, bol_a,
            rel_tol, abs_tol, max_step, init_step):
    """Advance the state from t0 to t1, landing exactly on every event time.

    Returns (y_out, status, t_err, n_steps).  y_out is a 6-list; t_err is the
    failure time (NaN when status == STATUS_OK).  Boluses in (t0, t1] are
    applied as jumps to I_p; events at exactly t0 belong to the caller's
    previous window.
    """
    y = [float(y0[i]) for i in range(6)]
    p = [float(params[i]) for i in range(21)]
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    if t1 == t0:
        return y, STATUS_OK, math.nan, 0

    # Plain-float copies: numpy scalar arithmetic is slow and contaminates y.
    nut_t = [float(v) for v in nut_t]
    nut_m = [float(v) for v in nut_m]
    drip_t = [float(v) for v in drip_t]
    drip_r = [float(v) for v in drip_r]
    bol_t = [float(v) for v in bol_t]
    bol_a = [float(v) for v in bol_a]
    t0 = float(t0)
    t1 = float(t1)
    rel_tol = float(rel_tol)
    abs_tol = float(abs_tol)
    max_step = float(max_step)
    init_step = float(init_step)

    n_nut = len(nut_t)
    n_drip = len(drip_t)
    n_bol = len(bol_t)

    i_nut = 0
    while i_nut < n_nut and nut_t[i_nut] <= t0:
        i_nut += 1
    i_drip = -1
    while i_drip + 1 < n_drip and drip_t[i_drip + 1] <= t0:
        i_drip += 1
    i_bol = 0
    while i_bol < n_bol and bol_t[i_bol] <= t0:
        i_bol += 1

    t = t0
    h = init_step
    if h > max_step:
        h = max_step
    if h > t1 - t0:
        h = t1 - t0
    n_steps = 0

    while t < t1:
        # Next segment boundary: earliest upcoming event, else t1.
        b = t1
        if i_nut < n_nut and nut_t[i_nut] < b:
            b = nut_t[i_nut]
        if i_drip + 1 < n_drip and drip_t[i_drip + 1] < b:
            b = drip_t[i_drip + 1]
        if i_bol < n_bol and bol_t[i_bol] < b:
            b = bol_t[i_bol]

        n_act = i_nut
        drip = drip_r[i_drip] if i_drip >= 0 else 0.0

        # Smooth RK45 from t to b.
        while t < b:
            if n_steps >= _MAX_STEPS:
                return y, STATUS_STEP_LIMIT, t, n_steps
            last = False
            h_step = h
            if t + h_step >= b:
                h_step = b - t
                last = True

            k1, ok, dom = _rhs(y, p, t, nut_t, nut_m, n_act, drip)
            if ok:
                yt = [y[i] + h_step * (_A21 * k1[i]) for i in range(6)]
                k2, ok, dom = _rhs(yt, p, t + _C2 * h_step, nut_t, nut_m, n_act, drip)
            if ok:
                yt = [y[i] + h_step * (_A31 * k1[i] + _A32 * k2[i]) for i in range(6)]
                k3, ok, dom = _rhs(yt, p, t + _C3 * h_step, nut_t, nut_m, n_act, drip)
            if ok:
                yt = [y[i] + h_step * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
                      for i in range(6)]
                k4, ok, dom = _rhs(yt, p, t + _C4 * h_step, nut_t, nut_m, n_act, drip)
            if ok:
                yt = [y[i] + h_step * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i]
                                       + _A54 * k4[i]) for i in range(6)]
                k5, ok, dom = _rhs(yt, p, t + _C5 * h_step, nut_t, nut_m, n_act, drip)
            if ok:
                yt = [y[i] + h_step * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i]
                                       + _A64 * k4[i] + _A65 * k5[i]) for i in range(6)]
                k6, ok, dom = _rhs(yt, p, t + h_step, nut_t, nut_m, n_act, drip)
            y_new = None
            if ok:
                y_new = [y[i] + h_step * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i]
                                          + _B5 * k5[i] + _B6 * k6[i]) for i in range(6)]
                if y_new[1] <= 0.0:
                    ok = False
                    dom = True
            if ok:
                k7, ok, dom = _rhs(y_new, p, t + h_step, nut_t, nut_m, n_act, drip)

            n_steps += 1
            if not ok:
                # Retry at half size down to the floor; I_i <= 0 and kappa <= 0
                # surface as a domain error, anything else as underflow.
                h = h_step * 0.5
                if h < _MIN_STEP:
                    status = STATUS_INSULIN_DOMAIN if dom else STATUS_STEP_UNDERFLOW
                    return y, status, t, n_steps
                continue

            err = 0.0
            for i in range(6):
                e = h_step * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i]
                              + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i])
                ay = abs(y[i])
                an = abs(y_new[i])
                scale = abs_tol + rel_tol * (ay if ay > an else an)
                r = e / scale
                err += r * r
            err = math.sqrt(err / 6.0)

            if err <= 1.0:
                t = b if last else t + h_step
                y = y_new
                if err == 0.0:
                    factor = 5.0
                else:
                    factor = 0.9 * err ** -0.2
                    if factor > 5.0:
                        factor = 5.0
                h = h_step * factor
                if h > max_step:
                    h = max_step
            else:
                factor = 0.9 * err ** -0.2
                if factor < 0.2:
                    factor = 0.2
                h = h_step * factor
                if h < _MIN_STEP:
                    return y, STATUS_STEP_UNDERFLOW, t, n_steps

        # Landed on b: advance event pointers, apply any bolus at b.
        while i_nut < n_nut and nut_t[i_nut] <= t:
            i_nut += 1
        while i_drip + 1 < n_drip and drip_t[i_drip + 1] <= t:
            i_drip += 1
        while i_bol < n_bol and bol_t[i_bol] <= t:
            y[0] = y[0] + bol_a[i_bol]
            i_bol += 1

    return y, STATUS_OK, math.nan, n_steps


def advance_batch(Y, P, t0, t1, nut_t, nut_m, drip_t, drip_r, bol_t, bol_a,
                  rel_tol, abs_tol, max_step, init_step):
    """Advance N particles; returns (Y_out, statuses, t_errs) as lists."""
    out = []
    statuses = []
    terrs = []
    for n in range(len(Y)):
        y, status, terr, _ = advance(
            Y[n], P[n], t0, t1, nut_t, nut_m, drip_t, drip_r, bol_t, bol_a,
            rel_tol, abs_tol, max_step, init_step)
        out.append(y)
        statuses.append(status)
        terrs.append(terr)
    return out, statuses, terrs
