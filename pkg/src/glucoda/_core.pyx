# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled integration kernel: event-segmented adaptive RK45.

Twin of _purepy.py, written expression-for-expression identically so the two
kernels agree bitwise (the extension is compiled with -ffp-contract=off to
keep it that way).  Any change here must be mirrored in _purepy.py.
"""

from libc.math cimport exp, log, sqrt, fabs, isfinite, pow, INFINITY, NAN

import numpy as np

STATUS_OK = 0
STATUS_INSULIN_DOMAIN = 1
STATUS_STEP_UNDERFLOW = 2
STATUS_STEP_LIMIT = 3

cdef int _ST_OK = 0
cdef int _ST_DOMAIN = 1
cdef int _ST_UNDERFLOW = 2
cdef int _ST_LIMIT = 3

KERNEL_NAME = "compiled"

cdef double _MIN_STEP = 1e-9
cdef long _MAX_STEPS = 20000000
cdef double _EXP_MAX = 709.782712893384
cdef double _NUT_CUTOFF = -46.0

cdef double _C2 = 1.0 / 5.0
cdef double _C3 = 3.0 / 10.0
cdef double _C4 = 4.0 / 5.0
cdef double _C5 = 8.0 / 9.0

cdef double _A21 = 1.0 / 5.0
cdef double _A31 = 3.0 / 40.0
cdef double _A32 = 9.0 / 40.0
cdef double _A41 = 44.0 / 45.0
cdef double _A42 = -56.0 / 15.0
cdef double _A43 = 32.0 / 9.0
cdef double _A51 = 19372.0 / 6561.0
cdef double _A52 = -25360.0 / 2187.0
cdef double _A53 = 64448.0 / 6561.0
cdef double _A54 = -212.0 / 729.0
cdef double _A61 = 9017.0 / 3168.0
cdef double _A62 = -355.0 / 33.0
cdef double _A63 = 46732.0 / 5247.0
cdef double _A64 = 49.0 / 176.0
cdef double _A65 = -5103.0 / 18656.0

cdef double _B1 = 35.0 / 384.0
cdef double _B3 = 500.0 / 1113.0
cdef double _B4 = 125.0 / 192.0
cdef double _B5 = -2187.0 / 6784.0
cdef double _B6 = 11.0 / 84.0

cdef double _E1 = 71.0 / 57600.0
cdef double _E3 = -71.0 / 16695.0
cdef double _E4 = 71.0 / 1920.0
cdef double _E5 = -17253.0 / 339200.0
cdef double _E6 = 22.0 / 525.0
cdef double _E7 = -1.0 / 40.0


cdef inline double _exp(double x) nogil:
    if x > _EXP_MAX:
        return INFINITY
    return exp(x)


cdef inline int _rhs(double* y, double* p, double t,
                     const double* nut_t, const double* nut_m, Py_ssize_t n_act,
                     double drip, double* dy, bint* dom) nogil:
    """Model derivative into dy; returns 1 when usable, 0 on failure."""
    cdef double I_p = y[0]
    cdef double I_i = y[1]
    cdef double G = y[2]
    cdef double h_1 = y[3]
    cdef double h_2 = y[4]
    cdef double h_3 = y[5]

    cdef double V_p = p[0]
    cdef double V_i = p[1]
    cdef double V_g = p[2]
    cdef double E = p[3]
    cdef double t_p = p[4]
    cdef double t_i = p[5]
    cdef double t_d = p[6]
    cdef double k = p[7]
    cdef double R_m = p[8]
    cdef double a_1 = p[9]
    cdef double C_1 = p[10]
    cdef double C_2 = p[11]
    cdef double C_3 = p[12]
    cdef double C_4 = p[13]
    cdef double C_5 = p[14]
    cdef double U_b = p[15]
    cdef double U_0 = p[16]
    cdef double U_m = p[17]
    cdef double R_g = p[18]
    cdef double alpha = p[19]
    cdef double beta = p[20]

    cdef double kappa, ig, ex, f1, f2, f3, f4, exchange
    cdef Py_ssize_t j

    dom[0] = False
    if I_i <= 0.0:
        dom[0] = True
        return 0
    kappa = (1.0 / C_4) * (1.0 / V_i - 1.0 / (E * t_i))
    if kappa <= 0.0:
        dom[0] = True
        return 0

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
    f3 = (U_0 + (U_m - U_0) / (1.0 + _exp(-beta * log(kappa * I_i)))) / (C_3 * V_g)
    f4 = R_g / (1.0 + _exp(alpha * (h_3 / (C_5 * V_p) - 1.0)))

    exchange = E * (I_p / V_p - I_i / V_i)
    dy[0] = f1 - exchange - I_p / t_p + drip
    dy[1] = exchange - I_i / t_i
    dy[2] = f4 + ig - f2 - f3 * G
    dy[3] = (I_p - h_1) / t_d
    dy[4] = (h_1 - h_2) / t_d
    dy[5] = (h_2 - h_3) / t_d

    return (isfinite(dy[0]) and isfinite(dy[1]) and isfinite(dy[2])
            and isfinite(dy[3]) and isfinite(dy[4]) and isfinite(dy[5]))


cdef int _advance(double* y, double* p, double t0, double t1,
                  const double* nut_t, const double* nut_m, Py_ssize_t n_nut,
                  const double* drip_t, const double* drip_r, Py_ssize_t n_drip,
                  const double* bol_t, const double* bol_a, Py_ssize_t n_bol,
                  double rel_tol, double abs_tol, double max_step,
                  double init_step, double* t_err, long* steps_out) nogil:
    cdef double k1[6]
    cdef double k2[6]
    cdef double k3[6]
    cdef double k4[6]
    cdef double k5[6]
    cdef double k6[6]
    cdef double k7[6]
    cdef double yt[6]
    cdef double y_new[6]
    cdef Py_ssize_t i, i_nut, i_bol
    cdef Py_ssize_t i_drip
    cdef double t, h, b, n_actd, drip, h_step, err, e, ay, an, scale, r, factor
    cdef Py_ssize_t n_act
    cdef bint last, dom
    cdef int ok
    cdef long n_steps

    t_err[0] = NAN
    steps_out[0] = 0
    if t1 == t0:
        return _ST_OK

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
        b = t1
        if i_nut < n_nut and nut_t[i_nut] < b:
            b = nut_t[i_nut]
        if i_drip + 1 < n_drip and drip_t[i_drip + 1] < b:
            b = drip_t[i_drip + 1]
        if i_bol < n_bol and bol_t[i_bol] < b:
            b = bol_t[i_bol]

        n_act = i_nut
        drip = drip_r[i_drip] if i_drip >= 0 else 0.0

        while t < b:
            if n_steps >= _MAX_STEPS:
                t_err[0] = t
                steps_out[0] = n_steps
                return _ST_LIMIT
            last = False
            h_step = h
            if t + h_step >= b:
                h_step = b - t
                last = True

            ok = _rhs(y, p, t, nut_t, nut_m, n_act, drip, k1, &dom)
            if ok:
                for i in range(6):
                    yt[i] = y[i] + h_step * (_A21 * k1[i])
                ok = _rhs(yt, p, t + _C2 * h_step, nut_t, nut_m, n_act, drip, k2, &dom)
            if ok:
                for i in range(6):
                    yt[i] = y[i] + h_step * (_A31 * k1[i] + _A32 * k2[i])
                ok = _rhs(yt, p, t + _C3 * h_step, nut_t, nut_m, n_act, drip, k3, &dom)
            if ok:
                for i in range(6):
                    yt[i] = y[i] + h_step * (_A41 * k1[i] + _A42 * k2[i] + _A43 * k3[i])
                ok = _rhs(yt, p, t + _C4 * h_step, nut_t, nut_m, n_act, drip, k4, &dom)
            if ok:
                for i in range(6):
                    yt[i] = y[i] + h_step * (_A51 * k1[i] + _A52 * k2[i] + _A53 * k3[i]
                                             + _A54 * k4[i])
                ok = _rhs(yt, p, t + _C5 * h_step, nut_t, nut_m, n_act, drip, k5, &dom)
            if ok:
                for i in range(6):
                    yt[i] = y[i] + h_step * (_A61 * k1[i] + _A62 * k2[i] + _A63 * k3[i]
                                             + _A64 * k4[i] + _A65 * k5[i])
                ok = _rhs(yt, p, t + h_step, nut_t, nut_m, n_act, drip, k6, &dom)
            if ok:
                for i in range(6):
                    y_new[i] = y[i] + h_step * (_B1 * k1[i] + _B3 * k3[i] + _B4 * k4[i]
                                                + _B5 * k5[i] + _B6 * k6[i])
                if y_new[1] <= 0.0:
                    ok = 0
                    dom = True
            if ok:
                ok = _rhs(y_new, p, t + h_step, nut_t, nut_m, n_act, drip, k7, &dom)

            n_steps += 1
            if not ok:
                h = h_step * 0.5
                if h < _MIN_STEP:
                    t_err[0] = t
                    steps_out[0] = n_steps
                    return _ST_DOMAIN if dom else _ST_UNDERFLOW
                continue

            err = 0.0
            for i in range(6):
                e = h_step * (_E1 * k1[i] + _E3 * k3[i] + _E4 * k4[i]
                              + _E5 * k5[i] + _E6 * k6[i] + _E7 * k7[i])
                ay = fabs(y[i])
                an = fabs(y_new[i])
                scale = abs_tol + rel_tol * (ay if ay > an else an)
                r = e / scale
                err += r * r
            err = sqrt(err / 6.0)

            if err <= 1.0:
                t = b if last else t + h_step
                for i in range(6):
                    y[i] = y_new[i]
                if err == 0.0:
                    factor = 5.0
                else:
                    factor = 0.9 * pow(err, -0.2)
                    if factor > 5.0:
                        factor = 5.0
                h = h_step * factor
                if h > max_step:
                    h = max_step
            else:
                factor = 0.9 * pow(err, -0.2)
                if factor < 0.2:
                    factor = 0.2
                h = h_step * factor
                if h < _MIN_STEP:
                    t_err[0] = t
                    steps_out[0] = n_steps
                    return _ST_UNDERFLOW

        while i_nut < n_nut and nut_t[i_nut] <= t:
            i_nut += 1
        while i_drip + 1 < n_drip and drip_t[i_drip + 1] <= t:
            i_drip += 1
        while i_bol < n_bol and bol_t[i_bol] <= t:
            y[0] = y[0] + bol_a[i_bol]
            i_bol += 1

    steps_out[0] = n_steps
    return _ST_OK


cdef const double* _ptr(double[::1] a) nogil:
    if a.shape[0] == 0:
        return NULL
    return &a[0]


def advance(y0, params, double t0, double t1, nut_t, nut_m, drip_t, drip_r,
            bol_t, bol_a, double rel_tol, double abs_tol, double max_step,
            double init_step):
    """Single-particle advance; see _purepy.advance for the contract."""
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    cdef double y[6]
    cdef double p[21]
    cdef Py_ssize_t i
    for i in range(6):
        y[i] = y0[i]
    for i in range(21):
        p[i] = params[i]

    cdef double[::1] nt = np.ascontiguousarray(nut_t, dtype=np.float64)
    cdef double[::1] nm = np.ascontiguousarray(nut_m, dtype=np.float64)
    cdef double[::1] dt = np.ascontiguousarray(drip_t, dtype=np.float64)
    cdef double[::1] dr = np.ascontiguousarray(drip_r, dtype=np.float64)
    cdef double[::1] bt = np.ascontiguousarray(bol_t, dtype=np.float64)
    cdef double[::1] ba = np.ascontiguousarray(bol_a, dtype=np.float64)

    cdef double terr
    cdef long nst
    cdef int status = _advance(
        y, p, t0, t1, _ptr(nt), _ptr(nm), nt.shape[0],
        _ptr(dt), _ptr(dr), dt.shape[0], _ptr(bt), _ptr(ba), bt.shape[0],
        rel_tol, abs_tol, max_step, init_step, &terr, &nst)
    return [y[0], y[1], y[2], y[3], y[4], y[5]], status, terr, nst


def advance_batch(Y, P, double t0, double t1, nut_t, nut_m, drip_t, drip_r,
                  bol_t, bol_a, double rel_tol, double abs_tol,
                  double max_step, double init_step):
    """Advance N particles; returns (Y_out (N,6), statuses (N,), t_errs (N,))."""
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    cdef double[:, ::1] Ym = np.ascontiguousarray(Y, dtype=np.float64).copy()
    cdef double[:, ::1] Pm = np.ascontiguousarray(P, dtype=np.float64)
    cdef Py_ssize_t N = Ym.shape[0]
    if Ym.shape[1] != 6 or Pm.shape[1] != 21 or Pm.shape[0] != N:
        raise ValueError("expected Y (N,6) and P (N,21)")

    cdef double[::1] nt = np.ascontiguousarray(nut_t, dtype=np.float64)
    cdef double[::1] nm = np.ascontiguousarray(nut_m, dtype=np.float64)
    cdef double[::1] dt = np.ascontiguousarray(drip_t, dtype=np.float64)
    cdef double[::1] dr = np.ascontiguousarray(drip_r, dtype=np.float64)
    cdef double[::1] bt = np.ascontiguousarray(bol_t, dtype=np.float64)
    cdef double[::1] ba = np.ascontiguousarray(bol_a, dtype=np.float64)

    statuses = np.zeros(N, dtype=np.int64)
    terrs = np.full(N, np.nan, dtype=np.float64)
    cdef long[::1] sm = statuses
    cdef double[::1] tm = terrs

    cdef double terr
    cdef long nst
    cdef Py_ssize_t n
    with nogil:
        for n in range(N):
            sm[n] = _advance(
                &Ym[n, 0], &Pm[n, 0], t0, t1, _ptr(nt), _ptr(nm), nt.shape[0],
                _ptr(dt), _ptr(dr), dt.shape[0], _ptr(bt), _ptr(ba), bt.shape[0],
                rel_tol, abs_tol, max_step, init_step, &terr, &nst)
            tm[n] = terr
    return np.asarray(Ym), statuses, terrs
