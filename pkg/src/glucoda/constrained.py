"""Constrained ensemble Kalman update.

Each particle's update minimizes the filter objective
    0.5 * |y_n - H v|^2 / Gamma  +  0.5 * (v - v_hat)' C^-1 (v - v_hat)
subject to linear equality (A v = a) and inequality (B v <= b) constraints,
so every posterior particle lies in the admissible state/parameter region.
When the unconstrained Kalman update already satisfies the constraints it is
returned as-is (fast path); otherwise a small dense QP is solved per particle
by a primal active-set method warm-started from the Kalman solution.

The named constraint experiments cover three severity tiers (mild / severe /
ultra severe) on glucose concentration, plasma and interstitial insulin, and
the estimated parameters; glucose bounds are expressed in mg/dl through the
same fixed scaling the measurement model uses.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.linalg
import scipy.optimize

from .filter_core import (
    Ensemble,
    FilterRunError,
    MeasurementModel,
    NoiseSpec,
    ParameterSelection,
    STATE_DIM,
    perturbed_observations,
    regularize_covariance,
)

__all__ = [
    "QPError",
    "QPConfig",
    "qp_solve",
    "KKTReport",
    "kkt_residuals",
    "ConstraintSet",
    "ViolationReport",
    "violation_report",
    "constrained_update",
    "constraint_set_from_name",
    "generated_parameter_bounds",
    "EXPERIMENT_NAMES",
    "GLUCOSE_BOUNDS",
    "PLASMA_INSULIN_BOUNDS",
    "INTERSTITIAL_INSULIN_BOUNDS",
    "PARAMETER_BOUNDS",
    "POSTERIOR_FEASIBILITY_TOL",
]

POSTERIOR_FEASIBILITY_TOL = 1e-6


class QPError(RuntimeError):
    pass


@dataclass(frozen=True)
class QPConfig:
    tol: float = 1e-8
    max_iter: int = 200


DEFAULT_QP = QPConfig()


def _as_system(M, v, dim):
    if M is None:
        return np.zeros((0, dim)), np.zeros(0)
    M = np.atleast_2d(np.asarray(M, dtype=np.float64))
    v = np.atleast_1d(np.asarray(v, dtype=np.float64))
    if M.shape != (v.size, dim):
        raise ValueError(f"constraint system shape mismatch: {M.shape} vs rhs {v.size}, dim {dim}")
    return M, v


def _extract_box(B, b):
    """(lo, hi) per coordinate when every row touches one coordinate, else None."""
    dim = B.shape[1]
    lo = np.full(dim, -np.inf)
    hi = np.full(dim, np.inf)
    for row, rhs in zip(B, b):
        nz = np.flatnonzero(row)
        if nz.size == 0:
            if rhs < 0:
                return None, None, False
            continue
        if nz.size > 1:
            return None, None, None
        j = nz[0]
        c = row[j]
        if c > 0:
            hi[j] = min(hi[j], rhs / c)
        else:
            lo[j] = max(lo[j], rhs / c)
    return lo, hi, True


def _feasible_point(dim, A, a, B, b, x0, tol):
    """A point satisfying the constraints, or QPError when the region is empty."""
    if x0 is not None:
        x0 = np.asarray(x0, dtype=np.float64)
        eq_ok = A.shape[0] == 0 or np.abs(A @ x0 - a).max() <= tol
        in_ok = B.shape[0] == 0 or (B @ x0 - b).max() <= tol
        if eq_ok and in_ok:
            return x0.copy()

    if A.shape[0] == 0:
        lo, hi, is_box = _extract_box(B, b)
        if is_box is False:
            raise QPError("infeasible constraint set (contradictory constant row)")
        if is_box:
            if np.any(lo > hi):
                raise QPError("infeasible constraint set (empty box)")
            base = x0 if x0 is not None else np.zeros(dim)
            return np.clip(base, lo, hi)

    res = scipy.optimize.linprog(
        c=np.zeros(dim), A_ub=B if B.shape[0] else None, b_ub=b if B.shape[0] else None,
        A_eq=A if A.shape[0] else None, b_eq=a if A.shape[0] else None,
        bounds=[(None, None)] * dim, method="highs")
    if not res.success:
        raise QPError(f"infeasible constraint set: {res.message}")
    return np.asarray(res.x, dtype=np.float64)


def _eqp_step(Q, g, C):
    """Step of min 0.5 p'Qp + g'p subject to C p = 0 (null-space elimination)."""
    m = C.shape[0]
    dim = g.size
    if m == 0:
        return -np.linalg.solve(Q, g)
    if m >= dim:
        return np.zeros(dim)
    Qf, _ = np.linalg.qr(C.T, mode="complete")
    Z = Qf[:, m:]
    return Z @ np.linalg.solve(Z.T @ Q @ Z, -(Z.T @ g))


def qp_solve(Q, q, A=None, a=None, B=None, b=None, tol: float = 1e-8,
             max_iter: int = 200, x0=None) -> np.ndarray:
    """Minimize 0.5 v'Qv + q'v subject to Av = a and Bv <= b.

    Q must be symmetric positive definite (ridge-regularized upstream).
    Primal active-set with null-space steps; ties broken toward the smallest
    constraint index so the pivot sequence is deterministic.  x0, when given,
    warm-starts the iteration (it is projected to feasibility first).
    """
    Q = np.asarray(Q, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    dim = q.size
    Q = 0.5 * (Q + Q.T)
    A, a = _as_system(A, a, dim)
    B, b = _as_system(B, b, dim)

    if A.shape[0] == 0 and B.shape[0] == 0:
        return -np.linalg.solve(Q, q)

    x = _feasible_point(dim, A, a, B, b, x0, tol)
    act_tol = max(tol, 1e-12)
    work = [i for i in range(B.shape[0]) if B[i] @ x - b[i] >= -act_tol]

    for _ in range(max_iter):
        C = np.vstack([A, B[work]]) if (A.shape[0] or work) else np.zeros((0, dim))
        g = Q @ x + q
        p = _eqp_step(Q, g, C)

        if np.abs(p).max() <= tol * (1.0 + np.abs(x).max()):
            if C.shape[0] == 0:
                return x
            lam, *_ = np.linalg.lstsq(C.T, -g, rcond=None)
            lam_ineq = lam[A.shape[0]:]
            negative = [wi for wi, lv in zip(work, lam_ineq) if lv < -tol]
            if not negative:
                return x
            work.remove(min(negative))
            continue

        alpha = 1.0
        blocker = -1
        for i in range(B.shape[0]):
            if i in work:
                continue
            d = B[i] @ p
            if d > 1e-13:
                step = (b[i] - B[i] @ x) / d
                if step < 0.0:
                    step = 0.0
                if step < alpha:
                    alpha = step
                    blocker = i
        x = x + alpha * p
        if blocker >= 0:
            work.append(blocker)
            work.sort()

    raise QPError(f"active-set iteration cap ({max_iter}) exceeded")


@dataclass(frozen=True)
class KKTReport:
    stationarity: float
    primal: float
    dual: float
    complementarity: float

    def max_residual(self) -> float:
        return max(self.stationarity, self.primal, self.dual, self.complementarity)


def kkt_residuals(Q, q, x, A=None, a=None, B=None, b=None,
                  active_tol: float = 1e-7) -> KKTReport:
    """KKT residuals of a candidate minimizer, with multipliers recovered
    independently of the solver (non-negative least squares on the active set)."""
    x = np.asarray(x, dtype=np.float64)
    dim = x.size
    Q = np.asarray(Q, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64).reshape(-1)
    A, a = _as_system(A, a, dim)
    B, b = _as_system(B, b, dim)

    g = Q @ x + q
    primal = 0.0
    if A.shape[0]:
        primal = max(primal, float(np.abs(A @ x - a).max()))
    slack = B @ x - b if B.shape[0] else np.zeros(0)
    if slack.size:
        primal = max(primal, float(max(0.0, slack.max())))

    active = np.flatnonzero(slack >= -active_tol) if slack.size else np.array([], dtype=int)
    comp = 0.0
    dual = 0.0
    if A.shape[0] == 0:
        if active.size == 0:
            stationarity = float(np.abs(g).max())
        else:
            M = B[active].T
            lam, _ = scipy.optimize.nnls(M, -g)
            stationarity = float(np.abs(g + M @ lam).max())
            comp = float(np.abs(lam * slack[active]).max())
    else:
        M = np.vstack([A, B[active]]).T
        mult, *_ = np.linalg.lstsq(M, -g, rcond=None)
        stationarity = float(np.abs(g + M @ mult).max())
        lam = mult[A.shape[0]:]
        if lam.size:
            dual = float(max(0.0, -(lam.min())))
            comp = float(np.abs(lam * slack[active]).max())
    return KKTReport(stationarity=stationarity, primal=primal, dual=dual,
                     complementarity=comp)


@dataclass(frozen=True)
class ConstraintSet:
    """Linear equality (Av = a) and inequality (Bv <= b) constraints over the
    augmented state.  Construction verifies the feasible region is non-empty."""

    A: np.ndarray
    a: np.ndarray
    B: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        dim = self.dim
        A, a = _as_system(self.A if self.A is not None and np.size(self.A) else None,
                          self.a if self.a is not None and np.size(self.a) else None, dim)
        B, b = _as_system(self.B if self.B is not None and np.size(self.B) else None,
                          self.b if self.b is not None and np.size(self.b) else None, dim)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "b", b)
        _feasible_point(dim, A, a, B, b, None, 1e-9)

    @property
    def dim(self) -> int:
        for M in (self.A, self.B):
            if M is not None and np.ndim(M) == 2 and np.size(M):
                return np.shape(M)[1]
        raise ValueError("constraint set needs at least one row to fix the dimension")

    @classmethod
    def from_rows(cls, dim: int, eq_rows=(), ineq_rows=()) -> "ConstraintSet":
        """Rows are (coefficient_vector, rhs) pairs."""
        A = np.array([r for r, _ in eq_rows], dtype=np.float64).reshape(len(eq_rows), dim)
        a = np.array([v for _, v in eq_rows], dtype=np.float64)
        B = np.array([r for r, _ in ineq_rows], dtype=np.float64).reshape(len(ineq_rows), dim)
        b = np.array([v for _, v in ineq_rows], dtype=np.float64)
        return cls(A, a, B, b)

    def ineq_slack(self, states: np.ndarray) -> np.ndarray:
        """B v - b per particle and row; positive entries are violations."""
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        if self.B.shape[0] == 0:
            return np.zeros((states.shape[0], 0))
        return states @ self.B.T - self.b

    def violation_stats(self, states: np.ndarray):
        """(number of violating particles, worst violation magnitude)."""
        s = self.ineq_slack(states)
        if s.size == 0:
            return 0, 0.0
        worst = s.max(axis=1)
        return int((worst > 0).sum()), float(max(0.0, worst.max()))

    def feasible_mask(self, states: np.ndarray, tol: float) -> np.ndarray:
        states = np.atleast_2d(np.asarray(states, dtype=np.float64))
        ok = np.ones(states.shape[0], dtype=bool)
        if self.B.shape[0]:
            ok &= (states @ self.B.T - self.b).max(axis=1) <= tol
        if self.A.shape[0]:
            ok &= np.abs(states @ self.A.T - self.a).max(axis=1) <= tol
        return ok


@dataclass(frozen=True)
class ViolationReport:
    n_particles: int
    n_violating: int
    max_violation: float


def violation_report(ens, cons: ConstraintSet) -> ViolationReport:
    """Inequality violations of an ensemble (typically the pre-update forecast;
    post-update ensembles must report none beyond tolerance)."""
    states = ens.states if isinstance(ens, Ensemble) else np.asarray(ens)
    n_viol, max_viol = cons.violation_stats(states)
    return ViolationReport(n_particles=np.atleast_2d(states).shape[0],
                           n_violating=n_viol, max_violation=max_viol)


def constrained_update(ens: Ensemble, m_hat, C_hat, y: float,
                       model: MeasurementModel, noise: NoiseSpec,
                       cons: ConstraintSet, qp_cfg: QPConfig | None = None,
                       seed=0, perturbed_obs: bool = True) -> Ensemble:
    """Update every particle subject to the constraint set.

    Particles whose plain Kalman update already satisfies the constraints keep
    it unchanged; the rest solve the per-particle QP warm-started from that
    Kalman solution.  The posterior is verified feasible to within
    POSTERIOR_FEASIBILITY_TOL.
    """
    qp = qp_cfg or DEFAULT_QP
    if cons.dim != ens.dim:
        raise ValueError(f"constraint dimension {cons.dim} != ensemble dimension {ens.dim}")
    h = model.H
    C_reg = regularize_covariance(np.asarray(C_hat, dtype=np.float64))
    S = float(h @ C_reg @ h + noise.Gamma)
    if not (math.isfinite(S) and S > 0):
        raise FilterRunError(f"innovation variance S={S!r} is not invertible")
    K = (C_reg @ h) / S

    y_n = perturbed_observations(y, noise.Gamma, ens.n, seed, perturbed_obs)
    V_hat = ens.states
    V_kal = V_hat + (y_n - V_hat @ h)[:, None] * K[None, :]

    feasible = cons.feasible_mask(V_kal, qp.tol)
    new_states = V_kal.copy()
    if not feasible.all():
        # Objective matrix shared by all particles this step.
        try:
            cho = scipy.linalg.cho_factor(C_reg)
            C_inv = scipy.linalg.cho_solve(cho, np.eye(ens.dim))
        except scipy.linalg.LinAlgError:
            # Degenerate spread: fall back to a tiny absolute ridge.
            C_inv = np.linalg.inv(C_reg + 1e-12 * np.eye(ens.dim))
        Q = C_inv + np.outer(h, h) / noise.Gamma
        Q = 0.5 * (Q + Q.T)
        for i in np.flatnonzero(~feasible):
            qv = -(C_inv @ V_hat[i] + h * (y_n[i] / noise.Gamma))
            new_states[i] = qp_solve(
                Q, qv, cons.A, cons.a, cons.B, cons.b,
                tol=qp.tol, max_iter=qp.max_iter, x0=V_kal[i])

    _, worst = cons.violation_stats(new_states)
    if worst > POSTERIOR_FEASIBILITY_TOL:
        raise FilterRunError(
            f"posterior particle violates constraints by {worst:.3g}")
    return ens.with_states(new_states)


# Table of admissible ranges per severity tier.  State bounds reflect normal
# physiologic variation; parameter tiers follow the nominal value scaled down/up
# by a factor of 10 (mild) or 2 (severe), with the table's published rounding.
GLUCOSE_BOUNDS = {"mild": (20.0, 1000.0), "severe": (40.0, 400.0)}          # mg/dl
PLASMA_INSULIN_BOUNDS = {"mild": (10.0, 400.0), "severe": (75.0, 275.0),
                         "ultra": (100.0, 250.0)}
INTERSTITIAL_INSULIN_BOUNDS = {"mild": (10.0, 400.0), "severe": (75.0, 275.0),
                               "ultra": (75.0, 175.0)}
PARAMETER_BOUNDS = {
    "t_p": {"mild": (0.6, 60.0), "severe": (3.0, 12.0)},
    "t_d": {"mild": (1.2, 120.0), "severe": (6.0, 24.0)},
    "R_m": {"mild": (20.9, 2090.0), "severe": (104.0, 418.0)},
    "a_1": {"mild": (0.66, 66.7), "severe": (3.0, 14.0)},
    "C_1": {"mild": (30.0, 3000.0), "severe": (150.0, 600.0)},
    "C_3": {"mild": (10.0, 1000.0), "severe": (50.0, 200.0)},
    "U_m": {"mild": (9.4, 940.0), "severe": (47.0, 188.0)},
    "R_g": {"mild": (18.0, 1800.0), "severe": (90.0, 360.0)},
}

# The 11 named experiments: (glucose tier, insulin tier, parameter tier).
_EXPERIMENT_TIERS = {
    "gm": ("mild", None, None),
    "gs": ("severe", None, None),
    "im": (None, "mild", None),
    "is": (None, "severe", None),
    "ius": (None, "ultra", None),
    "gim": ("mild", "mild", None),
    "gis": ("severe", "severe", None),
    "gipm": ("mild", "mild", "mild"),
    "gips": ("severe", "severe", "severe"),
    "gpmius": ("mild", "ultra", "mild"),
    "gpsius": ("severe", "ultra", "severe"),
}
EXPERIMENT_NAMES = ("gm", "gs", "im", "is", "ius", "gim", "gis", "gipm",
                    "gips", "gpmius", "gpsius")


def tier_bounds(table: dict, tier: str, what: str):
    if tier not in table:
        raise ValueError(f"{what} has no {tier!r} tier defined")
    return table[tier]


def generated_parameter_bounds(nominal_value: float, tier: str):
    """Parameter bounds generated from a nominal value: an order of magnitude
    down/up for mild, halved/doubled for severe.  The named experiments use the
    published table values, which round a few of these."""
    if tier == "mild":
        return nominal_value / 10.0, nominal_value * 10.0
    if tier == "severe":
        return nominal_value / 2.0, nominal_value * 2.0
    raise ValueError(f"parameters have no {tier!r} tier defined")


def _box_rows(dim: int, coord: int, lo: float, hi: float, scale: float = 1.0):
    up = np.zeros(dim)
    up[coord] = scale
    dn = np.zeros(dim)
    dn[coord] = -scale
    return [(up, hi), (dn, -lo)]


def constraint_set_from_name(name: str, selection: ParameterSelection,
                             V_g: float = 10.0) -> ConstraintSet:
    """Resolve one of the named experiments to a concrete constraint set.

    Glucose bounds (mg/dl) act on G through the measurement scaling; insulin
    bounds act on I_p and I_i directly; parameter bounds are included only for
    parameters present in the selection.
    """
    if name not in _EXPERIMENT_TIERS:
        raise ValueError(f"unknown constraint experiment {name!r}; "
                         f"valid names: {', '.join(EXPERIMENT_NAMES)}")
    g_tier, i_tier, p_tier = _EXPERIMENT_TIERS[name]
    dim = selection.augmented_dim
    rows = []
    if g_tier:
        lo, hi = tier_bounds(GLUCOSE_BOUNDS, g_tier, "glucose")
        rows += _box_rows(dim, 2, lo, hi, scale=1.0 / (10.0 * V_g))
    if i_tier:
        lo, hi = tier_bounds(PLASMA_INSULIN_BOUNDS, i_tier, "plasma insulin")
        rows += _box_rows(dim, 0, lo, hi)
        lo, hi = tier_bounds(INTERSTITIAL_INSULIN_BOUNDS, i_tier, "interstitial insulin")
        rows += _box_rows(dim, 1, lo, hi)
    if p_tier:
        for j, pname in enumerate(selection.names):
            tiers = PARAMETER_BOUNDS.get(pname)
            if tiers is None:
                continue
            lo, hi = tier_bounds(tiers, p_tier, pname)
            rows += _box_rows(dim, STATE_DIM + j, lo, hi)
    return ConstraintSet.from_rows(dim, (), rows)
