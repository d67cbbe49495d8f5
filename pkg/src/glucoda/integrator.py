"""Solution operator for the glucose-insulin ODE between arbitrary times.

Wraps the selected integration kernel: adaptive RK45 whose steps land exactly
on every exogenous event time (nutrition onsets, drip rate changes, boluses),
with insulin boluses applied as instantaneous jumps in I_p.  Supports the
non-uniform spacing of clinical measurement grids.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import _kernel
from .ultradian import ExogenousInputs, InsulinDomainError, PhysState, UltradianParams

__all__ = [
    "IntegratorConfig",
    "IntegrationError",
    "StepSizeUnderflowError",
    "integrate_between",
    "solution_operator",
    "advance_states",
]


@dataclass(frozen=True)
class IntegratorConfig:
    rel_tol: float = 1e-6
    abs_tol: float = 1e-8
    max_step: float = 60.0      # min
    initial_step: float = 1.0   # min

    def __post_init__(self):
        if not (self.rel_tol > 0 and self.abs_tol > 0):
            raise ValueError("tolerances must be > 0")
        if not (self.max_step > 0 and self.initial_step > 0):
            raise ValueError("steps must be > 0")


DEFAULT_CONFIG = IntegratorConfig()


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


class StepSizeUnderflowError(IntegrationError):
    """Step control shrank below the 1e-9 min floor (stiff blow-up)."""


def _raise_for_status(status: int, t_err: float):
    if status == _kernel.STATUS_INSULIN_DOMAIN:
        raise InsulinDomainError(
            f"I_i <= 0 encountered during integration at t={t_err:.6g} min", t=t_err)
    if status == _kernel.STATUS_STEP_UNDERFLOW:
        raise StepSizeUnderflowError(
            f"step size underflow at t={t_err:.6g} min", t=t_err)
    if status == _kernel.STATUS_STEP_LIMIT:
        raise StepSizeUnderflowError(
            f"step budget exhausted at t={t_err:.6g} min", t=t_err)


def integrate_between(v0: PhysState, p: UltradianParams, u: ExogenousInputs,
                      t0: float, t1: float,
                      cfg: IntegratorConfig = DEFAULT_CONFIG) -> PhysState:
    """Integrate the state from t0 to t1 (t1 >= t0) under exogenous inputs."""
    if t1 < t0:
        raise ValueError(f"t1={t1} must be >= t0={t0}")
    arrays = u.kernel_arrays()
    y, status, t_err, _ = _kernel.advance(
        tuple(v0), p.as_array(), float(t0), float(t1), *arrays,
        cfg.rel_tol, cfg.abs_tol, cfg.max_step, cfg.initial_step)
    _raise_for_status(status, t_err)
    return PhysState(*y)


def solution_operator(t_grid: Sequence[float], v0: PhysState, p: UltradianParams,
                      u: ExogenousInputs,
                      cfg: IntegratorConfig = DEFAULT_CONFIG) -> list[PhysState]:
    """States at each grid time, chaining integrate_between; grid[0] maps to v0."""
    times = [float(t) for t in t_grid]
    if not times:
        raise ValueError("time grid must be non-empty")
    if any(b <= a for a, b in zip(times, times[1:])):
        raise ValueError("time grid must be strictly increasing")
    out = [v0]
    arrays = u.kernel_arrays()
    p_arr = p.as_array()
    y = list(v0)
    for a, b in zip(times, times[1:]):
        y, status, t_err, _ = _kernel.advance(
            y, p_arr, a, b, *arrays,
            cfg.rel_tol, cfg.abs_tol, cfg.max_step, cfg.initial_step)
        _raise_for_status(status, t_err)
        out.append(PhysState(*y))
    return out


def advance_states(Y: np.ndarray, P: np.ndarray, t0: float, t1: float,
                   input_arrays, cfg: IntegratorConfig = DEFAULT_CONFIG):
    """Batch advance for ensemble filtering.

    Y is (N, 6) physical states, P is (N, 21) per-particle parameter vectors,
    input_arrays is ExogenousInputs.kernel_arrays().  Returns (Y_out,
    statuses, t_errs) without raising: the filter owns the failure policy.
    """
    return _kernel.advance_batch(
        Y, P, float(t0), float(t1), *input_arrays,
        cfg.rel_tol, cfg.abs_tol, cfg.max_step, cfg.initial_step)
