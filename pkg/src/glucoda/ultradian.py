"""Ultradian glucose-insulin model: state, parameters, and right-hand side.

Six-dimensional state: plasma insulin I_p (mU), interstitial insulin I_i (mU),
glucose mass G (mg), and a three-stage delay chain h_1, h_2, h_3 (mU) feeding
hepatic glucose production.  G is carried as a mass; measurement and
constraint layers convert to concentration (mg/dl) via G / (10 * V_g).

Exogenous inputs are discrete carbohydrate events (exponentially decaying
appearance), piecewise-constant IV insulin drips (additive rate on dI_p/dt),
and insulin boluses (instantaneous jumps in I_p applied by the integrator,
never part of the derivative).
"""

from __future__ import annotations

import math
from bisect import bisect_right
from dataclasses import dataclass, fields, replace
from typing import NamedTuple, Sequence

import numpy as np

__all__ = [
    "PARAM_NAMES",
    "STATE_NAMES",
    "UltradianParams",
    "PhysState",
    "NutritionEvent",
    "InsulinDelivery",
    "ExogenousInputs",
    "InsulinDomainError",
    "insulin_secretion_f1",
    "iigu_f2",
    "idgu_factor_f3",
    "hepatic_f4",
    "nutrition_rate",
    "insulin_drip_rate",
    "deriv",
    "glucose_mass_to_conc",
    "glucose_conc_to_mass",
]

# Largest double x with exp(x) finite; beyond it C exp() returns inf while
# math.exp raises, so both kernels route through _exp for identical results.
_EXP_MAX = 709.782712893384


def _exp(x: float) -> float:
    if x > _EXP_MAX:
        return math.inf
    return math.exp(x)


class InsulinDomainError(ValueError):
    """Insulin-dependent glucose utilization is undefined for I_i <= 0."""

    def __init__(self, message: str, t: float | None = None):
        super().__init__(message)
        self.t = t


@dataclass(frozen=True)
class UltradianParams:
    """The 21 model parameters with their nominal values.

    Volumes in liters, time constants in minutes, secretion/utilization
    constants per the model's source units.  All must be strictly positive.
    """

    V_p: float = 3.0       # plasma volume (l)
    V_i: float = 11.0      # interstitial volume (l)
    V_g: float = 10.0      # glucose space (l)
    E: float = 0.2         # plasma/interstitial insulin exchange rate (l/min)
    t_p: float = 6.0       # plasma insulin degradation time constant (min)
    t_i: float = 100.0     # interstitial insulin degradation time constant (min)
    t_d: float = 12.0      # hepatic delay per chain stage (min)
    k: float = 0.5         # nutrition decay rate (1/min)
    R_m: float = 209.0     # max insulin secretion rate (mU/min)
    a_1: float = 6.6       # secretion sigmoid offset
    C_1: float = 300.0     # secretion sigmoid scale (mg/l)
    C_2: float = 144.0     # insulin-independent utilization scale (mg/l)
    C_3: float = 100.0     # insulin-dependent utilization scale (mg/l)
    C_4: float = 80.0      # kappa scale (mU/l)
    C_5: float = 26.0      # hepatic sigmoid scale (mU/l)
    U_b: float = 72.0      # max insulin-independent utilization (mg/min)
    U_0: float = 4.0       # insulin-dependent utilization floor (mg/min)
    U_m: float = 94.0      # insulin-dependent utilization ceiling (mg/min)
    R_g: float = 180.0     # max hepatic glucose production (mg/min)
    alpha: float = 7.5     # hepatic sigmoid steepness
    beta: float = 1.772    # insulin-dependent utilization exponent

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v > 0):
                raise ValueError(f"parameter {f.name}={v!r} must be finite and > 0")

    @classmethod
    def nominal(cls) -> "UltradianParams":
        return cls()

    def as_array(self) -> np.ndarray:
        """Parameter vector in PARAM_NAMES order (float64, length 21)."""
        return np.array([getattr(self, n) for n in PARAM_NAMES], dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "UltradianParams":
        if len(arr) != len(PARAM_NAMES):
            raise ValueError(f"expected {len(PARAM_NAMES)} parameters, got {len(arr)}")
        return cls(**{n: float(v) for n, v in zip(PARAM_NAMES, arr)})

    def replace(self, **kwargs) -> "UltradianParams":
        return replace(self, **kwargs)


PARAM_NAMES = tuple(f.name for f in fields(UltradianParams))

STATE_NAMES = ("I_p", "I_i", "G", "h_1", "h_2", "h_3")


class PhysState(NamedTuple):
    """Model state: insulin masses (mU), glucose mass (mg), delay stages (mU)."""

    I_p: float
    I_i: float
    G: float
    h_1: float
    h_2: float
    h_3: float

    def as_array(self) -> np.ndarray:
        return np.array(self, dtype=np.float64)

    @classmethod
    def from_array(cls, arr: Sequence[float]) -> "PhysState":
        if len(arr) != 6:
            raise ValueError(f"expected 6 state components, got {len(arr)}")
        return cls(*(float(v) for v in arr))

    def is_finite(self) -> bool:
        return all(math.isfinite(v) for v in self)


@dataclass(frozen=True)
class NutritionEvent:
    """Discrete carbohydrate delivery at time t_min; m_mg decays at rate k."""

    t_min: float
    m_mg: float

    def __post_init__(self):
        if not (math.isfinite(self.t_min) and math.isfinite(self.m_mg)):
            raise ValueError("nutrition event fields must be finite")
        if self.m_mg < 0:
            raise ValueError(f"carbohydrate quantity must be >= 0, got {self.m_mg}")


@dataclass(frozen=True)
class InsulinDelivery:
    """IV insulin: a constant-rate drip over [start, end) or an instant bolus.

    Drips add rate_mU_min to dI_p/dt; boluses add amount_mU to I_p at start.
    Only rapid/short-acting kinds are modeled.
    """

    kind: str                    # "drip" | "bolus"
    start: float                 # min since admission
    end: float | None = None     # drip only
    rate_mU_min: float | None = None
    amount_mU: float | None = None

    def __post_init__(self):
        if self.kind == "drip":
            if self.end is None or self.rate_mU_min is None:
                raise ValueError("drip requires end and rate_mU_min")
            if self.end < self.start:
                raise ValueError("drip end must be >= start")
            if self.rate_mU_min < 0:
                raise ValueError("drip rate must be >= 0")
        elif self.kind == "bolus":
            if self.amount_mU is None:
                raise ValueError("bolus requires amount_mU")
            if self.amount_mU < 0:
                raise ValueError("bolus amount must be >= 0")
        else:
            raise ValueError(f"unknown insulin delivery kind {self.kind!r}")


@dataclass(frozen=True)
class ExogenousInputs:
    """Time-sorted nutrition events and insulin deliveries."""

    nutrition: tuple[NutritionEvent, ...] = ()
    insulin: tuple[InsulinDelivery, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "nutrition", tuple(self.nutrition))
        object.__setattr__(self, "insulin", tuple(self.insulin))
        for seq, key in ((self.nutrition, lambda e: e.t_min),
                         (self.insulin, lambda d: d.start)):
            times = [key(e) for e in seq]
            if any(b < a for a, b in zip(times, times[1:])):
                raise ValueError("exogenous events must be sorted by time")

    @classmethod
    def empty(cls) -> "ExogenousInputs":
        return cls((), ())

    def kernel_arrays(self):
        """Flatten inputs for the integration kernel.

        Returns (nut_t, nut_m, drip_t, drip_r, bol_t, bol_a): nutrition event
        times/quantities, total-drip-rate breakpoints (rate drip_r[i] holds on
        [drip_t[i], drip_t[i+1]), zero before the first breakpoint), and bolus
        times/amounts.  All float64 arrays.
        """
        nut_t = np.array([e.t_min for e in self.nutrition], dtype=np.float64)
        nut_m = np.array([e.m_mg for e in self.nutrition], dtype=np.float64)

        drips = [d for d in self.insulin if d.kind == "drip" and d.end > d.start]
        cuts = sorted({d.start for d in drips} | {d.end for d in drips})
        drip_t = np.array(cuts, dtype=np.float64)
        drip_r = np.array(
            [sum(d.rate_mU_min for d in drips if d.start <= t < d.end) for t in cuts],
            dtype=np.float64,
        )

        boluses = [d for d in self.insulin if d.kind == "bolus"]
        bol_t = np.array([d.start for d in boluses], dtype=np.float64)
        bol_a = np.array([d.amount_mU for d in boluses], dtype=np.float64)
        return nut_t, nut_m, drip_t, drip_r, bol_t, bol_a


def _check_finite(name: str, x: float) -> float:
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"{name} must be finite, got {x!r}")
    return x


def insulin_secretion_f1(G: float, p: UltradianParams) -> float:
    """Pancreatic insulin secretion rate (mU/min); logistic in G, in (0, R_m)."""
    G = _check_finite("G", G)
    return p.R_m / (1.0 + _exp(-G / (p.V_g * p.C_1) + p.a_1))


def iigu_f2(G: float, p: UltradianParams) -> float:
    """Insulin-independent glucose utilization (mg/min); saturates at U_b."""
    G = _check_finite("G", G)
    return p.U_b * (1.0 - _exp(-G / (p.C_2 * p.V_g)))


def idgu_factor_f3(I_i: float, p: UltradianParams) -> float:
    """Insulin-dependent glucose utilization factor (1/min); multiplies G.

    Undefined for I_i <= 0 because the (kappa * I_i) ** -beta term requires a
    positive base; callers must guard or handle InsulinDomainError.
    """
    I_i = _check_finite("I_i", I_i)
    kappa = (1.0 / p.C_4) * (1.0 / p.V_i - 1.0 / (p.E * p.t_i))
    if kappa <= 0:
        raise InsulinDomainError(
            f"kappa={kappa!r} <= 0 for these parameters (1/V_i must exceed 1/(E*t_i))"
        )
    x = kappa * I_i
    if x <= 0:
        raise InsulinDomainError(f"I_i={I_i!r} outside the I_i > 0 domain")
    # (kappa*I_i)**-beta written as exp(-beta*log(x)): identical in both kernels.
    return (p.U_0 + (p.U_m - p.U_0) / (1.0 + _exp(-p.beta * math.log(x)))) / (p.C_3 * p.V_g)


def hepatic_f4(h_3: float, p: UltradianParams) -> float:
    """Delayed hepatic glucose production (mg/min); logistic in h_3, in (0, R_g)."""
    h_3 = _check_finite("h_3", h_3)
    return p.R_g / (1.0 + _exp(p.alpha * (h_3 / (p.C_5 * p.V_p) - 1.0)))


def nutrition_rate(events: Sequence[NutritionEvent], t: float, k: float) -> float:
    """Glucose appearance rate (mg/min) at time t from past nutrition events.

    Each event contributes (m * k / 60) * exp(k * (t_j - t)) for t > t_j;
    future events contribute nothing.
    """
    if not k > 0:
        raise ValueError(f"decay rate k must be > 0, got {k}")
    total = 0.0
    for e in events:
        if e.t_min < t:
            total += (e.m_mg * k / 60.0) * _exp(k * (e.t_min - t))
    return total


def insulin_drip_rate(deliveries: Sequence[InsulinDelivery], t: float) -> float:
    """Total IV insulin drip rate (mU/min) at time t; drips are [start, end)."""
    return sum(
        d.rate_mU_min for d in deliveries
        if d.kind == "drip" and d.start <= t < d.end
    )


def deriv(v: PhysState, p: UltradianParams, u: ExogenousInputs, t: float) -> PhysState:
    """Model right-hand side at time t.

    Insulin boluses are excluded by design: the integrator applies them as
    state jumps.  Raises InsulinDomainError when I_i <= 0.
    """
    I_p, I_i, G, h_1, h_2, h_3 = v
    exchange = p.E * (I_p / p.V_p - I_i / p.V_i)
    dI_p = (insulin_secretion_f1(G, p) - exchange - I_p / p.t_p
            + insulin_drip_rate(u.insulin, t))
    dI_i = exchange - I_i / p.t_i
    dG = (hepatic_f4(h_3, p) + nutrition_rate(u.nutrition, t, p.k)
          - iigu_f2(G, p) - idgu_factor_f3(I_i, p) * G)
    dh_1 = (I_p - h_1) / p.t_d
    dh_2 = (h_1 - h_2) / p.t_d
    dh_3 = (h_2 - h_3) / p.t_d
    return PhysState(dI_p, dI_i, dG, dh_1, dh_2, dh_3)


def glucose_mass_to_conc(G_mg: float, V_g: float = 10.0) -> float:
    """Glucose mass (mg) to concentration (mg/dl): divide by 10 * V_g liters."""
    return G_mg / (10.0 * V_g)


def glucose_conc_to_mass(conc_mg_dl: float, V_g: float = 10.0) -> float:
    """Glucose concentration (mg/dl) to model mass (mg)."""
    return conc_mg_dl * 10.0 * V_g


# Kept for callers that need the drip lookup the kernels use.
def drip_rate_from_breakpoints(drip_t: np.ndarray, drip_r: np.ndarray, t: float) -> float:
    i = bisect_right(drip_t, t) - 1
    return float(drip_r[i]) if i >= 0 else 0.0
