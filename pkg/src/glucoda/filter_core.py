"""Joint state-parameter ensemble Kalman filter.

Particles are augmented vectors: the six physical states followed by the
estimated parameter subvector.  Prediction propagates each particle through
the ODE solution operator with its own parameters held constant, then adds
process noise; the update applies the Kalman formulae, by default with
perturbed observations (each particle assimilates the measurement plus an
independent noise draw; a shared-observation variant is available).

All randomness is drawn from numpy Generators seeded by (seed, stream, ...)
tuples, and every per-step draw happens once up front, so results never
depend on how particle work is scheduled.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from .integrator import DEFAULT_CONFIG, IntegratorConfig, advance_states
from .ultradian import (
    PARAM_NAMES,
    ExogenousInputs,
    PhysState,
    UltradianParams,
    glucose_conc_to_mass,
)

__all__ = [
    "STATE_DIM",
    "ParameterSelection",
    "SELECTION_PRESETS",
    "AugmentedState",
    "Ensemble",
    "NoiseSpec",
    "MeasurementModel",
    "InitialSpread",
    "FilterRunError",
    "PredictInfo",
    "StepForecast",
    "ensemble_moments",
    "predict_ensemble",
    "predict",
    "kalman_update",
    "assimilate_step",
    "init_ensemble",
]

STATE_DIM = 6

# Seed-stream tags; combined with the caller's seed into rng entropy tuples.
STREAM_INIT = 0
STREAM_PREDICT = 1
STREAM_UPDATE = 2
STREAM_REPLACE = 3

# Rough magnitudes of the six states under typical feeding; the default
# process-noise standard deviation is 1% of these.
TYPICAL_STATE_SCALE = np.array([100.0, 100.0, 10000.0, 100.0, 100.0, 100.0])


class FilterRunError(RuntimeError):
    pass


def _rng(seed, *tags: int) -> np.random.Generator:
    if isinstance(seed, (int, np.integer)):
        entropy = (int(seed),) + tags
    else:
        entropy = tuple(int(s) for s in seed) + tags
    return np.random.default_rng(entropy)


@dataclass(frozen=True)
class ParameterSelection:
    """Ordered subset of model parameters the filter estimates."""

    names: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        if not self.names:
            raise ValueError("parameter selection must be non-empty")
        if len(set(self.names)) != len(self.names):
            raise ValueError("duplicate parameter names in selection")
        unknown = [n for n in self.names if n not in PARAM_NAMES]
        if unknown:
            raise ValueError(f"unknown parameter names: {unknown}")

    @property
    def indices(self) -> tuple[int, ...]:
        return tuple(PARAM_NAMES.index(n) for n in self.names)

    @property
    def augmented_dim(self) -> int:
        return STATE_DIM + len(self.names)

    def __len__(self) -> int:
        return len(self.names)

    def nominal_values(self, base: UltradianParams) -> np.ndarray:
        return np.array([getattr(base, n) for n in self.names])


# The two estimation subsets used throughout: the full eight-parameter set
# and the restricted five-parameter subset.
SELECTION_PRESETS = {
    "standard8": ParameterSelection(("R_g", "C_3", "U_m", "a_1", "C_1", "t_p", "R_m", "t_d")),
    "restricted5": ParameterSelection(("R_g", "C_3", "a_1", "C_1", "t_d")),
}


class AugmentedState(NamedTuple):
    phys: PhysState
    params: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.phys.as_array(), np.asarray(self.params, dtype=np.float64)])


@dataclass
class Ensemble:
    """N augmented particles sharing one parameter selection.

    states is (N, 6 + len(selection)); base supplies values for parameters
    not being estimated.
    """

    states: np.ndarray
    selection: ParameterSelection
    base: UltradianParams

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        if self.states.ndim != 2 or self.states.shape[1] != self.selection.augmented_dim:
            raise ValueError(
                f"states must be (N, {self.selection.augmented_dim}), got {self.states.shape}")
        if self.states.shape[0] < 2:
            raise ValueError("ensemble needs at least 2 particles")

    @property
    def n(self) -> int:
        return self.states.shape[0]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def particle(self, i: int) -> AugmentedState:
        row = self.states[i]
        return AugmentedState(PhysState.from_array(row[:STATE_DIM]), row[STATE_DIM:].copy())

    def param_matrix(self) -> np.ndarray:
        """(N, 21) full parameter vectors: base values, selected columns overridden."""
        P = np.tile(self.base.as_array(), (self.n, 1))
        P[:, self.selection.indices] = self.states[:, STATE_DIM:]
        return P

    def with_states(self, states: np.ndarray) -> "Ensemble":
        return Ensemble(states, self.selection, self.base)


def _check_psd(M: np.ndarray, name: str):
    if not np.allclose(M, M.T, atol=1e-10):
        raise ValueError(f"{name} must be symmetric")
    w = np.linalg.eigvalsh(M)
    if w.min() < -1e-10 * max(1.0, abs(w.max())):
        raise ValueError(f"{name} must be positive semidefinite")


@dataclass(frozen=True)
class NoiseSpec:
    """Process noise Sigma over the augmented state, measurement variance Gamma,
    and optional initial moments (m0, C0)."""

    Sigma: np.ndarray
    Gamma: float
    m0: np.ndarray | None = None
    C0: np.ndarray | None = None

    def __post_init__(self):
        object.__setattr__(self, "Sigma", np.asarray(self.Sigma, dtype=np.float64))
        _check_psd(self.Sigma, "Sigma")
        if not self.Gamma > 0:
            raise ValueError("Gamma must be > 0")
        if self.C0 is not None:
            _check_psd(np.asarray(self.C0), "C0")

    @classmethod
    def default_for(cls, selection: ParameterSelection,
                    base: UltradianParams | None = None,
                    gamma_std: float = 5.0,
                    state_frac: float = 0.01,
                    param_frac: float = 0.005) -> "NoiseSpec":
        """Diagonal defaults: state stds at state_frac of typical magnitudes,
        parameter stds at param_frac of nominal values, Gamma = gamma_std**2."""
        base = base or UltradianParams.nominal()
        stds = np.concatenate([
            state_frac * TYPICAL_STATE_SCALE,
            param_frac * selection.nominal_values(base),
        ])
        return cls(Sigma=np.diag(stds ** 2), Gamma=gamma_std ** 2)


@dataclass(frozen=True)
class MeasurementModel:
    """Linear observation row over the augmented state (scalar measurement)."""

    H: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "H", np.asarray(self.H, dtype=np.float64).reshape(-1))
        if np.count_nonzero(self.H) != 1:
            raise ValueError("measurement row must have exactly one nonzero entry")

    @classmethod
    def glucose(cls, selection: ParameterSelection, V_g: float = 10.0) -> "MeasurementModel":
        """Selects G and rescales mass (mg) to concentration (mg/dl).

        The scaling uses the fixed nominal V_g: the conversion is owned by the
        measurement model, not by any estimated parameter.
        """
        H = np.zeros(selection.augmented_dim)
        H[2] = 1.0 / (10.0 * V_g)
        return cls(H)

    def apply(self, states: np.ndarray) -> np.ndarray:
        return np.asarray(states) @ self.H


def ensemble_moments(states: np.ndarray, unbiased: bool = False):
    """Ensemble mean and covariance; 1/N normalization by default
    (set unbiased=True for 1/(N-1))."""
    states = np.asarray(states, dtype=np.float64)
    N = states.shape[0]
    m = states.mean(axis=0)
    D = states - m
    denom = N - 1 if unbiased else N
    C = D.T @ D / denom
    return m, C


def regularize_covariance(C: np.ndarray) -> np.ndarray:
    """Ridge guard for ensemble-deficient ranks: C + (1e-8 tr(C)/dim) I."""
    dim = C.shape[0]
    lam = 1e-8 * np.trace(C) / dim
    return C + lam * np.eye(dim)


def predict_ensemble(states: np.ndarray, propagate, Sigma: np.ndarray, seed,
                     unbiased: bool = False):
    """Generic prediction: propagate particles, add N(0, Sigma) noise, take moments.

    propagate maps an (N, dim) array to an (N, dim) array.  Used directly by
    linear-system tests; the ODE-specific predict() wraps it with the particle
    failure policy.
    """
    states = np.asarray(states, dtype=np.float64)
    out = np.asarray(propagate(states), dtype=np.float64)
    rng = _rng(seed, STREAM_PREDICT)
    out = out + rng.multivariate_normal(
        np.zeros(out.shape[1]), Sigma, size=out.shape[0], method="eigh")
    m, C = ensemble_moments(out, unbiased=unbiased)
    return out, m, C


@dataclass(frozen=True)
class PredictInfo:
    n_replaced: int = 0
    replaced_indices: tuple[int, ...] = ()


def predict(ens: Ensemble, u: ExogenousInputs, t0: float, t1: float,
            noise: NoiseSpec, seed, cfg: IntegratorConfig = DEFAULT_CONFIG,
            unbiased: bool = False):
    """Propagate every particle from t0 to t1 and form forecast moments.

    Parameters ride along unchanged through the ODE; process noise (including
    any parameter-block jitter in Sigma) is added after propagation.  A
    particle whose integration fails (insulin domain error or blow-up) is
    replaced by a draw centered at the mean of the surviving particles with
    their covariance; replacements are reported in PredictInfo.

    Returns (ensemble_hat, m_hat, C_hat, info).
    """
    if t1 < t0:
        raise ValueError("t1 must be >= t0")
    arrays = u.kernel_arrays()
    Y = np.ascontiguousarray(ens.states[:, :STATE_DIM])
    P = ens.param_matrix()
    Y_out, statuses, _ = advance_states(Y, P, t0, t1, arrays, cfg)

    new_states = ens.states.copy()
    new_states[:, :STATE_DIM] = Y_out

    failed = np.flatnonzero(statuses != 0)
    info = PredictInfo()
    if failed.size:
        ok = np.flatnonzero(statuses == 0)
        if ok.size < 2:
            raise FilterRunError(
                f"{failed.size}/{ens.n} particles failed integration in ({t0}, {t1}]")
        m_ok, C_ok = ensemble_moments(new_states[ok], unbiased=unbiased)
        rng = _rng(seed, STREAM_REPLACE)
        new_states[failed] = rng.multivariate_normal(
            m_ok, C_ok, size=failed.size, method="eigh")
        info = PredictInfo(n_replaced=int(failed.size),
                           replaced_indices=tuple(int(i) for i in failed))

    rng = _rng(seed, STREAM_PREDICT)
    new_states = new_states + rng.multivariate_normal(
        np.zeros(ens.dim), noise.Sigma, size=ens.n, method="eigh")
    m_hat, C_hat = ensemble_moments(new_states, unbiased=unbiased)
    return ens.with_states(new_states), m_hat, C_hat, info


def perturbed_observations(y: float, Gamma: float, n: int, seed,
                           perturbed: bool = True) -> np.ndarray:
    """Per-particle observation draws y + eta, eta ~ N(0, Gamma) i.i.d.

    Shared by the unconstrained and constrained updates so that, given the
    same seed, both assimilate identical observation sets.
    """
    if not perturbed:
        return np.full(n, float(y))
    rng = _rng(seed, STREAM_UPDATE)
    return float(y) + rng.standard_normal(n) * math.sqrt(Gamma)


def kalman_update(ens: Ensemble, m_hat: np.ndarray, C_hat: np.ndarray, y: float,
                  model: MeasurementModel, noise: NoiseSpec, seed,
                  perturbed_obs: bool = True) -> Ensemble:
    """Kalman update of every particle: v <- v + K (y_n - H v).

    S = H C H' + Gamma with C ridge-regularized; with perturbed_obs each
    particle gets its own observation draw, otherwise all share y.
    """
    h = model.H
    C_reg = regularize_covariance(np.asarray(C_hat, dtype=np.float64))
    S = float(h @ C_reg @ h + noise.Gamma)
    if not (math.isfinite(S) and S > 0):
        raise FilterRunError(f"innovation variance S={S!r} is not invertible")
    K = (C_reg @ h) / S

    y_n = perturbed_observations(y, noise.Gamma, ens.n, seed, perturbed_obs)
    innov = y_n - ens.states @ h
    new_states = ens.states + innov[:, None] * K[None, :]
    return ens.with_states(new_states)


@dataclass(frozen=True)
class StepForecast:
    """Forecast made at a measurement time before assimilating it."""

    t: float
    y: float
    mean: float                 # H m_hat
    std: float                  # spread of H v_hat over particles
    lo: float
    hi: float
    param_means: tuple[float, ...] = ()   # posterior parameter means
    n_violations: int = 0                 # forecast particles violating constraints
    max_violation: float = 0.0
    n_replaced: int = 0


def assimilate_step(ens: Ensemble, u: ExogenousInputs, t0: float, t_meas: float,
                    y: float, model: MeasurementModel, noise: NoiseSpec, seed,
                    cfg: IntegratorConfig = DEFAULT_CONFIG, *,
                    constraints=None, qp_cfg=None, perturbed_obs: bool = True,
                    unbiased: bool = False):
    """Predict to the measurement time, record the forecast, then update.

    The forecast statistics are computed strictly before the measurement is
    used.  When constraints are given the update solves the constrained
    per-particle objective; otherwise the plain Kalman update.  Returns
    (StepForecast, posterior Ensemble).
    """
    if t_meas < t0:
        raise ValueError("measurement time must be >= window start")
    ens_hat, m_hat, C_hat, info = predict(
        ens, u, t0, t_meas, noise, seed, cfg, unbiased=unbiased)

    fc_particles = model.apply(ens_hat.states)
    fc_mean = float(model.H @ m_hat)
    fc_std = float(fc_particles.std())
    n_viol = 0
    max_viol = 0.0
    if constraints is not None:
        rep = constraints.violation_stats(ens_hat.states)
        n_viol, max_viol = rep

    if constraints is not None:
        from .constrained import constrained_update
        posterior = constrained_update(
            ens_hat, m_hat, C_hat, y, model, noise, constraints,
            qp_cfg=qp_cfg, seed=seed, perturbed_obs=perturbed_obs)
    else:
        posterior = kalman_update(
            ens_hat, m_hat, C_hat, y, model, noise, seed, perturbed_obs=perturbed_obs)

    param_means = tuple(float(v) for v in posterior.states[:, STATE_DIM:].mean(axis=0))
    record = StepForecast(
        t=float(t_meas), y=float(y), mean=fc_mean, std=fc_std,
        lo=float(fc_particles.min()), hi=float(fc_particles.max()),
        param_means=param_means, n_violations=n_viol, max_violation=max_viol,
        n_replaced=info.n_replaced)
    return record, posterior


@dataclass(frozen=True)
class InitialSpread:
    """Relative spreads and center levels for ensemble initialization."""

    param_rel: float = 0.15
    glucose_rel: float = 0.10
    insulin_level: float = 90.0
    insulin_rel: float = 0.15
    delay_level: float = 77.0
    delay_rel: float = 0.15

    def __post_init__(self):
        for f in ("param_rel", "glucose_rel", "insulin_rel", "delay_rel"):
            if getattr(self, f) < 0:
                raise ValueError(f"{f} must be >= 0")


def init_ensemble(selection: ParameterSelection, nominal: UltradianParams,
                  first_glucose_mg_dl: float, n: int,
                  spread: InitialSpread = InitialSpread(), seed=0) -> Ensemble:
    """Draw the starting ensemble: parameters centered at nominal values,
    glucose centered at the first measurement, insulin and delay states at
    configured levels; diagonal covariance from the relative spreads."""
    if n < 2:
        raise ValueError("need at least 2 particles")
    G0 = glucose_conc_to_mass(first_glucose_mg_dl, nominal.V_g)
    m0 = np.concatenate([
        [spread.insulin_level, spread.insulin_level, G0,
         spread.delay_level, spread.delay_level, spread.delay_level],
        selection.nominal_values(nominal),
    ])
    rels = np.concatenate([
        [spread.insulin_rel, spread.insulin_rel, spread.glucose_rel,
         spread.delay_rel, spread.delay_rel, spread.delay_rel],
        np.full(len(selection), spread.param_rel),
    ])
    stds = rels * np.abs(m0)
    rng = _rng(seed, STREAM_INIT)
    states = m0 + rng.standard_normal((n, m0.size)) * stds
    return Ensemble(states, selection, nominal)
