"""Experiment harness: sequential forecast/assimilate runs and their scoring.

A run initializes the ensemble at nominal parameters, then for each glucose
measurement predicts to its time under the exogenous inputs, records the
forecast, and assimilates.  Squared forecast errors accumulate from 24 hours
after admission; the constraint matrix compares every named constraint
experiment against the unconstrained baseline through the MSE ratio and its
outcome categories.  Twin patients (synthetic timelines with known truth)
stand in for clinical data in verification runs.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .constrained import EXPERIMENT_NAMES, QPConfig, constraint_set_from_name
from .filter_core import (
    FilterRunError,
    InitialSpread,
    MeasurementModel,
    NoiseSpec,
    ParameterSelection,
    SELECTION_PRESETS,
    _rng,
    assimilate_step,
    init_ensemble,
)
from .integrator import IntegratorConfig, IntegrationError, solution_operator
from .patient_data import DataInclusion, PatientEvent, PatientTimeline, apply_inclusion, to_exogenous
from .ultradian import (
    ExogenousInputs,
    InsulinDomainError,
    NutritionEvent,
    PhysState,
    UltradianParams,
    glucose_mass_to_conc,
)
from ._kernel import kernel_name

__all__ = [
    "ExperimentConfig",
    "ForecastRecord",
    "ExperimentResult",
    "OmegaReport",
    "TwinSpec",
    "TwinTruth",
    "UNCONSTRAINED",
    "OMEGA_CATEGORIES",
    "run_experiment",
    "mse_after_24h",
    "omega_ratio",
    "omega_category",
    "run_constraint_matrix",
    "generate_twin_patient",
    "generate_twin_cohort",
    "export_results",
    "entrainment_step",
]

UNCONSTRAINED = "unconstrained"

# Seed stream tags for twin generation (filter streams live in filter_core).
_STREAM_TWIN_PARAMS = 101
_STREAM_TWIN_DATA = 102


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one filtering experiment depends on."""

    selection: ParameterSelection = SELECTION_PRESETS["standard8"]
    particles: int = 50
    constraint: str | None = None           # named experiment, or None
    inclusion: DataInclusion = DataInclusion()
    noise: NoiseSpec | None = None          # None -> NoiseSpec.default_for(selection)
    integrator: IntegratorConfig = IntegratorConfig()
    spread: InitialSpread = InitialSpread()
    qp: QPConfig = QPConfig()
    base_params: UltradianParams = UltradianParams.nominal()
    seed: int = 0
    perturbed_obs: bool = True
    unbiased_cov: bool = False
    mse_cutoff_min: float = 1440.0
    mse_by_count: bool = False
    mse_count_cutoff: int = 24
    replacement_budget: int | None = None   # None -> 10 * particles

    def __post_init__(self):
        if self.particles < 2:
            raise ValueError("particles must be >= 2")
        if self.seed < 0:
            raise ValueError("seed must be >= 0")
        if self.constraint is not None and self.constraint not in EXPERIMENT_NAMES:
            raise ValueError(f"unknown constraint experiment {self.constraint!r}")

    def resolved_noise(self) -> NoiseSpec:
        return self.noise or NoiseSpec.default_for(self.selection, self.base_params)

    @property
    def experiment_name(self) -> str:
        return self.constraint or UNCONSTRAINED


@dataclass(frozen=True)
class ForecastRecord:
    """One measurement's forecast, made before assimilating it."""

    t: float
    y: float
    forecast_mean: float
    forecast_std: float
    forecast_lo: float
    forecast_hi: float
    param_means: tuple[float, ...]
    n_forecast_violations: int = 0
    max_forecast_violation: float = 0.0
    n_replaced: int = 0

    @property
    def residual(self) -> float:
        return self.y - self.forecast_mean


@dataclass(frozen=True)
class ExperimentResult:
    patient_id: str
    experiment: str
    records: tuple[ForecastRecord, ...]
    mse_after_24h: float | None
    mse_sum: float | None
    n_qualifying: int
    cutoff_min: float
    aborted: bool
    meta: dict

    def cumulative_curve(self):
        """Rows (t, sq_residual, cum_sum, cum_count, cum_mean, qualifying)."""
        rows = []
        cum = 0.0
        count = 0
        for i, r in enumerate(self.records):
            sq = r.residual ** 2
            q = self._qualifies(i, r)
            if q:
                cum += sq
                count += 1
            rows.append((r.t, sq, cum, count, cum / count if count else math.nan, q))
        return rows

    def _qualifies(self, index: int, record: ForecastRecord) -> bool:
        if self.meta.get("mse_by_count"):
            return index >= self.meta.get("mse_count_cutoff", 24)
        return record.t >= self.cutoff_min


def _qualifying_squares(records: Sequence[ForecastRecord], cutoff_min: float,
                        by_count: bool, count_cutoff: int) -> list[float]:
    if by_count:
        return [r.residual ** 2 for r in records[count_cutoff:]]
    return [r.residual ** 2 for r in records if r.t >= cutoff_min]


def mse_after_24h(records: Sequence[ForecastRecord], cutoff_min: float = 1440.0,
                  by_count: bool = False, count_cutoff: int = 24) -> float:
    """Mean squared forecast residual over qualifying records.

    By default a record qualifies when its time is at least cutoff_min
    (24 hours after admission); by_count switches to skipping the first
    count_cutoff records instead.  Raises when nothing qualifies.
    """
    sq = _qualifying_squares(records, cutoff_min, by_count, count_cutoff)
    if not sq:
        raise ValueError("no records qualify for MSE")
    total = 0.0
    for v in sq:
        total += v
    return total / len(sq)


def run_experiment(tl: PatientTimeline, cfg: ExperimentConfig) -> ExperimentResult:
    """Run one full filtering experiment over a patient timeline.

    The ensemble starts at nominal parameters with glucose centered on the
    first measurement; every later measurement is forecast and assimilated in
    order.  A run that exhausts its particle-replacement budget (or hits an
    unrecoverable filter error) stops early and is flagged aborted, keeping
    the partial records.
    """
    tl_seen = apply_inclusion(tl, cfg.inclusion)
    u, meas = to_exogenous(tl_seen)
    if len(meas) < 2:
        raise ValueError(f"timeline {tl.id!r} needs >= 2 glucose measurements")

    noise = cfg.resolved_noise()
    model = MeasurementModel.glucose(cfg.selection, cfg.base_params.V_g)
    cons = (constraint_set_from_name(cfg.constraint, cfg.selection, cfg.base_params.V_g)
            if cfg.constraint else None)
    ens = init_ensemble(cfg.selection, cfg.base_params, meas[0].y, cfg.particles,
                        cfg.spread, seed=(cfg.seed,))

    admission_t = tl.events[0].t_min
    cutoff = admission_t + cfg.mse_cutoff_min
    budget = cfg.replacement_budget if cfg.replacement_budget is not None else 10 * cfg.particles

    records: list[ForecastRecord] = []
    replaced_total = 0
    aborted = False
    abort_reason = None
    t_prev = meas[0].t
    for i, m in enumerate(meas[1:], start=1):
        try:
            fc, ens = assimilate_step(
                ens, u, t_prev, m.t, m.y, model, noise, (cfg.seed, i),
                cfg.integrator, constraints=cons, qp_cfg=cfg.qp,
                perturbed_obs=cfg.perturbed_obs, unbiased=cfg.unbiased_cov)
        except (FilterRunError, IntegrationError, InsulinDomainError) as exc:
            aborted = True
            abort_reason = f"step {i}: {exc}"
            break
        records.append(ForecastRecord(
            t=fc.t, y=fc.y, forecast_mean=fc.mean, forecast_std=fc.std,
            forecast_lo=fc.lo, forecast_hi=fc.hi, param_means=fc.param_means,
            n_forecast_violations=fc.n_violations,
            max_forecast_violation=fc.max_violation, n_replaced=fc.n_replaced))
        replaced_total += fc.n_replaced
        if replaced_total > budget:
            aborted = True
            abort_reason = f"particle replacement budget exhausted ({replaced_total} > {budget})"
            break
        t_prev = m.t

    sq = _qualifying_squares(records, cutoff, cfg.mse_by_count, cfg.mse_count_cutoff)
    if sq:
        total = 0.0
        for v in sq:
            total += v
        mse = total / len(sq)
        mse_sum = total
    else:
        mse = None
        mse_sum = None

    meta = {
        "selection": list(cfg.selection.names),
        "particles": cfg.particles,
        "constraint": cfg.constraint,
        "seed": cfg.seed,
        "perturbed_obs": cfg.perturbed_obs,
        "unbiased_cov": cfg.unbiased_cov,
        "include_iv_drip": cfg.inclusion.include_iv_drip,
        "include_iv_bolus": cfg.inclusion.include_iv_bolus,
        "mse_by_count": cfg.mse_by_count,
        "mse_count_cutoff": cfg.mse_count_cutoff,
        "kernel": kernel_name(),
        "n_measurements": len(meas),
        "n_replaced_total": replaced_total,
        "abort_reason": abort_reason,
    }
    return ExperimentResult(
        patient_id=tl.id, experiment=cfg.experiment_name, records=tuple(records),
        mse_after_24h=mse, mse_sum=mse_sum, n_qualifying=len(sq),
        cutoff_min=cutoff, aborted=aborted, meta=meta)


OMEGA_CATEGORIES = ("harm", "no_change", "improvement", "substantial_improvement")


def omega_category(omega: float) -> str:
    if omega >= 1.1:
        return "harm"
    if omega >= 0.9:
        return "no_change"
    if omega >= 0.6:
        return "improvement"
    return "substantial_improvement"


def omega_ratio(mse_constrained: float, mse_unconstrained: float):
    """MSE(constrained) / MSE(unconstrained) and its outcome category."""
    if mse_unconstrained <= 0:
        raise ValueError(f"unconstrained MSE must be > 0, got {mse_unconstrained}")
    if mse_constrained < 0:
        raise ValueError(f"MSE must be >= 0, got {mse_constrained}")
    omega = mse_constrained / mse_unconstrained
    return omega, omega_category(omega)


@dataclass(frozen=True)
class OmegaReport:
    """Constraint-experiment outcomes across a cohort.

    omega[patient][experiment] is the MSE ratio; fractions[category][experiment]
    is the share of scored patients falling in that category.
    """

    experiments: tuple[str, ...]
    patients: tuple[str, ...]
    omega: dict
    category: dict
    fractions: dict
    baseline_mse: dict
    constrained_mse: dict

    def format_table(self) -> str:
        width = max(12, max((len(p) for p in self.patients), default=8) + 2)
        head = "patient".ljust(width) + "".join(e.rjust(9) for e in self.experiments)
        lines = [head]
        for p in self.patients:
            row = p.ljust(width)
            for e in self.experiments:
                w = self.omega.get(p, {}).get(e)
                row += ("-".rjust(9) if w is None else f"{w:9.3g}")
            lines.append(row)
        lines.append("-" * len(head))
        for cat in OMEGA_CATEGORIES:
            row = cat.ljust(width)
            for e in self.experiments:
                row += f"{self.fractions[cat].get(e, 0.0):9.2f}"
            lines.append(row)
        return "\n".join(lines)


def run_constraint_matrix(timelines, base_cfg: ExperimentConfig,
                          experiments: Sequence[str] = EXPERIMENT_NAMES) -> OmegaReport:
    """Run the unconstrained baseline plus the named constraint experiments on
    each patient with shared per-patient seeds, and tabulate the MSE ratios."""
    if isinstance(timelines, PatientTimeline):
        timelines = [timelines]
    timelines = list(timelines)
    experiments = tuple(experiments)

    omega: dict = {}
    category: dict = {}
    baseline_mse: dict = {}
    constrained_mse: dict = {}
    for idx, tl in enumerate(timelines):
        cfg_p = replace(base_cfg, seed=base_cfg.seed + idx, constraint=None)
        base_res = run_experiment(tl, cfg_p)
        baseline_mse[tl.id] = base_res.mse_after_24h
        omega[tl.id] = {}
        category[tl.id] = {}
        constrained_mse[tl.id] = {}
        for name in experiments:
            res = run_experiment(tl, replace(cfg_p, constraint=name))
            constrained_mse[tl.id][name] = res.mse_after_24h
            if (base_res.mse_after_24h is not None and base_res.mse_after_24h > 0
                    and res.mse_after_24h is not None):
                w, cat = omega_ratio(res.mse_after_24h, base_res.mse_after_24h)
                omega[tl.id][name] = w
                category[tl.id][name] = cat
            else:
                omega[tl.id][name] = None
                category[tl.id][name] = None

    fractions = {cat: {} for cat in OMEGA_CATEGORIES}
    for name in experiments:
        cats = [category[tl.id][name] for tl in timelines if category[tl.id][name]]
        for cat in OMEGA_CATEGORIES:
            fractions[cat][name] = (cats.count(cat) / len(cats)) if cats else 0.0

    return OmegaReport(
        experiments=experiments, patients=tuple(tl.id for tl in timelines),
        omega=omega, category=category, fractions=fractions,
        baseline_mse=baseline_mse, constrained_mse=constrained_mse)


@dataclass(frozen=True)
class TwinSpec:
    """Synthetic-patient generation settings.

    Feeds arrive every feed_interval_min starting one burn-in before admission
    (so the truth is on its attractor at t=0); glucose is sampled at jittered
    intervals and perturbed with Gaussian noise.
    """

    duration_min: float = 5760.0          # 4 days
    feed_interval_min: float = 30.0
    feed_mg: float = 250_000.0
    meas_interval_mean_min: float = 90.0
    meas_jitter_frac: float = 0.5
    noise_std_mg_dl: float = 5.0
    burn_in_min: float = 1440.0
    truth_grid_min: float = 5.0
    integrator: IntegratorConfig = IntegratorConfig()

    def __post_init__(self):
        if self.noise_std_mg_dl < 0:
            raise ValueError("noise std must be >= 0")
        if not (0 <= self.meas_jitter_frac < 1):
            raise ValueError("meas_jitter_frac must be in [0, 1)")


@dataclass(frozen=True)
class TwinTruth:
    """Hidden truth behind a twin timeline."""

    params: UltradianParams
    times: np.ndarray
    states: np.ndarray          # (M, 6)
    glucose_mg_dl: np.ndarray

    def glucose_at(self, t: float) -> float:
        i = int(np.argmin(np.abs(self.times - t)))
        if abs(self.times[i] - t) > 1e-9:
            raise KeyError(f"t={t} is not a truth sample time")
        return float(self.glucose_mg_dl[i])

    def insulin_range(self):
        """(min, max) over both insulin states across the record."""
        ins = self.states[:, :2]
        return float(ins.min()), float(ins.max())


_TWIN_START = PhysState(90.0, 90.0, 10000.0, 77.0, 77.0, 77.0)


def generate_twin_patient(true_params: UltradianParams, spec: TwinSpec = TwinSpec(),
                          seed=0, patient_id: str = "twin"):
    """Simulate a synthetic patient and sample a clinical-style timeline.

    Returns (PatientTimeline, TwinTruth).  The timeline carries the tube-feed
    events from t=0 on and noisy glucose measurements; the truth keeps the
    full trajectory on a dense grid that includes every measurement time.
    """
    feed_times = np.arange(-spec.burn_in_min, spec.duration_min, spec.feed_interval_min)
    u_truth = ExogenousInputs(
        nutrition=tuple(NutritionEvent(float(t), spec.feed_mg) for t in feed_times))

    v0 = solution_operator([-spec.burn_in_min, 0.0], _TWIN_START, true_params,
                           u_truth, spec.integrator)[-1]

    rng = _rng(seed, _STREAM_TWIN_DATA)
    times = [0.0]
    t = 0.0
    while True:
        lo = 1.0 - spec.meas_jitter_frac
        hi = 1.0 + spec.meas_jitter_frac
        t = t + spec.meas_interval_mean_min * rng.uniform(lo, hi)
        if t > spec.duration_min:
            break
        times.append(float(t))

    grid = sorted(set(np.arange(0.0, spec.duration_min + 1e-9, spec.truth_grid_min))
                  | set(times))
    states = solution_operator(grid, v0, true_params, u_truth, spec.integrator)
    S = np.array([list(s) for s in states])
    conc = S[:, 2] / (10.0 * true_params.V_g)

    grid_arr = np.array(grid)
    noise = rng.standard_normal(len(times)) * spec.noise_std_mg_dl
    events = [PatientEvent(float(t), "tube_feed", spec.feed_mg)
              for t in feed_times if t >= 0.0]
    for j, tm in enumerate(times):
        i = int(np.searchsorted(grid_arr, tm))
        y = float(conc[i] + noise[j])
        events.append(PatientEvent(tm, "glucose_meas", y))
    tl = PatientTimeline.from_events(patient_id, events)
    truth = TwinTruth(params=true_params, times=grid_arr, states=S, glucose_mg_dl=conc)
    return tl, truth


def generate_twin_cohort(n_patients: int = 20, spec: TwinSpec = TwinSpec(), seed: int = 0,
                         param_rel_range: float = 0.30, max_attempts: int = 20):
    """Cohort of twins with true parameters drawn uniformly within
    +-param_rel_range of nominal.  Draws giving non-viable physiology
    (failed integration or glucose outside 25-500 mg/dl) are resampled.
    Returns a list of (timeline, truth) pairs."""
    nominal = UltradianParams.nominal().as_array()
    out = []
    for i in range(n_patients):
        for attempt in range(max_attempts):
            prng = _rng(seed, _STREAM_TWIN_PARAMS, i, attempt)
            factors = prng.uniform(1.0 - param_rel_range, 1.0 + param_rel_range, size=21)
            params = UltradianParams.from_array(nominal * factors)
            try:
                tl, truth = generate_twin_patient(
                    params, spec, seed=(seed, _STREAM_TWIN_DATA, i, attempt),
                    patient_id=f"twin-{i:02d}")
            except (IntegrationError, InsulinDomainError):
                continue
            conc = truth.glucose_mg_dl
            if conc.min() > 25.0 and conc.max() < 500.0:
                out.append((tl, truth))
                break
        else:
            raise RuntimeError(f"no viable twin found for patient {i} "
                               f"after {max_attempts} attempts")
    return out


def entrainment_step(records: Sequence[ForecastRecord], window: int = 3,
                     factor: float = 2.0):
    """First record index where the trailing-window mean squared residual
    reaches factor x the final-quarter plateau; None if never."""
    sq = [r.residual ** 2 for r in records]
    if len(sq) < max(window, 4):
        return None
    tail = sq[-max(len(sq) // 4, 1):]
    plateau = sum(tail) / len(tail)
    thresh = factor * plateau + 1e-12
    for i in range(len(sq) - window + 1):
        if sum(sq[i:i + window]) / window <= thresh:
            return i
    return None


# ---------------------------------------------------------------------------
# Exports: one CSV per series plus a JSON summary, byte-stable for fixed
# inputs (floats written with repr, which round-trips exactly).

def _fmt(x) -> str:
    return repr(float(x))


def _write_csv(path: Path, header: list[str], rows: Iterable[Sequence]):
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(str(c) if isinstance(c, (str, int)) else _fmt(c)
                              for c in row))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _export_experiment(result: ExperimentResult, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out_dir / "forecasts.csv"
    _write_csv(p, ["t_min", "y", "forecast_mean", "forecast_std", "forecast_lo",
                   "forecast_hi", "n_forecast_violations", "max_forecast_violation",
                   "n_replaced"],
               ((r.t, r.y, r.forecast_mean, r.forecast_std, r.forecast_lo, r.forecast_hi,
                 r.n_forecast_violations, r.max_forecast_violation, r.n_replaced)
                for r in result.records))
    paths.append(p)

    p = out_dir / "params.csv"
    names = result.meta.get("selection", [])
    _write_csv(p, ["t_min"] + list(names),
               ((r.t, *r.param_means) for r in result.records))
    paths.append(p)

    p = out_dir / "mse.csv"
    _write_csv(p, ["t_min", "sq_residual", "cum_sum", "cum_count", "cum_mean",
                   "qualifying"],
               ((t, sq, cum, int(cnt), mean, int(q))
                for t, sq, cum, cnt, mean, q in result.cumulative_curve()))
    paths.append(p)

    p = out_dir / "hist.csv"
    if result.records:
        fc = np.array([r.forecast_mean for r in result.records])
        ys = np.array([r.y for r in result.records])
        lo = float(min(fc.min(), ys.min()))
        hi = float(max(fc.max(), ys.max()))
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, 21)
        fc_counts, _ = np.histogram(fc, bins=edges)
        y_counts, _ = np.histogram(ys, bins=edges)
        rows = [(edges[i], edges[i + 1], int(fc_counts[i]), int(y_counts[i]))
                for i in range(20)]
    else:
        rows = []
    _write_csv(p, ["bin_lo", "bin_hi", "forecast_count", "measurement_count"], rows)
    paths.append(p)

    p = out_dir / "summary.json"
    summary = {
        "patient_id": result.patient_id,
        "experiment": result.experiment,
        "n_records": len(result.records),
        "n_qualifying": result.n_qualifying,
        "cutoff_min": result.cutoff_min,
        "mse_after_24h": result.mse_after_24h,
        "mse_sum": result.mse_sum,
        "aborted": result.aborted,
        **result.meta,
    }
    p.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(p)
    return paths


def _export_omega(report: OmegaReport, out_dir: Path) -> list[Path]:
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    p = out_dir / "omega.csv"
    rows = []
    for pat in report.patients:
        for exp in report.experiments:
            w = report.omega[pat].get(exp)
            cat = report.category[pat].get(exp)
            rows.append((pat, exp,
                         _fmt(w) if w is not None else "",
                         cat if cat is not None else ""))
    _write_csv(p, ["patient", "experiment", "omega", "category"],
               ((a, b, c, d) for a, b, c, d in rows))
    paths.append(p)

    p = out_dir / "fractions.csv"
    _write_csv(p, ["category"] + list(report.experiments),
               ((cat, *(report.fractions[cat][e] for e in report.experiments))
                for cat in OMEGA_CATEGORIES))
    paths.append(p)

    p = out_dir / "omega_summary.json"
    p.write_text(json.dumps({
        "experiments": list(report.experiments),
        "patients": list(report.patients),
        "omega": report.omega,
        "fractions": report.fractions,
        "baseline_mse": report.baseline_mse,
    }, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    paths.append(p)
    return paths


def export_results(obj, path: str | Path) -> list[Path]:
    """Write plot-ready series for an ExperimentResult (forecasts, parameter
    trajectories, cumulative MSE, histograms, summary) or an OmegaReport
    (omega table, category fractions)."""
    path = Path(path)
    if isinstance(obj, ExperimentResult):
        return _export_experiment(obj, path)
    if isinstance(obj, OmegaReport):
        return _export_omega(obj, path)
    raise TypeError(f"cannot export {type(obj).__name__}")
