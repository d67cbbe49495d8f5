"""Clinical event timelines: parsing, validation, and conversion to model inputs.

One timeline per patient: time-ordered glucose measurements, insulin
deliveries, and nutrition events, with times in minutes since admission.

Two on-disk formats carry the same fields:

  CSV   header exactly ``t_min,kind,value``, one event per row
  JSON  ``{"id": str, "events": [{"t_min": num, "kind": str, "value": num}]}``

Values are kind-specific: mg/dl for glucose_meas, mU for insulin_bolus,
mU/min for insulin_drip_rate, mg carbohydrate for the nutrition kinds.  An
insulin_drip_rate row sets the drip rate from its timestamp until the next
insulin_drip_rate row (a 0 row terminates; a trailing nonzero rate runs on).
Nutrition kinds are discrete carbohydrate quantities feeding the decaying
appearance driver.  Unknown kinds or extra columns are rejected.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, NamedTuple

from .ultradian import ExogenousInputs, InsulinDelivery, NutritionEvent

__all__ = [
    "EVENT_KINDS",
    "PatientEvent",
    "PatientTimeline",
    "DataInclusion",
    "SchemaError",
    "parse_timeline",
    "parse_timeline_csv",
    "parse_timeline_json",
    "serialize_timeline",
    "apply_inclusion",
    "to_exogenous",
    "Measurement",
    "validate_file",
]

log = logging.getLogger(__name__)

EVENT_KINDS = frozenset({
    "glucose_meas",
    "insulin_bolus",
    "insulin_drip_rate",
    "tube_feed",
    "iv_glucose_drip",
    "iv_glucose_bolus",
})

_NUTRITION_KINDS = ("tube_feed", "iv_glucose_drip", "iv_glucose_bolus")

_CSV_HEADER = ["t_min", "kind", "value"]


class SchemaError(ValueError):
    pass


@dataclass(frozen=True)
class PatientEvent:
    t_min: float
    kind: str
    value: float

    def __post_init__(self):
        if self.kind not in EVENT_KINDS:
            raise SchemaError(f"unknown event kind {self.kind!r}")
        if not (math.isfinite(self.t_min) and self.t_min >= 0):
            raise SchemaError(f"event time must be finite and >= 0, got {self.t_min!r}")
        if not (math.isfinite(self.value) and self.value >= 0):
            raise SchemaError(f"event value must be finite and >= 0, got {self.value!r}")


@dataclass(frozen=True)
class PatientTimeline:
    id: str
    events: tuple[PatientEvent, ...]

    def __post_init__(self):
        object.__setattr__(self, "events", tuple(self.events))
        times = [e.t_min for e in self.events]
        if any(b < a for a, b in zip(times, times[1:])):
            raise SchemaError("timeline events must be sorted by time")
        if not any(e.kind == "glucose_meas" for e in self.events):
            raise SchemaError("timeline must contain at least one glucose_meas")

    @classmethod
    def from_events(cls, id: str, events: Iterable[PatientEvent]) -> "PatientTimeline":
        """Build a timeline, stable-sorting events by time."""
        return cls(id, tuple(sorted(events, key=lambda e: e.t_min)))

    def counts(self) -> dict[str, int]:
        out = {k: 0 for k in sorted(EVENT_KINDS)}
        for e in self.events:
            out[e.kind] += 1
        return out


@dataclass(frozen=True)
class DataInclusion:
    """Which optional nutrition channels the filter may see; tube feeds,
    measurements, and insulin are always included."""

    include_iv_drip: bool = True
    include_iv_bolus: bool = True


def _event_from_row(row_no: int, t_raw, kind_raw, value_raw, source: str) -> PatientEvent:
    try:
        t = float(t_raw)
        value = float(value_raw)
    except (TypeError, ValueError):
        raise SchemaError(f"{source} row {row_no}: non-numeric field "
                          f"(t_min={t_raw!r}, value={value_raw!r})") from None
    kind = str(kind_raw)
    try:
        return PatientEvent(t, kind, value)
    except SchemaError as exc:
        raise SchemaError(f"{source} row {row_no}: {exc}") from None


def parse_timeline_csv(text: str, id: str, source: str = "<csv>") -> PatientTimeline:
    reader = csv.reader(io.StringIO(text))
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError(f"{source}: empty file") from None
    header = [h.strip() for h in header]
    if header != _CSV_HEADER:
        raise SchemaError(f"{source}: header must be exactly "
                          f"{','.join(_CSV_HEADER)!r}, got {','.join(header)!r}")
    events = []
    for row_no, row in enumerate(reader, start=2):
        if not row or (len(row) == 1 and not row[0].strip()):
            continue
        if len(row) != 3:
            raise SchemaError(f"{source} row {row_no}: expected 3 columns, got {len(row)}")
        events.append(_event_from_row(row_no, row[0], row[1], row[2], source))
    if not events:
        raise SchemaError(f"{source}: no events")
    return PatientTimeline.from_events(id, events)


def parse_timeline_json(text: str, source: str = "<json>") -> PatientTimeline:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{source}: invalid JSON ({exc})") from None
    if not isinstance(obj, dict):
        raise SchemaError(f"{source}: top level must be an object")
    extra = set(obj) - {"id", "events"}
    if extra:
        raise SchemaError(f"{source}: unknown top-level keys {sorted(extra)}")
    if "id" not in obj or "events" not in obj:
        raise SchemaError(f"{source}: required keys 'id' and 'events'")
    if not isinstance(obj["events"], list) or not obj["events"]:
        raise SchemaError(f"{source}: 'events' must be a non-empty list")
    events = []
    for row_no, item in enumerate(obj["events"], start=1):
        if not isinstance(item, dict):
            raise SchemaError(f"{source} event {row_no}: must be an object")
        extra = set(item) - {"t_min", "kind", "value"}
        if extra:
            raise SchemaError(f"{source} event {row_no}: unknown keys {sorted(extra)}")
        missing = {"t_min", "kind", "value"} - set(item)
        if missing:
            raise SchemaError(f"{source} event {row_no}: missing keys {sorted(missing)}")
        events.append(_event_from_row(row_no, item["t_min"], item["kind"],
                                      item["value"], source))
    return PatientTimeline.from_events(str(obj["id"]), events)


def parse_timeline(path: str | Path) -> PatientTimeline:
    """Parse a timeline file; format chosen by extension (.csv / .json)."""
    path = Path(path)
    text = path.read_text(encoding="utf-8")
    if path.suffix.lower() == ".json":
        return parse_timeline_json(text, source=str(path))
    if path.suffix.lower() == ".csv":
        return parse_timeline_csv(text, id=path.stem, source=str(path))
    raise SchemaError(f"{path}: unsupported extension {path.suffix!r} (use .csv or .json)")


def serialize_timeline(tl: PatientTimeline, path: str | Path):
    """Write a timeline in the format implied by the path extension."""
    path = Path(path)
    if path.suffix.lower() == ".csv":
        with open(path, "w", encoding="utf-8", newline="") as f:
            w = csv.writer(f)
            w.writerow(_CSV_HEADER)
            for e in tl.events:
                w.writerow([repr(e.t_min), e.kind, repr(e.value)])
    elif path.suffix.lower() == ".json":
        obj = {"id": tl.id,
               "events": [{"t_min": e.t_min, "kind": e.kind, "value": e.value}
                          for e in tl.events]}
        path.write_text(json.dumps(obj, indent=1) + "\n", encoding="utf-8")
    else:
        raise SchemaError(f"{path}: unsupported extension {path.suffix!r}")


def apply_inclusion(tl: PatientTimeline, inc: DataInclusion) -> PatientTimeline:
    """Drop excluded IV-glucose channels; surviving events keep their order."""
    dropped = set()
    if not inc.include_iv_drip:
        dropped.add("iv_glucose_drip")
    if not inc.include_iv_bolus:
        dropped.add("iv_glucose_bolus")
    if not dropped:
        return tl
    return PatientTimeline(tl.id, tuple(e for e in tl.events if e.kind not in dropped))


class Measurement(NamedTuple):
    t: float
    y: float


def to_exogenous(tl: PatientTimeline) -> tuple[ExogenousInputs, list[Measurement]]:
    """Split a timeline into model inputs and the assimilation sequence.

    Nutrition kinds become carbohydrate events; insulin_drip_rate rows become
    piecewise-constant drip segments (each rate holds until the next rate row,
    a trailing nonzero rate extends indefinitely); insulin boluses map through
    directly.  Duplicate measurement timestamps keep the last row (a warning
    is logged), so the returned sequence is strictly time-increasing.
    """
    nutrition = []
    boluses = []
    drip_rows = []
    meas: list[Measurement] = []
    for e in tl.events:
        if e.kind == "glucose_meas":
            if meas and meas[-1].t == e.t_min:
                log.warning("timeline %s: duplicate glucose measurement at t=%g; "
                            "keeping the later row", tl.id, e.t_min)
                meas[-1] = Measurement(e.t_min, e.value)
            else:
                meas.append(Measurement(e.t_min, e.value))
        elif e.kind in _NUTRITION_KINDS:
            nutrition.append(NutritionEvent(e.t_min, e.value))
        elif e.kind == "insulin_bolus":
            boluses.append(InsulinDelivery("bolus", e.t_min, amount_mU=e.value))
        elif e.kind == "insulin_drip_rate":
            drip_rows.append(e)

    drips = []
    for row, nxt in zip(drip_rows, drip_rows[1:] + [None]):
        end = nxt.t_min if nxt is not None else math.inf
        if row.value > 0 and end > row.t_min:
            drips.append(InsulinDelivery("drip", row.t_min, end, rate_mU_min=row.value))

    insulin = sorted(drips + boluses, key=lambda d: d.start)
    u = ExogenousInputs(nutrition=tuple(nutrition), insulin=tuple(insulin))
    return u, meas


def validate_file(path: str | Path) -> list[str]:
    """Schema problems for one file; empty list means the file is valid."""
    try:
        parse_timeline(path)
    except FileNotFoundError:
        return [f"{path}: file not found"]
    except SchemaError as exc:
        return [str(exc)]
    return []
