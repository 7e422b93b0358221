"""Data model, CSV ingestion and landmark filtering.

Survival file: ``id,time,event,<covariates...>`` (covariates auto-detected as
the remaining numeric columns). Longitudinal file: ``id,marker,time,value``.
Marker natures (continuous | binary) come from the run configuration.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass
class SurvivalRecord:
    subject_id: str
    t_obs: float
    event: int
    covariates: dict[str, float] = field(default_factory=dict)


@dataclass
class LongitudinalTable:
    """Marker measurements grouped by (subject, marker) and sorted by time."""

    natures: dict[str, str]  # marker -> "continuous" | "binary"
    series: dict[tuple[str, str], tuple[np.ndarray, np.ndarray]] = field(
        default_factory=dict
    )

    @property
    def markers(self) -> list[str]:
        return sorted(self.natures)

    def get(self, subject_id: str, marker_id: str):
        return self.series.get(
            (subject_id, marker_id), (np.empty(0), np.empty(0))
        )


@dataclass
class CohortSubject:
    subject_id: str
    t_obs: float  # observed time on the original clock
    event_obs: int  # raw observed event indicator
    event: int  # horizon-capped indicator
    covariates: dict[str, float]
    history: dict[str, tuple[np.ndarray, np.ndarray]]  # marker -> (times, values)


@dataclass
class LandmarkCohort:
    t_lm: float
    t_hor: float
    subjects: list[CohortSubject]
    marker_natures: dict[str, str]
    covariate_names: list[str]
    n_dropped: int = 0

    @property
    def n(self) -> int:
        return len(self.subjects)

    def times_from_landmark(self) -> np.ndarray:
        """Observed times on the landmark-rescaled clock (time 0 = landmark)."""
        return np.asarray([s.t_obs - self.t_lm for s in self.subjects])

    def events(self) -> np.ndarray:
        """Horizon-capped event indicators."""
        return np.asarray([s.event for s in self.subjects], dtype=int)

    def covariate_matrix(self) -> np.ndarray:
        return np.asarray(
            [[s.covariates[c] for c in self.covariate_names] for s in self.subjects]
        )

    def subject_ids(self) -> list[str]:
        return [s.subject_id for s in self.subjects]

    def subset(self, indices) -> "LandmarkCohort":
        return LandmarkCohort(
            t_lm=self.t_lm,
            t_hor=self.t_hor,
            subjects=[self.subjects[i] for i in indices],
            marker_natures=dict(self.marker_natures),
            covariate_names=list(self.covariate_names),
        )


def _parse_float(text, what, row_num):
    try:
        return float(text)
    except (TypeError, ValueError):
        raise DataError(f"row {row_num}: non-numeric {what} {text!r}") from None


def load_survival(path) -> list[SurvivalRecord]:
    """Read one survival record per subject from a CSV file."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        for col in ("id", "time", "event"):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {col!r}")
        extra = [c for c in reader.fieldnames if c not in ("id", "time", "event")]
        if len(set(reader.fieldnames)) != len(reader.fieldnames):
            raise DataError(f"{path}: duplicate column names in header")
        rows = list(reader)

    # covariates are the remaining columns whose values all parse as numbers
    cov_cols = []
    for c in extra:
        try:
            for r in rows:
                float(r[c])
        except (TypeError, ValueError):
            continue
        cov_cols.append(c)

    records = []
    seen = set()
    for i, r in enumerate(rows, start=2):  # header is line 1
        sid = r["id"]
        if sid in seen:
            raise DataError(f"row {i}: duplicate subject id {sid!r}")
        seen.add(sid)
        t = _parse_float(r["time"], "time", i)
        if t <= 0:
            raise DataError(f"row {i}: time must be > 0, got {t}")
        ev = _parse_float(r["event"], "event", i)
        if ev not in (0.0, 1.0):
            raise DataError(f"row {i}: event must be 0 or 1, got {r['event']!r}")
        covs = {c: float(r[c]) for c in cov_cols}
        records.append(SurvivalRecord(sid, t, int(ev), covs))
    return records


def load_longitudinal(path, natures: dict[str, str]) -> LongitudinalTable:
    """Read long-format marker measurements, grouped and time-sorted."""
    for marker, nature in natures.items():
        if nature not in ("continuous", "binary"):
            raise DataError(
                f"marker {marker!r}: nature must be continuous or binary"
            )
    raw: dict[tuple[str, str], list[tuple[float, float]]] = {}
    seen = set()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise DataError(f"{path}: empty file, header row required")
        for col in ("id", "marker", "time", "value"):
            if col not in reader.fieldnames:
                raise DataError(f"{path}: missing required column {col!r}")
        for i, r in enumerate(reader, start=2):
            sid, marker = r["id"], r["marker"]
            if marker not in natures:
                raise DataError(
                    f"row {i}: marker {marker!r} not declared in configuration"
                )
            t = _parse_float(r["time"], "time", i)
            v = _parse_float(r["value"], "value", i)
            if natures[marker] == "binary" and v not in (0.0, 1.0):
                raise DataError(
                    f"row {i}: binary marker {marker!r} has value {v}"
                )
            key = (sid, marker, t)
            if key in seen:
                raise DataError(
                    f"row {i}: duplicate measurement for subject {sid!r}, "
                    f"marker {marker!r} at time {t}"
                )
            seen.add(key)
            raw.setdefault((sid, marker), []).append((t, v))

    series = {}
    for key, pairs in raw.items():
        pairs.sort()
        ts = np.asarray([p[0] for p in pairs])
        vs = np.asarray([p[1] for p in pairs])
        series[key] = (ts, vs)
    return LongitudinalTable(natures=dict(natures), series=series)


def landmark_filter(
    survival: list[SurvivalRecord],
    longitudinal: LongitudinalTable,
    t_lm: float,
    t_hor: float,
    require_all_markers: bool = True,
) -> LandmarkCohort:
    """Build the at-risk cohort at the landmark time.

    Drops subjects with observed time <= t_lm (strict at-risk condition),
    truncates marker histories to times <= t_lm and recomputes the event
    indicator capped at the horizon. With require_all_markers, subjects
    lacking any measurement for some declared marker are also dropped.
    """
    if t_lm <= 0 or t_hor <= 0:
        raise ValueError("t_lm and t_hor must be positive")
    markers = longitudinal.markers
    cov_names = sorted({c for r in survival for c in r.covariates})
    subjects = []
    n_dropped = 0
    for rec in survival:
        if rec.t_obs <= t_lm:
            n_dropped += 1
            continue
        if set(rec.covariates) != set(cov_names):
            raise DataError(
                f"subject {rec.subject_id!r}: inconsistent covariate set"
            )
        history = {}
        complete = True
        for marker in markers:
            ts, vs = longitudinal.get(rec.subject_id, marker)
            keep = ts <= t_lm
            ts, vs = ts[keep], vs[keep]
            if ts.size == 0:
                complete = False
            history[marker] = (ts, vs)
        if require_all_markers and not complete:
            n_dropped += 1
            continue
        # strict <: an event exactly at the horizon does not count as a case
        capped = int(rec.event == 1 and rec.t_obs - t_lm < t_hor)
        subjects.append(
            CohortSubject(
                subject_id=rec.subject_id,
                t_obs=rec.t_obs,
                event_obs=rec.event,
                event=capped,
                covariates=dict(rec.covariates),
                history=history,
            )
        )
    if not subjects:
        raise DataError("landmark filtering left an empty cohort")
    return LandmarkCohort(
        t_lm=t_lm,
        t_hor=t_hor,
        subjects=subjects,
        marker_natures=dict(longitudinal.natures),
        covariate_names=cov_names,
        n_dropped=n_dropped,
    )
