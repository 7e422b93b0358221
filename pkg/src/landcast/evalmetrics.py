"""Censoring-aware predictive accuracy metrics.

Nelson-Aalen and censoring Kaplan-Meier estimators, IPCW Brier score, IPCW
time-dependent AUC, and MSEP against simulation truth. All metrics operate
on the landmark-rescaled clock (time 0 = landmark).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError


@dataclass(frozen=True)
class StepFunction:
    """Right-continuous step function with jumps at increasing times."""

    times: np.ndarray  # strictly increasing jump times
    values: np.ndarray  # value after each jump
    value_before: float = 0.0

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if t.shape != v.shape:
            raise ValueError("times and values must have the same shape")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ValueError("jump times must be strictly increasing")
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", v)

    def __call__(self, t):
        """Evaluate right-continuously: value after the last jump <= t."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="right")
        padded = np.concatenate(([self.value_before], self.values))
        return padded[idx]

    def left_limit(self, t):
        """Evaluate just before t: value after the last jump strictly < t."""
        idx = np.searchsorted(self.times, np.asarray(t, dtype=float), side="left")
        padded = np.concatenate(([self.value_before], self.values))
        return padded[idx]

    def to_dict(self) -> dict:
        return {
            "times": self.times.tolist(),
            "values": self.values.tolist(),
            "value_before": float(self.value_before),
        }

    @staticmethod
    def from_dict(d: dict) -> "StepFunction":
        return StepFunction(
            np.asarray(d["times"], dtype=float),
            np.asarray(d["values"], dtype=float),
            float(d["value_before"]),
        )


@dataclass
class MetricReport:
    brier: float
    auc: float | None
    msep: float | None = None
    n_at_risk: int = 0
    n_cases: int = 0
    n_controls: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        d = {
            "brier": self.brier,
            "auc": self.auc,
            "msep": self.msep,
            "n_at_risk": self.n_at_risk,
            "n_cases": self.n_cases,
            "n_controls": self.n_controls,
        }
        d.update(self.extra)
        return d


def _check_surv(times, events):
    times = np.asarray(times, dtype=float)
    events = np.asarray(events)
    if times.shape != events.shape:
        raise ValueError("times and events must align")
    if not np.all(np.isin(events, [0, 1])):
        raise DataError("event indicators must be 0 or 1")
    if np.any(times < 0):
        raise DataError("observed times must be nonnegative")
    return times, events.astype(int)


def nelson_aalen(times, events) -> StepFunction:
    """Nelson-Aalen cumulative hazard: sum over event times of d_j / n_j."""
    times, events = _check_surv(times, events)
    order = np.argsort(times, kind="stable")
    ts, ev = times[order], events[order]
    uniq, start = np.unique(ts, return_index=True)
    n_at_risk = len(ts) - start
    d = np.add.reduceat(ev, start) if len(ts) else np.array([])
    keep = d > 0
    jumps = d[keep] / n_at_risk[keep]
    return StepFunction(uniq[keep], np.cumsum(jumps), 0.0)


def km_censoring(times, events) -> StepFunction:
    """Kaplan-Meier estimate of the censoring survival function G.

    The indicator is flipped: censorings are the "events". Risk sets use
    all subjects with observed time >= t.
    """
    times, events = _check_surv(times, events)
    cens = 1 - events
    order = np.argsort(times, kind="stable")
    ts, c = times[order], cens[order]
    uniq, start = np.unique(ts, return_index=True)
    n_at_risk = len(ts) - start
    d = np.add.reduceat(c, start) if len(ts) else np.array([])
    keep = d > 0
    factors = 1.0 - d[keep] / n_at_risk[keep]
    return StepFunction(uniq[keep], np.cumprod(factors), 1.0)


def ipcw_weights(times, events, t_hor, G: StepFunction | None = None):
    """IPCW weights for the event-by-horizon status.

    w_i = e_i * 1(t_i <= h) / G(t_i-)  +  1(t_i > h) / G(h-).
    Subjects censored at or before the horizon get weight 0. G is evaluated
    with the left-limit convention throughout.
    """
    times, events = _check_surv(times, events)
    if G is None:
        G = km_censoring(times, events)
    w = np.zeros_like(times, dtype=float)
    is_case = (events == 1) & (times <= t_hor)
    is_ctrl = times > t_hor
    g_case = G.left_limit(times[is_case])
    g_hor = float(G.left_limit(t_hor))
    if np.any(g_case <= 0) or (np.any(is_ctrl) and g_hor <= 0):
        raise DataError(
            "censoring survival estimate reaches 0 before the horizon; "
            "use a shorter horizon or more follow-up"
        )
    w[is_case] = 1.0 / g_case
    if np.any(is_ctrl):
        w[is_ctrl] = 1.0 / g_hor
    return w, is_case, is_ctrl


def ipcw_brier(predictions, times, events, t_hor) -> float:
    """IPCW Brier score of event-by-horizon predictions.

    (1/n) sum_i w_i (D_i - p_i)^2 with D_i the event-by-horizon status and
    marginal Kaplan-Meier censoring weights.
    """
    p = np.asarray(predictions, dtype=float)
    if np.any((p < 0) | (p > 1)):
        raise DataError("predictions must lie in [0, 1]")
    w, is_case, _ = ipcw_weights(times, events, t_hor)
    d = is_case.astype(float)
    return float(np.sum(w * (d - p) ** 2) / len(p))


def ipcw_auc(predictions, times, events, t_hor) -> float | None:
    """IPCW time-dependent AUC (weighted Mann-Whitney over case/control pairs).

    Cases: event by the horizon. Controls: still at risk beyond the horizon.
    Prediction ties count 1/2. Returns None when either group is empty.
    """
    p = np.asarray(predictions, dtype=float)
    w, is_case, is_ctrl = ipcw_weights(times, events, t_hor)
    if not np.any(is_case) or not np.any(is_ctrl):
        return None
    pc, wc = p[is_case], w[is_case]
    pk, wk = p[is_ctrl], w[is_ctrl]
    diff = pc[:, None] - pk[None, :]
    wins = np.where(diff > 0, 1.0, np.where(diff == 0, 0.5, 0.0))
    pair_w = wc[:, None] * wk[None, :]
    return float(np.sum(pair_w * wins) / np.sum(pair_w))


def msep(predictions, true_probabilities) -> float:
    """Mean squared error of predicted vs true (generator-known) probabilities."""
    p = np.asarray(predictions, dtype=float)
    p0 = np.asarray(true_probabilities, dtype=float)
    if p.shape != p0.shape:
        raise ValueError("prediction vectors must align")
    return float(np.mean((p - p0) ** 2))


def metric_report(predictions, times, events, t_hor, true_probabilities=None):
    """Bundle Brier, AUC and optional MSEP into a MetricReport."""
    w, is_case, is_ctrl = ipcw_weights(times, events, t_hor)
    return MetricReport(
        brier=ipcw_brier(predictions, times, events, t_hor),
        auc=ipcw_auc(predictions, times, events, t_hor),
        msep=(
            msep(predictions, true_probabilities)
            if true_probabilities is not None
            else None
        ),
        n_at_risk=len(np.asarray(times)),
        n_cases=int(np.sum(is_case)),
        n_controls=int(np.sum(is_ctrl)),
    )
