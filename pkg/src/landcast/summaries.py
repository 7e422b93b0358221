"""Trajectory summaries and assembly of the learner design matrix.

For each marker and subject: predicted random effects, error-free level and
slope at the landmark, and cumulative level over a trailing window. Logit-
link markers are summarized on the linear-predictor (log-odds) scale, which
keeps slope and cumulative level well defined. Baseline covariates are
appended unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dataset import LandmarkCohort
from .errors import DataError
from .longitudinal import MixedModelFit, predict_random_effects
from .splines import basis_row

_GL_NODES, _GL_WEIGHTS = np.polynomial.legendre.leggauss(64)


def level_at(fit: MixedModelFit, b: np.ndarray, u: float) -> float:
    """Error-free marker level at time u, on the linear-predictor scale."""
    s = u - fit.origin
    x = basis_row(s, fit.basis_fixed)
    z = basis_row(s, fit.basis_random)
    return float(x @ fit.beta + z @ b)


def slope_at(fit: MixedModelFit, b: np.ndarray, u: float) -> float:
    """Analytic time derivative of the error-free level at u."""
    s = u - fit.origin
    dx = basis_row(s, fit.basis_fixed, deriv=1)
    dz = basis_row(s, fit.basis_random, deriv=1)
    return float(dx @ fit.beta + dz @ b)


def cumulative_level(
    fit: MixedModelFit, b: np.ndarray, t_lm: float, window: float
) -> float:
    """Integral of the error-free level over [t_lm - window, t_lm].

    64-node Gauss-Legendre quadrature, exact for the polynomial-in-time
    bases used here.
    """
    if window <= 0:
        raise ValueError("window must be positive")
    lo, hi = t_lm - window, t_lm
    u = 0.5 * (hi - lo) * _GL_NODES + 0.5 * (hi + lo)
    s = u - fit.origin
    from .splines import basis_matrix

    vals = basis_matrix(s, fit.basis_fixed) @ fit.beta
    vals = vals + basis_matrix(s, fit.basis_random) @ b
    return float(0.5 * (hi - lo) * np.sum(_GL_WEIGHTS * vals))


@dataclass
class DesignMatrix:
    X: np.ndarray  # subjects x columns
    columns: list[str]
    subject_ids: list[str]
    provenance: dict[str, dict]  # column -> {source, marker, kind}
    binary_columns: list[str]

    @property
    def shape(self):
        return self.X.shape

    def row(self, i) -> np.ndarray:
        return self.X[i]

    def column_index(self, name: str) -> int:
        return self.columns.index(name)

    def subset_rows(self, indices) -> "DesignMatrix":
        idx = np.asarray(indices)
        return DesignMatrix(
            X=self.X[idx],
            columns=list(self.columns),
            subject_ids=[self.subject_ids[i] for i in idx],
            provenance=dict(self.provenance),
            binary_columns=list(self.binary_columns),
        )


def summary_vector(
    fit: MixedModelFit, times, values, t_lm: float, window: float
) -> tuple[np.ndarray, list[str]]:
    """Default summary set for one marker: (b-hat, level, slope, cumulative)."""
    b = predict_random_effects(fit, times, values)
    entries = list(b) + [
        level_at(fit, b, t_lm),
        slope_at(fit, b, t_lm),
        cumulative_level(fit, b, t_lm, window),
    ]
    names = [f"re{j}" for j in range(len(b))] + ["level", "slope", "cum"]
    return np.asarray(entries), names


def assemble_design(
    cohort: LandmarkCohort,
    fits: dict[str, MixedModelFit],
    windows: dict[str, float] | None = None,
    extra_summaries: dict | None = None,
) -> DesignMatrix:
    """Build the subject-by-feature matrix (marker summaries, then covariates).

    windows maps marker -> integration window for the cumulative level;
    markers default to the span of the training history (at least 1).
    extra_summaries maps a name to a callable (fit, b, times, values, t_lm)
    -> float, appended per marker after the default set.
    """
    markers = sorted(fits)
    missing = [m for m in cohort.marker_natures if m not in fits]
    if missing:
        raise DataError(f"no mixed-model fit for markers: {missing}")
    windows = windows or {}
    extra_summaries = extra_summaries or {}

    default_windows = {}
    for m in markers:
        if m in windows:
            default_windows[m] = windows[m]
        else:
            spans = [
                cohort.t_lm - s.history[m][0].min()
                for s in cohort.subjects
                if s.history.get(m, (np.empty(0),))[0].size
            ]
            default_windows[m] = max(float(np.median(spans)) if spans else 1.0, 1.0)

    rows = []
    columns: list[str] = []
    provenance: dict[str, dict] = {}
    first = True
    for subj in cohort.subjects:
        entries = []
        for m in markers:
            fit = fits[m]
            ts, vs = subj.history.get(m, (np.empty(0), np.empty(0)))
            b = predict_random_effects(fit, ts, vs)
            vec = np.asarray(
                list(b)
                + [
                    level_at(fit, b, cohort.t_lm),
                    slope_at(fit, b, cohort.t_lm),
                    cumulative_level(fit, b, cohort.t_lm, default_windows[m]),
                ]
            )
            names = [f"re{j}" for j in range(len(b))] + ["level", "slope", "cum"]
            for name, fn in extra_summaries.items():
                vec = np.append(vec, fn(fit, b, ts, vs, cohort.t_lm))
                names = names + [name]
            entries.append(vec)
            if first:
                for name in names:
                    col = f"{m}.{name}"
                    if col in provenance:
                        raise DataError(f"duplicate design column {col!r}")
                    columns.append(col)
                    provenance[col] = {
                        "source": "summary",
                        "marker": m,
                        "kind": name,
                    }
        x_cov = np.asarray([subj.covariates[c] for c in cohort.covariate_names])
        entries.append(x_cov)
        if first:
            for c in cohort.covariate_names:
                if c in provenance:
                    raise DataError(f"duplicate design column {c!r}")
                columns.append(c)
                provenance[c] = {"source": "covariate", "marker": None, "kind": c}
        rows.append(np.concatenate(entries))
        first = False

    X = np.vstack(rows)
    binary = [
        c
        for c in cohort.covariate_names
        if np.all(np.isin(X[:, columns.index(c)], [0.0, 1.0]))
    ]
    return DesignMatrix(
        X=X,
        columns=columns,
        subject_ids=cohort.subject_ids(),
        provenance=provenance,
        binary_columns=binary,
    )
