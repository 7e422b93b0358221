"""Deviance-residuals sparse partial least squares survival learner.

Martingale residuals against the Nelson-Aalen cumulative hazard are
normalized into deviance residuals, sparse PLS1 components are extracted
from the standardized design against those residuals (soft-thresholded
direction vectors with score-space deflation), and a Cox model on the
component scores provides the survival prediction.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DataError, FitError
from .evalmetrics import nelson_aalen
from .survreg import CoxFit, _CoxData, _stratified_folds, fit_cox, predict_cox_probability


def deviance_residuals(times, events) -> np.ndarray:
    """Normalized martingale residuals against the Nelson-Aalen hazard.

    M_i = d_i - CHF(t_i); r_i = sign(M_i) sqrt(-2 [M_i + d_i log(d_i - M_i)])
    with 0 log 0 = 0 for censored subjects.
    """
    times = np.asarray(times, dtype=float)
    events = np.asarray(events, dtype=int)
    if events.sum() < 1:
        raise DataError("need at least one event for deviance residuals")
    chf = nelson_aalen(times, events)(times)
    m = events - chf
    inner = events - m  # equals the cumulative hazard, > 0 whenever d_i = 1
    with np.errstate(divide="ignore", invalid="ignore"):
        log_term = np.where(events == 1, np.log(np.where(inner > 0, inner, 1.0)), 0.0)
    bad = (events == 1) & (inner <= 0)
    if np.any(bad):
        raise AssertionError("event subject with non-positive cumulative hazard")
    arg = -2.0 * (m + events * log_term)
    return np.sign(m) * np.sqrt(np.maximum(arg, 0.0))


def fit_spls(X, y, n_components, eta) -> tuple[np.ndarray, np.ndarray]:
    """Sparse PLS1 directions by soft-thresholding, with X deflation.

    X is assumed standardized. Returns (W, R): per-component weight vectors
    in the deflated spaces, and the rotation mapping raw standardized rows
    to component scores (scores = X @ R).
    """
    if not 0.0 <= eta < 1.0:
        raise ValueError("sparsity eta must lie in [0, 1)")
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n, p = X.shape
    if n_components < 1:
        raise ValueError("need at least one component")
    Xc = X.copy()
    W = np.zeros((p, 0))
    P = np.zeros((p, 0))
    for c in range(n_components):
        w = Xc.T @ y
        thr = eta * np.max(np.abs(w))
        w = np.sign(w) * np.maximum(np.abs(w) - thr, 0.0)
        norm = np.linalg.norm(w)
        if norm <= 1e-12:
            warnings.warn(
                f"component {c + 1}: direction vanished after thresholding; "
                f"keeping {c} component(s)",
                stacklevel=2,
            )
            break
        w = w / norm
        t = Xc @ w
        tt = float(t @ t)
        if tt <= 1e-12:
            warnings.warn(
                f"component {c + 1}: degenerate score; keeping {c} component(s)",
                stacklevel=2,
            )
            break
        load = Xc.T @ t / tt
        Xc = Xc - np.outer(t, load)
        W = np.column_stack([W, w])
        P = np.column_stack([P, load])
    if W.shape[1] == 0:
        raise FitError("no usable sparse PLS component (eta too aggressive)")
    # rotation for raw standardized rows: T = X W (P' W)^-1
    R = W @ np.linalg.inv(P.T @ W)
    return W, R


@dataclass
class SplsDrFit:
    n_components: int
    eta: float
    weights: np.ndarray  # p x C, deflated-space directions
    rotation: np.ndarray  # p x C, raw standardized rows -> scores
    inner_cox: CoxFit
    columns: list[str]
    kept: np.ndarray  # indices of retained (non-constant) columns
    means: np.ndarray
    sds: np.ndarray

    def scores(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        Xs = (rows[:, self.kept] - self.means) / self.sds
        return Xs @ self.rotation

    def to_dict(self) -> dict:
        return {
            "format": "landcast-spls",
            "version": 1,
            "n_components": self.n_components,
            "eta": self.eta,
            "weights": self.weights.tolist(),
            "rotation": self.rotation.tolist(),
            "inner_cox": self.inner_cox.to_dict(),
            "columns": self.columns,
            "kept": self.kept.tolist(),
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
        }

    @staticmethod
    def from_dict(d: dict) -> "SplsDrFit":
        if d.get("format") != "landcast-spls":
            raise ValueError("not an sPLS fit document")
        return SplsDrFit(
            n_components=d["n_components"],
            eta=d["eta"],
            weights=np.asarray(d["weights"]),
            rotation=np.asarray(d["rotation"]),
            inner_cox=CoxFit.from_dict(d["inner_cox"]),
            columns=list(d["columns"]),
            kept=np.asarray(d["kept"], dtype=int),
            means=np.asarray(d["means"]),
            sds=np.asarray(d["sds"]),
        )


_ETA_BY_MODE = {"none": (0.0,), "max": (0.99,), "grid": (0.0, 0.2, 0.4, 0.6, 0.8)}


def _fit_at(X, times, events, C, eta, columns):
    y = deviance_residuals(times, events)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        W, R = fit_spls(X, y, C, eta)
    scores = X @ R
    names = [f"comp{c + 1}" for c in range(scores.shape[1])]
    inner = fit_cox(scores, times, events, names)
    return W, R, inner


def fit_spls_dr(
    X,
    times,
    events,
    eta_mode: str = "none",
    max_components: int = 6,
    n_folds: int = 10,
    columns=None,
    seed: int = 0,
) -> SplsDrFit:
    """Tune component count (and optionally sparsity) by cross-validated
    partial-likelihood deviance of the inner Cox model, then refit."""
    if eta_mode not in _ETA_BY_MODE:
        raise ValueError(f"eta_mode must be one of {sorted(_ETA_BY_MODE)}")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    times = np.asarray(times, dtype=float)
    events_arr = np.asarray(events, dtype=int)
    n, p = X.shape
    if n_folds > n:
        raise ValueError("more folds than subjects")
    names = list(columns) if columns is not None else [f"x{j}" for j in range(p)]

    sds_raw = X.std(axis=0)
    kept = np.where(sds_raw > 1e-12)[0]  # zero-variance columns unusable here
    if kept.size == 0:
        raise FitError("all columns have zero variance")
    means = X[:, kept].mean(axis=0)
    sds = X[:, kept].std(axis=0)
    Xs = (X[:, kept] - means) / sds

    etas = _ETA_BY_MODE[eta_mode]
    max_c = min(max_components, np.linalg.matrix_rank(Xs))
    rng = np.random.default_rng(seed)
    folds = _stratified_folds(events_arr, n_folds, rng)
    candidates = []  # (mean fold deviance, fold SE, C, eta)
    for eta in etas:
        dev = np.zeros((n_folds, max_c))
        valid = np.ones(max_c, dtype=bool)
        for k in range(n_folds):
            train, test = folds != k, folds == k
            mu = Xs[train].mean(axis=0)
            sd = np.where(Xs[train].std(axis=0) > 1e-12, Xs[train].std(axis=0), 1.0)
            Xtr = (Xs[train] - mu) / sd
            Xte = (Xs[test] - mu) / sd
            for C in range(1, max_c + 1):
                try:
                    _, R, inner = _fit_at(
                        Xtr, times[train], events_arr[train], C, eta, names
                    )
                    data_test = _CoxData(
                        (Xte @ R) - inner.means, times[test], events_arr[test]
                    )
                    dev[k, C - 1] = -2.0 * data_test.pll(data_test.X @ inner.coef)
                except (FitError, np.linalg.LinAlgError):
                    valid[C - 1] = False
        for C in range(1, max_c + 1):
            if valid[C - 1]:
                col = dev[:, C - 1]
                se = col.std(ddof=1) / np.sqrt(n_folds) if n_folds > 1 else 0.0
                candidates.append((float(col.mean()), float(se), C, eta))
    if not candidates:
        raise FitError("no (components, sparsity) combination could be fit")
    # one-standard-error rule: among combinations within one fold-SE of the
    # minimum CV deviance, prefer the fewest components (then the lowest
    # deviance among those)
    dev_min, se_min, _, _ = min(candidates, key=lambda c: c[0])
    near = [c for c in candidates if c[0] <= dev_min + se_min + 1e-12]
    _, _, C_best, eta_best = min(near, key=lambda c: (c[2], c[0]))
    W, R, inner = _fit_at(Xs, times, events_arr, C_best, eta_best, names)
    return SplsDrFit(
        n_components=R.shape[1],
        eta=eta_best,
        weights=W,
        rotation=R,
        inner_cox=inner,
        columns=names,
        kept=kept,
        means=means,
        sds=sds,
    )


def predict_spls_probability(fit: SplsDrFit, rows, t_hor) -> np.ndarray:
    """Event probability by the horizon from the inner Cox on component scores."""
    return predict_cox_probability(fit.inner_cox, fit.scores(rows), t_hor)
