"""Registry of survival learners over the summary design matrix.

Every method exposes the same contract: fit on (X, times, events) with the
design column names, predict the probability of an event by the horizon for
new rows of the same layout, and round-trip through a JSON-serializable
dictionary. Unpenalized Cox variants first drop columns that are linearly
dependent on earlier ones (the marker summaries are affine functions of the
predicted random effects, so each marker block is rank deficient by
construction); penalized, latent-component and forest methods take the full
design.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, FitError
from .rsf import (
    Forest,
    fit_rsf,
    predict_rsf_probability,
    select_vars_rsf,
    tune_rsf,
)
from .spls import SplsDrFit, fit_spls_dr, predict_spls_probability
from .survreg import (
    CoxFit,
    backward_select_cox,
    fit_cox,
    fit_coxnet,
    predict_cox_probability,
)

METHOD_NAMES = (
    "cox-all",
    "cox-select",
    "coxnet-lasso",
    "coxnet-ridge",
    "coxnet-elastic",
    "spls-nosparse",
    "spls-maxsparse",
    "spls-optimize",
    "rsf-default",
    "rsf-optimize",
    "rsf-select",
)

_COXNET_ALPHA = {"coxnet-lasso": 1.0, "coxnet-ridge": 0.0, "coxnet-elastic": 0.5}
_SPLS_MODE = {"spls-nosparse": "none", "spls-maxsparse": "max", "spls-optimize": "grid"}


def independent_columns(X, tol=1e-8) -> list[int]:
    """Indices of a maximal linearly independent column subset.

    Greedy Gram-Schmidt in column order, so earlier columns win ties; a
    column is kept when its residual against the span of the kept set
    exceeds ``tol`` relative to its own norm. Constant columns are dropped
    after centering.
    """
    X = np.asarray(X, dtype=float)
    Xc = X - X.mean(axis=0)
    kept: list[int] = []
    Q = np.empty((X.shape[0], 0))
    for j in range(X.shape[1]):
        x = Xc[:, j]
        nx = np.linalg.norm(x)
        if nx <= 1e-300:
            continue
        r = x - Q @ (Q.T @ x)
        # re-orthogonalize once for numerical safety
        r = r - Q @ (Q.T @ r)
        if np.linalg.norm(r) > tol * nx:
            kept.append(j)
            Q = np.column_stack([Q, r / np.linalg.norm(r)])
    return kept


@dataclass
class TrainedMethod:
    name: str
    columns: list[str]  # full design layout expected at prediction time
    use_cols: list[int]  # columns actually passed to the underlying model
    model: object  # CoxFit | SplsDrFit | Forest
    detail: dict = field(default_factory=dict)

    def predict(self, rows, t_hor) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        if rows.shape[1] != len(self.columns):
            raise ValueError(
                f"{self.name}: row has {rows.shape[1]} columns, "
                f"expected {len(self.columns)}"
            )
        sub = rows[:, self.use_cols]
        if isinstance(self.model, CoxFit):
            return predict_cox_probability(self.model, sub, t_hor)
        if isinstance(self.model, SplsDrFit):
            return predict_spls_probability(self.model, sub, t_hor)
        if isinstance(self.model, Forest):
            return predict_rsf_probability(self.model, sub, t_hor)
        raise TypeError(f"unknown model type {type(self.model).__name__}")

    def to_dict(self) -> dict:
        if isinstance(self.model, CoxFit):
            kind = "cox"
        elif isinstance(self.model, SplsDrFit):
            kind = "spls"
        else:
            kind = "rsf"
        return {
            "format": "landcast-method",
            "version": 1,
            "name": self.name,
            "kind": kind,
            "columns": self.columns,
            "use_cols": list(self.use_cols),
            "detail": self.detail,
            "model": self.model.to_dict(),
        }

    @staticmethod
    def from_dict(d: dict) -> "TrainedMethod":
        if d.get("format") != "landcast-method":
            raise ValueError("not a trained-method document")
        loader = {
            "cox": CoxFit.from_dict,
            "spls": SplsDrFit.from_dict,
            "rsf": Forest.from_dict,
        }[d["kind"]]
        return TrainedMethod(
            name=d["name"],
            columns=list(d["columns"]),
            use_cols=list(d["use_cols"]),
            model=loader(d["model"]),
            detail=dict(d.get("detail", {})),
        )


def fit_method(
    name: str, X, times, events, columns, seed: int = 0, config: dict | None = None
) -> TrainedMethod:
    """Train one registry method on the summary design matrix."""
    if name not in METHOD_NAMES:
        raise ConfigError(
            f"unknown method {name!r}; expected one of {sorted(METHOD_NAMES)}"
        )
    X = np.atleast_2d(np.asarray(X, dtype=float))
    columns = list(columns)
    cfg = dict(config or {})
    detail: dict = {}

    if name in ("cox-all", "cox-select"):
        kept = independent_columns(X)
        detail["n_dropped_collinear"] = X.shape[1] - len(kept)
        # drop columns with diverging coefficients (monotone likelihood) and
        # retry, so small training folds with quasi-separation still fit
        dropped_separation = []
        while True:
            names_kept = [columns[j] for j in kept]
            try:
                model = fit_cox(X[:, kept], times, events, names_kept)
                break
            except FitError as err:
                col = (err.payload or {}).get("column")
                if col is None or col not in names_kept or len(kept) <= 1:
                    raise
                dropped_separation.append(col)
                kept = [j for j in kept if columns[j] != col]
        detail["dropped_separation"] = dropped_separation
        if name == "cox-select":
            model = backward_select_cox(X[:, kept], times, events, names_kept)
            detail["selected"] = list(model.selected)
            # the refit keeps only the selected columns
            kept = [columns.index(c) for c in model.columns]
        return TrainedMethod(name, columns, kept, model, detail)

    if name in _COXNET_ALPHA:
        path = fit_coxnet(
            X,
            times,
            events,
            alpha=_COXNET_ALPHA[name],
            n_lambda=int(cfg.get("n_lambda", 100)),
            n_folds=int(cfg.get("n_folds", 10)),
            columns=columns,
            seed=seed,
            lambda_min_ratio=float(cfg.get("lambda_min_ratio", 1e-3)),
        )
        detail["lambda_selected"] = float(path.lambda_selected)
        detail["n_nonzero"] = int(np.sum(path.fit.coef != 0.0))
        return TrainedMethod(name, columns, list(range(X.shape[1])), path.fit, detail)

    if name in _SPLS_MODE:
        model = fit_spls_dr(
            X,
            times,
            events,
            eta_mode=_SPLS_MODE[name],
            max_components=int(cfg.get("max_components", 6)),
            n_folds=int(cfg.get("n_folds", 10)),
            columns=columns,
            seed=seed,
        )
        detail["n_components"] = model.n_components
        detail["eta"] = model.eta
        return TrainedMethod(name, columns, list(range(X.shape[1])), model, detail)

    # random survival forests
    n_trees = int(cfg.get("n_trees", 500))
    nodesize = cfg.get("nodesize", None)
    mtry = cfg.get("mtry", None)
    if name == "rsf-optimize":
        mtry, nodesize = tune_rsf(
            X,
            times,
            events,
            mtry_grid=cfg.get("mtry_grid"),
            nodesize_grid=tuple(cfg.get("nodesize_grid", (5, 15, 30, 50))),
            n_trees=int(cfg.get("tune_trees", 100)),
            seed=seed,
            columns=columns,
        )
        detail["mtry"] = int(mtry)
        detail["nodesize"] = int(nodesize)
    forest = fit_rsf(
        X,
        times,
        events,
        n_trees=n_trees,
        mtry=mtry,
        nodesize=15 if nodesize is None else int(nodesize),
        seed=seed,
        columns=columns,
    )
    if name == "rsf-select":
        keep = select_vars_rsf(forest, X, seed=seed)
        detail["n_selected"] = len(keep)
        forest = fit_rsf(
            X[:, keep],
            times,
            events,
            n_trees=n_trees,
            mtry=None,
            nodesize=15 if nodesize is None else int(nodesize),
            seed=seed,
            columns=[columns[j] for j in keep],
        )
        return TrainedMethod(name, columns, keep, forest, detail)
    return TrainedMethod(name, columns, list(range(X.shape[1])), forest, detail)
