"""Multi-layer cross-validation and the Brier-minimizing superlearner.

Outer folds assess predictive accuracy: per fold, the marker mixed models
are refit on the training subjects only, summaries for train and test come
from those training-fold fits, each survival learner is trained (including
its internal tuning) on the training fold, and test-fold predictions are
recorded. An intermediate layer of inner folds produces internal-CV
predictions from which the superlearner weights are estimated; each method
is then refit once on the full outer-training fold for the final combined
prediction.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .dataset import LandmarkCohort
from .errors import ConfigError, DataError, FitError
from .evalmetrics import MetricReport, ipcw_brier, ipcw_weights, metric_report
from .longitudinal import MixedModelFit, fit_glmm_logistic, fit_lmm
from .methods import METHOD_NAMES, TrainedMethod, fit_method
from .splines import BasisSpec
from .summaries import DesignMatrix, assemble_design
from .survreg import _stratified_folds

SUPERLEARNER = "superlearner"


@dataclass(frozen=True)
class FoldPlan:
    n_outer: int
    n_inner: int
    outer: np.ndarray  # subject -> outer fold id
    inner: np.ndarray  # n_outer x n; inner fold id within the training part,
    # -1 on the fold's own test subjects
    seed: int

    def train_indices(self, k) -> np.ndarray:
        return np.where(self.outer != k)[0]

    def test_indices(self, k) -> np.ndarray:
        return np.where(self.outer == k)[0]


def make_fold_plan(
    cohort: LandmarkCohort, n_outer: int = 10, n_inner: int = 9, seed: int = 0
) -> FoldPlan:
    """Event-stratified nested fold assignment, deterministic given the seed."""
    events = cohort.events()
    n = len(events)
    if n_outer < 2 or n_outer > n:
        raise ConfigError("outer fold count must lie in [2, n]")
    if n_inner < 2:
        raise ConfigError("inner fold count must be at least 2")
    rng = np.random.default_rng(np.random.SeedSequence((seed, 0)))
    outer = _stratified_folds(events, n_outer, rng)
    inner = np.full((n_outer, n), -1, dtype=int)
    for k in range(n_outer):
        train = np.where(outer != k)[0]
        rng_k = np.random.default_rng(np.random.SeedSequence((seed, 1, k)))
        inner[k, train] = _stratified_folds(events[train], n_inner, rng_k)
    return FoldPlan(n_outer=n_outer, n_inner=n_inner, outer=outer, inner=inner, seed=seed)


def _basis_from_config(block: dict | None, default_degree=2) -> BasisSpec:
    if not block:
        return BasisSpec(kind="poly", degree=default_degree)
    return BasisSpec.from_dict(block)


def fit_longitudinal_models(
    cohort: LandmarkCohort, config: dict | None = None
) -> dict[str, MixedModelFit]:
    """Step 1: one mixed model per marker on the cohort's history."""
    config = config or {}
    marker_cfg = config.get("markers", {})
    fits = {}
    for marker, nature in sorted(cohort.marker_natures.items()):
        block = marker_cfg.get(marker, {})
        fixed = _basis_from_config(block.get("basis_fixed"))
        random = _basis_from_config(block.get("basis_random"))
        series = [s.history.get(marker, (np.empty(0), np.empty(0))) for s in cohort.subjects]
        if nature == "binary":
            fits[marker] = fit_glmm_logistic(series, fixed, random, marker_id=marker)
        else:
            fits[marker] = fit_lmm(series, fixed, random, marker_id=marker)
    return fits


def training_arrays(cohort: LandmarkCohort) -> tuple[np.ndarray, np.ndarray]:
    """Landmark-clock times administratively censored at the horizon."""
    t = np.minimum(cohort.times_from_landmark(), cohort.t_hor)
    return t, cohort.events()


def _project_simplex(v: np.ndarray) -> np.ndarray:
    """Euclidean projection onto the probability simplex."""
    u = np.sort(v)[::-1]
    css = np.cumsum(u) - 1.0
    rho = np.nonzero(u - css / (np.arange(len(v)) + 1) > 0)[0][-1]
    theta = css[rho] / (rho + 1.0)
    return np.maximum(v - theta, 0.0)


@dataclass
class SuperLearnerWeights:
    omega: np.ndarray
    methods: list[str]
    brier: float

    def to_dict(self) -> dict:
        return {
            "format": "landcast-superlearner",
            "version": 1,
            "omega": self.omega.tolist(),
            "methods": self.methods,
            "brier": self.brier,
        }

    @staticmethod
    def from_dict(d: dict) -> "SuperLearnerWeights":
        return SuperLearnerWeights(
            omega=np.asarray(d["omega"]), methods=list(d["methods"]), brier=d["brier"]
        )


def superlearner_weights(
    P, times, events, t_hor, methods=None, max_iter=10_000
) -> SuperLearnerWeights:
    """Weights on the simplex minimizing the IPCW Brier of the combination.

    The objective is convex quadratic in the weights; projected gradient
    with exact line search from the best single-method vertex converges and
    guarantees the combination never does worse than that vertex.
    """
    P = np.atleast_2d(np.asarray(P, dtype=float))
    n, m = P.shape
    if m == 0:
        raise ConfigError("superlearner needs at least one method")
    names = list(methods) if methods is not None else [f"m{j}" for j in range(m)]
    w, is_case, _ = ipcw_weights(times, events, t_hor)
    d = is_case.astype(float)

    def objective(om):
        r = d - P @ om
        return float(np.sum(w * r * r) / n)

    grad_mat = (w[:, None] * P) / n  # for grad = -2 * grad_mat' (d - P om)
    # start from the best single-method vertex
    vertex_obj = [objective(np.eye(m)[j]) for j in range(m)]
    omega = np.eye(m)[int(np.argmin(vertex_obj))]
    f = objective(omega)
    for _ in range(max_iter):
        g = -2.0 * grad_mat.T @ (d - P @ omega)
        target = _project_simplex(omega - g)
        direction = target - omega
        Pd = P @ direction
        denom = 2.0 * float(np.sum(w * Pd * Pd) / n)
        if denom <= 0:
            step = 1.0
        else:
            step = float(np.clip(-(g @ direction) / denom, 0.0, 1.0))
        new = omega + step * direction
        f_new = objective(new)
        if f - f_new < 1e-12:
            break
        omega, f = new, f_new
    omega = _project_simplex(omega)  # clean up numerical dust
    return SuperLearnerWeights(omega=omega, methods=names, brier=objective(omega))


def superlearner_predict(weights: SuperLearnerWeights, P) -> np.ndarray:
    P = np.atleast_2d(np.asarray(P, dtype=float))
    if P.shape[1] != len(weights.omega):
        raise ValueError("prediction matrix does not match the weight vector")
    return np.clip(P @ weights.omega, 0.0, 1.0)


@dataclass
class CvResult:
    methods: list[str]
    predictions: dict  # method -> out-of-fold predictions aligned to cohort order
    reports: dict  # method -> MetricReport over pooled out-of-fold predictions
    fold_weights: list  # per outer fold: SuperLearnerWeights | None
    plan: FoldPlan
    fold_reports: dict = field(default_factory=dict)


def _method_seed(seed, fold, name) -> int:
    return int(
        np.random.SeedSequence((seed, fold, METHOD_NAMES.index(name))).generate_state(1)[0]
        % (2**31)
    )


def _fit_and_predict_methods(
    train_design, test_design, t_tr, e_tr, names, config, seed, fold
):
    preds, models = {}, {}
    for name in names:
        tm = fit_method(
            name,
            train_design.X,
            t_tr,
            e_tr,
            train_design.columns,
            seed=_method_seed(seed, fold, name),
            config=(config.get("method_config", {}) or {}).get(name),
        )
        models[name] = tm
        preds[name] = tm.predict(test_design.X, test_design_horizon(config))
    return preds, models


def test_design_horizon(config) -> float:
    return float(config["t_hor"])


def run_pipeline_cv(
    cohort: LandmarkCohort,
    methods,
    plan: FoldPlan,
    config: dict | None = None,
) -> CvResult:
    """Out-of-fold predictions and metrics for each method (Fig.-2 layout)."""
    config = dict(config or {})
    config.setdefault("t_hor", cohort.t_hor)
    methods = list(methods)
    base = [m for m in methods if m != SUPERLEARNER]
    if not base:
        raise ConfigError("need at least one base method")
    unknown = [m for m in base if m not in METHOD_NAMES]
    if unknown:
        raise ConfigError(f"unknown methods: {unknown}")
    want_sl = SUPERLEARNER in methods
    refit_longitudinal = bool(config.get("refit_longitudinal", True))
    seed = int(config.get("seed", plan.seed))

    n = cohort.n
    preds = {m: np.full(n, np.nan) for m in methods}
    fold_weights = []
    shared_fits = None
    if not refit_longitudinal:
        shared_fits = fit_longitudinal_models(cohort, config)

    t_all, e_all = training_arrays(cohort)  # capped times, for model fitting
    t_raw = cohort.times_from_landmark()  # uncapped, for IPCW metrics
    windows = config.get("windows")
    for k in range(plan.n_outer):
        tr_idx, te_idx = plan.train_indices(k), plan.test_indices(k)
        if e_all[tr_idx].sum() == 0 or e_all[te_idx].sum() == 0:
            raise DataError(
                f"outer fold {k} has no events; reduce the fold count"
            )
        train_cohort = cohort.subset(tr_idx)
        fits = shared_fits or fit_longitudinal_models(train_cohort, config)
        # windows derived from the training fold so train/test designs agree
        fold_windows = windows or _training_windows(train_cohort)
        design_tr = assemble_design(train_cohort, fits, windows=fold_windows)
        design_te = assemble_design(cohort.subset(te_idx), fits, windows=fold_windows)
        t_tr, e_tr = t_all[tr_idx], e_all[tr_idx]

        p_te, models = _fit_and_predict_methods(
            design_tr, design_te, t_tr, e_tr, base, config, seed, k
        )
        for m in base:
            preds[m][te_idx] = p_te[m]

        if want_sl:
            inner = plan.inner[k]
            P_int = np.full((len(tr_idx), len(base)), np.nan)
            pos_of = {g: i for i, g in enumerate(tr_idx)}
            for j in range(plan.n_inner):
                in_tr = tr_idx[inner[tr_idx] != j]
                in_te = tr_idx[inner[tr_idx] == j]
                if len(in_te) == 0:
                    continue
                if e_all[in_tr].sum() == 0:
                    raise DataError(
                        f"inner fold {j} of outer fold {k} has no events"
                    )
                sub_tr = cohort.subset(in_tr)
                sub_fits = shared_fits or fit_longitudinal_models(sub_tr, config)
                sub_windows = windows or _training_windows(sub_tr)
                d_in_tr = assemble_design(sub_tr, sub_fits, windows=sub_windows)
                d_in_te = assemble_design(
                    cohort.subset(in_te), sub_fits, windows=sub_windows
                )
                p_in, _ = _fit_and_predict_methods(
                    d_in_tr, d_in_te, t_all[in_tr], e_all[in_tr], base, config,
                    seed, 1000 + k * plan.n_inner + j,
                )
                rows = [pos_of[g] for g in in_te]
                for c, m in enumerate(base):
                    P_int[rows, c] = p_in[m]
            if np.isnan(P_int).any():
                raise FitError("internal-CV prediction matrix has gaps")
            weights = superlearner_weights(
                P_int, t_raw[tr_idx], e_tr, config["t_hor"], methods=base
            )
            fold_weights.append(weights)
            P_te = np.column_stack([p_te[m] for m in base])
            preds[SUPERLEARNER][te_idx] = superlearner_predict(weights, P_te)
        else:
            fold_weights.append(None)

    reports = {
        m: metric_report(preds[m], t_raw, e_all, config["t_hor"]) for m in methods
    }
    fold_reports = {
        m: [
            metric_report(
                preds[m][plan.test_indices(k)],
                t_raw[plan.test_indices(k)],
                e_all[plan.test_indices(k)],
                config["t_hor"],
            )
            for k in range(plan.n_outer)
        ]
        for m in methods
    }
    return CvResult(
        methods=methods,
        predictions=preds,
        reports=reports,
        fold_weights=fold_weights,
        plan=plan,
        fold_reports=fold_reports,
    )


def _training_windows(cohort: LandmarkCohort) -> dict[str, float]:
    """Full-history integration window per marker (the landmark time)."""
    return {m: max(cohort.t_lm, 1.0) for m in cohort.marker_natures}
