import numpy as np
import pytest

from landcast.ensemble import (
    SUPERLEARNER,
    SuperLearnerWeights,
    fit_longitudinal_models,
    make_fold_plan,
    run_pipeline_cv,
    superlearner_predict,
    superlearner_weights,
    training_arrays,
)
from landcast.errors import ConfigError
from landcast.evalmetrics import ipcw_brier
from landcast.simgen import ScenarioSpec, simulate_cohort
from tests.conftest import cohort_from_generated

FAST_CONFIG = {
    "method_config": {
        "coxnet-lasso": {"n_lambda": 10, "n_folds": 4, "lambda_min_ratio": 0.05},
        "rsf-default": {"n_trees": 10},
    },
}


def _cohort(n=80, seed=0, n_markers=4):
    gen = simulate_cohort(ScenarioSpec(n_subjects=n, eta_sd=1.2, seed=5), seed=seed)
    cohort = cohort_from_generated(gen)
    # restrict to a few markers: mixed-model refits per fold dominate runtime
    keep = sorted(cohort.marker_natures)[:n_markers]
    for s in cohort.subjects:
        s.history = {m: s.history[m] for m in keep}
    cohort.marker_natures = {m: cohort.marker_natures[m] for m in keep}
    return cohort, gen


def test_fold_plan_shapes_and_stratification():
    cohort, _ = _cohort(n=100)
    plan = make_fold_plan(cohort, n_outer=10, n_inner=9, seed=3)
    sizes = np.bincount(plan.outer, minlength=10)
    assert np.all(sizes == 10)
    events = cohort.events()
    per_fold = [events[plan.outer == k].sum() for k in range(10)]
    assert max(per_fold) - min(per_fold) <= 1
    # inner folds partition each training part and mark the test part -1
    for k in range(10):
        te = plan.test_indices(k)
        tr = plan.train_indices(k)
        assert np.all(plan.inner[k, te] == -1)
        assert np.all(plan.inner[k, tr] >= 0)
        assert plan.inner[k, tr].max() < 9
    again = make_fold_plan(cohort, n_outer=10, n_inner=9, seed=3)
    assert np.array_equal(plan.outer, again.outer)
    assert np.array_equal(plan.inner, again.inner)


def test_fold_plan_validation():
    cohort, _ = _cohort(n=30)
    with pytest.raises(ConfigError):
        make_fold_plan(cohort, n_outer=1)
    with pytest.raises(ConfigError):
        make_fold_plan(cohort, n_outer=5, n_inner=1)


def _sl_data(n=300, seed=0):
    rng = np.random.default_rng(seed)
    pi = rng.uniform(0.1, 0.9, n)
    events = (rng.uniform(size=n) < pi).astype(int)
    times = np.where(events == 1, rng.uniform(0.1, 2.9, n), rng.uniform(3.1, 6.0, n))
    return pi, times, events


def test_superlearner_single_method_weight_one():
    pi, times, events = _sl_data()
    P = pi[:, None]
    w = superlearner_weights(P, times, events, 3.0, methods=["only"])
    assert np.allclose(w.omega, [1.0])
    assert w.methods == ["only"]


def test_superlearner_recovers_oracle_column():
    pi, times, events = _sl_data(seed=1)
    rng = np.random.default_rng(2)
    P = np.column_stack([pi, rng.uniform(0, 1, len(pi)), rng.uniform(0, 1, len(pi))])
    w = superlearner_weights(P, times, events, 3.0)
    assert w.omega[0] >= 0.9  # oracle column dominates


def test_superlearner_weights_on_simplex_and_dominance():
    pi, times, events = _sl_data(seed=3)
    rng = np.random.default_rng(4)
    P = np.column_stack(
        [np.clip(pi + rng.normal(0, s, len(pi)), 0, 1) for s in (0.1, 0.2, 0.3)]
    )
    w = superlearner_weights(P, times, events, 3.0)
    assert abs(w.omega.sum() - 1.0) < 1e-10
    assert np.all(w.omega >= -1e-12)
    best_single = min(ipcw_brier(P[:, j], times, events, 3.0) for j in range(3))
    combined = ipcw_brier(
        superlearner_predict(w, P), times, events, 3.0
    )
    assert combined <= best_single + 1e-9
    assert abs(w.brier - combined) < 1e-9


def test_superlearner_identical_columns_any_convex_combo():
    pi, times, events = _sl_data(seed=5)
    P = np.column_stack([pi, pi])
    w = superlearner_weights(P, times, events, 3.0)
    assert abs(w.omega.sum() - 1.0) < 1e-10
    assert np.allclose(superlearner_predict(w, P), pi)


def test_superlearner_serialization():
    pi, times, events = _sl_data(seed=6)
    P = np.column_stack([pi, 1 - pi])
    w = superlearner_weights(P, times, events, 3.0, methods=["a", "b"])
    again = SuperLearnerWeights.from_dict(w.to_dict())
    assert np.allclose(again.omega, w.omega) and again.methods == ["a", "b"]


def test_training_arrays_cap_at_horizon():
    cohort, _ = _cohort(n=60)
    t, e = training_arrays(cohort)
    assert np.all(t <= cohort.t_hor + 1e-12)
    assert np.all(t > 0)
    assert set(np.unique(e)) <= {0, 1}


def test_fit_longitudinal_models_covers_all_markers():
    cohort, _ = _cohort(n=50)
    fits = fit_longitudinal_models(cohort)
    assert set(fits) == set(cohort.marker_natures)
    assert all(f.link == "identity" for f in fits.values())


def test_run_pipeline_cv_smoke_and_determinism():
    cohort, gen = _cohort(n=80)
    plan = make_fold_plan(cohort, n_outer=4, n_inner=3, seed=1)
    methods = ["cox-all", "coxnet-lasso", SUPERLEARNER]
    res = run_pipeline_cv(cohort, methods, plan, config=FAST_CONFIG)
    assert res.methods == methods
    for m in methods:
        p = res.predictions[m]
        assert p.shape == (80,) and not np.isnan(p).any()
        assert np.all((p >= 0) & (p <= 1))
        assert np.isfinite(res.reports[m].brier)
        assert len(res.fold_reports[m]) == 4
    assert len(res.fold_weights) == 4
    for w in res.fold_weights:
        assert abs(w.omega.sum() - 1.0) < 1e-10
    res2 = run_pipeline_cv(cohort, methods, plan, config=FAST_CONFIG)
    for m in methods:
        assert np.array_equal(res.predictions[m], res2.predictions[m])


def test_run_pipeline_cv_validation():
    cohort, _ = _cohort(n=40)
    plan = make_fold_plan(cohort, n_outer=3, n_inner=2, seed=0)
    with pytest.raises(ConfigError):
        run_pipeline_cv(cohort, [SUPERLEARNER], plan)
    with pytest.raises(ConfigError):
        run_pipeline_cv(cohort, ["not-a-method"], plan)


def test_no_leakage_out_of_fold_predictions():
    # flipping the test fold's outcomes must not change its predictions:
    # every quantity used for a subject's prediction comes from other folds
    cohort, _ = _cohort(n=60, seed=2)
    plan = make_fold_plan(cohort, n_outer=3, n_inner=2, seed=7)
    methods = ["cox-all"]
    base = run_pipeline_cv(cohort, methods, plan, config=FAST_CONFIG)
    k = 0
    te = plan.test_indices(k)
    flipped = cohort.subset(np.arange(cohort.n))
    for i in te:
        s = flipped.subjects[i]
        s.event = 1 - s.event
    res = run_pipeline_cv(flipped, methods, plan, config=FAST_CONFIG)
    assert np.array_equal(
        base.predictions["cox-all"][te], res.predictions["cox-all"][te]
    )
