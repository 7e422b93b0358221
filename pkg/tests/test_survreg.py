import numpy as np
import pytest
from scipy.optimize import minimize_scalar

from landcast.errors import FitError
from landcast.evalmetrics import nelson_aalen
from landcast.survreg import (
    CoxFit,
    _stratified_folds,
    backward_select_cox,
    fit_cox,
    fit_coxnet,
    predict_cox_probability,
)
from tests.conftest import informative_survival


def _breslow_pll(beta, x, times, events):
    """Independent partial-likelihood implementation for small oracles."""
    ll = 0.0
    for i in np.where(events == 1)[0]:
        at_risk = times >= times[i]
        ll += beta * x[i] - np.log(np.sum(np.exp(beta * x[at_risk])))
    return ll


def test_cox_one_dimensional_oracle():
    x = np.array([0.0, 1.0, 0.5, 2.0, 1.5, 0.2])
    times = np.array([3.0, 1.0, 4.0, 0.5, 2.0, 5.0])
    events = np.array([1, 1, 0, 1, 1, 0])
    fit = fit_cox(x[:, None], times, events)
    res = minimize_scalar(
        lambda b: -_breslow_pll(b, x, times, events), bounds=(-5, 5), method="bounded",
        options={"xatol": 1e-10},
    )
    assert abs(fit.coef[0] - res.x) < 1e-6
    assert abs(fit.loglik_partial - _breslow_pll(res.x, x, times, events)) < 1e-8


def test_null_model_baseline_is_nelson_aalen():
    times = np.array([1.0, 1.0, 2.0, 3.0, 4.0])
    events = np.array([1, 0, 1, 1, 0])
    fit = fit_cox(np.empty((5, 0)), times, events)
    na = nelson_aalen(times, events)
    grid = np.array([0.5, 1.0, 2.0, 3.5, 10.0])
    assert np.max(np.abs(fit.baseline_chf(grid) - na(grid))) < 1e-10


def test_monotone_likelihood_detected():
    times = np.arange(1.0, 13.0)
    events = np.ones(12, dtype=int)
    x = -times  # perfectly concordant: likelihood increases without bound
    with pytest.raises(FitError, match="monotone"):
        fit_cox(x[:, None], times, events)


def test_constant_column_rejected():
    X, times, events = informative_survival(n=50)
    X = np.column_stack([X, np.ones(50)])
    with pytest.raises(FitError, match="constant"):
        fit_cox(X, times, events)


def test_no_events_rejected():
    X, times, _ = informative_survival(n=30)
    with pytest.raises(FitError):
        fit_cox(X, times, np.zeros(30, dtype=int))


def test_backward_selection_keeps_signal():
    X, times, events = informative_survival(n=300, seed=5)
    fit = backward_select_cox(X, times, events, columns=["sig", "n1", "n2", "n3", "n4"])
    assert "sig" in fit.selected
    assert len(fit.selected) < 5  # at least one noise column eliminated


def test_coxnet_lambda_zero_matches_unpenalized():
    X, times, events = informative_survival(n=150, seed=2)
    path = fit_coxnet(
        X, times, events, alpha=1.0, n_lambda=10, n_folds=4,
        lambda_min_ratio=0.1, extra_lambdas=(0.0,),
    )
    unpen = fit_cox(X, times, events)
    at_zero = path.coef_per_lambda[-1]
    assert np.max(np.abs(at_zero - unpen.coef)) < 1e-3


def test_coxnet_lambda_max_all_zero():
    X, times, events = informative_survival(n=150, seed=2)
    path = fit_coxnet(X, times, events, alpha=1.0, n_lambda=10, n_folds=4)
    assert np.allclose(path.coef_per_lambda[0], 0.0)


def test_coxnet_ridge_runs_and_shrinks():
    X, times, events = informative_survival(n=150, seed=3)
    path = fit_coxnet(X, times, events, alpha=0.0, n_lambda=15, n_folds=4)
    unpen = fit_cox(X, times, events)
    # ridge never zeroes coefficients but shrinks their norm
    assert np.all(path.fit.coef != 0.0) or path.lambda_selected == path.lambda_grid[0]
    assert np.linalg.norm(path.coef_per_lambda[0]) <= np.linalg.norm(unpen.coef)


def test_lasso_support_recovery():
    hits = 0
    for rep in range(10):
        rng = np.random.default_rng(100 + rep)
        X = rng.normal(size=(400, 10))
        lp = 1.0 * X[:, 0] - 1.0 * X[:, 1]
        t_event = rng.exponential(np.exp(-lp))
        t_cens = rng.exponential(2.0, 400)
        times = np.minimum(t_event, t_cens)
        events = (t_event <= t_cens).astype(int)
        path = fit_coxnet(X, times, events, alpha=1.0, n_lambda=30, n_folds=5,
                          lambda_min_ratio=0.02, seed=rep)
        sel = set(path.fit.selected)
        if {"x0", "x1"} <= sel:
            hits += 1
    assert hits >= 9


def test_predict_probability_bounds_and_shape():
    X, times, events = informative_survival(n=100, seed=4)
    fit = fit_cox(X, times, events)
    p = predict_cox_probability(fit, X, 1.0)
    assert p.shape == (100,)
    assert np.all((p >= 0) & (p <= 1))
    with pytest.raises(ValueError):
        predict_cox_probability(fit, X[:, :3], 1.0)


def test_cox_serialization_round_trip():
    X, times, events = informative_survival(n=80, seed=6)
    fit = fit_cox(X, times, events)
    again = CoxFit.from_dict(fit.to_dict())
    assert np.allclose(
        predict_cox_probability(again, X, 1.5), predict_cox_probability(fit, X, 1.5)
    )


def test_stratified_folds_balance():
    rng = np.random.default_rng(0)
    events = (np.arange(100) < 37).astype(int)
    folds = _stratified_folds(events, 10, rng)
    assert np.array_equal(np.sort(np.unique(folds)), np.arange(10))
    per_fold = [events[folds == k].sum() for k in range(10)]
    assert max(per_fold) - min(per_fold) <= 1
    sizes = np.bincount(folds)
    assert max(sizes) - min(sizes) <= 1
