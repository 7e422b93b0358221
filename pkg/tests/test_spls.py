import numpy as np
import pytest

from landcast.errors import DataError, FitError
from landcast.spls import (
    SplsDrFit,
    deviance_residuals,
    fit_spls,
    fit_spls_dr,
    predict_spls_probability,
)
from landcast.survreg import predict_cox_probability


def test_deviance_residuals_hand_case():
    # subjects at t = 1 (event), 2 (event), 3 (censored)
    # Nelson-Aalen jumps: 1/3 at t=1, 1/2 at t=2
    times = np.array([1.0, 2.0, 3.0])
    events = np.array([1, 1, 0])
    chf = np.array([1 / 3, 1 / 3 + 1 / 2, 1 / 3 + 1 / 2])
    m = events - chf
    want = np.sign(m) * np.sqrt(-2 * (m + events * np.log(events - m + (events == 0))))
    got = deviance_residuals(times, events)
    assert np.max(np.abs(got - want)) < 1e-12


def test_deviance_residual_zero_before_first_event():
    times = np.array([0.5, 1.0, 2.0])
    events = np.array([0, 1, 1])
    r = deviance_residuals(times, events)
    assert r[0] == 0.0  # censored before any event: CHF=0, martingale=0


def test_martingale_residuals_sum_to_zero():
    rng = np.random.default_rng(3)
    times = rng.exponential(1.0, 60)
    events = (rng.uniform(size=60) < 0.7).astype(int)
    from landcast.evalmetrics import nelson_aalen

    m = events - nelson_aalen(times, events)(times)
    assert abs(m.sum()) < 1e-10


def test_deviance_residuals_need_event():
    with pytest.raises(DataError):
        deviance_residuals(np.array([1.0, 2.0]), np.array([0, 0]))


def test_eta_zero_is_pls1_first_direction():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 6))
    X = (X - X.mean(0)) / X.std(0)
    y = rng.normal(size=50)
    W, _ = fit_spls(X, y, 1, eta=0.0)
    w_ref = X.T @ y
    w_ref = w_ref / np.linalg.norm(w_ref)
    assert np.max(np.abs(W[:, 0] - w_ref)) < 1e-10


def test_maxsparse_keeps_only_argmax():
    rng = np.random.default_rng(1)
    X = rng.normal(size=(60, 8))
    X = (X - X.mean(0)) / X.std(0)
    y = X[:, 2] + 0.1 * rng.normal(size=60)
    W, _ = fit_spls(X, y, 2, eta=0.99)
    for c in range(W.shape[1]):
        assert np.count_nonzero(W[:, c]) == 1


def test_score_orthogonality_under_deflation():
    rng = np.random.default_rng(2)
    X = rng.normal(size=(80, 10))
    X = (X - X.mean(0)) / X.std(0)
    y = rng.normal(size=80)
    W, R = fit_spls(X, y, 4, eta=0.0)
    T = X @ R
    G = T.T @ T
    off = G - np.diag(np.diag(G))
    assert np.max(np.abs(off)) < 1e-8


def test_fit_spls_eta_range():
    with pytest.raises(ValueError):
        fit_spls(np.eye(3), np.ones(3), 1, eta=1.0)


def _spls_data(n=150, seed=0, p=8):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, p))
    lp = 1.5 * X[:, 0]
    t_event = rng.exponential(np.exp(-lp))
    t_cens = rng.exponential(2.5, n)
    times = np.minimum(t_event, t_cens)
    events = (t_event <= t_cens).astype(int)
    return X, times, events


def test_dominant_signal_selects_one_component():
    hits = 0
    for rep in range(10):
        X, times, events = _spls_data(seed=200 + rep)
        fit = fit_spls_dr(X, times, events, eta_mode="none", max_components=3,
                          n_folds=5, seed=rep)
        if fit.n_components == 1:
            hits += 1
    assert hits >= 8


def test_prediction_composition_identity():
    X, times, events = _spls_data(seed=5)
    fit = fit_spls_dr(X, times, events, eta_mode="none", n_folds=5)
    p1 = predict_spls_probability(fit, X, 1.0)
    p2 = predict_cox_probability(fit.inner_cox, fit.scores(X), 1.0)
    assert np.max(np.abs(p1 - p2)) < 1e-12
    assert np.all((p1 >= 0) & (p1 <= 1))


def test_column_scaling_invariance():
    X, times, events = _spls_data(seed=7)
    fit1 = fit_spls_dr(X, times, events, eta_mode="none", n_folds=5, seed=1)
    X2 = X.copy()
    X2[:, 3] *= 10.0
    fit2 = fit_spls_dr(X2, times, events, eta_mode="none", n_folds=5, seed=1)
    p1 = predict_spls_probability(fit1, X, 1.0)
    p2 = predict_spls_probability(fit2, X2, 1.0)
    assert np.max(np.abs(p1 - p2)) < 1e-8


def test_zero_variance_column_dropped():
    X, times, events = _spls_data(seed=9)
    X = np.column_stack([X, np.full(len(X), 2.5)])
    fit = fit_spls_dr(X, times, events, eta_mode="none", n_folds=5)
    assert X.shape[1] - 1 not in fit.kept
    p = predict_spls_probability(fit, X, 1.0)
    assert p.shape == (len(X),)


def test_too_many_folds_error():
    X, times, events = _spls_data(n=8, seed=3)
    with pytest.raises(ValueError):
        fit_spls_dr(X, times, events, n_folds=20)


def test_spls_serialization_round_trip():
    X, times, events = _spls_data(seed=11)
    fit = fit_spls_dr(X, times, events, eta_mode="grid", max_components=2, n_folds=5)
    again = SplsDrFit.from_dict(fit.to_dict())
    assert np.allclose(
        predict_spls_probability(again, X, 1.5), predict_spls_probability(fit, X, 1.5)
    )
