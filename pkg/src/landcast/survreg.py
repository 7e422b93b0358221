"""Cox proportional hazards learners.

Unpenalized Newton-Raphson fits with Breslow tie handling (with optional
backward AIC selection) and an elastic-net penalized path fit by cyclic
coordinate descent with warm starts and internal cross-validated selection
of the penalty. Survival times are expected on the landmark-rescaled clock,
so the Breslow baseline is directly evaluable at the horizon.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import FitError
from .evalmetrics import StepFunction

_MAX_CD_PASSES = 100_000


class _CoxData:
    """Sorted survival data with risk-set bookkeeping for Breslow ties."""

    def __init__(self, X, times, events):
        times = np.asarray(times, dtype=float)
        events = np.asarray(events, dtype=int)
        X = np.asarray(X, dtype=float)
        if X.ndim != 2:
            X = X.reshape(len(times), -1)
        order = np.argsort(times, kind="stable")
        self.order = order
        self.X = X[order]
        self.times = times[order]
        self.events = events[order]
        self.n, self.p = self.X.shape
        uniq, start = np.unique(self.times, return_index=True)
        self.uniq_times = uniq
        self.start = start  # first index of each distinct time (ascending)
        self.d = np.add.reduceat(self.events, start)  # events per distinct time
        self.event_time_mask = self.d > 0
        self.n_events = int(self.events.sum())
        # block slices per distinct time, descending for risk-set accumulation
        ends = np.append(start[1:], self.n)
        self.blocks = list(zip(start, ends))

    def suffix_sums(self, r):
        """S0_j = sum of r over the risk set of each distinct time."""
        block_sums = np.add.reduceat(r, self.start)
        return np.cumsum(block_sums[::-1])[::-1]

    def pll(self, lp):
        """Breslow partial log-likelihood at linear predictor lp (sorted order)."""
        c = lp.max() if len(lp) else 0.0
        r = np.exp(lp - c)
        S0 = self.suffix_sums(r)
        ev = self.event_time_mask
        return float(
            np.sum(lp[self.events == 1])
            - np.sum(self.d[ev] * (np.log(S0[ev]) + c))
        )

    def lp_derivatives(self, lp):
        """Per-subject score u_i and negative-Hessian diagonal w_i of the pll."""
        c = lp.max() if len(lp) else 0.0
        r = np.exp(lp - c)
        S0 = self.suffix_sums(r)
        ratio = np.where(S0 > 0, self.d / S0, 0.0)
        ratio2 = np.where(S0 > 0, self.d / S0**2, 0.0)
        # cumulative over event times <= t_i, expanded to subjects
        A = np.cumsum(ratio)
        Bc = np.cumsum(ratio2)
        idx = np.searchsorted(self.uniq_times, self.times, side="right") - 1
        Ai, Bi = A[idx], Bc[idx]
        # r is exp(lp - c) and A, B carry the inverse scaling, so the products
        # r*A and r^2*B are invariant to the shift c
        u = self.events - r * Ai
        w = r * Ai - (r**2) * Bi
        return u, np.maximum(w, 0.0)

    def score_and_info(self, lp):
        """Full gradient (p,) and information matrix (p, p) of the pll."""
        c = lp.max() if len(lp) else 0.0
        r = np.exp(lp - c)
        p = self.p
        if p == 0:
            return np.zeros(0), np.zeros((0, 0))
        if self.n * p * p <= 3e7:
            return self._score_and_info_vec(r)
        S0 = 0.0
        S1 = np.zeros(p)
        S2 = np.zeros((p, p))
        grad = np.zeros(p)
        info = np.zeros((p, p))
        # walk distinct times descending, growing the risk set
        for j in range(len(self.blocks) - 1, -1, -1):
            s, e = self.blocks[j]
            rb = r[s:e]
            Xb = self.X[s:e]
            S0 += rb.sum()
            S1 += rb @ Xb
            S2 += (Xb * rb[:, None]).T @ Xb
            dj = self.d[j]
            if dj > 0:
                xbar = S1 / S0
                ev = self.events[s:e] == 1
                grad += Xb[ev].sum(axis=0) - dj * xbar
                info += dj * (S2 / S0 - np.outer(xbar, xbar))
        return grad, info

    def _score_and_info_vec(self, r):
        """Vectorized gradient/information via suffix sums per distinct time."""
        start = self.start
        rX = r[:, None] * self.X
        rXX = rX[:, :, None] * self.X[:, None, :]
        S0 = np.cumsum(np.add.reduceat(r, start)[::-1])[::-1]
        S1 = np.cumsum(np.add.reduceat(rX, start, axis=0)[::-1], axis=0)[::-1]
        S2 = np.cumsum(np.add.reduceat(rXX, start, axis=0)[::-1], axis=0)[::-1]
        ev = self.event_time_mask
        d = self.d[ev]
        S0e, S1e, S2e = S0[ev], S1[ev], S2[ev]
        xbar = S1e / S0e[:, None]
        x_events = np.add.reduceat(
            self.X * self.events[:, None], start, axis=0
        )[ev]
        grad = x_events.sum(axis=0) - (d[:, None] * xbar).sum(axis=0)
        info = np.einsum("j,jkl->kl", d / S0e, S2e) - np.einsum(
            "j,jk,jl->kl", d, xbar, xbar
        )
        return grad, info

    def breslow_baseline(self, lp) -> StepFunction:
        """Breslow cumulative baseline hazard for the given linear predictor."""
        c = lp.max() if len(lp) else 0.0
        r = np.exp(lp - c)
        S0 = self.suffix_sums(r) * np.exp(c)
        ev = self.event_time_mask
        jumps = self.d[ev] / S0[ev]
        return StepFunction(self.uniq_times[ev], np.cumsum(jumps), 0.0)


@dataclass
class CoxFit:
    coef: np.ndarray
    columns: list[str]
    means: np.ndarray
    sds: np.ndarray
    baseline_chf: StepFunction
    loglik_partial: float
    selected: list[str] = field(default_factory=list)

    def linear_predictor(self, rows) -> np.ndarray:
        rows = np.atleast_2d(np.asarray(rows, dtype=float))
        return (rows - self.means) @ self.coef

    def to_dict(self) -> dict:
        return {
            "format": "landcast-cox",
            "version": 1,
            "coef": self.coef.tolist(),
            "columns": self.columns,
            "means": self.means.tolist(),
            "sds": self.sds.tolist(),
            "baseline_chf": self.baseline_chf.to_dict(),
            "loglik_partial": self.loglik_partial,
            "selected": self.selected,
        }

    @staticmethod
    def from_dict(d: dict) -> "CoxFit":
        if d.get("format") != "landcast-cox":
            raise ValueError("not a Cox fit document")
        return CoxFit(
            coef=np.asarray(d["coef"]),
            columns=list(d["columns"]),
            means=np.asarray(d["means"]),
            sds=np.asarray(d["sds"]),
            baseline_chf=StepFunction.from_dict(d["baseline_chf"]),
            loglik_partial=d["loglik_partial"],
            selected=list(d["selected"]),
        )


def _column_names(p, columns):
    return list(columns) if columns is not None else [f"x{j}" for j in range(p)]


def fit_cox(X, times, events, columns=None, max_iter=100, tol=1e-8) -> CoxFit:
    """Newton-Raphson maximization of the Breslow partial log-likelihood."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.size == 0:
        X = X.reshape(len(times), 0)
    names = _column_names(X.shape[1], columns)
    events_arr = np.asarray(events, dtype=int)
    if events_arr.sum() < 1:
        raise FitError("no events in the training data")
    means = X.mean(axis=0) if X.shape[1] else np.zeros(0)
    sds = X.std(axis=0) if X.shape[1] else np.zeros(0)
    zero_var = sds <= 1e-300
    if np.any(zero_var):
        raise FitError(
            f"constant column(s) make the information singular: "
            f"{[names[j] for j in np.where(zero_var)[0]]}"
        )
    Xs = (X - means) / np.where(sds > 0, sds, 1.0)
    data = _CoxData(Xs, times, events_arr)
    p = data.p
    beta = np.zeros(p)
    lp = data.X @ beta
    ll = data.pll(lp)
    for _ in range(max_iter):
        grad, info = data.score_and_info(lp)
        if p == 0:
            break
        try:
            step = np.linalg.solve(info + 1e-12 * np.eye(p), grad)
        except np.linalg.LinAlgError:
            raise FitError("singular information matrix in Cox fit") from None
        if not np.all(np.isfinite(step)):
            raise FitError("singular information matrix in Cox fit")
        # step halving to guarantee ascent
        scale = 1.0
        for _ in range(30):
            cand = beta + scale * step
            ll_new = data.pll(data.X @ cand)
            if ll_new >= ll - 1e-12:
                break
            scale *= 0.5
        beta, ll = cand, ll_new
        if np.max(np.abs(beta)) > 50.0:
            worst = names[int(np.argmax(np.abs(beta)))]
            raise FitError(
                f"monotone likelihood: coefficient for {worst!r} diverges",
                payload={"column": worst},
            )
        lp = data.X @ beta
        if np.max(np.abs(grad)) < tol:
            break
    else:
        grad, _ = data.score_and_info(lp)
        if np.max(np.abs(grad)) > 1e-4:
            raise FitError("Cox fit did not converge", payload={"beta": beta})
    coef = beta / np.where(sds > 0, sds, 1.0) if p else beta
    # baseline on the centered-covariate scale used by linear_predictor
    data_orig = _CoxData(X - means, times, events_arr)
    lp_orig = data_orig.X @ coef
    return CoxFit(
        coef=coef,
        columns=names,
        means=means,
        sds=sds,
        baseline_chf=data_orig.breslow_baseline(lp_orig),
        loglik_partial=ll,
        selected=names,
    )


def backward_select_cox(X, times, events, columns=None) -> CoxFit:
    """Greedy backward elimination minimizing AIC, then a refit."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    names = _column_names(X.shape[1], columns)
    current = list(range(X.shape[1]))

    def aic_of(cols):
        fit = fit_cox(X[:, cols], times, events, [names[j] for j in cols])
        return 2 * len(cols) - 2 * fit.loglik_partial, fit

    best_aic, best_fit = aic_of(current)
    while current:
        improved = False
        for drop in list(current):
            trial = [j for j in current if j != drop]
            try:
                aic, fit = aic_of(trial)
            except FitError:
                continue
            if aic < best_aic - 1e-10:
                best_aic, best_fit, current = aic, fit, trial
                improved = True
                break
        if not improved:
            break
    return best_fit


@dataclass
class ElasticNetPath:
    alpha: float
    lambda_grid: np.ndarray
    coef_per_lambda: np.ndarray  # n_lambda x p, original scale
    cv_error_per_lambda: np.ndarray
    lambda_selected: float
    fit: CoxFit  # refit at the selected penalty, for prediction
    columns: list[str]


def _cd_quadratic(Xs, w, z, beta, lam, alpha, cols=None, tol=1e-7, max_pass=500):
    """Cyclic coordinate descent on the penalized weighted least squares.

    Only ``cols`` (default: all) are updated. Full sweeps over cols establish
    the working set, then the nonzero coordinates are cycled to convergence,
    and a closing full sweep checks for violations.
    """
    n, p = Xs.shape
    resid = z - Xs @ beta
    Xs = np.asfortranarray(Xs)  # column slices as views in the sweeps
    wX = np.asfortranarray(w[:, None] * Xs)
    wx2 = (wX * Xs).sum(axis=0) / n
    denom = wx2 + lam * (1 - alpha)
    thr = lam * alpha
    passes = 0
    if cols is None:
        cols = np.arange(p)

    def sweep(idx):
        nonlocal passes, resid
        passes += 1
        max_delta = 0.0
        for j in idx:
            bj = beta[j]
            rho = (wX[:, j] @ resid) / n + wx2[j] * bj
            if denom[j] <= 0:
                new = 0.0
            else:
                new = np.sign(rho) * max(abs(rho) - thr, 0.0) / denom[j]
            if new != bj:
                resid += Xs[:, j] * (bj - new)
                beta[j] = new
                max_delta = max(max_delta, abs(new - bj))
        return max_delta

    while passes < max_pass:
        if sweep(cols) < tol:
            break
        active = cols[beta[cols] != 0]
        while passes < max_pass:
            if sweep(active) < tol:
                break
    return beta, passes


def _coxnet_objective(data, lp, beta, lam, alpha):
    n = data.n
    pen = lam * (alpha * np.abs(beta).sum() + 0.5 * (1 - alpha) * (beta**2).sum())
    return -data.pll(lp) / n + pen


def _fit_coxnet_path(Xs, times, events, alpha, lambdas, names):
    """Warm-started path fit on standardized columns; returns coef matrix.

    Uses the sequential strong rule to screen coordinates at each penalty,
    with a KKT check over all coordinates before accepting a solution.
    """
    data = _CoxData(Xs, times, events)
    n, p = data.n, data.p
    coefs = np.zeros((len(lambdas), p))
    beta = np.zeros(p)
    total_passes = 0

    def irls(lam, cand):
        nonlocal beta, total_passes
        obj_prev = _coxnet_objective(data, data.X @ beta, beta, lam, alpha)
        for _outer in range(25):
            lp = data.X @ beta
            u, w = data.lp_derivatives(lp)
            ok = w > 1e-9
            z = np.where(ok, lp + u / np.where(ok, w, 1.0), lp)
            beta_prev = beta.copy()
            beta, passes = _cd_quadratic(
                data.X, w, z, beta.copy(), lam, alpha, cols=cand
            )
            total_passes += passes
            if total_passes > _MAX_CD_PASSES:
                raise FitError(
                    f"coordinate descent exceeded {_MAX_CD_PASSES} passes"
                )
            obj = _coxnet_objective(data, data.X @ beta, beta, lam, alpha)
            # the quadratic approximation can overshoot; fall back toward the
            # previous iterate until the penalized objective is non-increasing
            halvings = 0
            while obj > obj_prev + 1e-12 and halvings < 30:
                beta = 0.5 * (beta + beta_prev)
                obj = _coxnet_objective(data, data.X @ beta, beta, lam, alpha)
                halvings += 1
            assert obj <= obj_prev + 1e-10, "penalized objective increased"
            delta = np.max(np.abs(beta - beta_prev)) if p else 0.0
            converged = abs(obj_prev - obj) < 1e-10 * max(1.0, abs(obj))
            obj_prev = obj
            if converged or delta < 1e-9:
                break

    for li, lam in enumerate(lambdas):
        if alpha > 0 and p > 0:
            lam_prev = lambdas[li - 1] if li > 0 else lam
            u, _ = data.lp_derivatives(data.X @ beta)
            g = np.abs(data.X.T @ u) / n
            strong = g >= alpha * (2 * lam - lam_prev) - 1e-12
            cand = np.where(strong | (beta != 0))[0]
            while True:
                irls(lam, cand)
                u, _ = data.lp_derivatives(data.X @ beta)
                g = np.abs(data.X.T @ u) / n
                out = np.ones(p, dtype=bool)
                out[cand] = False
                viol = np.where(out & (g > alpha * lam + 1e-9))[0]
                if viol.size == 0:
                    break
                cand = np.union1d(cand, viol)
        else:
            irls(lam, None)
        coefs[li] = beta
    return coefs


def _stratified_folds(events, n_folds, rng):
    """Fold ids stratified on the event indicator."""
    events = np.asarray(events, dtype=int)
    fold = np.empty(len(events), dtype=int)
    offset = 0
    for cls in (1, 0):
        idx = np.where(events == cls)[0]
        idx = rng.permutation(idx)
        # continue the round-robin across strata so total fold sizes stay
        # balanced as well as per-stratum counts
        fold[idx] = (offset + np.arange(len(idx))) % n_folds
        offset += len(idx)
    return fold


def fit_coxnet(
    X,
    times,
    events,
    alpha=1.0,
    n_lambda=100,
    n_folds=10,
    columns=None,
    seed=0,
    lambda_min_ratio=1e-3,
    extra_lambdas=(),
) -> ElasticNetPath:
    """Elastic-net penalized Cox along a warm-started penalty path.

    The penalty is selected by K-fold cross-validated partial-likelihood
    deviance; coefficients are reported on the original column scale.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    times = np.asarray(times, dtype=float)
    events_arr = np.asarray(events, dtype=int)
    names = _column_names(X.shape[1], columns)
    if n_folds > len(times):
        raise ValueError("more folds than subjects")
    means = X.mean(axis=0)
    sds = X.std(axis=0)
    sds_safe = np.where(sds > 0, sds, 1.0)
    Xs = (X - means) / sds_safe

    data_full = _CoxData(Xs, times, events_arr)
    u0, _ = data_full.lp_derivatives(np.zeros(data_full.n))
    grad0 = np.abs(data_full.X.T @ u0) / data_full.n
    lam_max = float(grad0.max()) / max(alpha, 1e-3)
    if lam_max <= 0:
        lam_max = 1.0
    lambdas = np.geomspace(lam_max, lambda_min_ratio * lam_max, n_lambda)
    if extra_lambdas:
        lambdas = np.concatenate([lambdas, np.asarray(extra_lambdas, dtype=float)])

    rng = np.random.default_rng(seed)
    folds = _stratified_folds(events_arr, n_folds, rng)
    cv_dev = np.zeros(len(lambdas))
    for k in range(n_folds):
        train = folds != k
        test = folds == k
        if events_arr[train].sum() == 0 or events_arr[test].sum() == 0:
            # stratified assignment should prevent this; refold if not
            folds = _stratified_folds(events_arr, n_folds, rng)
            train, test = folds != k, folds == k
        coefs_k = _fit_coxnet_path(
            Xs[train], times[train], events_arr[train], alpha, lambdas, names
        )
        data_test = _CoxData(Xs[test], times[test], events_arr[test])
        for li in range(len(lambdas)):
            lp_test = data_test.X @ coefs_k[li]
            cv_dev[li] += -2.0 * data_test.pll(lp_test)

    best = int(np.argmin(cv_dev))
    coefs_std = _fit_coxnet_path(Xs, times, events_arr, alpha, lambdas, names)
    coefs_orig = coefs_std / sds_safe
    beta = coefs_orig[best]

    data_orig = _CoxData(X - means, times, events_arr)
    lp = data_orig.X @ beta
    fit = CoxFit(
        coef=beta,
        columns=names,
        means=means,
        sds=sds,
        baseline_chf=data_orig.breslow_baseline(lp),
        loglik_partial=data_orig.pll(lp),
        selected=[names[j] for j in np.where(beta != 0)[0]],
    )
    return ElasticNetPath(
        alpha=alpha,
        lambda_grid=lambdas,
        coef_per_lambda=coefs_orig,
        cv_error_per_lambda=cv_dev,
        lambda_selected=float(lambdas[best]),
        fit=fit,
        columns=names,
    )


def predict_cox_probability(fit: CoxFit, rows, t_hor) -> np.ndarray:
    """Event probability by the horizon: 1 - exp(-CHF0(t_hor) e^lp)."""
    rows = np.atleast_2d(np.asarray(rows, dtype=float))
    if rows.shape[1] != len(fit.columns):
        raise ValueError(
            f"row has {rows.shape[1]} columns, fit expects {len(fit.columns)}"
        )
    lp = fit.linear_predictor(rows)
    chf0 = float(fit.baseline_chf(t_hor))
    return 1.0 - np.exp(-chf0 * np.exp(lp))
