"""Mixed models for marker histories and subject-level random-effect prediction.

One model per marker: a Gaussian linear mixed model (identity link) fit by
exact marginal maximum likelihood, or a logistic mixed model (logit link)
fit by Laplace-approximated maximum likelihood. Random-effect covariance is
parameterized through its Cholesky factor. Subject-level deviations are
recovered by the closed-form BLUP (identity) or the posterior mode (logit).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import FitError
from .splines import BasisSpec, basis_matrix

SERIES = list[tuple[np.ndarray, np.ndarray]]  # per subject: (times, values)

_SIGMA2_FLOOR = 1e-10
_MAX_ITER = 500


@dataclass
class MixedModelFit:
    marker_id: str
    link: str  # "identity" | "logit"
    beta: np.ndarray
    B: np.ndarray
    sigma2: float | None
    basis_fixed: BasisSpec
    basis_random: BasisSpec
    origin: float  # times are re-centered to t - origin before basis evaluation
    loglik: float
    converged: bool = True

    def design(self, times):
        s = np.asarray(times, dtype=float) - self.origin
        return basis_matrix(s, self.basis_fixed), basis_matrix(s, self.basis_random)

    def to_dict(self) -> dict:
        return {
            "format": "landcast-mixed-model",
            "version": 1,
            "marker_id": self.marker_id,
            "link": self.link,
            "beta": self.beta.tolist(),
            "chol_B": np.linalg.cholesky(
                self.B + 1e-12 * np.eye(len(self.B))
            ).tolist(),
            "sigma2": self.sigma2,
            "basis_fixed": self.basis_fixed.to_dict(),
            "basis_random": self.basis_random.to_dict(),
            "origin": self.origin,
            "loglik": self.loglik,
        }

    @staticmethod
    def from_dict(d: dict) -> "MixedModelFit":
        if d.get("format") != "landcast-mixed-model":
            raise ValueError("not a mixed-model document")
        L = np.asarray(d["chol_B"])
        return MixedModelFit(
            marker_id=d["marker_id"],
            link=d["link"],
            beta=np.asarray(d["beta"]),
            B=L @ L.T,
            sigma2=d["sigma2"],
            basis_fixed=BasisSpec.from_dict(d["basis_fixed"]),
            basis_random=BasisSpec.from_dict(d["basis_random"]),
            origin=d["origin"],
            loglik=d["loglik"],
        )


def _group_by_length(series: SERIES, fixed, random, origin):
    """Stack per-subject designs into one batch per observation count."""
    groups = {}
    for idx, (ts, ys) in enumerate(series):
        n = len(ts)
        if n == 0:
            continue
        groups.setdefault(n, []).append(idx)
    batches = []
    for n, idxs in sorted(groups.items()):
        X = np.empty((len(idxs), n, fixed.n_basis))
        Z = np.empty((len(idxs), n, random.n_basis))
        y = np.empty((len(idxs), n))
        for row, i in enumerate(idxs):
            ts, ys = series[i]
            s = np.asarray(ts, dtype=float) - origin
            X[row] = basis_matrix(s, fixed)
            Z[row] = basis_matrix(s, random)
            y[row] = ys
        batches.append({"idx": np.asarray(idxs), "X": X, "Z": Z, "y": y, "n": n})
    return batches


def _chol_param_unpack(theta, q):
    """Lower-triangular factor from the flat parameter vector."""
    L = np.zeros((q, q))
    L[np.tril_indices(q)] = theta
    return L


def _chol_param_size(q):
    return q * (q + 1) // 2


def _lmm_profiled_neg2ll(theta, batches, p, q):
    """-2 x profiled (over beta) marginal log-likelihood; also beta, sigma2."""
    L = _chol_param_unpack(theta[:-1], q)
    B = L @ L.T
    sigma2 = max(np.exp(theta[-1]), _SIGMA2_FLOOR)
    A = np.zeros((p, p))
    c = np.zeros(p)
    yvy = 0.0
    logdet = 0.0
    n_total = 0
    for g in batches:
        X, Z, y, n = g["X"], g["Z"], g["y"], g["n"]
        V = Z @ B @ Z.transpose(0, 2, 1) + sigma2 * np.eye(n)
        try:
            C = np.linalg.cholesky(V)
        except np.linalg.LinAlgError:
            return np.inf, None, None
        logdet += 2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2)))
        # whiten: solve C a = rhs
        rhs = np.concatenate([X, y[:, :, None]], axis=2)
        sol = np.linalg.solve(C, rhs)
        Xw, yw = sol[:, :, :p], sol[:, :, p]
        A += np.einsum("mij,mik->jk", Xw, Xw)
        c += np.einsum("mij,mi->j", Xw, yw)
        yvy += np.sum(yw * yw)
        n_total += y.size
    try:
        beta = np.linalg.solve(A, c)
    except np.linalg.LinAlgError:
        return np.inf, None, None
    neg2ll = n_total * np.log(2 * np.pi) + logdet + yvy - c @ beta
    return neg2ll, beta, (B, sigma2)


def lmm_marginal_loglik(series, fixed, random, origin, beta, B, sigma2):
    """Exact Gaussian marginal log-likelihood at given parameters."""
    batches = _group_by_length(series, fixed, random, origin)
    total = 0.0
    for g in batches:
        X, Z, y, n = g["X"], g["Z"], g["y"], g["n"]
        V = Z @ B @ Z.transpose(0, 2, 1) + sigma2 * np.eye(n)
        C = np.linalg.cholesky(V)
        r = y - X @ beta
        rw = np.linalg.solve(C, r[:, :, None])[:, :, 0]
        logdet = 2.0 * np.sum(np.log(np.diagonal(C, axis1=1, axis2=2)))
        total += -0.5 * (y.size * np.log(2 * np.pi) + logdet + np.sum(rw * rw))
    return float(total)


def fit_lmm(
    series: SERIES,
    fixed: BasisSpec,
    random: BasisSpec,
    origin: float = 0.0,
    marker_id: str = "marker",
) -> MixedModelFit:
    """Fit a Gaussian linear mixed model by marginal maximum likelihood."""
    batches = _group_by_length(series, fixed, random, origin)
    if not batches:
        raise FitError("no observations to fit")
    p, q = fixed.n_basis, random.n_basis
    X_pool = np.concatenate([g["X"].reshape(-1, p) for g in batches])
    y_pool = np.concatenate([g["y"].reshape(-1) for g in batches])
    if np.linalg.matrix_rank(X_pool) < p:
        raise FitError("singular pooled fixed-effect design")

    beta_ols, *_ = np.linalg.lstsq(X_pool, y_pool, rcond=None)
    resid = y_pool - X_pool @ beta_ols
    s2 = max(float(np.var(resid)), 1e-6)
    theta0 = np.zeros(_chol_param_size(q) + 1)
    diag_idx = np.cumsum(np.arange(1, q + 1)) - 1
    theta0[diag_idx] = np.sqrt(s2 / 2.0)
    theta0[-1] = np.log(s2 / 2.0)

    def objective(theta):
        val, _, _ = _lmm_profiled_neg2ll(theta, batches, p, q)
        return val

    res = optimize.minimize(
        objective,
        theta0,
        method="L-BFGS-B",
        bounds=[(None, None)] * _chol_param_size(q) + [(np.log(_SIGMA2_FLOOR), 50.0)],
        options={"maxiter": _MAX_ITER, "ftol": 1e-12, "gtol": 1e-7},
    )
    neg2ll, beta, var = _lmm_profiled_neg2ll(res.x, batches, p, q)
    if not np.isfinite(neg2ll) or beta is None:
        raise FitError(
            "mixed-model likelihood maximization failed",
            payload={"result": res},
        )
    B, sigma2 = var
    converged = bool(res.success) or res.status == 0
    if not converged and np.max(np.abs(res.jac)) > 1e-2:
        raise FitError(
            f"mixed model did not converge after {res.nit} iterations "
            f"(gradient inf-norm {np.max(np.abs(res.jac)):.2e})",
            payload={"beta": beta, "B": B, "sigma2": sigma2, "result": res},
        )
    return MixedModelFit(
        marker_id=marker_id,
        link="identity",
        beta=beta,
        B=B,
        sigma2=float(sigma2),
        basis_fixed=fixed,
        basis_random=random,
        origin=origin,
        loglik=-0.5 * float(neg2ll),
        converged=converged,
    )


def _log1pexp(x):
    return np.logaddexp(0.0, x)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _logistic_newton(X, y, max_iter=100):
    """Plain fixed-effects logistic regression with separation detection."""
    p = X.shape[1]
    beta = np.zeros(p)
    for _ in range(max_iter):
        eta = X @ beta
        mu = _sigmoid(eta)
        w = mu * (1 - mu)
        grad = X.T @ (y - mu)
        H = (X * w[:, None]).T @ X + 1e-10 * np.eye(p)
        try:
            step = np.linalg.solve(H, grad)
        except np.linalg.LinAlgError:
            raise FitError("singular information in logistic fit") from None
        beta = beta + step
        if np.max(np.abs(beta)) > 1e3:
            raise FitError("complete separation in the pooled fixed design")
        if np.max(np.abs(grad)) < 1e-10:
            break
    ll = float(np.sum(y * (X @ beta) - _log1pexp(X @ beta)))
    return beta, ll


def _posterior_modes(batches, beta, B_inv, b_init=None, max_iter=50):
    """Per-subject Newton ascent of the joint log-density over random effects.

    Returns modes, the summed penalized data log-density, and the summed
    log-determinant term of the Laplace correction.
    """
    q = B_inv.shape[0]
    total_ll = 0.0
    total_logdet = 0.0
    modes = {}
    for g in batches:
        X, Z, y = g["X"], g["Z"], g["y"]
        m = X.shape[0]
        b = np.zeros((m, q)) if b_init is None else b_init[g["idx"]].copy()
        fix = X @ beta
        for _ in range(max_iter):
            eta = fix + np.einsum("mij,mj->mi", Z, b)
            mu = _sigmoid(eta)
            grad = np.einsum("mij,mi->mj", Z, y - mu) - b @ B_inv
            w = mu * (1 - mu)
            H = np.einsum("mij,mi,mik->mjk", Z, w, Z) + B_inv
            step = np.linalg.solve(H, grad[:, :, None])[:, :, 0]
            b = b + step
            if np.max(np.abs(grad)) < 1e-9:
                break
        eta = fix + np.einsum("mij,mj->mi", Z, b)
        mu = _sigmoid(eta)
        w = mu * (1 - mu)
        H = np.einsum("mij,mi,mik->mjk", Z, w, Z) + B_inv
        sign, logdet = np.linalg.slogdet(H)
        total_logdet += float(np.sum(logdet))
        total_ll += float(
            np.sum(y * eta - _log1pexp(eta)) - 0.5 * np.sum((b @ B_inv) * b)
        )
        modes[g["n"]] = (g["idx"], b)
        total_ll += 0.0
    return modes, total_ll, total_logdet


def fit_glmm_logistic(
    series: SERIES,
    fixed: BasisSpec,
    random: BasisSpec,
    origin: float = 0.0,
    marker_id: str = "marker",
    no_random_effects: bool = False,
) -> MixedModelFit:
    """Fit a logistic mixed model via the Laplace-approximated likelihood.

    With no_random_effects the random-effect covariance is pinned to zero and
    the fit reduces to plain fixed-effects logistic regression.
    """
    batches = _group_by_length(series, fixed, random, origin)
    if not batches:
        raise FitError("no observations to fit")
    p, q = fixed.n_basis, random.n_basis
    y_pool = np.concatenate([g["y"].reshape(-1) for g in batches])
    if len(np.unique(y_pool)) < 2:
        raise FitError("outcome has a single class; cannot fit logistic model")
    X_pool = np.concatenate([g["X"].reshape(-1, p) for g in batches])

    beta_glm, ll_glm = _logistic_newton(X_pool, y_pool)
    if no_random_effects:
        return MixedModelFit(
            marker_id=marker_id,
            link="logit",
            beta=beta_glm,
            B=np.zeros((q, q)),
            sigma2=None,
            basis_fixed=fixed,
            basis_random=random,
            origin=origin,
            loglik=ll_glm,
        )

    n_chol = _chol_param_size(q)
    diag_idx = np.cumsum(np.arange(1, q + 1)) - 1
    off_mask = np.ones(n_chol, dtype=bool)
    off_mask[diag_idx] = False

    def unpack(theta):
        beta = theta[:p]
        raw = theta[p:]
        vec = np.empty(n_chol)
        vec[diag_idx] = np.exp(raw[diag_idx])  # keep B positive definite
        vec[off_mask] = raw[off_mask]
        L = _chol_param_unpack(vec, q)
        return beta, L

    def neg_laplace_ll(theta):
        beta, L = unpack(theta)
        B = L @ L.T
        try:
            B_inv = np.linalg.inv(B)
        except np.linalg.LinAlgError:
            return np.inf
        _, pen_ll, logdet_H = _posterior_modes(batches, beta, B_inv)
        sign, logdet_B = np.linalg.slogdet(B)
        if sign <= 0:
            return np.inf
        # marginal ll ~ penalized ll - (logdet B + logdet H)/2
        return -(pen_ll - 0.5 * (logdet_B + logdet_H))

    theta0 = np.concatenate([beta_glm, np.zeros(n_chol)])
    theta0[p + diag_idx] = np.log(0.5)
    res = optimize.minimize(
        neg_laplace_ll,
        theta0,
        method="L-BFGS-B",
        options={"maxiter": _MAX_ITER, "ftol": 1e-11},
    )
    if not np.isfinite(res.fun):
        raise FitError("Laplace likelihood maximization failed", payload={"result": res})
    beta, L = unpack(res.x)
    if np.max(np.abs(beta)) > 1e3:
        raise FitError("complete separation in the pooled fixed design")
    return MixedModelFit(
        marker_id=marker_id,
        link="logit",
        beta=beta,
        B=L @ L.T,
        sigma2=None,
        basis_fixed=fixed,
        basis_random=random,
        origin=origin,
        loglik=-float(res.fun),
        converged=bool(res.success) or res.status == 0,
    )


def predict_random_effects(fit: MixedModelFit, times, values) -> np.ndarray:
    """Subject-level random-effect prediction.

    Identity link: closed-form BLUP B Z' V^-1 (y - X beta). Logit link:
    posterior mode of the random effects given the observations. Subjects
    with no observations get the prior mean (zeros).
    """
    q = fit.basis_random.n_basis
    times = np.asarray(times, dtype=float)
    values = np.asarray(values, dtype=float)
    if times.size == 0:
        return np.zeros(q)
    X, Z = fit.design(times)
    if fit.link == "identity":
        V = Z @ fit.B @ Z.T + fit.sigma2 * np.eye(len(times))
        r = values - X @ fit.beta
        return fit.B @ Z.T @ np.linalg.solve(V, r)
    # logit: Newton ascent on the joint log-density
    if np.allclose(fit.B, 0):
        return np.zeros(q)
    B_inv = np.linalg.inv(fit.B)
    b = np.zeros(q)
    fix = X @ fit.beta
    for _ in range(100):
        eta = fix + Z @ b
        mu = _sigmoid(eta)
        grad = Z.T @ (values - mu) - B_inv @ b
        H = (Z * (mu * (1 - mu))[:, None]).T @ Z + B_inv
        b = b + np.linalg.solve(H, grad)
        if np.max(np.abs(grad)) < 1e-10:
            break
    return b
