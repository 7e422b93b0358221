"""Synthetic landmark cohorts with known true conditional probabilities.

Seventeen continuous markers follow subject-level polynomial trajectories
(intercept-only up to cubic random-effect structures) observed with Gaussian
noise at five jittered visits before the landmark. The risk score eta is a
configurable function (linear, with interactions, or nonlinear) of the
error-free trajectory summaries and ten baseline covariates; event times
come from inverting the conditional Weibull proportional-hazards survival
given being at risk at the landmark. The exact trajectory shapes and Weibull
parameters are declared defaults (recorded in the manifest), not literature
values.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import LongitudinalTable, SurvivalRecord

# polynomial degree of the random-effect structure per marker
# (degree d -> d + 1 random effects): 4 intercept-only, 5 linear,
# 5 quadratic, 3 cubic, for 41 random effects and 92 summaries in total
MARKER_DEGREES = (0,) * 4 + (1,) * 5 + (2,) * 5 + (3,) * 3

# per-order scale of the polynomial coefficients (intercept, t, t^2, t^3)
_ORDER_SCALE = np.array([1.0, 0.3, 0.08, 0.02])

# master seed for the population model: fixed so every replicate of a
# scenario shares the same trajectory shapes and noise levels
_POPULATION_SEED = 20240817

_N_VISITS = 5
_VISIT_JITTER_SD = 0.15
_N_NORMAL_COV = 5
_N_BINARY_COV = 5


def marker_names() -> list[str]:
    return [f"m{k + 1:02d}" for k in range(len(MARKER_DEGREES))]


def covariate_names() -> list[str]:
    return [f"x_n{j + 1}" for j in range(_N_NORMAL_COV)] + [
        f"x_b{j + 1}" for j in range(_N_BINARY_COV)
    ]


def summary_names() -> list[str]:
    """Column names of the true summary matrix, matching the design layout."""
    names = []
    for m, deg in zip(marker_names(), MARKER_DEGREES):
        names.extend(f"{m}.re{j}" for j in range(deg + 1))
        names.extend([f"{m}.level", f"{m}.slope", f"{m}.cum"])
    return names


_LINKS = ("linear", "linear-with-interactions", "nonlinear")


@dataclass(frozen=True)
class ScenarioSpec:
    n_subjects: int = 500
    n_active_summaries: int = 4
    link: str = "linear"
    weibull_shape: float = 1.5
    # calibrated so ~35% of at-risk subjects have events within the horizon
    # under the null link
    weibull_scale: float = 8.42
    t_lm: float = 4.0
    t_hor: float = 3.0
    censoring_range: float = 10.0  # C = t_lm + Uniform(0, range); ~30% < horizon
    eta_sd: float = 1.0  # risk scores are centered and rescaled to this SD
    coefficients: tuple = ()  # per active summary; defaults to alternating +-1
    covariate_coefficients: tuple = ()  # defaults to all zero (noise columns)
    interaction_strength: float = 0.5
    active_summaries: tuple = ()  # summary names; empty -> drawn from the seed
    transforms: tuple = ()  # nonlinear transforms; empty -> drawn from the seed
    seed: int = 0

    def __post_init__(self):
        if self.link not in _LINKS:
            raise ValueError(f"link must be one of {_LINKS}")
        if self.weibull_shape <= 0 or self.weibull_scale <= 0:
            raise ValueError("Weibull shape and scale must be positive")
        if not 0 < self.n_active_summaries <= len(summary_names()):
            raise ValueError("n_active_summaries out of range")
        if self.coefficients and len(self.coefficients) != self.n_active_summaries:
            raise ValueError("coefficients must match n_active_summaries")
        if self.covariate_coefficients and len(self.covariate_coefficients) != (
            _N_NORMAL_COV + _N_BINARY_COV
        ):
            raise ValueError("need one coefficient per covariate")
        if self.active_summaries:
            if len(self.active_summaries) != self.n_active_summaries:
                raise ValueError("active_summaries must match n_active_summaries")
            bad = set(self.active_summaries) - set(summary_names())
            if bad:
                raise ValueError(f"unknown summary name(s): {sorted(bad)}")
        if self.transforms:
            if len(self.transforms) != self.n_active_summaries:
                raise ValueError("need one transform per active summary")
            bad = set(self.transforms) - {"square", "cube", "indicator"}
            if bad:
                raise ValueError(f"unknown transform(s): {sorted(bad)}")

    def active_indices(self) -> np.ndarray:
        """Active summary columns (explicit list, or drawn from the seed)."""
        if self.active_summaries:
            names = summary_names()
            return np.sort([names.index(s) for s in self.active_summaries])
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 91)))
        return np.sort(
            rng.choice(len(summary_names()), self.n_active_summaries, replace=False)
        )

    def active_coefficients(self) -> np.ndarray:
        if self.coefficients:
            return np.asarray(self.coefficients, dtype=float)
        signs = np.where(np.arange(self.n_active_summaries) % 2 == 0, 1.0, -1.0)
        return signs

    def nonlinear_transforms(self) -> list[str]:
        """One transform per active summary (explicit, or seed-drawn)."""
        if self.transforms:
            return list(self.transforms)
        rng = np.random.default_rng(np.random.SeedSequence((self.seed, 92)))
        choices = ("square", "cube", "indicator")
        return [choices[i] for i in rng.integers(0, len(choices), self.n_active_summaries)]

    def to_dict(self) -> dict:
        return {
            "n_subjects": self.n_subjects,
            "n_active_summaries": self.n_active_summaries,
            "link": self.link,
            "weibull_shape": self.weibull_shape,
            "weibull_scale": self.weibull_scale,
            "t_lm": self.t_lm,
            "t_hor": self.t_hor,
            "censoring_range": self.censoring_range,
            "eta_sd": self.eta_sd,
            "coefficients": list(self.active_coefficients()),
            "covariate_coefficients": list(self.covariate_coefficients),
            "interaction_strength": self.interaction_strength,
            "active_summaries": list(self.active_summaries),
            "transforms": list(self.transforms),
            "seed": self.seed,
        }

    @staticmethod
    def from_dict(d: dict) -> "ScenarioSpec":
        known = {f for f in ScenarioSpec.__dataclass_fields__}
        kwargs = {k: v for k, v in d.items() if k in known}
        for tup in ("coefficients", "covariate_coefficients", "active_summaries", "transforms"):
            if tup in kwargs:
                kwargs[tup] = tuple(kwargs[tup])
        return ScenarioSpec(**kwargs)


@dataclass
class _Population:
    """Shared-across-replicates trajectory model for the 17 markers."""

    fixed_coef: list  # per marker, polynomial coefficients (ascending order)
    re_sds: list  # per marker, random-effect SDs
    noise_sd: np.ndarray


def population_model() -> _Population:
    rng = np.random.default_rng(_POPULATION_SEED)
    fixed, re_sds = [], []
    for deg in MARKER_DEGREES:
        fixed.append(rng.normal(size=deg + 1) * _ORDER_SCALE[: deg + 1])
        re_sds.append(_ORDER_SCALE[: deg + 1].copy())
    noise_sd = 0.3 + rng.uniform(0.0, 0.2, size=len(MARKER_DEGREES))
    return _Population(fixed_coef=fixed, re_sds=re_sds, noise_sd=noise_sd)


def _poly_eval(coef, t):
    return np.polynomial.polynomial.polyval(t, coef)


def _poly_deriv(coef, t):
    return np.polynomial.polynomial.polyval(t, np.polynomial.polynomial.polyder(coef))


def _poly_integral(coef, lo, hi):
    anti = np.polynomial.polynomial.polyint(coef)
    return _poly_eval(anti, hi) - _poly_eval(anti, lo)


def true_summaries(b_by_marker: list, t_lm: float) -> np.ndarray:
    """Error-free summary matrix from per-marker random-effect draws.

    Random-effect entries are the subject deviations; level, slope and
    cumulative level include the population mean curve. The cumulative
    window is the full history [0, t_lm].
    """
    pop = population_model()
    cols = []
    for k, b in enumerate(b_by_marker):
        coef = pop.fixed_coef[k][None, :] + b  # (n, deg+1) subject polynomials
        cols.append(b)
        cols.append(_poly_eval_rows(coef, t_lm)[:, None])
        cols.append(_poly_deriv_rows(coef, t_lm)[:, None])
        cols.append(_poly_integral_rows(coef, 0.0, t_lm)[:, None])
    return np.hstack(cols)


def _poly_eval_rows(coef_rows, t):
    powers = t ** np.arange(coef_rows.shape[1])
    return coef_rows @ powers


def _poly_deriv_rows(coef_rows, t):
    d = coef_rows.shape[1]
    if d == 1:
        return np.zeros(coef_rows.shape[0])
    j = np.arange(1, d)
    return coef_rows[:, 1:] @ (j * t ** (j - 1))


def _poly_integral_rows(coef_rows, lo, hi):
    j = np.arange(coef_rows.shape[1]) + 1.0
    return coef_rows @ ((hi**j - lo**j) / j)


def scenario_link(gamma0, x0, spec: ScenarioSpec) -> np.ndarray:
    """Raw risk score from true summaries and covariates (not yet rescaled)."""
    gamma0 = np.atleast_2d(np.asarray(gamma0, dtype=float))
    x0 = np.atleast_2d(np.asarray(x0, dtype=float))
    active = spec.active_indices()
    nu = spec.active_coefficients()
    A = gamma0[:, active]
    if spec.link == "nonlinear":
        # polynomial transforms act on centered columns so that squares are
        # symmetric (non-monotone) rather than dominated by the column mean
        Ac = A - A.mean(axis=0)
        T = A.copy()
        for j, kind in enumerate(spec.nonlinear_transforms()):
            if kind == "square":
                T[:, j] = Ac[:, j] ** 2
            elif kind == "cube":
                T[:, j] = Ac[:, j] ** 3
            else:
                T[:, j] = (A[:, j] > np.median(A[:, j])).astype(float)
        eta = T @ nu
    else:
        eta = A @ nu
        if spec.link == "linear-with-interactions":
            half = max(len(active) // 2, 2)
            for i in range(half):
                for j in range(i + 1, half):
                    eta = eta + spec.interaction_strength * A[:, i] * A[:, j]
    if len(spec.covariate_coefficients):
        eta = eta + x0 @ np.asarray(spec.covariate_coefficients, dtype=float)
    return eta


def true_probability(spec: ScenarioSpec, eta) -> np.ndarray:
    """Closed-form conditional Weibull probability of an event by the horizon.

    pi0 = 1 - S(t_lm + t_hor | eta) / S(t_lm | eta) with
    S(t | eta) = exp(-(t / scale)^shape * exp(eta)).
    """
    a, b = spec.weibull_shape, spec.weibull_scale
    gap = ((spec.t_lm + spec.t_hor) / b) ** a - (spec.t_lm / b) ** a
    return 1.0 - np.exp(-gap * np.exp(np.asarray(eta, dtype=float)))


@dataclass
class GeneratedCohort:
    spec: ScenarioSpec
    data_seed: int
    survival: list  # SurvivalRecord, all at risk at the landmark
    longitudinal: LongitudinalTable
    gamma0: np.ndarray  # n x 92 error-free summaries
    x0: np.ndarray  # n x 10 covariates
    eta: np.ndarray  # final (rescaled) risk scores
    pi0: np.ndarray  # true conditional probabilities
    event_times: np.ndarray = field(repr=False, default=None)
    cens_times: np.ndarray = field(repr=False, default=None)

    @property
    def subject_ids(self) -> list[str]:
        return [r.subject_id for r in self.survival]

    def manifest(self) -> dict:
        return {
            "format": "landcast-sim-manifest",
            "version": 1,
            "spec": self.spec.to_dict(),
            "data_seed": self.data_seed,
            "population_seed": _POPULATION_SEED,
            "parameters_are_declared_defaults": True,
            "marker_degrees": list(MARKER_DEGREES),
            "active_summaries": [
                summary_names()[i] for i in self.spec.active_indices()
            ],
            "nonlinear_transforms": (
                self.spec.nonlinear_transforms()
                if self.spec.link == "nonlinear"
                else None
            ),
            "n_subjects": len(self.survival),
            "event_fraction_by_horizon": float(
                np.mean(
                    [
                        (r.t_obs < self.spec.t_lm + self.spec.t_hor) and r.event == 1
                        for r in self.survival
                    ]
                )
            ),
        }


def simulate_cohort(spec: ScenarioSpec, seed: int | None = None) -> GeneratedCohort:
    """Draw one cohort of subjects at risk at the landmark.

    ``seed`` overrides the data randomness (for replicates); the active
    summary set and nonlinear transforms always come from ``spec.seed``.
    """
    data_seed = spec.seed if seed is None else seed
    rng = np.random.default_rng(np.random.SeedSequence((data_seed, 17)))
    pop = population_model()
    n = spec.n_subjects
    names = marker_names()

    b_by_marker = [
        rng.normal(size=(n, deg + 1)) * np.asarray(pop.re_sds[k])
        for k, deg in enumerate(MARKER_DEGREES)
    ]
    gamma0 = true_summaries(b_by_marker, spec.t_lm)

    x0 = np.column_stack(
        [rng.normal(size=(n, _N_NORMAL_COV))]
        + [rng.binomial(1, 0.5, size=(n, _N_BINARY_COV)).astype(float)]
    )

    eta = scenario_link(gamma0, x0, spec)
    sd = eta.std()
    if sd > 1e-12:
        eta = (eta - eta.mean()) / sd * spec.eta_sd
    else:
        eta = np.zeros(n)
    pi0 = true_probability(spec, eta)

    # event time conditional on being at risk at the landmark, by inversion
    a, b = spec.weibull_shape, spec.weibull_scale
    u = rng.uniform(size=n)
    t_event = b * ((spec.t_lm / b) ** a - np.log(u) * np.exp(-eta)) ** (1.0 / a)
    t_cens = spec.t_lm + rng.uniform(0.0, spec.censoring_range, size=n)
    t_obs = np.minimum(t_event, t_cens)
    event = (t_event <= t_cens).astype(int)

    # visit times jittered around the theoretical grid, kept within [0, t_lm]
    theoretical = spec.t_lm + np.arange(-_N_VISITS + 1, 1, dtype=float)
    visit_times = np.clip(
        theoretical[None, None, :]
        + rng.normal(0.0, _VISIT_JITTER_SD, size=(n, len(names), _N_VISITS)),
        0.0,
        spec.t_lm,
    )

    ids = [f"s{i + 1:04d}" for i in range(n)]
    series = {}
    for k, m in enumerate(names):
        coef = pop.fixed_coef[k][None, :] + b_by_marker[k]
        for i in range(n):
            ts = np.sort(visit_times[i, k])
            vals = _poly_eval(coef[i], ts) + rng.normal(
                0.0, pop.noise_sd[k], size=len(ts)
            )
            series[(ids[i], m)] = (ts, vals)
    longitudinal = LongitudinalTable(
        natures={m: "continuous" for m in names}, series=series
    )

    cov_names = covariate_names()
    survival = [
        SurvivalRecord(
            subject_id=ids[i],
            t_obs=float(t_obs[i]),
            event=int(event[i]),
            covariates={c: float(x0[i, j]) for j, c in enumerate(cov_names)},
        )
        for i in range(n)
    ]
    return GeneratedCohort(
        spec=spec,
        data_seed=data_seed,
        survival=survival,
        longitudinal=longitudinal,
        gamma0=gamma0,
        x0=x0,
        eta=eta,
        pi0=pi0,
        event_times=t_event,
        cens_times=t_cens,
    )


def write_cohort(cohort: GeneratedCohort, out_dir) -> dict[str, str]:
    """Write survival.csv, longitudinal.csv, truth.csv and manifest.json."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cov_names = covariate_names()

    surv_path = out / "survival.csv"
    with open(surv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time", "event"] + cov_names)
        for r in cohort.survival:
            w.writerow(
                [r.subject_id, f"{r.t_obs:.10g}", r.event]
                + [f"{r.covariates[c]:.10g}" for c in cov_names]
            )

    long_path = out / "longitudinal.csv"
    with open(long_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "marker", "time", "value"])
        for sid in cohort.subject_ids:
            for m in marker_names():
                ts, vals = cohort.longitudinal.get(sid, m)
                for t, v in zip(ts, vals):
                    w.writerow([sid, m, f"{t:.10g}", f"{v:.10g}"])

    truth_path = out / "truth.csv"
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "eta", "pi0"])
        for i, sid in enumerate(cohort.subject_ids):
            w.writerow([sid, f"{cohort.eta[i]:.10g}", f"{cohort.pi0[i]:.10g}"])

    manifest_path = out / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(cohort.manifest(), fh, indent=2, sort_keys=True)
        fh.write("\n")

    return {
        "survival": str(surv_path),
        "longitudinal": str(long_path),
        "truth": str(truth_path),
        "manifest": str(manifest_path),
    }
