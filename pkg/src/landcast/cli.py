"""Config-driven command-line front end.

One JSON configuration document drives every command; flags only override
paths and the seed. All outputs carry a hash of the resolved configuration
so runs are traceable and reproducible. Exit codes: 0 success, 2 config
error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
import warnings
from pathlib import Path

import numpy as np

from .dataset import landmark_filter, load_longitudinal, load_survival
from .ensemble import (
    SUPERLEARNER,
    SuperLearnerWeights,
    fit_longitudinal_models,
    make_fold_plan,
    run_pipeline_cv,
    superlearner_predict,
    superlearner_weights,
    training_arrays,
)
from .errors import ConfigError, DataError, FitError
from .evalmetrics import metric_report
from .longitudinal import MixedModelFit
from .methods import METHOD_NAMES, TrainedMethod, fit_method
from .simgen import ScenarioSpec, simulate_cohort, write_cohort
from .summaries import assemble_design
from .survreg import _stratified_folds

_EXIT_CONFIG = 2
_EXIT_DATA = 3
_EXIT_NUMERIC = 4


def _load_config(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            cfg = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config is not valid JSON: {err}") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config must be a JSON object")
    return cfg


def config_hash(cfg: dict) -> str:
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _out_dir(cfg, args) -> Path:
    out = args.out or cfg.get("paths", {}).get("output")
    if not out:
        raise ConfigError("no output directory (config paths.output or --out)")
    path = Path(out)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _require(cfg, key):
    if key not in cfg:
        raise ConfigError(f"config is missing required key {key!r}")
    return cfg[key]


def _load_cohort(cfg):
    paths = _require(cfg, "paths")
    natures = {
        m: (spec.get("nature", "continuous") if isinstance(spec, dict) else spec)
        for m, spec in _require(cfg, "markers").items()
    }
    survival = load_survival(_require(paths, "survival"))
    longitudinal = load_longitudinal(_require(paths, "longitudinal"), natures)
    return landmark_filter(
        survival,
        longitudinal,
        float(_require(cfg, "t_lm")),
        float(_require(cfg, "t_hor")),
    )


def _methods_from_config(cfg) -> list[str]:
    methods = _require(cfg, "methods")
    valid = set(METHOD_NAMES) | {SUPERLEARNER}
    unknown = [m for m in methods if m not in valid]
    if unknown:
        raise ConfigError(f"unknown method name(s): {unknown}")
    if not [m for m in methods if m != SUPERLEARNER]:
        raise ConfigError("need at least one base method")
    return list(methods)


def _pipeline_config(cfg, seed) -> dict:
    return {
        "seed": seed,
        "t_hor": float(_require(cfg, "t_hor")),
        "markers": {
            m: (spec if isinstance(spec, dict) else {})
            for m, spec in _require(cfg, "markers").items()
        },
        "windows": cfg.get("windows"),
        "method_config": cfg.get("method_config", {}),
        "refit_longitudinal": cfg.get("refit_longitudinal", True),
    }


def cmd_simulate(cfg, args) -> int:
    scenario = dict(_require(cfg, "scenario"))
    if args.seed is not None:
        scenario["seed"] = args.seed
    try:
        spec = ScenarioSpec.from_dict(scenario)
    except (TypeError, ValueError) as err:
        raise ConfigError(f"invalid scenario: {err}") from None
    out = _out_dir(cfg, args)
    n_rep = int(cfg.get("replicates", 1))
    digest = config_hash(cfg)
    written = []
    for r in range(n_rep):
        target = out if n_rep == 1 else out / f"rep{r + 1:03d}"
        cohort = simulate_cohort(spec, seed=spec.seed + r)
        paths = write_cohort(cohort, target)
        manifest = json.loads(Path(paths["manifest"]).read_text())
        manifest["config_hash"] = digest
        _write_json(paths["manifest"], manifest)
        written.append(str(target))
    print(f"wrote {n_rep} cohort(s) under {out}")
    return 0


def cmd_fit(cfg, args) -> int:
    cohort = _load_cohort(cfg)
    methods = _methods_from_config(cfg)
    base = [m for m in methods if m != SUPERLEARNER]
    seed = int(cfg.get("seed", 0)) if args.seed is None else args.seed
    pipe_cfg = _pipeline_config(cfg, seed)
    out = _out_dir(cfg, args)
    digest = config_hash(cfg)

    fits = fit_longitudinal_models(cohort, pipe_cfg)
    windows = pipe_cfg.get("windows") or {
        m: max(cohort.t_lm, 1.0) for m in cohort.marker_natures
    }
    design = assemble_design(cohort, fits, windows=windows)
    t_tr, e_tr = training_arrays(cohort)

    (out / "methods").mkdir(exist_ok=True)
    trained = {}
    for name in base:
        tm = fit_method(
            name,
            design.X,
            t_tr,
            e_tr,
            design.columns,
            seed=seed,
            config=pipe_cfg["method_config"].get(name),
        )
        trained[name] = tm
        _write_json(out / "methods" / f"{name}.json", tm.to_dict())

    weights_doc = None
    if SUPERLEARNER in methods:
        n_folds = int(cfg.get("folds", {}).get("inner", 10))
        rng = np.random.default_rng(np.random.SeedSequence((seed, 2)))
        folds = _stratified_folds(e_tr, n_folds, rng)
        P = np.full((cohort.n, len(base)), np.nan)
        for j in range(n_folds):
            tr, te = np.where(folds != j)[0], np.where(folds == j)[0]
            sub = cohort.subset(tr)
            sub_fits = fit_longitudinal_models(sub, pipe_cfg)
            d_tr = assemble_design(sub, sub_fits, windows=windows)
            d_te = assemble_design(cohort.subset(te), sub_fits, windows=windows)
            for c, name in enumerate(base):
                tm = fit_method(
                    name, d_tr.X, t_tr[tr], e_tr[tr], d_tr.columns,
                    seed=seed, config=pipe_cfg["method_config"].get(name),
                )
                P[te, c] = tm.predict(d_te.X, cohort.t_hor)
        w = superlearner_weights(
            P, cohort.times_from_landmark(), e_tr, cohort.t_hor, methods=base
        )
        weights_doc = w.to_dict()
        _write_json(out / "weights.json", weights_doc)

    _write_json(
        out / "model.json",
        {
            "format": "landcast-model",
            "version": 1,
            "config_hash": digest,
            "t_lm": cohort.t_lm,
            "t_hor": cohort.t_hor,
            "methods": base,
            "superlearner": weights_doc is not None,
            "windows": windows,
            "columns": design.columns,
            "marker_natures": cohort.marker_natures,
            "longitudinal": {m: f.to_dict() for m, f in fits.items()},
        },
    )
    print(f"fit {len(base)} method(s) on {cohort.n} subjects -> {out}")
    return 0


def cmd_predict(cfg, args) -> int:
    model_dir = Path(args.model_dir or cfg.get("paths", {}).get("model", ""))
    if not model_dir or not (model_dir / "model.json").exists():
        raise ConfigError("no model directory (use --model-dir)")
    meta = json.loads((model_dir / "model.json").read_text())
    fits = {
        m: MixedModelFit.from_dict(d) for m, d in meta["longitudinal"].items()
    }
    paths = _require(cfg, "paths")
    survival = load_survival(_require(paths, "survival"))
    longitudinal = load_longitudinal(
        _require(paths, "longitudinal"), meta["marker_natures"]
    )
    cohort = landmark_filter(survival, longitudinal, meta["t_lm"], meta["t_hor"])
    design = assemble_design(cohort, fits, windows=meta["windows"])
    if design.columns != meta["columns"]:
        missing = sorted(set(meta["columns"]) - set(design.columns))
        raise DataError(f"new data is missing design columns: {missing}")

    trained = {
        name: TrainedMethod.from_dict(
            json.loads((model_dir / "methods" / f"{name}.json").read_text())
        )
        for name in meta["methods"]
    }
    preds = {
        name: tm.predict(design.X, meta["t_hor"]) for name, tm in trained.items()
    }
    header = list(meta["methods"])
    if meta.get("superlearner"):
        w = SuperLearnerWeights.from_dict(
            json.loads((model_dir / "weights.json").read_text())
        )
        P = np.column_stack([preds[m] for m in w.methods])
        preds[SUPERLEARNER] = superlearner_predict(w, P)
        header.append(SUPERLEARNER)

    out = _out_dir(cfg, args)
    path = out / "predictions.csv"
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(["id"] + header)
        for i, sid in enumerate(design.subject_ids):
            wtr.writerow([sid] + [f"{preds[m][i]:.10g}" for m in header])
    print(f"wrote predictions for {cohort.n} subjects -> {path}")
    return 0


def cmd_cv(cfg, args) -> int:
    cohort = _load_cohort(cfg)
    methods = _methods_from_config(cfg)
    seed = int(cfg.get("seed", 0)) if args.seed is None else args.seed
    folds = cfg.get("folds", {})
    n_outer = int(folds.get("outer", 10))
    n_inner = int(folds.get("inner", 9))
    n_rep = int(cfg.get("replicates", 1))
    out = _out_dir(cfg, args)
    digest = config_hash(cfg)

    rows = []
    per_rep: dict[str, list] = {m: [] for m in methods}
    weight_docs = []
    for r in range(n_rep):
        plan = make_fold_plan(cohort, n_outer, n_inner, seed=seed + r)
        res = run_pipeline_cv(cohort, methods, plan, _pipeline_config(cfg, seed + r))
        for m in methods:
            per_rep[m].append(res.reports[m])
            for i, sid in enumerate(cohort.subject_ids()):
                rows.append(
                    (sid, r + 1, int(plan.outer[i]), m, res.predictions[m][i])
                )
        weight_docs.append(
            [fw.to_dict() if fw is not None else None for fw in res.fold_weights]
        )

    with open(out / "predictions.csv", "w", newline="", encoding="utf-8") as fh:
        wtr = csv.writer(fh)
        wtr.writerow(["subject", "replicate", "fold", "method", "prediction"])
        for row in rows:
            wtr.writerow(list(row[:4]) + [f"{row[4]:.10g}"])

    metrics = {"config_hash": digest, "replicates": n_rep, "methods": {}}
    for m in methods:
        briers = [rep.brier for rep in per_rep[m]]
        aucs = [rep.auc for rep in per_rep[m] if rep.auc is not None]
        metrics["methods"][m] = {
            "brier_mean": float(np.mean(briers)),
            "brier_sd": float(np.std(briers, ddof=1)) if n_rep > 1 else 0.0,
            "auc_mean": float(np.mean(aucs)) if aucs else None,
            "auc_sd": float(np.std(aucs, ddof=1)) if len(aucs) > 1 else 0.0,
        }
    _write_json(out / "metrics.json", metrics)
    _write_json(
        out / "weights.json", {"config_hash": digest, "replicates": weight_docs}
    )
    print(f"cross-validation done: {n_rep} replicate(s) -> {out}")
    return 0


def cmd_evaluate(cfg, args) -> int:
    pred_path = args.predictions or cfg.get("paths", {}).get("predictions")
    surv_path = args.survival or cfg.get("paths", {}).get("survival")
    if not pred_path or not surv_path:
        raise ConfigError("evaluate needs --predictions and --survival")
    t_lm = float(args.t_lm if args.t_lm is not None else _require(cfg, "t_lm"))
    t_hor = float(args.t_hor if args.t_hor is not None else _require(cfg, "t_hor"))

    with open(pred_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "id" not in reader.fieldnames:
            raise DataError(f"{pred_path}: need an 'id' column")
        method_cols = [c for c in reader.fieldnames if c != "id"]
        pred_rows = {row["id"]: row for row in reader}

    survival = load_survival(surv_path)
    at_risk = [r for r in survival if r.t_obs > t_lm]
    common = [r for r in at_risk if r.subject_id in pred_rows]
    if not common:
        raise DataError("no overlapping subject ids between the two files")
    times = np.asarray([r.t_obs - t_lm for r in common])
    events = np.asarray(
        [int(r.event == 1 and (r.t_obs - t_lm) < t_hor) for r in common]
    )
    payload = {"n": len(common), "t_lm": t_lm, "t_hor": t_hor, "methods": {}}
    for m in method_cols:
        p = np.asarray([float(pred_rows[r.subject_id][m]) for r in common])
        rep = metric_report(p, times, events, t_hor)
        payload["methods"][m] = {"brier": rep.brier, "auc": rep.auc}
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        _write_json(args.out, payload)
    else:
        json.dump(payload, sys.stdout, indent=2, sort_keys=True)
        print()
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="landcast",
        description="Landmark dynamic prediction from repeated markers",
    )
    parser.add_argument(
        "--threads",
        type=int,
        default=None,
        help="parallelism hint; results are independent of this value",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("simulate", "fit", "predict", "cv", "evaluate"):
        p = sub.add_parser(name)
        p.add_argument("--config", required=(name != "evaluate"))
        p.add_argument("--out", default=None)
        p.add_argument("--seed", type=int, default=None)
        if name == "predict":
            p.add_argument("--model-dir", default=None)
        if name == "evaluate":
            p.add_argument("--predictions", default=None)
            p.add_argument("--survival", default=None)
            p.add_argument("--t-lm", type=float, default=None, dest="t_lm")
            p.add_argument("--t-hor", type=float, default=None, dest="t_hor")
    return parser


_COMMANDS = {
    "simulate": cmd_simulate,
    "fit": cmd_fit,
    "predict": cmd_predict,
    "cv": cmd_cv,
    "evaluate": cmd_evaluate,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config) if args.config else {}
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            return _COMMANDS[args.command](cfg, args)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return _EXIT_CONFIG
    except DataError as err:
        print(f"data error: {err}", file=sys.stderr)
        return _EXIT_DATA
    except FitError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return _EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
