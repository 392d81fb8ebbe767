"""Command-line entry point.

Commands::

    silentab estimate DATA --method em|em-cov|m1|m2
    silentab simulate --theta 4 --gamma 10 --q 0.5 --n 2000 --seed 1
    silentab benchmark --grid table-ec3 --samples 200 --n 2000 --out t.csv
    silentab classify-eval --features f.csv --labels --k 50 --report roc.csv
    silentab staffing --lambda 10 --mu 1 --theta 0.5 --n 12
    silentab group-patience DATA --by queue_words --buckets 1,10,20

DATA is a triple CSV (``u,y,delta[,x...]``, ``u`` in minutes) or an
event JSONL file (``.jsonl``). Results are JSON documents tagged with
``schema_version``; every rate carries its unit.

Exit codes: 0 success, 2 degenerate or non-converged result, 1 error.
Defaults for the common flags can be read from a JSON file named by
``--config`` or the ``SILENTAB_CONFIG`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import __version__
from .baselines import UsabPolicy, method1, method2
from .classify import (DEFAULT_THRESHOLD, read_feature_csv, roc_and_thresholds, select_top_k,
                       train_scorer, write_roc_csv)
from .core import (DataError, Dataset, DegenerateDataError, rate_to_unit, read_events_jsonl,
                   read_triples_csv, write_triples_csv)
from .em import EmInit, NumericalError, fit_em
from .em_cov import bootstrap_ci, fit_em_cov, group_patience
from .queueing import ErlangAInput, erlang_a, scenario_report, staffing_search
from .simulate import (ESTIMATORS, SimConfig, gen_dataset, gen_words_dataset,
                       run_accuracy_benchmark, table_ec3_grid, write_benchmark_csv,
                       write_plot_data)

SCHEMA_VERSION = 1
CONFIG_ENV = "SILENTAB_CONFIG"
EXIT_OK, EXIT_ERROR, EXIT_DEGENERATE = 0, 1, 2
UNIT_NAMES = {"min": "minutes", "hr": "hours"}
RATE_UNITS = {"min": "per_minute", "hr": "per_hour"}
CONFIG_KEYS = ("epsilon", "max_iter", "seed", "unit", "bootstrap", "threshold", "jobs")

logger = logging.getLogger("silentab")


class UsageError(Exception):
    """Bad flag combination or input format."""


# ---------------------------------------------------------------------------
# Result documents
# ---------------------------------------------------------------------------


def _clean(obj: Any) -> Any:
    """Make a value JSON-safe: numpy scalars to Python, non-finite floats to None."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def rate_entry(per_minute: float, unit: str) -> dict[str, Any]:
    return {"value": rate_to_unit(per_minute, UNIT_NAMES[unit]), "unit": RATE_UNITS[unit],
            "per_minute": per_minute}


def base_document(command: str, args: argparse.Namespace, argv: Sequence[str]) -> dict[str, Any]:
    return {"schema_version": SCHEMA_VERSION, "tool": {"name": "silentab",
                                                      "version": __version__},
            "command": command, "argv": list(argv), "seed": getattr(args, "seed", None)}


def emit(doc: dict[str, Any], out: str | None) -> None:
    text = json.dumps(_clean(doc), indent=2) + "\n"
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def load_dataset(path: str, covariates: Sequence[str] | None = None) -> tuple[Dataset, dict]:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"no such file: {path}")
    info: dict[str, Any] = {"path": str(path)}
    if p.suffix.lower() in (".jsonl", ".ndjson"):
        res = read_events_jsonl(p)
        ds = res.dataset
        if covariates is not None:
            ds = ds.select_covariates(covariates)
        info["ingest"] = res.report.to_dict()
    else:
        ds = read_triples_csv(p, covariates=covariates)
    info.update({"digest": ds.digest(), "n": ds.n, "counts": ds.counts()})
    return ds, info


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

POLICY_FLAGS = {"as-served": "as_served", "as-abandoned": "as_abandoned", "as-sab": "as_sab"}


def cmd_estimate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    covs = _split(args.covariates) if args.covariates else None
    if args.method != "em-cov" and covs:
        raise UsageError("--covariates applies to --method em-cov only")
    ds, info = load_dataset(args.data, covs if args.method == "em-cov" else [])
    doc = base_document("estimate", args, argv)
    doc.update({"estimator": args.method, "input": info})
    unit = args.unit
    status = EXIT_OK

    if args.method in ("m1", "m2"):
        policy = _policy_from_args(args, ds)
        est = (method1 if args.method == "m1" else method2)(ds, policy)
        doc["usab_policy"] = policy.kind
        doc["parameters"] = {"theta": rate_entry(est.theta, unit),
                             "gamma": rate_entry(est.gamma, unit)}
        doc["mean_patience"] = {"value": est.mean_patience, "unit": "minutes"}
        doc["flags"] = list(est.flags)
        if est.degenerate:
            status = EXIT_DEGENERATE
        fitter = args.method
    elif args.method == "em":
        init = _init_from_args(args, ds)
        fit = fit_em(ds, init, args.epsilon, args.max_iter, seed=args.seed, record_trace=False)
        doc["init"] = init.kind
        doc["parameters"] = {"theta": rate_entry(fit.theta, unit),
                             "gamma": rate_entry(fit.gamma, unit),
                             "q": {"value": fit.q, "unit": "probability"}}
        doc["mean_patience"] = {"value": fit.mean_patience, "unit": "minutes"}
        doc["iterations"], doc["converged"], doc["flags"] = fit.iterations, fit.converged, \
            list(fit.flags)
        if fit.degenerate or not fit.converged:
            status = EXIT_DEGENERATE
        fitter = "em"
    else:
        if ds.k == 0:
            raise UsageError("--method em-cov needs covariate columns")
        init = _init_from_args(args, ds)
        fit = fit_em_cov(ds, init, args.epsilon, args.max_iter, seed=args.seed,
                         record_trace=False)
        doc["init"] = init.kind
        doc["parameters"] = {
            "beta0": {"value": fit.beta0, "unit": "log_minutes"},
            "beta": {nm: {"value": float(b), "unit": "log_multiplier",
                          "multiplier": float(math.exp(b))}
                     for nm, b in zip(fit.covariate_names, fit.beta)},
            "gamma": rate_entry(fit.gamma, unit),
            "q": {"value": fit.q, "unit": "probability"}}
        doc["mean_patience"] = {"value": math.exp(fit.beta0), "unit": "minutes",
                                "at": "all covariates zero"}
        doc["iterations"], doc["converged"], doc["flags"] = fit.iterations, fit.converged, \
            list(fit.flags)
        if fit.flags or not fit.converged:
            status = EXIT_DEGENERATE
        fitter = "em-cov"

    if args.bootstrap:
        ci = bootstrap_ci(ds, fitter, args.bootstrap, args.seed, epsilon=args.epsilon,
                          max_iter=args.max_iter,
                          policy=doc.get("usab_policy", "as_served") if fitter in ("m1", "m2")
                          else "as_served", jobs=args.jobs)
        doc["ci"] = _ci_document(ci, unit)
    emit(doc, args.out)
    return status


def _ci_document(ci: Any, unit: str) -> dict[str, Any]:
    intervals = {}
    for name in ci.point:
        lo, hi = ci.lower[name], ci.upper[name]
        if name in ("theta", "gamma"):
            entry = {"lower": rate_to_unit(lo, UNIT_NAMES[unit]),
                     "upper": rate_to_unit(hi, UNIT_NAMES[unit]), "unit": RATE_UNITS[unit]}
        elif name == "q":
            entry = {"lower": lo, "upper": hi, "unit": "probability"}
        elif name == "beta0":
            entry = {"lower": lo, "upper": hi, "unit": "log_minutes"}
        else:
            entry = {"lower": lo, "upper": hi, "unit": "log_multiplier"}
        intervals[name] = entry
    return {"method": "percentile", "level": ci.level, "resamples": ci.resamples,
            "n_failed": ci.n_failed, "unreliable": ci.unreliable, "intervals": intervals}


def _policy_from_args(args: argparse.Namespace, ds: Dataset) -> UsabPolicy:
    if args.usab_policy in POLICY_FLAGS:
        return UsabPolicy(POLICY_FLAGS[args.usab_policy])
    if args.usab_policy == "scores":
        scores = _read_scores(args.scores, ds)
        return UsabPolicy.from_scores(scores, args.threshold)
    raise UsageError(f"unknown --usab-policy {args.usab_policy!r}")


def _init_from_args(args: argparse.Namespace, ds: Dataset) -> EmInit:
    if args.init == "scores":
        return EmInit.from_scores(np.nan_to_num(_read_scores(args.scores, ds), nan=0.0))
    return EmInit(args.init)


def _read_scores(path: str | None, ds: Dataset) -> np.ndarray:
    """One score per line (``nan``/empty where not applicable), aligned with the data."""
    if not path:
        raise UsageError("--scores FILE is required for score-based options")
    vals = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            vals.append(math.nan if line in ("", "nan", "NA") else float(line))
    if len(vals) != ds.n:
        raise UsageError(f"score file has {len(vals)} rows, data has {ds.n}")
    return np.array(vals)


def cmd_simulate(args: argparse.Namespace, argv: Sequence[str]) -> int:
    cfg = SimConfig(args.theta, args.gamma, args.q, n=args.n, p_sr1=args.p_sr1, seed=args.seed,
                    unit=UNIT_NAMES[args.unit], sr1_coupled=args.coupled)
    sample = gen_dataset(cfg)
    if args.out:
        write_triples_csv(sample.dataset, args.out)
    else:
        write_triples_csv(sample.dataset, sys.stdout)
    if args.truth:
        np.savetxt(args.truth, sample.true_class, fmt="%d", header="class 0=Sr 1=Sr1 2=Kab 3=Sab")
    return EXIT_OK


def cmd_benchmark(args: argparse.Namespace, argv: Sequence[str]) -> int:
    if args.grid != "table-ec3":
        raise UsageError(f"unknown grid {args.grid!r}")
    grid = table_ec3_grid(n=args.n, samples=args.samples, seed=args.seed,
                          sr1_coupled=not args.independent_sr1)
    estimators = _split(args.estimators) if args.estimators else list(ESTIMATORS)
    rows = run_accuracy_benchmark(grid, estimators, args.samples, epsilon=args.epsilon,
                                  max_iter=args.max_iter, jobs=args.jobs)
    if args.out:
        write_benchmark_csv(rows, args.out)
    if args.plot_data:
        write_plot_data(rows, args.plot_data)
    doc = base_document("benchmark", args, argv)
    doc.update({"grid": args.grid, "cells": len(grid), "estimators": estimators,
                "samples": args.samples, "n": args.n, "rate_unit": "per_hour",
                "rows": [{"theta_true": r.config.theta, "gamma_true": r.config.gamma,
                          "q_true": r.config.q, "estimator": r.estimator,
                          "theta_mean": r.theta.mean, "gamma_mean": r.gamma.mean,
                          "q_mean": r.q.mean, "theta_mse": r.theta.mse,
                          "n_failed": r.n_failed} for r in rows]})
    if not args.out or args.json:
        emit(doc, args.json)
    return EXIT_OK


def cmd_classify_eval(args: argparse.Namespace, argv: Sequence[str]) -> int:
    fm = read_feature_csv(args.features)
    if fm.labels is None:
        raise UsageError("feature file has no label column")
    if not args.labels:
        raise UsageError("classify-eval needs --labels (evaluation against the label column)")
    reduced = select_top_k(fm, args.k)
    model = train_scorer(reduced, C=args.C, seed=args.seed)
    scores = model.score(reduced)
    rep = roc_and_thresholds(scores, reduced.labels)
    y = reduced.labels
    pred = scores >= args.threshold
    tp = int(np.sum(pred & y))
    tn = int(np.sum(~pred & ~y))
    fp = int(np.sum(pred & ~y))
    fn = int(np.sum(~pred & y))
    if args.report:
        write_roc_csv(rep, args.report)
    if args.model_out:
        model.save(args.model_out)
    doc = base_document("classify-eval", args, argv)
    doc.update({"rows": fm.n_rows, "columns_in": len(fm.columns),
                "columns_kept": list(reduced.columns), "k_per_party": args.k,
                "evaluation": "training data",
                "roc": rep.to_dict(),
                "at_threshold": {"threshold": args.threshold,
                                 "sensitivity": tp / max(tp + fn, 1),
                                 "specificity": tn / max(tn + fp, 1),
                                 "error_rate": (fp + fn) / len(y),
                                 "f1": 2 * tp / max(2 * tp + fp + fn, 1)}})
    emit(doc, args.out)
    return EXIT_OK


def cmd_staffing(args: argparse.Namespace, argv: Sequence[str]) -> int:
    doc = base_document("staffing", args, argv)
    if args.scenario:
        doc["scenario"] = scenario_report()
        emit(doc, args.out)
        return EXIT_OK
    if args.lam is None or args.mu is None or args.theta is None:
        raise UsageError("--lambda, --mu and --theta are required (rates per hour)")
    chosen = [v is not None for v in (args.n, args.target_abandon, args.target_wait)]
    if sum(chosen) != 1:
        raise UsageError("give exactly one of --n, --target-abandon, --target-wait")
    doc["input"] = {"lambda": {"value": args.lam, "unit": "per_hour"},
                    "mu": {"value": args.mu, "unit": "per_hour"},
                    "theta": {"value": args.theta, "unit": "per_hour"}}
    if args.n is not None:
        inp = ErlangAInput(args.lam, args.mu, args.theta, args.n)
        doc["input"]["n"] = {"value": inp.n, "requested": args.n}
        doc["result"] = erlang_a(inp).to_dict()
    else:
        res = staffing_search(args.lam, args.mu, args.theta, max_abandon=args.target_abandon,
                              max_wait=args.target_wait)
        doc["result"] = res.to_dict()
    emit(doc, args.out)
    return EXIT_OK


def cmd_group_patience(args: argparse.Namespace, argv: Sequence[str]) -> int:
    by = "queue_words" if args.by == "words" else args.by
    if args.synthetic:
        ds = gen_words_dataset(args.synthetic, rng=args.seed).dataset
        info: dict[str, Any] = {"synthetic": args.synthetic, "digest": ds.digest()}
    elif args.data:
        ds, info = load_dataset(args.data)
    else:
        raise UsageError("give DATA or --synthetic N")
    edges = [float(e) for e in _split(args.buckets)]
    fits = group_patience(ds, by, edges, B=args.bootstrap, seed=args.seed, epsilon=args.epsilon,
                          max_iter=args.max_iter, jobs=args.jobs)
    header = ["bucket", "low", "high", "n", "mean_patience_min", "ci_low_min", "ci_high_min",
              "theta_per_hour", "q", "converged"]
    rows = []
    for b in fits:
        lo = hi = math.nan
        if b.ci is not None:
            # Patience is 1/theta, so the theta bounds swap.
            t_lo, t_hi = b.ci.lower["theta"], b.ci.upper["theta"]
            lo = 1.0 / t_hi if t_hi > 0 else math.inf
            hi = 1.0 / t_lo if t_lo > 0 else math.inf
        rows.append([b.label, b.low, b.high, b.n, b.mean_patience, lo, hi,
                     rate_to_unit(b.fit.theta, "hours"), b.fit.q, int(b.fit.converged)])
    fh = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for r in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in r])
    finally:
        if args.out:
            fh.close()
    if args.json:
        doc = base_document("group-patience", args, argv)
        doc.update({"input": info, "by": by, "rows": [dict(zip(header, r)) for r in rows]})
        emit(doc, args.json)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def _split(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _load_config(path: str | None) -> dict[str, Any]:
    path = path or os.environ.get(CONFIG_ENV)
    if not path:
        return {}
    try:
        data = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from None
    unknown = set(data) - set(CONFIG_KEYS)
    if unknown:
        raise UsageError(f"unknown config key(s): {', '.join(sorted(unknown))}")
    return data


def _common(p: argparse.ArgumentParser, fit: bool = True) -> None:
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1, help="worker processes (results do not depend on it)")
    if fit:
        p.add_argument("--epsilon", type=float, default=1e-6)
        p.add_argument("--max-iter", type=int, default=10000)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="silentab", description=__doc__.split("\n")[0])
    parser.add_argument("--version", action="version", version=f"silentab {__version__}")
    parser.add_argument("--config", help=f"JSON defaults file (else ${CONFIG_ENV})")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="fit patience from a dataset",
                       description="Fit theta/gamma/q (or beta) and print a JSON result.")
    p.add_argument("data")
    p.add_argument("--method", choices=("em", "em-cov", "m1", "m2"), default="em")
    p.add_argument("--usab-policy", default="as-served",
                   help="as-served, as-abandoned, as-sab or scores (m1/m2)")
    p.add_argument("--init", choices=EmInit.KINDS[:3] + ("half", "scores"), default="random")
    p.add_argument("--scores", help="per-row uSab scores, one per line")
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--covariates", help="comma-separated covariate columns (em-cov)")
    p.add_argument("--bootstrap", type=int, default=500, metavar="B",
                   help="bootstrap resamples for percentile CIs (0 disables)")
    p.add_argument("--unit", choices=("min", "hr"), default="hr", help="rate unit in output")
    p.add_argument("--out")
    _common(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("simulate", help="draw a synthetic triple CSV",
                       description="Write u,y,delta rows (u in minutes). Rates are per --unit.")
    p.add_argument("--theta", type=float, required=True)
    p.add_argument("--gamma", type=float, required=True)
    p.add_argument("--q", type=float, required=True)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--p-sr1", type=float, default=0.0)
    p.add_argument("--coupled", action="store_true",
                   help="record a served customer as uSab when it does not signal (p_sr1 = 1-q)")
    p.add_argument("--unit", choices=("min", "hr"), default="hr")
    p.add_argument("--out")
    p.add_argument("--truth", help="also write the true class per row")
    _common(p, fit=False)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("benchmark", help="Monte Carlo accuracy table",
                       description="CSV columns: theta_true,gamma_true,q_true,p_sab,estimator,n,"
                       "samples,n_failed, then mean/sd/ci_low/ci_high/mse/bias per parameter "
                       "(rates per hour).")
    p.add_argument("--grid", default="table-ec3")
    p.add_argument("--samples", type=int, default=200)
    p.add_argument("--n", type=int, default=2000)
    p.add_argument("--estimators", help=f"comma-separated subset of {','.join(ESTIMATORS)}")
    p.add_argument("--independent-sr1", action="store_true",
                   help="draw Sr1 independently of the signal (p_sr1=0 unless coupled)")
    p.add_argument("--out")
    p.add_argument("--plot-data", help="CSV p_sab,estimator,mse_theta,mse_gamma,mse_q")
    p.add_argument("--json", help="also write the JSON summary here")
    _common(p)
    p.set_defaults(func=cmd_benchmark)

    p = sub.add_parser("classify-eval", help="train and evaluate the uSab scorer",
                       description="Feature CSV: conv_id,party:token,...,meta:...,label. "
                       "ROC CSV: fpr,tpr,threshold.")
    p.add_argument("--features", required=True)
    p.add_argument("--labels", action="store_true", help="evaluate against the label column")
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--C", type=float, default=1.0)
    p.add_argument("--report", help="ROC CSV output")
    p.add_argument("--model-out", help="save the trained scorer as JSON")
    p.add_argument("--out")
    _common(p, fit=False)
    p.set_defaults(func=cmd_classify_eval)

    p = sub.add_parser("staffing", help="Erlang-A measures and staffing",
                       description="Rates per hour. Give --n for measures or a target for the "
                       "smallest server count; --scenario prints the large-scale comparison.")
    p.add_argument("--lambda", dest="lam", type=float)
    p.add_argument("--mu", type=float)
    p.add_argument("--theta", type=float)
    p.add_argument("--n", type=float)
    p.add_argument("--target-abandon", type=float)
    p.add_argument("--target-wait", type=float)
    p.add_argument("--scenario", action="store_true")
    p.add_argument("--out")
    _common(p, fit=False)
    p.set_defaults(func=cmd_staffing)

    p = sub.add_parser("group-patience", help="patience per covariate bucket",
                       description="CSV columns: bucket,low,high,n,mean_patience_min,ci_low_min,"
                       "ci_high_min,theta_per_hour,q,converged. Buckets are (lo, hi].")
    p.add_argument("data", nargs="?")
    p.add_argument("--by", required=True, help="covariate column ('words' = queue_words)")
    p.add_argument("--buckets", required=True, help="comma-separated upper edges")
    p.add_argument("--synthetic", type=int, metavar="N",
                   help="use N synthetic rows with word-count multipliers instead of DATA")
    p.add_argument("--bootstrap", type=int, default=500, metavar="B")
    p.add_argument("--out")
    p.add_argument("--json")
    _common(p)
    p.set_defaults(func=cmd_group_patience)
    return parser


def _apply_config(parser: argparse.ArgumentParser, config: dict[str, Any]) -> None:
    # Subparser defaults take precedence over the parent, so set them there.
    for action in parser._subparsers._group_actions:  # type: ignore[union-attr]
        for sp in action.choices.values():
            known = {a.dest for a in sp._actions}
            sp.set_defaults(**{k: v for k, v in config.items() if k in known})


def main(argv: Sequence[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        pre, _ = parser.parse_known_args(argv) if "--config" in argv else (None, None)
        config = _load_config(pre.config if pre is not None else None)
    except UsageError as exc:
        print(f"silentab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except SystemExit as exc:
        return int(exc.code or 0)
    if config:
        _apply_config(parser, config)
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_ERROR if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return int(args.func(args, argv))
    except DegenerateDataError as exc:
        print(f"silentab: degenerate data: {exc}", file=sys.stderr)
        return EXIT_DEGENERATE
    except (UsageError, DataError, NumericalError, ValueError, OSError) as exc:
        print(f"silentab: error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
