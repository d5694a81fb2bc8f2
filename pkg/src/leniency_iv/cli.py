"""Command-line front end: estimate, balance, monotonicity, compliers, simulate.

Exit codes: 0 success, 2 input/schema/config error, 3 degenerate design or
capacity error.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from . import __version__
from .checklist import balance_check, complier_means, monotonicity_test, parse_bins
from .data import Schema, load_dataset, read_key_value_file, write_csv
from .design import FEJIV_CAP, Kind, build_design
from .errors import DesignError, InputError, UnsupportedOperationError
from .estimators import estimate_many, result_dict
from .inference import parse_grid, rho_diagnostic, robust_se, weak_iv_test
from .prune import prune
from .simulation import SimConfig, generate, monte_carlo

log = logging.getLogger("leniency_iv")

EXIT_OK, EXIT_INPUT, EXIT_DESIGN = 0, 2, 3

CLUSTER_MESSAGE = (
    "clustered standard errors are not implemented. Rule of thumb: cluster at the level of "
    "variation in the assignment (e.g. when cases are assigned to examiners in batches, the batch). "
    "With case-level random assignment the heteroskedasticity-robust standard errors reported here "
    "are appropriate; clustered inference would need a leave-cluster-out UJIVE, which is out of scope."
)

SIM_FLAGS = {
    "n": int, "n_cells": int, "examiners_per_cell": int, "leniency_spread": float, "target_F": float,
    "endogeneity": float, "effect_model": str, "beta": float, "heterogeneity": float,
    "defier_fraction": float, "defier_shift": float, "heteroskedasticity": str, "imbalance": float,
    "outcome_type": str,
}


# --------------------------------------------------------------------------
# output helpers


def _clean(obj):
    """JSON-safe copy: numpy scalars to Python, non-finite floats to null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        return v if math.isfinite(v) else None
    return obj


def output_schema(command: str) -> dict:
    """Shipped JSON Schema for the JSON output of ``command``."""
    text = resources.files(__package__).joinpath("schemas", f"{command}.json").read_text(encoding="utf-8")
    return json.loads(text)


def _file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp():
    # wall-clock time would break byte-identical reruns; honor SOURCE_DATE_EPOCH only
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    return int(epoch) if epoch and epoch.isdigit() else None


def _manifest(args, *, schema=None, kinds=None, prune_report=None, seed=None) -> dict:
    inputs = []
    for attr in ("data", "schema_config", "config"):
        path = getattr(args, attr, None)
        if path:
            inputs.append({"role": attr, "path": str(path), "sha256": _file_digest(path)})
    return {
        "command": args.command,
        "inputs": inputs,
        "schema": schema.to_dict() if schema is not None else None,
        "estimators": [Kind.parse(k).value for k in kinds] if kinds else None,
        "seed": seed,
        "tool": "leniency-iv",
        "version": __version__,
        "timestamp": _timestamp(),
        "prune": prune_report.to_dict() if prune_report is not None else None,
    }


def _table_text(rows: list[dict]) -> str:
    if not rows:
        return "(no rows)\n"
    cols = list(rows[0])
    fmt = lambda v: "" if v is None else (f"{v:.6g}" if isinstance(v, float) else str(v))
    cells = [[fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(c), *(len(row[j]) for row in cells)) for j, c in enumerate(cols)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(cols, widths))]
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines) + "\n"


def _csv_text(rows: list[dict]) -> str:
    buf = io.StringIO()
    if rows:
        writer = csv.DictWriter(buf, fieldnames=list(rows[0]), lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: ("" if v is None else repr(v) if isinstance(v, float) else v)
                             for k, v in r.items()})
    return buf.getvalue()


def _emit(args, document: dict, rows: list[dict]):
    document = _clean(document)
    rows = _clean(rows)
    fmt = args.format
    if fmt == "json":
        text = json.dumps(document, indent=2) + "\n"
    elif fmt == "csv":
        text = _csv_text(rows)
    else:
        text = _table_text(rows)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        if fmt != "json":
            side = Path(str(args.out) + ".manifest.json")
            side.write_text(json.dumps(document["manifest"], indent=2) + "\n", encoding="utf-8")
    else:
        sys.stdout.write(text)


# --------------------------------------------------------------------------
# shared data plumbing


def _schema(args) -> Schema:
    if args.schema_config:
        schema = Schema.from_config(args.schema_config)
        if getattr(args, "covariates", None):
            schema = Schema.from_strings(schema.outcome, schema.treatment, schema.examiner,
                                         ",".join(schema.fe_names), args.covariates)
        return schema
    missing = [f"--{f}" for f in ("data", "outcome", "treatment", "examiner", "fe") if not getattr(args, f)]
    if missing:
        raise InputError(f"missing required flags: {' '.join(missing)} (or use --schema-config)")
    return Schema.from_strings(args.outcome, args.treatment, args.examiner, args.fe,
                               getattr(args, "covariates", None))


def _prepared(args):
    if not args.data:
        raise InputError("missing required flag --data")
    schema = _schema(args)
    ds = load_dataset(args.data, schema)
    ds, report = prune(ds)
    ctx = build_design(ds)
    return schema, ds, report, ctx


def _covariate_items(ds, schema):
    if not schema.covariates:
        raise InputError("no covariates given (--covariates)")
    return [(c, ds.extra[c]) for c in schema.covariates]


def _kinds(text):
    kinds = [k.strip() for k in text.split(",") if k.strip()]
    if not kinds:
        raise InputError("empty --estimator list")
    try:
        return [Kind.parse(k) for k in kinds]
    except ValueError as exc:
        raise InputError(str(exc)) from exc


def _rho_arg(text):
    parts = text.split(":")
    try:
        if len(parts) == 1:
            return float(parts[0])
        if len(parts) == 2:
            return (float(parts[0]), float(parts[1]))
    except ValueError:
        pass
    raise InputError(f"--rho-beta must be a number or lo:hi, got {text!r}")


# --------------------------------------------------------------------------
# commands


def cmd_estimate(args) -> int:
    if args.cluster:
        raise UnsupportedOperationError(CLUSTER_MESSAGE)
    kinds = _kinds(args.estimator)
    schema, ds, report, ctx = _prepared(args)
    y, x = ds.outcome, ds.treatment
    results = estimate_many(ctx, y, x, kinds, fejiv_cap=args.fejiv_cap)
    rows = []
    for res in results:
        d = result_dict(res)
        if res.defined and args.decompose:
            vc = robust_se(res, ctx, y, x)
            d["variance_terms"] = vc.numerator_terms
        rows.append(d)
    doc = {"manifest": _manifest(args, schema=schema, kinds=kinds, prune_report=report),
           "design": {"n": ctx.n, "K": ctx.K, "L": ctx.L,
                      "instruments": list(ctx.instrument_labels or []),
                      "controls": list(ctx.control_labels or [])},
           "estimates": rows}
    if args.weak_iv_beta0 is not None:
        grid = parse_grid(args.weak_iv_grid) if args.weak_iv_grid else None
        doc["weak_iv"] = weak_iv_test(ctx, y, x, args.weak_iv_beta0, grid=grid, alpha=args.alpha).to_dict()
    if args.rho_beta is not None:
        doc["rho"] = rho_diagnostic(ctx, y, x, _rho_arg(args.rho_beta)).to_dict()
    flat = [{k: v for k, v in r.items() if not isinstance(v, dict)} for r in rows]
    _emit(args, doc, flat)
    return EXIT_OK


def cmd_balance(args) -> int:
    schema, ds, report, ctx = _prepared(args)
    rows = [r.to_dict() for r in balance_check(ctx, ds.treatment, _covariate_items(ds, schema))]
    doc = {"manifest": _manifest(args, schema=schema, kinds=["ujive"], prune_report=report), "rows": rows}
    _emit(args, doc, rows)
    return EXIT_OK


def cmd_compliers(args) -> int:
    schema, ds, report, ctx = _prepared(args)
    rows = [r.to_dict() for r in complier_means(ctx, ds.outcome, ds.treatment, _covariate_items(ds, schema))]
    doc = {"manifest": _manifest(args, schema=schema, kinds=["ujive"], prune_report=report), "rows": rows}
    _emit(args, doc, rows)
    return EXIT_OK


def cmd_monotonicity(args) -> int:
    schema, ds, report, ctx = _prepared(args)
    bins = parse_bins(args.bins) if args.bins else None
    res = monotonicity_test(ctx, ds.outcome, ds.treatment, bins=bins, alpha=args.alpha)
    body = res.to_dict()
    doc = {"manifest": _manifest(args, schema=schema, kinds=["ujive"], prune_report=report), **body}
    _emit(args, doc, body["bins"])
    return EXIT_OK


def _sim_config(args) -> SimConfig:
    values = {}
    if args.config:
        values.update(read_key_value_file(args.config))
    for key in SIM_FLAGS:
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    if "leniency_spread" in values and "target_F" not in values:
        values["target_F"] = None
    if args.seed is not None:
        values["seed"] = args.seed
    return SimConfig.from_mapping(values)


def cmd_simulate(args) -> int:
    cfg = _sim_config(args)
    kinds = _kinds(args.estimator)
    summary = monte_carlo(cfg, args.reps, kinds, threads=args.threads, weak_iv=args.weak_iv)
    if args.emit_data:
        ds, _ = generate(cfg, spawn_key=(0, 0))
        write_csv(ds, args.emit_data)
    doc = {"manifest": _manifest(args, kinds=kinds, seed=cfg.seed), **summary.to_dict(args.include_draws)}
    rows = []
    for k, s in summary.kinds.items():
        row = s.to_dict()
        row["target"] = summary.target
        rows.append(row)
    _emit(args, doc, rows)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser


def _add_common(p, data=True):
    if data:
        p.add_argument("--data", help="CSV file with a header row")
        p.add_argument("--outcome")
        p.add_argument("--treatment")
        p.add_argument("--examiner")
        p.add_argument("--fe", help="comma-separated fixed-effect sets; ':' interacts columns")
        p.add_argument("--schema-config", dest="schema_config", help="key=value file giving the column roles")
    p.add_argument("--out", help="output path (default stdout)")
    p.add_argument("--format", choices=("json", "csv", "table"), default="json")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="leniency-iv", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("estimate", help="UJIVE and comparison estimators with robust inference")
    _add_common(p)
    p.add_argument("--estimator", default="ujive,tsls,ols",
                   help="comma list of ujive, tsls (2sls), ols, jive, ijive, b2sls, fejiv")
    p.add_argument("--fejiv-cap", dest="fejiv_cap", type=int, default=FEJIV_CAP)
    p.add_argument("--weak-iv-beta0", dest="weak_iv_beta0", type=float)
    p.add_argument("--weak-iv-grid", dest="weak_iv_grid", help="lo:hi:points")
    p.add_argument("--alpha", type=float, default=0.05)
    p.add_argument("--rho-beta", dest="rho_beta", help="beta* value or lo:hi interval")
    p.add_argument("--decompose", action="store_true", help="attach descriptive variance terms")
    p.add_argument("--cluster", help="not supported; prints the clustering rule of thumb")
    p.set_defaults(func=cmd_estimate)

    for name, func, helptext in (("balance", cmd_balance, "UJIVE of covariates on the treatment"),
                                 ("compliers", cmd_compliers, "complier means of covariates")):
        p = sub.add_parser(name, help=helptext)
        _add_common(p)
        p.add_argument("--covariates", help="comma-separated covariate columns")
        p.set_defaults(func=func)

    p = sub.add_parser("monotonicity", help="per-bin complier outcome masses")
    _add_common(p)
    p.add_argument("--bins", help="'v1,v2,...' value bins or 'edges:e0,e1,...'")
    p.add_argument("--alpha", type=float, default=0.05)
    p.set_defaults(func=cmd_monotonicity)

    p = sub.add_parser("simulate", help="Monte Carlo study on a synthetic leniency design")
    _add_common(p, data=False)
    p.add_argument("--config", help="key=value SimConfig file; flags override it")
    p.add_argument("--reps", type=int, default=100)
    p.add_argument("--estimator", default="ujive,tsls,ols")
    p.add_argument("--weak-iv", dest="weak_iv", action="store_true", help="also record weak-IV test size")
    p.add_argument("--emit-data", dest="emit_data", help="write the first replication's data as CSV")
    p.add_argument("--include-draws", dest="include_draws", action="store_true")
    for key, typ in SIM_FLAGS.items():
        p.add_argument("--" + key.replace("_", "-"), dest=key, type=typ)
    p.set_defaults(func=cmd_simulate)
    return parser


VALUE_FLAGS = ("--weak-iv-grid", "--rho-beta", "--bins", "--weak-iv-beta0")


def _glue_negative_values(argv):
    # argparse reads "-2:2:401" as an option; rewrite to "--flag=-2:2:401"
    out, i = [], 0
    while i < len(argv):
        a = argv[i]
        if a in VALUE_FLAGS and i + 1 < len(argv) and argv[i + 1].startswith("-"):
            out.append(f"{a}={argv[i + 1]}")
            i += 2
            continue
        out.append(a)
        i += 1
    return out


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    args = parser.parse_args(_glue_negative_values(argv))
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s: %(message)s")
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except DesignError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DESIGN


if __name__ == "__main__":
    sys.exit(main())
