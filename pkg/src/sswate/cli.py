"""Command-line interface.

Three commands:

* ``analyze``: estimate the treatment effect from a trial CSV file, emitting
  estimator reports, by-arm classification tables, and exclusion accounting.
* ``simulate``: run a named simulation scenario (or the ``figure2`` grid) and
  summarize estimator performance.
* ``compare``: side-by-side estimator table on one dataset, with the interval
  each estimator supports (t for silver-standard weighting, cluster bootstrap
  for the others).

A flat ``key=value`` config file can hold any flag value plus the CSV column
mapping; command-line flags override file values. JSON output carries
``schema_version`` and a manifest (command, resolved configuration, seed,
package version) sufficient to reproduce the run. JSON goes to stdout unless
``--out-json`` names a file, in which case stdout gets the human-readable
tables instead. Exit status is 0 only when every requested estimator
produced a valid report.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import __version__
from .data_model import CsvSchema, ModelSpec, load_csv
from .errors import SpecError, SswateError
from .estimators import (cluster_bootstrap, interval_normal, interval_t,
                         ipsw, reports_to_csv, sso, ssw, with_interval)
from .simulation import figure2_grid, resolve_scenario, run_study, scenario_names

SCHEMA_VERSION = 1

_ESTIMATOR_LABELS = {
    "ssw": "SSW (Model 1)",
    "ssw-saturated": "SSW (Model 2)",
    "ssw-homogeneous": "SSW (homogeneous)",
    "sso": "SSO",
    "ipsw": "IPSW",
}

_DEFAULTS = {
    "level": 0.95,
    "interval": "t",
    "boot_b": 1000,
    "seed": 0,
    "reps": 1000,
}

_COLUMN_KEYS = {
    "cluster-col": "cluster",
    "clinician-col": "clinician",
    "treatment-col": "treatment",
    "silver-col": "silver",
    "selection-col": "selection",
    "gold-col": "gold",
    "covariate-cols": "covariates",
    "cluster-level-cols": "cluster_level",
}


# ---- configuration -------------------------------------------------------------


def _read_config_file(path: str) -> dict:
    values = {}
    with open(path, encoding="utf-8") as handle:
        for lineno, raw in enumerate(handle, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise SpecError(f"{path}:{lineno}: expected key=value, got {line!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def _split_list(value):
    if value is None:
        return None
    return tuple(part.strip() for part in str(value).split(",") if part.strip())


def _merged_option(args, file_values: dict, key: str, cast=str):
    """Flag wins over config file; missing file keys fall back to None."""
    flag = getattr(args, key.replace("-", "_"), None)
    if flag is not None:
        return flag
    if key in file_values:
        return cast(file_values[key])
    return None


def _schema_from_config(file_values: dict) -> CsvSchema:
    fields = {}
    for key, field in _COLUMN_KEYS.items():
        if key not in file_values:
            continue
        if field in ("covariates", "cluster_level"):
            fields[field] = _split_list(file_values[key])
        else:
            fields[field] = file_values[key]
    return CsvSchema(**fields)


def _resolve(args) -> dict:
    """Merge flags, config file, and defaults into one options dict."""
    file_values = _read_config_file(args.config) if getattr(args, "config", None) else {}
    opt = {
        "command": args.command,
        "input": _merged_option(args, file_values, "input"),
        "scenario": _merged_option(args, file_values, "scenario"),
        "spec": _merged_option(args, file_values, "spec"),
        "estimators": _split_list(_merged_option(args, file_values, "estimators")),
        "interval": _merged_option(args, file_values, "interval"),
        "level": _merged_option(args, file_values, "level", float),
        "boot_b": _merged_option(args, file_values, "boot-b", int),
        "reps": _merged_option(args, file_values, "reps", int),
        "seed": _merged_option(args, file_values, "seed", int),
        "out_json": _merged_option(args, file_values, "out-json"),
        "out_csv": _merged_option(args, file_values, "out-csv"),
    }
    for key, default in _DEFAULTS.items():
        if opt.get(key) is None:
            opt[key] = default
    opt["schema"] = _schema_from_config(file_values)
    return opt


def _manifest(opt: dict) -> dict:
    config = {k: v for k, v in opt.items() if k != "schema"}
    config["columns"] = {
        "cluster": opt["schema"].cluster,
        "clinician": opt["schema"].clinician,
        "treatment": opt["schema"].treatment,
        "silver": opt["schema"].silver,
        "selection": opt["schema"].selection,
        "gold": opt["schema"].gold,
        "covariates": opt["schema"].covariates,
        "cluster_level": opt["schema"].cluster_level,
    }
    return {"command": opt["command"], "config": config, "seed": opt["seed"],
            "version": __version__}


def _emit(opt: dict, payload: dict, text: str):
    """JSON to stdout, or to --out-json with the text tables on stdout."""
    blob = json.dumps(payload, indent=2, sort_keys=True, default=_jsonable)
    if opt["out_json"]:
        with open(opt["out_json"], "w", encoding="utf-8") as handle:
            handle.write(blob + "\n")
        print(text, end="")
    else:
        print(blob)


def _jsonable(value):
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serializable: {type(value)!r}")


# ---- analyze and compare ----------------------------------------------------------


def _selection_spec_from(classification: ModelSpec) -> ModelSpec:
    """Selection model terms: the classification terms without the gold outcome."""
    kept = [term.label for term in classification.terms
            if term.kind not in ("gold", "gold_treat")]
    return ModelSpec.selection(", ".join(kept))


def classification_tables(dataset) -> dict:
    """By-arm and overall 2x2 gold-by-silver tables on the validated subset."""
    val = dataset.v == 1
    out = {}
    for key, mask in (("arm_1", val & (dataset.a == 1)),
                      ("arm_0", val & (dataset.a == 0)),
                      ("overall", val)):
        total = int(mask.sum())
        cells = {}
        for g in (1, 0):
            for s in (1, 0):
                count = int((mask & (dataset.y == g) & (dataset.y_star == s)).sum())
                cells[f"y{g}_ystar{s}"] = {
                    "count": count,
                    "percent": None if total == 0 else 100.0 * count / total,
                }
        out[key] = {"n": total, "cells": cells}
    return out


def _tables_text(tables: dict) -> str:
    lines = []
    for key, label in (("arm_1", "Arm 1"), ("arm_0", "Arm 0"), ("overall", "Overall")):
        block = tables[key]
        lines.append(f"{label} (validated n={block['n']})")
        lines.append(f"  {'':10s} {'silver=1':>16s} {'silver=0':>16s}")
        for g in (1, 0):
            row = [f"  gold={g}   "]
            for s in (1, 0):
                cell = block["cells"][f"y{g}_ystar{s}"]
                pct = "" if cell["percent"] is None else f" ({cell['percent']:.1f}%)"
                row.append(f"{cell['count']:>7d}{pct:>9s}")
            lines.append(" ".join(row))
    return "\n".join(lines) + "\n"


def _fit_one(name: str, dataset, spec, selection_spec):
    if name == "ssw":
        if spec is None:
            return ssw(dataset, variant="saturated")
        return ssw(dataset, spec=spec)
    if name == "ssw-saturated":
        return ssw(dataset, variant="saturated")
    if name == "ssw-homogeneous":
        return ssw(dataset, variant="homogeneous")
    if name == "sso":
        return sso(dataset)
    if name == "ipsw":
        return ipsw(dataset, selection_spec)
    raise SpecError(f"unknown estimator {name!r}; available: "
                    + ", ".join(sorted(_ESTIMATOR_LABELS)))


def _point_refit(name: str, spec, selection_spec):
    if name == "ssw":
        if spec is None:
            return lambda ds: ssw(ds, variant="saturated", with_variance=False)
        return lambda ds: ssw(ds, spec=spec, with_variance=False)
    if name == "ssw-saturated":
        return lambda ds: ssw(ds, variant="saturated", with_variance=False)
    if name == "ssw-homogeneous":
        return lambda ds: ssw(ds, variant="homogeneous", with_variance=False)
    if name == "sso":
        return sso
    return lambda ds: ipsw(ds, selection_spec)


def _attach_interval(name, report, dataset, spec, selection_spec, opt):
    kind = opt["interval"]
    if kind == "none":
        return report
    if report.variance is not None and kind in ("t", "normal"):
        if kind == "t":
            return with_interval(report, interval_t(report, dataset.m, opt["level"]))
        return with_interval(report, interval_normal(report, opt["level"]))
    if report.variance is None or kind == "bootstrap":
        boot = cluster_bootstrap(dataset, _point_refit(name, spec, selection_spec),
                                 b=opt["boot_b"], level=opt["level"], seed=opt["seed"])
        return with_interval(report, boot.interval)
    return report


def _estimates_text(named_reports, level) -> str:
    lines = [f"{'Estimator':20s} {'Estimate':>9s}  "
             f"{f'{level:.0%} interval':>18s}  {'Method':20s} {'Valid':5s}"]
    for name, report in named_reports:
        iv = report.interval
        if iv is None:
            interval, method = "", ""
        else:
            interval = f"({iv.lower:.3f}, {iv.upper:.3f})"
            method = iv.method
        lines.append(f"{_ESTIMATOR_LABELS[name]:20s} {report.tau_hat:>9.3f}  "
                     f"{interval:>18s}  {method:20s} {str(report.valid):5s}")
    return "\n".join(lines) + "\n"


def _run_dataset_command(opt: dict) -> int:
    if not opt["input"]:
        raise SpecError(f"{opt['command']} requires --input (or input= in the config)")
    loaded = load_csv(opt["input"], opt["schema"])
    dataset = loaded.dataset
    spec = None
    if opt["spec"]:
        spec = ModelSpec.classification(opt["spec"])
    selection_spec = _selection_spec_from(spec if spec is not None
                                          else ModelSpec.classification("1, y, a, y:a"))
    names = opt["estimators"] or (("ssw", "sso", "ipsw")
                                  if opt["command"] == "compare" else ("ssw",))
    named_reports = []
    for name in names:
        report = _fit_one(name, dataset, spec, selection_spec)
        report = _attach_interval(name, report, dataset, spec, selection_spec, opt)
        named_reports.append((name, report))

    tables = classification_tables(dataset)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "manifest": _manifest(opt),
        "data": {
            "n": dataset.n,
            "m": dataset.m,
            "n_validated": dataset.n_validated_total,
            "pi_hat": dataset.pi_hat,
            "n_read": loaded.n_read,
            "dropped": loaded.dropped,
            "dropped_rows": [list(pair) for pair in loaded.dropped_rows[:20]],
        },
        "classification_tables": tables,
        "estimates": [dict(report.to_dict(), estimator=name)
                      for name, report in named_reports],
    }
    text = _tables_text(tables) + "\n" + _estimates_text(named_reports, opt["level"])
    _emit(opt, payload, text)
    if opt["out_csv"]:
        with open(opt["out_csv"], "w", encoding="utf-8") as handle:
            handle.write(reports_to_csv([report for _, report in named_reports]))
    return 0 if all(report.valid for _, report in named_reports) else 1


# ---- simulate ----------------------------------------------------------------------


def _study_text(result) -> str:
    header = (f"{'Model':22s} {'True ATE':>9s} {'Bias':>8s} {'Emp Var':>9s} "
              f"{'CR Var':>9s} {'Coverage':>9s} {'Corrected':>10s}")
    lines = [f"scenario: {result.scenario.name}  reps: {result.n_reps}  "
             f"seed: {result.seed}", header]

    def fmt(value, spec="{:.3f}", percent=False):
        if value is None:
            return "-"
        if percent:
            return f"{100.0 * value:.1f}%"
        return spec.format(value)

    for name, summ in result.estimators.items():
        lines.append(
            f"{_ESTIMATOR_LABELS[name]:22s} {result.true_ate:>9.3f} "
            f"{fmt(summ['bias']):>8s} {fmt(summ['empirical_variance'], '{:.3g}'):>9s} "
            f"{fmt(summ['mean_model_variance'], '{:.3g}'):>9s} "
            f"{fmt(summ['coverage_normal'], percent=True):>9s} "
            f"{fmt(summ['coverage_t'], percent=True):>10s}")
        if summ["failure_rate"]:
            lines.append(f"  ({name} failure rate {100 * summ['failure_rate']:.1f}%)")
    return "\n".join(lines) + "\n"


def _simulate_figure2(opt: dict) -> int:
    reps = opt["reps"]
    estimators = opt["estimators"] or ("ssw", "ssw-homogeneous", "sso", "ipsw")
    grid = figure2_grid(n_reps=reps, seed=opt["seed"], estimators=estimators)
    payload = {
        "schema_version": SCHEMA_VERSION,
        "manifest": _manifest(opt),
        "scenarios": {name: res.to_dict() for name, res in grid["results"].items()},
        "summary": grid["summary"].to_dict(orient="records"),
    }
    lines = [f"{'Scenario':<18s} {'Estimator':18s} {'True ATE':>9s} {'Bias':>8s} "
             f"{'SD':>7s} {'Failures':>9s}"]
    for row in grid["summary"].itertuples():
        lines.append(f"{row.scenario:<18s} {_ESTIMATOR_LABELS[row.estimator]:18s} "
                     f"{row.true_ate:>9.3f} {row.bias:>8.3f} {row.empirical_sd:>7.3f} "
                     f"{100 * row.failure_rate:>8.1f}%")
    _emit(opt, payload, "\n".join(lines) + "\n")
    if opt["out_csv"]:
        grid["replicates"].to_csv(opt["out_csv"], index=False)
    return 0


def _simulate(opt: dict) -> int:
    if not opt["scenario"]:
        raise SpecError("simulate requires --scenario (a preset name or figure2); "
                        "presets: " + ", ".join(scenario_names()))
    if opt["scenario"].strip().lower() == "figure2":
        return _simulate_figure2(opt)
    config = resolve_scenario(opt["scenario"])
    estimators = opt["estimators"] or ("ssw", "ssw-saturated")
    result = run_study(config, estimators=estimators, n_reps=opt["reps"],
                       seed=opt["seed"], level=opt["level"])
    payload = {
        "schema_version": SCHEMA_VERSION,
        "manifest": _manifest(opt),
        "result": result.to_dict(),
    }
    _emit(opt, payload, _study_text(result))
    if opt["out_csv"]:
        result.replicates.to_csv(opt["out_csv"], index=False)
    return 0


# ---- entry point --------------------------------------------------------------------


def _add_common(parser):
    parser.add_argument("--config", help="key=value config file; flags override it")
    parser.add_argument("--estimators",
                        help="comma list from: " + ", ".join(sorted(_ESTIMATOR_LABELS)))
    parser.add_argument("--level", type=float, help="interval level (default 0.95)")
    parser.add_argument("--seed", type=int, help="seed (default 0)")
    parser.add_argument("--out-json", help="write the JSON payload to this file")
    parser.add_argument("--out-csv", help="write the detail CSV to this file")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sswate",
        description="Treatment effect estimation for cluster-randomized trials "
                    "with misclassified outcomes and a validation subset.")
    sub = parser.add_subparsers(dest="command", required=True)

    analyze = sub.add_parser("analyze", help="estimate from a trial CSV file")
    analyze.add_argument("--input", help="CSV file of unit-level trial records")
    analyze.add_argument("--spec", help="classification model terms, e.g. "
                         "'1, y, a, y:a, x1, x1:a' (default: saturated cells)")
    analyze.add_argument("--interval", choices=("t", "normal", "bootstrap", "none"),
                         help="interval for variance-bearing estimators (default t)")
    analyze.add_argument("--boot-b", type=int,
                         help="bootstrap replicates (default 1000)")
    _add_common(analyze)

    compare = sub.add_parser("compare",
                             help="side-by-side estimator table on one dataset")
    compare.add_argument("--input", help="CSV file of unit-level trial records")
    compare.add_argument("--spec", help="classification model terms")
    compare.add_argument("--interval", choices=("t", "normal", "bootstrap", "none"))
    compare.add_argument("--boot-b", type=int,
                         help="bootstrap replicates (default 1000)")
    _add_common(compare)

    simulate = sub.add_parser("simulate", help="run a Monte Carlo scenario")
    simulate.add_argument("--scenario",
                          help="preset name, or figure2 for the comparison grid")
    simulate.add_argument("--reps", type=int, help="replicates (default 1000)")
    _add_common(simulate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        opt = _resolve(args)
        if opt["command"] in ("analyze", "compare"):
            return _run_dataset_command(opt)
        return _simulate(opt)
    except SswateError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except OSError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
