"""Command-line front end.

    paneldml estimate   --config run.toml [--panel panel.csv] [--seed N] [--out DIR]
    paneldml simulate   --config run.toml [--seed N] [--out DIR]
    paneldml montecarlo --config run.toml [--reps R] [--workers W] [--seed N] [--out DIR]
    paneldml report     [--config run.toml] [--input DIR] [--out DIR]

Exit codes: 0 success, 1 numerical failure, 2 input validation, 3 internal
invariant breach. Failures print one JSON line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import DEFAULT_SEED, RunConfig, load_config
from .errors import DataValidationError, NumericalError, PanelDMLError

__all__ = ["main", "build_parser", "cmd_estimate", "cmd_simulate", "cmd_montecarlo",
           "cmd_report"]

log = logging.getLogger("paneldml")


def _label_table(data):
    if data.affine_maps is not None and any(m is not None for m in data.affine_maps):
        return [dict(column=j, label=lab, kind=m.kind if m is not None else "treatment",
                     node=m.node if m is not None else "")
                for j, (lab, m) in enumerate(zip(data.treatment_labels, data.affine_maps))]
    return [dict(column=j, label=lab, kind="treatment", node="")
            for j, lab in enumerate(data.treatment_labels)]


def _first_stage_meta(cfg: RunConfig):
    fs = cfg.pipeline.first_stage
    return {"estimator": fs.estimator, "lambda_policy": str(fs.lambda_policy),
            "k_folds": fs.k_folds, "affine_lift": fs.affine_lift, "standardize": fs.standardize}


def _second_stage_meta(cfg: RunConfig):
    p = cfg.pipeline
    return {"estimators": list(p.estimators), "lambda_policy": str(p.lambda_policy),
            "clime_a": p.clime_a, "mu": p.mu, "ridge_gamma": p.ridge_gamma, "xi": p.xi,
            "n_draws": p.n_draws, "cluster_by": p.cluster_by, "small_sample": p.small_sample}


def _prepare_dataset(cfg: RunConfig):
    from .demand import TreatmentSpec, build_treatments, load_hierarchy_csv
    from .panel_core import load_panel_csv

    data = load_panel_csv(cfg.panel_path)
    hier = None
    if cfg.treatments is not None:
        hier = load_hierarchy_csv(cfg.hierarchy_path)
        t = dict(cfg.treatments)
        own = tuple(t.pop("own_nodes", ())) or (hier.at_level(t["own_level"])
                                                if "own_level" in t else ())
        cross = tuple(t.pop("cross_nodes", ())) or (hier.at_level(t["cross_level"])
                                                    if "cross_level" in t else ())
        t.pop("own_level", None)
        t.pop("cross_level", None)
        spec = TreatmentSpec(own, cross, **t)
        data, table = build_treatments(data, hier, spec)
    else:
        table = _label_table(data)
    return data, table, hier


def cmd_estimate(cfg: RunConfig) -> int:
    from .demand import per_pair_conversions
    from .outputs import estimates_document, write_estimate_artifacts
    from .pipeline import run_estimation

    data, table, hier = _prepare_dataset(cfg)
    results, res, fits = run_estimation(data, cfg.pipeline, cfg.seed)
    meta = {
        "command": "estimate",
        "n_items": data.n_items, "n_periods": data.n_periods, "n_groups": data.n_groups,
        "n_controls": data.design().shape[2],
        "folds": [list(map(int, fits.folds.periods(k))) for k in range(fits.folds.n_folds)],
        "first_stage": _first_stage_meta(cfg),
        "second_stage": _second_stage_meta(cfg),
        "label_table": table,
        "notes": ["HDS inference additionally requires sqrt(N) m_N l_N and sqrt(N) m_N^2 "
                  "to be o(1/log d); this is not verifiable from data."],
    }
    if hier is not None:
        conv = {}
        primary = next(iter(results.values()))
        for row in table:
            if row["kind"] == "cross":
                n = len(hier.members[row["node"]])
                conv[row["label"]] = {"group_size": n,
                                      **per_pair_conversions(float(primary.beta[row["column"]]), n)}
        meta["cross_price_conversions"] = conv
    doc = estimates_document(results, [r["label"] for r in table], cfg.seed, meta)
    write_estimate_artifacts(doc, table, cfg.out_dir)
    return 0


def cmd_simulate(cfg: RunConfig) -> int:
    from .outputs import write_oracle_sidecar
    from .panel_core import write_panel_csv
    from .simulation import generate_panel

    data, oracle = generate_panel(cfg.dgp, seed=cfg.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_panel_csv(data, out / "panel.csv")
    write_oracle_sidecar(data, oracle, cfg.dgp.to_dict(), cfg.seed, out)
    return 0


def cmd_montecarlo(cfg: RunConfig) -> int:
    from .outputs import write_mc_artifacts
    from .simulation import run_monte_carlo

    report = run_monte_carlo(cfg.dgp, cfg.pipeline, cfg.reps, cfg.seed, cfg.workers,
                             cfg.oracle, cfg.baseline)
    meta = {"first_stage": _first_stage_meta(cfg), "second_stage": _second_stage_meta(cfg),
            "oracle": cfg.oracle, "baseline": cfg.baseline}
    write_mc_artifacts(report, cfg.dgp.to_dict(), meta, cfg.out_dir)
    return 0


def _read_rows(path):
    with Path(path).open(newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def cmd_report(cfg: RunConfig, input_dir=None) -> int:
    """Re-emit the delimited output of a results directory plus figures."""
    from .outputs import (PLOT_COLUMNS, REPORT_COLUMNS, plotdata_rows, report_rows, write_rows)
    from .plotting import plot_intervals, plot_mc_coverage, plot_mc_errors

    src = Path(input_dir or cfg.results_path or cfg.out_dir)
    out = Path(cfg.out_dir)
    if not src.is_dir():
        raise DataValidationError(f"results directory not found: {src}")
    est_path, mc_path = src / "estimates.json", src / "mc_report.json"
    if not est_path.exists() and not mc_path.exists():
        raise DataValidationError(f"no estimates.json or mc_report.json in {src}")
    out.mkdir(parents=True, exist_ok=True)
    if est_path.exists():
        doc = json.loads(est_path.read_text(encoding="utf-8"))
        table = doc.get("label_table") or [dict(column=j, label=lab, kind="treatment", node="")
                                           for j, lab in enumerate(doc["labels"])]
        for name, r in doc["estimators"].items():
            fname = "report.csv" if name == doc["primary"] else f"report_{name}.csv"
            write_rows(report_rows(r, table), REPORT_COLUMNS, out / fname)
        rows = plotdata_rows(doc)
        write_rows(rows, PLOT_COLUMNS, out / "plotdata_ci.csv")
        for name in doc["estimators"]:
            plot_intervals(rows, out / f"ci_{name}.png", name)
    if mc_path.exists():
        mc = json.loads(mc_path.read_text(encoding="utf-8"))
        summary = []
        for name, v in mc["estimators"].items():
            summary.append({
                "estimator": name, "n_reps": v["n_reps"], "rmse": v["rmse"],
                "mean_l2": v["mean_l2"], "mean_abs_bias_active": v.get("mean_abs_bias_active"),
                "mean_coverage": (float(np.mean(v["coverage"])) if "coverage" in v else ""),
                "simultaneous_coverage": v.get("simultaneous_coverage", ""),
                "mean_oracle_gap": v.get("mean_oracle_gap", "")})
        write_rows(summary, list(summary[0]), out / "mc_summary.csv")
        plot_mc_coverage(mc, out / "mc_coverage.png")
        if (src / "mc_reps.csv").exists():
            plot_mc_errors(_read_rows(src / "mc_reps.csv"), out / "mc_errors.png")
    return 0


COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "montecarlo": cmd_montecarlo,
            "report": cmd_report}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="paneldml", description="Panel double machine learning.")
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="TOML run configuration")
        p.add_argument("--seed", type=int, help=f"master seed (default {DEFAULT_SEED})")
        p.add_argument("--workers", type=int, help="worker processes for replications")
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("-v", "--verbose", action="store_true")
        if name == "estimate":
            p.add_argument("--panel", type=Path, help="panel CSV (overrides [input].panel)")
        if name == "montecarlo":
            p.add_argument("--reps", type=int, help="replications (overrides config)")
        if name == "report":
            p.add_argument("--input", type=Path, help="directory holding estimates/mc results")
    return ap


def _fail(exc, code):
    msg = {"error": type(exc).__name__, "exit_code": code, "message": str(exc).replace("\n", " ")}
    print(json.dumps(msg, sort_keys=True, ensure_ascii=False), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        cfg = load_config(args.config, args.command, seed=args.seed, workers=args.workers,
                          out=args.out, reps=getattr(args, "reps", None),
                          panel=getattr(args, "panel", None))
        if args.command == "report":
            return cmd_report(cfg, args.input)
        return COMMANDS[args.command](cfg)
    except PanelDMLError as exc:
        return _fail(exc, exc.exit_code)
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        return _fail(exc, NumericalError.exit_code)
    except OSError as exc:
        return _fail(exc, DataValidationError.exit_code)
    except Exception as exc:  # noqa: BLE001 - anything else is an internal fault
        return _fail(exc, 3)


if __name__ == "__main__":
    sys.exit(main())
