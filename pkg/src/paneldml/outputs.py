"""Machine-readable artifacts: JSON reports and flat CSV files for plotting."""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

__all__ = [
    "write_json",
    "estimates_document",
    "write_estimate_artifacts",
    "report_rows",
    "plotdata_rows",
    "write_rows",
    "write_oracle_sidecar",
    "mc_rep_rows",
    "write_mc_artifacts",
]

REPORT_COLUMNS = ("label", "kind", "node", "coef", "se", "ci_lo", "ci_hi", "sim_lo", "sim_hi")
PLOT_COLUMNS = ("estimator", "coordinate", "label", "estimate", "ci_lower", "ci_upper",
                "sim_lower", "sim_upper")


def _clean(obj):
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if math.isfinite(v) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def write_json(obj, path) -> None:
    """Deterministic JSON: sorted keys, NaN/inf as null, trailing newline."""
    text = json.dumps(_clean(obj), indent=2, sort_keys=True, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def estimates_document(results: dict, labels, seed: int, meta: dict) -> dict:
    return {
        "seed": seed,
        "labels": list(labels),
        "primary": next(iter(results)),
        "estimators": {k: v.to_dict() for k, v in results.items()},
        **meta,
    }


def _fmt(v):
    if v is None:
        return ""
    v = float(v)
    return repr(v) if math.isfinite(v) else ""


def report_rows(result_dict: dict, label_table):
    """Rows of ``report.csv`` for one estimator (dict form of an EstimateResult)."""
    d = result_dict["d"]
    sim = result_dict.get("simultaneous") or {}

    def at(key, j, src=result_dict):
        vals = src.get(key)
        return None if vals is None else vals[j]

    rows = []
    for j in range(d):
        lab = label_table[j]
        rows.append({
            "label": lab["label"], "kind": lab["kind"], "node": lab["node"],
            "coef": _fmt(result_dict["beta"][j]), "se": _fmt(at("se", j)),
            "ci_lo": _fmt(at("ci_lower", j)), "ci_hi": _fmt(at("ci_upper", j)),
            "sim_lo": _fmt(at("lower", j, sim)), "sim_hi": _fmt(at("upper", j, sim)),
        })
    return rows


def plotdata_rows(doc: dict):
    rows = []
    for name, r in doc["estimators"].items():
        sim = r.get("simultaneous") or {}
        for j in range(r["d"]):
            def at(key, src=r):
                vals = src.get(key)
                return None if vals is None else vals[j]

            rows.append({"estimator": name, "coordinate": j, "label": doc["labels"][j],
                         "estimate": _fmt(r["beta"][j]), "ci_lower": _fmt(at("ci_lower")),
                         "ci_upper": _fmt(at("ci_upper")), "sim_lower": _fmt(at("lower", sim)),
                         "sim_upper": _fmt(at("upper", sim))})
    return rows


def write_rows(rows, columns, path) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow(row)


def write_estimate_artifacts(doc: dict, label_table, out_dir) -> list:
    """``estimates.json``, ``report.csv`` (primary estimator, plus
    ``report_<name>.csv`` for the others) and ``plotdata_ci.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "estimates.json"]
    write_json(doc, written[0])
    for name, r in doc["estimators"].items():
        fname = "report.csv" if name == doc["primary"] else f"report_{name}.csv"
        write_rows(report_rows(r, label_table), REPORT_COLUMNS, out / fname)
        written.append(out / fname)
    write_rows(plotdata_rows(doc), PLOT_COLUMNS, out / "plotdata_ci.csv")
    written.append(out / "plotdata_ci.csv")
    return written


def write_oracle_sidecar(data, oracle, dgp_dict: dict, seed: int, out_dir) -> list:
    """``oracle.json`` (beta0, design) and ``oracle.csv`` (true nuisances per cell)."""
    out = Path(out_dir)
    write_json({"beta0": oracle.beta, "support": list(oracle.support), "seed": seed,
                "dgp": dgp_dict, "gamma_y": oracle.gamma_y, "gamma_d": oracle.gamma_d,
                "a": oracle.a, "b": oracle.b}, out / "oracle.json")
    d = data.n_treatments
    cols = ["item", "time", "l0"] + [f"d0_{j + 1}" for j in range(d)] + ["u"]
    rows = []
    for i, item in enumerate(data.item_ids):
        for t, tid in enumerate(data.time_ids):
            row = {"item": item, "time": tid, "l0": repr(float(oracle.l0[i, t])),
                   "u": repr(float(oracle.u[i, t]))}
            for j in range(d):
                row[f"d0_{j + 1}"] = repr(float(oracle.d0[i, t, j]))
            rows.append(row)
    write_rows(rows, cols, out / "oracle.csv")
    return [out / "oracle.json", out / "oracle.csv"]


def mc_rep_rows(records):
    """Flatten replication records: one row per (replication, estimator, coordinate)."""
    rows = []
    for rec in records:
        for name, r in rec["estimators"].items():
            for j, b in enumerate(r["beta"]):
                rows.append({
                    "rep": rec["rep"], "estimator": name, "coordinate": j, "estimate": _fmt(b),
                    "se": _fmt(r["se"][j]) if "se" in r else "",
                    "covered": int(r["covered"][j]) if "covered" in r else "",
                    "sim_covered": int(r["sim_covered"]) if "sim_covered" in r else "",
                    "l2_error": _fmt(r["l2"]),
                    "oracle_gap": _fmt(r.get("oracle_gap")),
                    "q_n": _fmt(rec.get("q_n")),
                })
    return rows


MC_COLUMNS = ("rep", "estimator", "coordinate", "estimate", "se", "covered", "sim_covered",
              "l2_error", "oracle_gap", "q_n")


def write_mc_artifacts(report, dgp_dict: dict, pipeline_meta: dict, out_dir) -> list:
    """``mc_report.json``, ``mc_reps.csv`` and ``mc_timing.json`` (wall clock only)."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    doc = {**report.to_dict(), "dgp": dgp_dict, "pipeline": pipeline_meta}
    write_json(doc, out / "mc_report.json")
    write_rows(mc_rep_rows(report.records), MC_COLUMNS, out / "mc_reps.csv")
    write_json({"wall_clock_seconds": report.wall_clock,
                "rep_seconds": [r["_seconds"] for r in report.records]}, out / "mc_timing.json")
    return [out / "mc_report.json", out / "mc_reps.csv", out / "mc_timing.json"]
