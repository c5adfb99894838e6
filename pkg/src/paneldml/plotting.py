"""Static figures for the ``report`` command (matplotlib, Agg backend)."""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

__all__ = ["plot_intervals", "plot_mc_coverage", "plot_mc_errors"]


def _num(v):
    return np.nan if v in ("", None) else float(v)


def plot_intervals(rows, path, estimator=None):
    """Point estimates with pointwise (thick) and simultaneous (thin) intervals."""
    rows = [r for r in rows if estimator is None or r["estimator"] == estimator]
    if not rows:
        return None
    est = np.array([_num(r["estimate"]) for r in rows])
    lo = np.array([_num(r["ci_lower"]) for r in rows])
    hi = np.array([_num(r["ci_upper"]) for r in rows])
    slo = np.array([_num(r["sim_lower"]) for r in rows])
    shi = np.array([_num(r["sim_upper"]) for r in rows])
    y = np.arange(len(rows))[::-1]
    fig, ax = plt.subplots(figsize=(6.5, max(2.0, 0.28 * len(rows) + 1.0)))
    if np.isfinite(slo).any():
        ax.hlines(y, slo, shi, color="0.6", lw=1.0, label="simultaneous")
    if np.isfinite(lo).any():
        ax.hlines(y, lo, hi, color="C0", lw=3.0, label="pointwise")
    ax.plot(est, y, "o", color="k", ms=3.5, label="estimate")
    ax.axvline(0.0, color="0.8", lw=0.8, zorder=0)
    ax.set_yticks(y)
    ax.set_yticklabels([r["label"] for r in rows], fontsize=7)
    ax.set_xlabel("coefficient")
    ax.set_title(estimator or rows[0]["estimator"])
    ax.legend(fontsize=7, loc="best")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_mc_coverage(mc_doc: dict, path, nominal=0.95):
    """Per-coordinate pointwise coverage for every estimator that reports it."""
    ests = {k: v for k, v in mc_doc["estimators"].items() if "coverage" in v}
    if not ests:
        return None
    fig, ax = plt.subplots(figsize=(7, 3.2))
    for k, v in ests.items():
        cov = np.asarray(v["coverage"])
        ax.plot(np.arange(len(cov)), cov, marker=".", lw=0.8, label=k)
    ax.axhline(nominal, color="k", ls="--", lw=0.8)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("coordinate")
    ax.set_ylabel("coverage")
    ax.set_title(f"pointwise coverage over {mc_doc['n_reps']} replications")
    ax.legend(fontsize=7, ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)


def plot_mc_errors(rep_rows, path):
    """Histogram of per-replication l2 errors by estimator."""
    by = {}
    seen = set()
    for r in rep_rows:
        key = (r["estimator"], r["rep"])
        if key in seen or r["l2_error"] in ("", None):
            continue
        seen.add(key)
        by.setdefault(r["estimator"], []).append(float(r["l2_error"]))
    if not by:
        return None
    fig, ax = plt.subplots(figsize=(6, 3.2))
    for k, v in by.items():
        ax.hist(v, bins=30, alpha=0.5, label=k)
    ax.set_xlabel("l2 error")
    ax.set_ylabel("replications")
    ax.legend(fontsize=7)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return Path(path)
