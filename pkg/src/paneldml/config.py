"""TOML run configuration with a validating loader.

Layout (every table optional unless the command needs it)::

    seed = 12345
    workers = 1
    out = "results"

    [input]
    panel = "panel.csv"          # estimate
    hierarchy = "hier.csv"       # demand treatments

    [treatments]                 # build own/cross price columns from the hierarchy
    own_level = 2                # or own_nodes = ["Drinks/Water", ...]
    cross_level = 2              # or cross_nodes = [...]
    month_dummies = false
    cross_weighting = "equal"    # or "weight"

    [first_stage]
    estimator = "lasso"          # or "dynamic_panel_lasso"
    lambda_policy = "cv:5"       # fixed:<v> | kock_tang | cv:<folds>
    k_folds = 5
    affine_lift = false
    standardize = true

    [second_stage]
    estimators = ["ols"]         # ols, drdml, lasso, dol, ridge
    lambda_policy = "gradient-quantile"
    clime_a = 2.0                # mu = clime_a * sqrt(log d / N) unless mu is set
    xi = 0.05
    n_draws = 10000
    cluster_by = "group_time"    # group | observation
    small_sample = false

    [dgp]                        # simulate / montecarlo; keys of DgpConfig
    M = 100

    [montecarlo]
    reps = 100
    oracle = true
    baseline = "cv"              # or [lam_beta, lam_gamma]; omit to skip

Relative paths are resolved against the config file's directory.
"""
from __future__ import annotations

import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import DataValidationError
from .first_stage import FirstStageConfig
from .pipeline import PipelineConfig
from .simulation import DgpConfig

__all__ = ["DEFAULT_SEED", "RunConfig", "load_config", "build_run_config"]

DEFAULT_SEED = 12345
COMMANDS = ("estimate", "simulate", "montecarlo", "report")

_TOP = {"seed", "workers", "out", "input", "treatments", "first_stage", "second_stage", "dgp",
        "montecarlo"}
_INPUT = {"panel", "hierarchy", "results"}
_TREAT = {"own_level", "cross_level", "own_nodes", "cross_nodes", "month_dummies",
          "cross_weighting"}
_FIRST = {"estimator", "lambda_policy", "k_folds", "affine_lift", "standardize", "tol",
          "max_iter"}
_SECOND = {"estimators", "lambda_policy", "clime_a", "mu", "ridge_gamma", "xi", "n_draws",
           "cluster_by", "small_sample", "tol", "max_iter"}
_MC = {"reps", "oracle", "baseline"}


@dataclass(frozen=True)
class RunConfig:
    command: str
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    panel_path: Optional[Path] = None
    hierarchy_path: Optional[Path] = None
    results_path: Optional[Path] = None
    treatments: Optional[dict] = None
    dgp: Optional[DgpConfig] = None
    reps: int = 100
    oracle: bool = True
    baseline: object = None
    out_dir: Path = Path("results")
    seed: int = DEFAULT_SEED
    workers: int = 1


def _check_keys(table, allowed, where):
    if not isinstance(table, dict):
        raise DataValidationError(f"[{where}] must be a table")
    extra = set(table) - allowed
    if extra:
        raise DataValidationError(f"unknown key(s) in [{where}]: {sorted(extra)}")


def _int(value, name, lo=None):
    if isinstance(value, bool) or not isinstance(value, int):
        raise DataValidationError(f"{name} must be an integer")
    if lo is not None and value < lo:
        raise DataValidationError(f"{name} must be ≥ {lo}")
    return value


def build_run_config(raw: dict, command: str, base_dir: Path = Path("."), seed=None,
                     workers=None, out=None, reps=None, panel=None) -> RunConfig:
    """Validate a parsed config mapping; keyword arguments are CLI overrides."""
    if command not in COMMANDS:
        raise DataValidationError(f"unknown command {command!r}")
    _check_keys(raw, _TOP, "top level")

    def path(p):
        p = Path(p)
        return p if p.is_absolute() else base_dir / p

    inp = raw.get("input", {})
    _check_keys(inp, _INPUT, "input")
    fs = dict(raw.get("first_stage", {}))
    _check_keys(fs, _FIRST, "first_stage")
    ss = dict(raw.get("second_stage", {}))
    _check_keys(ss, _SECOND, "second_stage")
    if "estimators" in ss:
        if isinstance(ss["estimators"], str):
            ss["estimators"] = [ss["estimators"]]
        ss["estimators"] = tuple(ss["estimators"])
    try:
        pipeline = PipelineConfig(first_stage=FirstStageConfig(**fs), **ss)
    except TypeError as exc:
        raise DataValidationError(f"invalid stage configuration: {exc}") from None
    treat = raw.get("treatments")
    if treat is not None:
        _check_keys(treat, _TREAT, "treatments")
    dgp = None
    if "dgp" in raw:
        _check_keys(raw["dgp"], set(DgpConfig.__dataclass_fields__), "dgp")
        try:
            dgp = DgpConfig.from_dict(raw["dgp"])
        except TypeError as exc:
            raise DataValidationError(f"invalid [dgp]: {exc}") from None
    mc = raw.get("montecarlo", {})
    _check_keys(mc, _MC, "montecarlo")
    seed = raw.get("seed", DEFAULT_SEED) if seed is None else seed
    _int(seed, "seed", 0)
    if seed >= 2 ** 64:
        raise DataValidationError("seed must fit in 64 bits")
    workers = _int(raw.get("workers", 1) if workers is None else workers, "workers", 1)
    reps = _int(mc.get("reps", 100) if reps is None else reps, "reps", 1)
    baseline = mc.get("baseline")
    if baseline is not None and baseline != "cv":
        if not (isinstance(baseline, list) and len(baseline) == 2):
            raise DataValidationError("montecarlo.baseline must be 'cv' or [lam_beta, lam_gamma]")
        baseline = tuple(float(v) for v in baseline)
    panel_path = Path(panel) if panel is not None else (
        path(inp["panel"]) if "panel" in inp else None)
    cfg = RunConfig(
        command=command,
        pipeline=pipeline,
        panel_path=panel_path,
        hierarchy_path=path(inp["hierarchy"]) if "hierarchy" in inp else None,
        results_path=path(inp["results"]) if "results" in inp else None,
        treatments=treat,
        dgp=dgp,
        reps=reps,
        oracle=bool(mc.get("oracle", True)),
        baseline=baseline,
        out_dir=Path(out) if out is not None else path(raw.get("out", "results")),
        seed=seed,
        workers=workers,
    )
    if command == "estimate":
        if cfg.panel_path is None:
            raise DataValidationError("estimate needs [input].panel or --panel")
        if not cfg.panel_path.exists():
            raise DataValidationError(f"panel file not found: {cfg.panel_path}")
        if treat is not None and cfg.hierarchy_path is None:
            raise DataValidationError("[treatments] needs [input].hierarchy")
        if cfg.hierarchy_path is not None and not cfg.hierarchy_path.exists():
            raise DataValidationError(f"hierarchy file not found: {cfg.hierarchy_path}")
    if command in ("simulate", "montecarlo") and cfg.dgp is None:
        cfg = RunConfig(**{**cfg.__dict__, "dgp": DgpConfig()})
    return cfg


def load_config(path, command: str, **overrides) -> RunConfig:
    """Read and validate a TOML file. ``path=None`` uses defaults only."""
    if path is None:
        return build_run_config({}, command, Path("."), **overrides)
    path = Path(path)
    if not path.exists():
        raise DataValidationError(f"config file not found: {path}")
    try:
        with path.open("rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise DataValidationError(f"config {path}: {exc}") from None
    return build_run_config(raw, command, path.parent, **overrides)
