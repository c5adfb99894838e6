"""End-to-end estimation: cross-fit, residualize, second-stage estimators.

Shared by the command line and the Monte Carlo harness so both run the
same code path.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.stats import norm

from .errors import DataValidationError
from .first_stage import (FirstStageConfig, NuisanceFits, ResidualizedPanel, cross_fit,
                          predict_nuisances)
from .panel_core import PanelDataset
from .second_stage_hds import (clime, debias, default_mu, default_ridge_gamma, opt_lambda,
                               orthogonal_lasso, ridge_inverse, simultaneous_quantile)
from .second_stage_ld import ConfidenceSet, drdml_from_nuisances, orthogonal_ols

__all__ = ["PipelineConfig", "EstimateResult", "estimate_from_residuals", "run_estimation",
           "ESTIMATORS"]

ESTIMATORS = ("ols", "drdml", "lasso", "dol", "ridge")


@dataclass(frozen=True)
class PipelineConfig:
    first_stage: FirstStageConfig = field(default_factory=FirstStageConfig)
    estimators: tuple = ("ols",)
    lambda_policy: str = "gradient-quantile"
    clime_a: float = 2.0
    mu: Optional[float] = None
    ridge_gamma: Optional[float] = None
    xi: float = 0.05
    n_draws: int = 10_000
    cluster_by: str = "group_time"
    small_sample: bool = False
    tol: float = 1e-7
    max_iter: int = 10_000

    def __post_init__(self):
        est = tuple(self.estimators)
        bad = [e for e in est if e not in ESTIMATORS]
        if bad or not est:
            raise DataValidationError(f"unknown estimator(s) {bad}; choose from {ESTIMATORS}")
        object.__setattr__(self, "estimators", est)
        if not 0 < self.xi < 1:
            raise DataValidationError("xi must lie in (0, 1)")
        if self.cluster_by not in ("group_time", "group", "observation"):
            raise DataValidationError(f"unknown cluster definition {self.cluster_by!r}")
        if self.n_draws < 0:
            raise DataValidationError("n_draws must be nonnegative")


@dataclass(frozen=True)
class EstimateResult:
    estimator: str
    beta: np.ndarray
    se: Optional[np.ndarray]
    covariance: Optional[np.ndarray]
    pointwise: Optional[ConfidenceSet]
    simultaneous: Optional[ConfidenceSet]
    n_obs: int
    info: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        def lst(a):
            return None if a is None else [float(v) for v in np.asarray(a)]

        out = {
            "estimator": self.estimator,
            "beta": lst(self.beta),
            "se": lst(self.se),
            "ci_lower": lst(None if self.pointwise is None else self.pointwise.lower),
            "ci_upper": lst(None if self.pointwise is None else self.pointwise.upper),
            "level": None if self.pointwise is None else float(self.pointwise.level),
            "N": int(self.n_obs),
            "d": int(len(self.beta)),
        }
        out.update(self.info)
        if self.simultaneous is not None:
            out["simultaneous"] = {"c": float(self.simultaneous.band_constant),
                                   "lower": lst(self.simultaneous.lower),
                                   "upper": lst(self.simultaneous.upper)}
        else:
            out["simultaneous"] = None
        return out


def _seeds(seed):
    lam_seed, band_seed = np.random.SeedSequence(seed).generate_state(2)
    return int(lam_seed), int(band_seed)


def _wald(beta, omega, n, xi, n_draws, band_seed):
    se = np.sqrt(np.maximum(np.diag(omega), 0.0) / n)
    z = norm.ppf(1 - xi / 2)
    point = ConfidenceSet(1 - xi, beta - z * se, beta + z * se)
    band = None
    if n_draws > 0 and np.all(np.diag(omega) > 0):
        c = simultaneous_quantile(omega, xi, n_draws, band_seed)
        band = ConfidenceSet(1 - xi, beta - c * se, beta + c * se, "simultaneous", c)
    return se, point, band


def estimate_from_residuals(res: ResidualizedPanel, config: PipelineConfig, seed: int = 0,
                            data: Optional[PanelDataset] = None, nuisances=None) -> dict:
    """Run every configured second-stage estimator on ``res``.

    ``drdml`` also needs the dataset and the ``(l_hat, d_hat)`` nuisance
    arrays. Returns a dict keyed by estimator name.
    """
    lam_seed, band_seed = _seeds(seed)
    n = res.n_obs
    D, _ = res.stacked()
    d = D.shape[1]
    out = {}
    for name in config.estimators:
        if name == "ols":
            fit = orthogonal_ols(res, config.cluster_by, config.small_sample)
            se, point, band = _wald(fit.beta, fit.covariance, n, config.xi, config.n_draws,
                                    band_seed)
            out[name] = EstimateResult(name, fit.beta, se, fit.covariance, point, band, n)
        elif name == "drdml":
            if data is None or nuisances is None:
                raise DataValidationError("drdml needs the dataset and nuisance predictions")
            fit = drdml_from_nuisances(data, nuisances[0], nuisances[1], config.cluster_by)
            se, point, band = _wald(fit.beta, fit.covariance, n, config.xi, config.n_draws,
                                    band_seed)
            out[name] = EstimateResult(name, fit.beta, se, fit.covariance, point, band, n)
    hds = [e for e in config.estimators if e in ("lasso", "dol", "ridge")]
    if hds:
        lam = opt_lambda(res, config.lambda_policy, lam_seed, config.cluster_by)
        base = orthogonal_lasso(res, lam, config.tol, config.max_iter)
        info = {"lambda": float(lam), "active_set": list(base.active_set),
                "gradient_sup": float(base.gradient_sup)}
        if "lasso" in hds:
            out["lasso"] = EstimateResult("lasso", base.beta, None, None, None, None, n, dict(info))
        Q = D.T @ D / n
        for name in ("dol", "ridge"):
            if name not in hds:
                continue
            if name == "dol":
                mu = config.mu if config.mu is not None else default_mu(d, n, config.clime_a)
                prec = clime(Q, mu)
                extra = {"mu_n": float(mu), "max_row_support": prec.max_row_support}
            else:
                gam = (config.ridge_gamma if config.ridge_gamma is not None
                       else default_ridge_gamma(d, n))
                prec = ridge_inverse(Q, gam)
                extra = {"gamma": float(gam)}
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                fit = debias(res, base, prec, config.cluster_by, config.xi, config.n_draws,
                             band_seed)
            out[name] = EstimateResult(name, fit.beta, fit.std_errors, fit.covariance,
                                       fit.pointwise, fit.simultaneous, n, {**info, **extra})
    return {k: out[k] for k in config.estimators}


def run_estimation(data: PanelDataset, config: PipelineConfig, seed: int = 0):
    """Full recipe. Returns ``(results, residuals, fits)``."""
    from .first_stage import residualize

    fits: NuisanceFits = cross_fit(data, config=config.first_stage)
    res = residualize(data, fits)
    nuis = None
    if "drdml" in config.estimators:
        l_hat, d_hat, _ = predict_nuisances(data, fits)
        nuis = (l_hat, d_hat)
    results = estimate_from_residuals(res, config, seed, data, nuis)
    return results, res, fits
