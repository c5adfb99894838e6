"""First-stage nuisance estimation, cross-fitting and residualization.

Two reduced-form estimators are provided: a plain Lasso with an unpenalized
intercept (mean-form objective) and the dynamic panel Lasso with penalized
item effects (sum-form objective). ``cross_fit`` trains one set of models per
time fold on the complement periods only; ``residualize`` subtracts the
out-of-fold predictions.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _cd
from .errors import ConvergenceError, DataValidationError
from .panel_core import FoldPartition, PanelDataset, partition_folds

log = logging.getLogger(__name__)

__all__ = [
    "LassoModel",
    "DynamicPanelLassoModel",
    "FirstStageConfig",
    "NuisanceFits",
    "ResidualizedPanel",
    "fit_lasso",
    "fit_dynamic_panel_lasso",
    "kock_tang_lambda",
    "cross_fit",
    "predict_nuisances",
    "residualize",
]

DEFAULT_TOL = 1e-7
DEFAULT_MAX_ITER = 10_000
N_LAMBDAS = 25
LAMBDA_MIN_RATIO = 1e-3


# ------------------------------------------------------------------ models


@dataclass(frozen=True)
class LassoModel:
    """Fitted mean-form Lasso, coefficients on the original scale.

    ``objective_value`` is ``mean((y - X coef - intercept)**2) + lam *
    sum(scale * |coef|)``; ``scale`` is all ones when the fit was not
    standardized, in which case the penalty is the plain l1 norm.
    """

    coef: np.ndarray
    intercept: float
    lam: float
    active_set: tuple
    objective_value: float
    scale: np.ndarray
    n_iter: int = 0
    kkt_gap: float = 0.0
    trace: Optional[np.ndarray] = None

    def predict(self, X):
        X = np.asarray(X, dtype=float)
        return X @ self.coef + self.intercept


@dataclass(frozen=True)
class DynamicPanelLassoModel:
    """Fitted panel Lasso ``resp_it ~ Z_it'coef + a_i``.

    ``lam`` penalizes the (scaled) slope coefficients and
    ``heterogeneity_penalty = lam / sqrt(n_train)`` the item effects.
    """

    coef: np.ndarray
    heterogeneity: np.ndarray
    lam: float
    heterogeneity_penalty: float
    scale: np.ndarray
    n_train: int
    empty_items: tuple = ()
    n_iter: int = 0
    kkt_gap: float = 0.0
    objective_value: float = 0.0

    @property
    def active_set(self):
        return tuple(int(j) for j in np.flatnonzero(self.coef))

    def predict(self, X, items):
        X = np.asarray(X, dtype=float)
        return X @ self.coef + self.heterogeneity[np.asarray(items)]


def _soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


# ------------------------------------------------------------ plain Lasso


def _standardization(X, fit_intercept, standardize):
    n = X.shape[0]
    mean = X.mean(axis=0) if fit_intercept and n else np.zeros(X.shape[1])
    Xc = X - mean
    if standardize and n:
        scale = np.sqrt((Xc ** 2).mean(axis=0))
        scale[scale == 0] = 1.0
    else:
        scale = np.ones(X.shape[1])
    return mean, scale, Xc / scale


def _lasso_multi(X, Y, lams, tol, max_iter, fit_intercept=True, standardize=True, b0=None,
                 prep=None):
    """Fit one Lasso per column of Y sharing the design X.

    Returns standardized coefficients (p x r) plus the pieces needed to map
    them back to the original scale.
    """
    n, p = X.shape
    if prep is None:
        prep = _standardization(X, fit_intercept, standardize)
    mean, scale, Xs = prep[:3]
    ymean = Y.mean(axis=0) if fit_intercept else np.zeros(Y.shape[1])
    Yc = Y - ymean
    G = prep[3] if len(prep) > 3 else Xs.T @ Xs / n
    C = Xs.T @ Yc / n
    B, n_iter, gap, trace = _cd.solve(G, C, lams, b0=b0, tol=tol, max_iter=max_iter)
    return B, n_iter, gap, trace, (mean, scale, ymean)


def _lambda_max(X, Y, fit_intercept=True, standardize=True):
    _, _, Xs = _standardization(X, fit_intercept, standardize)
    Yc = Y - (Y.mean(axis=0) if fit_intercept else 0.0)
    return 2.0 * np.abs(Xs.T @ Yc / max(X.shape[0], 1)).max(axis=0, initial=0.0)


def fit_lasso(X, y, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER, *, fit_intercept=True,
              standardize=True, warm_start=None) -> LassoModel:
    """Minimize ``(1/n) sum (y - x'g - mu)^2 + lam * ||g||_1`` by coordinate descent.

    Columns are z-scored internally when ``standardize`` is set, so the
    penalty acts on standardized coefficients; the returned coefficients are
    on the original scale. The intercept ``mu`` is unpenalized.

    Raises
    ------
    ConvergenceError
        If the KKT gap is still above ``tol`` after ``max_iter`` sweeps.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if X.ndim != 2 or y.shape != (X.shape[0],):
        raise DataValidationError("fit_lasso expects X (n, p) and y (n,)")
    if X.shape[0] < 1:
        raise DataValidationError("fit_lasso needs at least one observation")
    if lam < 0:
        raise DataValidationError("lambda must be nonnegative")
    n, p = X.shape
    prep = _standardization(X, fit_intercept, standardize)
    b0 = None if warm_start is None else np.asarray(warm_start) * prep[1]
    B, n_iter, gap, trace, (mean, scale, ymean) = _lasso_multi(
        X, y[:, None], np.array([lam]), tol, max_iter, fit_intercept, standardize,
        b0=b0, prep=prep)
    if gap > tol:
        raise ConvergenceError(
            f"lasso did not converge in {max_iter} sweeps (KKT gap {gap:.3g})", gap, n_iter)
    b = B[:, 0]
    coef = b / scale
    intercept = float(ymean[0] - mean @ coef)
    resid = y - X @ coef - intercept
    obj = float(np.mean(resid ** 2) + lam * np.abs(b).sum())
    c_y = float(np.mean((y - ymean[0]) ** 2))
    return LassoModel(
        coef=coef,
        intercept=intercept,
        lam=float(lam),
        active_set=tuple(int(j) for j in np.flatnonzero(coef)),
        objective_value=obj,
        scale=scale,
        n_iter=n_iter,
        kkt_gap=float(gap),
        trace=trace[:, 0] + c_y,
    )


# ------------------------------------------------------ dynamic panel Lasso


def _panel_gram(X, items, n_items, fit_heterogeneity):
    """Sum-form Gram of [X, item dummies]."""
    if not fit_heterogeneity:
        return X.T @ X
    p = X.shape[1]
    G = np.zeros((p + n_items, p + n_items))
    G[:p, :p] = X.T @ X
    XE = np.zeros((p, n_items))
    np.add.at(XE.T, items, X)
    G[:p, p:] = XE
    G[p:, :p] = XE.T
    G[p:, p:] = np.diag(np.bincount(items, minlength=n_items).astype(float))
    return G


def _panel_rhs(X, R, items, n_items, fit_heterogeneity):
    c = X.T @ R
    if not fit_heterogeneity:
        return c
    ce = np.zeros((n_items,) + R.shape[1:])
    np.add.at(ce, items, R)
    return np.concatenate([c, ce], axis=0)


def fit_dynamic_panel_lasso(X, response, items, lam, tol=DEFAULT_TOL, max_iter=DEFAULT_MAX_ITER,
                            *, n_items=None, standardize=True, fit_heterogeneity=True,
                            warm_start=None) -> DynamicPanelLassoModel:
    """Panel Lasso with penalized item effects.

    Minimizes ``sum_(i,t) (r_it - Z_it'g - a_i)^2 + lam ||g||_1 +
    (lam / sqrt(N)) ||a||_1`` over the supplied training rows, N being the
    number of rows. With ``standardize`` the columns of Z are divided by
    their standard deviation (no centering, the item effects carry the
    level) so the l1 penalty acts on the scaled coefficients.

    ``tol`` bounds the sum-form KKT gap divided by N. Items with no training
    rows get ``a_i = 0`` and are listed in ``empty_items``.
    """
    X = np.asarray(X, dtype=float)
    r = np.asarray(response, dtype=float)
    items = np.asarray(items, dtype=int)
    n = X.shape[0]
    if X.ndim != 2 or r.shape != (n,) or items.shape != (n,):
        raise DataValidationError("fit_dynamic_panel_lasso expects X (n,p), response (n,), items (n,)")
    if lam < 0:
        raise DataValidationError("lambda must be nonnegative")
    n_items = int(items.max()) + 1 if n_items is None else int(n_items)
    p = X.shape[1]
    if standardize and n:
        scale = X.std(axis=0)
        scale[scale == 0] = 1.0
    else:
        scale = np.ones(p)
    Xs = X / scale
    lam_a = lam / math.sqrt(n) if n else 0.0
    G = _panel_gram(Xs, items, n_items, fit_heterogeneity)
    c = _panel_rhs(Xs, r, items, n_items, fit_heterogeneity)
    w = np.ones(G.shape[0])
    if fit_heterogeneity and lam > 0:
        w[p:] = lam_a / lam
    elif fit_heterogeneity:
        w[p:] = 0.0
    b0 = None
    if warm_start is not None:
        b0 = np.asarray(warm_start, dtype=float).copy()
        b0[:p] *= scale
    b, n_iter, gap, _ = _cd.solve(G, c, lam, w=w, b0=b0, tol=tol * max(n, 1), max_iter=max_iter)
    if gap > tol * max(n, 1):
        raise ConvergenceError(
            f"panel lasso did not converge in {max_iter} sweeps (KKT gap {gap / max(n, 1):.3g})",
            gap / max(n, 1), n_iter)
    coef = b[:p] / scale
    if fit_heterogeneity:
        a = b[p:].copy()
    else:
        a = np.zeros(n_items)
    counts = np.bincount(items, minlength=n_items)
    empty = tuple(int(i) for i in np.flatnonzero(counts == 0))
    a[counts == 0] = 0.0
    resid = r - X @ coef - a[items]
    obj = float(resid @ resid + lam * np.abs(b[:p]).sum() + lam_a * np.abs(a).sum())
    return DynamicPanelLassoModel(
        coef=coef,
        heterogeneity=a,
        lam=float(lam),
        heterogeneity_penalty=float(lam_a),
        scale=scale,
        n_train=n,
        empty_items=empty,
        n_iter=n_iter,
        kkt_gap=float(gap / max(n, 1)),
        objective_value=obj,
    )


def kock_tang_lambda(n_groups: int, n_obs: int, n_controls: int) -> float:
    """``((4 * M * N * log(max(p, N)))**3) ** 0.5`` for the sum-form panel Lasso."""
    return float(((4.0 * n_groups * n_obs * math.log(max(n_controls, n_obs))) ** 3) ** 0.5)


# -------------------------------------------------------------- cross-fit


@dataclass(frozen=True)
class LambdaPolicy:
    kind: str  # fixed | kock_tang | cv
    value: float = 0.0
    cv_folds: int = 5

    @classmethod
    def parse(cls, text) -> "LambdaPolicy":
        if isinstance(text, LambdaPolicy):
            return text
        text = str(text).strip()
        if text == "kock_tang":
            return cls("kock_tang")
        kind, _, arg = text.partition(":")
        try:
            if kind == "fixed":
                v = float(arg)
                if v < 0:
                    raise ValueError
                return cls("fixed", value=v)
            if kind == "cv":
                k = int(arg) if arg else 5
                if k < 2:
                    raise ValueError
                return cls("cv", cv_folds=k)
        except ValueError:
            pass
        raise DataValidationError(
            f"lambda_policy must be fixed:<v>, kock_tang or cv:<folds>, got {text!r}")

    def __str__(self):
        if self.kind == "fixed":
            return f"fixed:{self.value!r}"
        if self.kind == "cv":
            return f"cv:{self.cv_folds}"
        return self.kind


@dataclass(frozen=True)
class FirstStageConfig:
    estimator: str = "lasso"
    lambda_policy: LambdaPolicy = field(default_factory=lambda: LambdaPolicy("cv", cv_folds=5))
    k_folds: int = 5
    affine_lift: bool = False
    standardize: bool = True
    tol: float = DEFAULT_TOL
    max_iter: int = DEFAULT_MAX_ITER

    def __post_init__(self):
        if self.estimator not in ("lasso", "dynamic_panel_lasso"):
            raise DataValidationError(
                f"estimator must be lasso or dynamic_panel_lasso, got {self.estimator!r}")
        object.__setattr__(self, "lambda_policy", LambdaPolicy.parse(self.lambda_policy))
        if int(self.k_folds) < 2:
            raise DataValidationError("cross-fitting requires complement folds")


@dataclass(frozen=True)
class NuisanceFits:
    """Per-fold reduced-form models.

    ``treatment_models[k][j]`` is None for columns obtained by lifting the
    base-price model ``base_models[k]``.
    """

    folds: FoldPartition
    outcome_models: tuple
    treatment_models: tuple
    base_models: Optional[tuple]
    lifted: tuple
    estimator_kind: str
    train_periods: tuple


@dataclass(frozen=True)
class ResidualizedPanel:
    """Cross-fitted residuals on the (item, period) grid.

    ``group`` is the cluster layout of the items; clusters for inference
    are ``(group, period)`` blocks.
    """

    y_res: np.ndarray
    d_res: np.ndarray
    fold_used: np.ndarray
    group: np.ndarray

    @property
    def n_obs(self):
        return self.y_res.size

    @property
    def n_treatments(self):
        return self.d_res.shape[2]

    def stacked(self):
        """Pooled observations: (N, d) treatment residuals and (N,) outcome residuals."""
        n_i, n_t, d = self.d_res.shape
        return self.d_res.reshape(n_i * n_t, d), self.y_res.reshape(n_i * n_t)

    def cluster_index(self, by="group_time"):
        """Cluster label for every stacked observation (item-major order)."""
        n_i, n_t = self.y_res.shape
        g = np.repeat(self.group, n_t)
        if by == "group":
            return g
        if by == "group_time":
            return g * n_t + np.tile(np.arange(n_t), n_i)
        if by == "observation":
            return np.arange(n_i * n_t)
        raise DataValidationError(f"unknown cluster definition {by!r}")


def _time_blocks(periods, n_blocks):
    periods = np.asarray(periods)
    n_blocks = min(n_blocks, len(periods))
    inner = partition_folds(len(periods), n_blocks)
    return [periods[inner.periods(b)] for b in range(n_blocks)]


def _rows(arr, periods):
    sub = arr[:, periods]
    return sub.reshape((sub.shape[0] * sub.shape[1],) + sub.shape[2:])


def _lasso_cv_multi(X3, R3, periods, cfg: FirstStageConfig):
    """Time-blocked CV over a relative lambda grid; one lambda per response."""
    Xtr, Rtr = _rows(X3, periods), _rows(R3, periods)
    lmax = _lambda_max(Xtr, Rtr, standardize=cfg.standardize)
    ratios = np.geomspace(1.0, LAMBDA_MIN_RATIO, N_LAMBDAS)
    blocks = _time_blocks(periods, cfg.lambda_policy.cv_folds)
    err = np.zeros((N_LAMBDAS, Rtr.shape[1]))
    for held in blocks:
        fit_p = np.setdiff1d(periods, held)
        Xf, Rf = _rows(X3, fit_p), _rows(R3, fit_p)
        Xh, Rh = _rows(X3, held), _rows(R3, held)
        prep = _standardization(Xf, True, cfg.standardize)
        prep = prep + (prep[2].T @ prep[2] / len(Xf),)
        B = None
        for li, ratio in enumerate(ratios):
            B, _, gap, _, (mean, scale, ymean) = _lasso_multi(
                Xf, Rf, lmax * ratio, cfg.tol, cfg.max_iter, True, cfg.standardize, b0=B, prep=prep)
            coef = B / scale[:, None]
            pred = Xh @ coef + (ymean - mean @ coef)
            err[li] += ((Rh - pred) ** 2).sum(axis=0)
    best = ratios[np.argmin(err, axis=0)]
    return lmax * best


def _panel_cv(X3, r2, periods, cfg: FirstStageConfig):
    Xtr, rtr = _rows(X3, periods), _rows(r2, periods)
    n_items = X3.shape[0]
    items_tr = _rows(np.broadcast_to(np.arange(n_items)[:, None], r2.shape), periods)
    scale = Xtr.std(axis=0) if cfg.standardize else np.ones(Xtr.shape[1])
    scale[scale == 0] = 1.0
    means = np.bincount(items_tr, weights=rtr, minlength=n_items) / np.maximum(
        np.bincount(items_tr, minlength=n_items), 1)
    lmax = 2.0 * np.abs((Xtr / scale).T @ (rtr - means[items_tr])).max(initial=0.0)
    if lmax == 0:
        return 0.0
    grid = lmax * np.geomspace(1.0, LAMBDA_MIN_RATIO, N_LAMBDAS)
    blocks = _time_blocks(periods, cfg.lambda_policy.cv_folds)
    err = np.zeros(N_LAMBDAS)
    items_all = np.arange(n_items)
    for held in blocks:
        fit_p = np.setdiff1d(periods, held)
        Xf, rf = _rows(X3, fit_p), _rows(r2, fit_p)
        itf = np.repeat(items_all, len(fit_p))
        Xh, rh = _rows(X3, held), _rows(r2, held)
        ith = np.repeat(items_all, len(held))
        warm = None
        for li, lam in enumerate(grid):
            m = fit_dynamic_panel_lasso(Xf, rf, itf, lam, cfg.tol, cfg.max_iter, n_items=n_items,
                                        standardize=cfg.standardize, warm_start=warm)
            warm = np.concatenate([m.coef, m.heterogeneity])
            err[li] += ((rh - m.predict(Xh, ith)) ** 2).sum()
    return float(grid[np.argmin(err)])


def _fixed_lambdas(policy, n_resp, n_groups, n_train, n_controls, kind):
    if policy.kind == "fixed":
        return np.full(n_resp, policy.value)
    lam = kock_tang_lambda(n_groups, n_train, max(n_controls, 1))
    if kind == "lasso":
        # the formula is stated for the sum-form objective
        lam = lam / n_train
    return np.full(n_resp, lam)


def _fit_fold(data, X3, responses, periods, cfg):
    """Models for each response (list of (I, T) arrays) on the given periods."""
    n_items = data.n_items
    R3 = np.stack(responses, axis=2)
    n_train = n_items * len(periods)
    pol = cfg.lambda_policy
    if cfg.estimator == "lasso":
        if pol.kind == "cv":
            lams = _lasso_cv_multi(X3, R3, periods, cfg)
        else:
            lams = _fixed_lambdas(pol, R3.shape[2], data.n_groups, n_train, X3.shape[2], "lasso")
        Xtr, Rtr = _rows(X3, periods), _rows(R3, periods)
        models = [fit_lasso(Xtr, Rtr[:, j], lams[j], cfg.tol, cfg.max_iter,
                            standardize=cfg.standardize) for j in range(R3.shape[2])]
        return models
    items = np.repeat(np.arange(n_items), len(periods))
    Xtr = _rows(X3, periods)
    models = []
    for j, resp in enumerate(responses):
        if pol.kind == "cv":
            lam = _panel_cv(X3, resp, periods, cfg)
        else:
            lam = _fixed_lambdas(pol, 1, data.n_groups, n_train, X3.shape[2], "panel")[0]
        models.append(fit_dynamic_panel_lasso(
            Xtr, _rows(resp, periods), items, lam, cfg.tol, cfg.max_iter, n_items=n_items,
            standardize=cfg.standardize))
    return models


def cross_fit(data: PanelDataset, folds: Optional[FoldPartition] = None,
              config: Optional[FirstStageConfig] = None) -> NuisanceFits:
    """Fit reduced forms for every fold on its complement periods (DML2).

    With ``config.affine_lift`` and affine maps on the dataset, a single
    base-price model is fitted per fold and technical treatments are lifted
    from it; columns without a map are fitted directly (logged).
    """
    config = config or FirstStageConfig()
    if folds is None:
        folds = partition_folds(data.n_periods, config.k_folds)
    if folds.n_periods != data.n_periods:
        raise DataValidationError("fold partition does not match the panel length")
    X3 = data.design()
    lifted = [False] * data.n_treatments
    use_base = False
    if config.affine_lift:
        if data.price is None or data.affine_maps is None:
            log.info("affine_lift requested but no price/affine maps; fitting every column")
        else:
            lifted = [m is not None for m in data.affine_maps]
            use_base = any(lifted)
            for j, ok in enumerate(lifted):
                if not ok:
                    log.info("treatment %s has no affine map; fitting it directly",
                             data.treatment_labels[j])
    direct = [j for j in range(data.n_treatments) if not lifted[j]]
    responses = [data.y] + [data.treatments[:, :, j] for j in direct]
    if use_base:
        responses.append(data.price)
    outcome_models, treatment_models, base_models, train = [], [], [], []
    for k in range(folds.n_folds):
        periods = folds.complement(k)
        if len(periods) == 0:
            raise DataValidationError(f"fold {k} has an empty complement")
        models = _fit_fold(data, X3, responses, periods, config)
        outcome_models.append(models[0])
        tm = [None] * data.n_treatments
        for pos, j in enumerate(direct):
            tm[j] = models[1 + pos]
        treatment_models.append(tuple(tm))
        base_models.append(models[-1] if use_base else None)
        train.append(tuple(int(t) for t in periods))
    return NuisanceFits(
        folds=folds,
        outcome_models=tuple(outcome_models),
        treatment_models=tuple(treatment_models),
        base_models=tuple(base_models) if use_base else None,
        lifted=tuple(lifted),
        estimator_kind=config.estimator,
        train_periods=tuple(train),
    )


def _predict_block(model, X3, periods):
    n_items = X3.shape[0]
    Xb = _rows(X3, periods)
    if isinstance(model, DynamicPanelLassoModel):
        pred = model.predict(Xb, np.repeat(np.arange(n_items), len(periods)))
    else:
        pred = model.predict(Xb)
    return pred.reshape(n_items, len(periods))


def predict_nuisances(data: PanelDataset, fits: NuisanceFits):
    """Out-of-fold predictions ``(l_hat (I,T), d_hat (I,T,d), p_hat (I,T) or None)``."""
    from .demand import affine_nuisance_lift

    X3 = data.design()
    folds = fits.folds
    l_hat = np.empty(data.y.shape)
    d_hat = np.empty(data.treatments.shape)
    p_hat = np.empty(data.y.shape) if fits.base_models is not None else None
    for k in range(folds.n_folds):
        per = folds.periods(k)
        l_hat[:, per] = _predict_block(fits.outcome_models[k], X3, per)
        for j, m in enumerate(fits.treatment_models[k]):
            if m is not None:
                d_hat[:, per, j] = _predict_block(m, X3, per)
        if p_hat is not None:
            p_hat[:, per] = _predict_block(fits.base_models[k], X3, per)
    if p_hat is not None:
        lifted = affine_nuisance_lift(p_hat, data.affine_maps)
        for j, flag in enumerate(fits.lifted):
            if flag:
                d_hat[:, :, j] = lifted[:, :, j]
    return l_hat, d_hat, p_hat


def residualize(data: PanelDataset, fits: NuisanceFits,
                folds: Optional[FoldPartition] = None) -> ResidualizedPanel:
    """Outcome and treatment residuals using each period's own-fold models."""
    folds = folds or fits.folds
    if folds.n_periods != data.n_periods or folds.n_folds != len(fits.outcome_models):
        raise DataValidationError("nuisance fits do not cover the panel's folds")
    l_hat, d_hat, _ = predict_nuisances(data, fits)
    return ResidualizedPanel(
        y_res=data.y - l_hat,
        d_res=data.treatments - d_hat,
        fold_used=np.asarray(folds.fold_of_time).copy(),
        group=np.asarray(data.group).copy(),
    )


def residuals_from_nuisances(data: PanelDataset, l_hat, d_hat, fold_used=None) -> ResidualizedPanel:
    """Residualize against arbitrary nuisance arrays (oracle or user supplied)."""
    l_hat = np.asarray(l_hat, dtype=float)
    d_hat = np.asarray(d_hat, dtype=float).reshape(data.treatments.shape)
    if fold_used is None:
        fold_used = np.zeros(data.n_periods, dtype=int)
    return ResidualizedPanel(
        y_res=data.y - l_hat,
        d_res=data.treatments - d_hat,
        fold_used=np.asarray(fold_used),
        group=np.asarray(data.group).copy(),
    )
