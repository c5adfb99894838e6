"""Synthetic dynamic panels with known nuisances and a Monte Carlo harness.

The generating model is

    D_it = Gamma'Z_it + b_i + V_it            (direct mode)
    Y_it = D_it'beta + Z_it'gamma_Y + a_i + U_it

with Z_it stacking lags of (Y, P) (P is the first treatment column) and
exogenous Gaussian covariates X_it. In affine mode only the base price has
its own equation, ``P = Z'gamma_P + b + V``, and the treatments are
``D = (P, X_1 P, ..., X_{d-1} P)``.

Innovations are correlated within (group, period) clusters and
independent across clusters; item effects follow a weak-sparsity
profile with ``sum |a_i|^nu = s``.
"""
from __future__ import annotations

import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import _cd
from .demand import AffineMap
from .errors import DataValidationError, ReplicationError
from .first_stage import ResidualizedPanel, predict_nuisances
from .panel_core import BetaSpec, PanelDataset, partition_folds
from .pipeline import PipelineConfig, estimate_from_residuals, run_estimation
from .second_stage_hds import gradient_sup_norm, opt_lambda, orthogonal_lasso

__all__ = [
    "DgpConfig",
    "OracleBundle",
    "generate_panel",
    "oracle_residualize",
    "empirical_q_n",
    "decomposition_terms",
    "fit_baseline_lasso",
    "baseline_lasso_comparison",
    "ComparisonRecord",
    "replication_seeds",
    "run_replication",
    "run_monte_carlo",
    "MonteCarloReport",
]


@dataclass(frozen=True)
class DgpConfig:
    """Synthetic panel design.

    Coefficients and item effects are drawn once from ``design_seed`` and
    stay fixed across replications; innovations and covariates come from
    ``seed`` (or the per-replication seed).
    """

    M: int = 100
    C: int = 2
    T: int = 10
    d: int = 5
    n_exog: int = 10
    beta: Optional[tuple] = None
    s: Optional[int] = None
    beta_value: float = 1.0
    s_gamma: int = 3
    gamma_y_scale: float = 0.5
    gamma_p_scale: float = 0.5
    shared_support: bool = True
    gamma_y: Optional[tuple] = None
    gamma_p: Optional[tuple] = None
    lags_y: int = 0
    lags_p: int = 0
    ar_y: float = 0.0
    ar_p: float = 0.0
    cross_py: float = 0.0
    cross_yp: float = 0.0
    het_nu: float = 0.5
    het_budget: float = 0.0
    noise_sd_u: float = 1.0
    noise_sd_v: float = 1.0
    rho: float = 0.0
    innovation: str = "gaussian"
    treatment_mode: str = "direct"
    design_seed: int = 0
    seed: int = 0

    def __post_init__(self):
        for name in ("M", "C", "T", "d"):
            if int(getattr(self, name)) < 1:
                raise DataValidationError(f"{name} must be at least 1")
        for name in ("n_exog", "s_gamma", "lags_y", "lags_p"):
            if int(getattr(self, name)) < 0:
                raise DataValidationError(f"{name} must be nonnegative")
        if self.s_gamma > self.n_exog:
            raise DataValidationError("s_gamma cannot exceed n_exog")
        if not -1 < self.rho < 1:
            raise DataValidationError("rho must satisfy |rho| < 1")
        if self.C > 1 and self.rho <= -1.0 / (self.C - 1):
            raise DataValidationError("rho too negative for an equicorrelated cluster")
        if not 0 < self.het_nu < 1:
            raise DataValidationError("het_nu must lie in (0, 1)")
        if self.het_budget < 0 or self.noise_sd_u < 0 or self.noise_sd_v < 0:
            raise DataValidationError("budgets and noise scales must be nonnegative")
        if self.innovation not in ("gaussian", "uniform"):
            raise DataValidationError("innovation must be gaussian or uniform")
        if self.treatment_mode not in ("direct", "affine"):
            raise DataValidationError("treatment_mode must be direct or affine")
        if self.treatment_mode == "affine" and self.n_exog < self.d - 1:
            raise DataValidationError("affine mode needs n_exog >= d - 1 interaction covariates")
        if self.beta is not None:
            object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))
            if len(self.beta) != self.d:
                raise DataValidationError("beta must have length d")
        elif self.s is not None and not 0 <= self.s <= self.d:
            raise DataValidationError("s must lie in 0..d")
        for name in ("gamma_y", "gamma_p"):
            val = getattr(self, name)
            if val is not None:
                object.__setattr__(self, name, tuple(np.asarray(val, dtype=float).ravel()))

    @classmethod
    def from_dict(cls, raw: dict) -> "DgpConfig":
        known = {f.name for f in fields(cls)}
        extra = set(raw) - known
        if extra:
            raise DataValidationError(f"unknown dgp keys: {sorted(extra)}")
        return cls(**raw)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(self).items()}

    @property
    def n_items(self):
        return self.M * self.C

    @property
    def n_obs(self):
        return self.M * self.C * self.T

    @property
    def p(self):
        return self.lags_y + self.lags_p + self.n_exog

    @property
    def lag_depth(self):
        return max(self.lags_y, self.lags_p)

    @property
    def beta_spec(self) -> BetaSpec:
        if self.beta is not None:
            return BetaSpec(np.array(self.beta))
        s = self.d if self.s is None else self.s
        b = np.zeros(self.d)
        b[:s] = self.beta_value
        return BetaSpec(b)

    def control_names(self):
        return tuple([f"ylag{l}" for l in range(1, self.lags_y + 1)]
                     + [f"plag{l}" for l in range(1, self.lags_p + 1)]
                     + [f"x{k}" for k in range(1, self.n_exog + 1)])


@dataclass(frozen=True, eq=False)
class OracleBundle:
    """True nuisances and innovations of a generated panel."""

    beta: np.ndarray
    l0: np.ndarray
    d0: np.ndarray
    p0: np.ndarray
    u: np.ndarray
    v: np.ndarray
    a: np.ndarray
    b: np.ndarray
    gamma_y: np.ndarray
    gamma_d: np.ndarray

    @property
    def support(self):
        return tuple(int(j) for j in np.flatnonzero(self.beta))


# ----------------------------------------------------------------- design


def _weak_sparse(rng, n, nu, budget):
    if budget == 0:
        return np.zeros(n)
    raw = np.arange(1, n + 1, dtype=float) ** (-2.0 / nu)
    scale = (budget / np.sum(raw ** nu)) ** (1.0 / nu)
    out = scale * raw[rng.permutation(n)]
    return out * rng.choice([-1.0, 1.0], size=n)


def _design(cfg: DgpConfig):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(cfg.design_seed)))
    p, ly, lp = cfg.p, cfg.lags_y, cfg.lags_p
    n_eq = cfg.d if cfg.treatment_mode == "direct" else 1
    off = ly + lp

    def exog(scale, support):
        g = np.zeros(cfg.n_exog)
        g[support] = scale * rng.choice([-1.0, 1.0], size=len(support))
        return g

    common = np.sort(rng.permutation(cfg.n_exog)[:cfg.s_gamma])

    def support():
        if cfg.shared_support:
            return common
        return np.sort(rng.permutation(cfg.n_exog)[:cfg.s_gamma])

    decay_y = 0.5 ** np.arange(ly)
    decay_p = 0.5 ** np.arange(lp)
    gd = np.zeros((p, n_eq))
    gd[:ly, 0] = cfg.cross_py * decay_y
    gd[ly:off, 0] = cfg.ar_p * decay_p
    for j in range(n_eq):
        gd[off:, j] = exog(cfg.gamma_p_scale, support())
    gy = np.zeros(p)
    gy[:ly] = cfg.ar_y * decay_y
    gy[ly:off] = cfg.cross_yp * decay_p
    gy[off:] = exog(cfg.gamma_y_scale, support())
    if cfg.gamma_y is not None:
        gy = np.array(cfg.gamma_y)
        if gy.shape != (p,):
            raise DataValidationError(f"gamma_y must have length p={p}")
    if cfg.gamma_p is not None:
        gd = np.array(cfg.gamma_p).reshape(p, -1)
        if gd.shape != (p, n_eq):
            raise DataValidationError(f"gamma_p must have shape ({p}, {n_eq})")
    a = _weak_sparse(rng, cfg.n_items, cfg.het_nu, cfg.het_budget)
    b = np.stack([_weak_sparse(rng, cfg.n_items, cfg.het_nu, cfg.het_budget)
                  for _ in range(n_eq)], axis=1)
    return gy, gd, a, b


def companion_radius(cfg: DgpConfig, gamma_y, gamma_d, beta) -> float:
    """Spectral radius of the (P, Y) lag recursion."""
    L = cfg.lag_depth
    if L == 0:
        return 0.0
    ly, lp = cfg.lags_y, cfg.lags_p
    b0 = beta[0]
    A = np.zeros((2, 2 * L))
    for l in range(L):
        pp = gamma_d[ly + l, 0] if l < lp else 0.0
        py = gamma_d[l, 0] if l < ly else 0.0
        yp = gamma_y[ly + l] if l < lp else 0.0
        yy = gamma_y[l] if l < ly else 0.0
        A[0, 2 * l:2 * l + 2] = [pp, py]
        A[1, 2 * l:2 * l + 2] = [b0 * pp + yp, b0 * py + yy]
    comp = np.zeros((2 * L, 2 * L))
    comp[:2] = A
    comp[2:, :-2] = np.eye(2 * L - 2)
    return float(np.abs(np.linalg.eigvals(comp)).max())


def _innovations(rng, cfg, n_periods, n_series):
    """(n_periods, M, C, n_series) innovations with equicorrelation rho inside clusters."""
    shape = (n_periods, cfg.M, cfg.C, n_series)
    if cfg.innovation == "gaussian":
        z = rng.standard_normal(shape)
    else:
        z = rng.uniform(-np.sqrt(3.0), np.sqrt(3.0), size=shape)
    if cfg.rho != 0 and cfg.C > 1:
        R = np.full((cfg.C, cfg.C), cfg.rho)
        np.fill_diagonal(R, 1.0)
        L = np.linalg.cholesky(R)
        z = np.einsum("ij,tmjs->tmis", L, z)
    return z


def generate_panel(cfg: DgpConfig, seed=None):
    """Draw a panel and its oracle bundle.

    ``seed`` (int or ``SeedSequence``) overrides ``cfg.seed``. Items are
    ordered group-major: item ``m*C + c``.

    Raises
    ------
    DataValidationError
        When the lag recursion is explosive.
    """
    beta = cfg.beta_spec.coefficients
    gy, gd, a, b = _design(cfg)
    rad = companion_radius(cfg, gy, gd, beta)
    if rad >= 1:
        raise DataValidationError(f"explosive lag configuration (spectral radius {rad:.3f} >= 1)")
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(
        cfg.seed if seed is None else seed)
    rng = np.random.Generator(np.random.Philox(ss))
    I, T, d = cfg.n_items, cfg.T, cfg.d
    burn = 3 * cfg.lag_depth
    TT = T + burn
    n_eq = gd.shape[1]
    X = rng.standard_normal((TT, I, cfg.n_exog))
    eps = _innovations(rng, cfg, TT, 1 + n_eq).reshape(TT, I, 1 + n_eq)
    U = cfg.noise_sd_u * eps[:, :, 0]
    V = cfg.noise_sd_v * eps[:, :, 1:]
    Y = np.zeros((TT, I))
    P = np.zeros((TT, I))
    Z = np.zeros((TT, I, cfg.p))
    Dm = np.zeros((TT, I, d))
    l0 = np.zeros((TT, I))
    d0 = np.zeros((TT, I, d))
    p0 = np.zeros((TT, I))
    ly, lp = cfg.lags_y, cfg.lags_p
    for t in range(TT):
        for l in range(1, ly + 1):
            if t - l >= 0:
                Z[t, :, l - 1] = Y[t - l]
        for l in range(1, lp + 1):
            if t - l >= 0:
                Z[t, :, ly + l - 1] = P[t - l]
        Z[t, :, ly + lp:] = X[t]
        m_eq = Z[t] @ gd + b
        if cfg.treatment_mode == "direct":
            d0[t] = m_eq
            Dm[t] = m_eq + V[t]
            p0[t] = d0[t, :, 0]
            P[t] = Dm[t, :, 0]
        else:
            p0[t] = m_eq[:, 0]
            P[t] = p0[t] + V[t, :, 0]
            inter = np.concatenate([np.ones((I, 1)), X[t][:, :d - 1]], axis=1)
            d0[t] = inter * p0[t][:, None]
            Dm[t] = inter * P[t][:, None]
        l0[t] = d0[t] @ beta + Z[t] @ gy + a
        Y[t] = Dm[t] @ beta + Z[t] @ gy + a + U[t]
    keep = slice(burn, TT)

    def item_major(arr):
        return np.ascontiguousarray(np.swapaxes(arr[keep], 0, 1))

    group = np.repeat(np.arange(cfg.M), cfg.C)
    price = item_major(P)
    maps = None
    if cfg.treatment_mode == "affine":
        Xk = item_major(X)
        maps = tuple([AffineMap(np.ones((I, T)), None, "own", "base")]
                     + [AffineMap(Xk[:, :, k], None, "interaction", f"x{k + 1}")
                        for k in range(d - 1)])
    labels = (("price",) + tuple(f"price_x{k + 1}" for k in range(d - 1))
              if cfg.treatment_mode == "affine" else ())
    data = PanelDataset(
        y=item_major(Y), treatments=item_major(Dm), controls=item_major(Z), group=group,
        price=price, treatment_labels=labels, control_names=cfg.control_names(),
        affine_maps=maps)
    oracle = OracleBundle(
        beta=beta.copy(), l0=item_major(l0), d0=item_major(d0), p0=item_major(p0),
        u=item_major(U), v=item_major(V), a=a, b=b, gamma_y=gy, gamma_d=gd)
    return data, oracle


def oracle_residualize(data: PanelDataset, oracle: OracleBundle, fold_used=None) -> ResidualizedPanel:
    """Residuals against the true nuisances ``l0`` and ``d0``."""
    if fold_used is None:
        fold_used = np.zeros(data.n_periods, dtype=int)
    return ResidualizedPanel(
        y_res=data.y - oracle.l0,
        d_res=data.treatments - oracle.d0,
        fold_used=np.asarray(fold_used).copy(),
        group=np.asarray(data.group).copy(),
    )


def empirical_q_n(feasible: ResidualizedPanel, oracle: ResidualizedPanel) -> float:
    """``max |Q_hat - Q_tilde|`` over all entries."""
    Df, _ = feasible.stacked()
    Do, _ = oracle.stacked()
    if Df.shape != Do.shape:
        raise DataValidationError("residual panels are not aligned")
    n = Df.shape[0]
    return float(np.abs(Df.T @ Df / n - Do.T @ Do / n).max(initial=0.0))


def decomposition_terms(data: PanelDataset, oracle: OracleBundle, l_hat, d_hat, beta_hat) -> dict:
    """Terms a, b, c, d of the Orthogonal Lasso error decomposition.

    With ``delta = beta_hat - beta0`` and ``e = (l0 - l_hat) - (d0 - d_hat)'beta0``,
    ``Q(beta_hat) - Q(beta0) - E_N (D_hat'delta)^2 = -2 (a + b + c + d)``.
    Returns the four terms together with both sides of that identity.
    """
    n = data.n_obs
    d = data.n_treatments
    beta0 = oracle.beta
    delta = np.asarray(beta_hat, dtype=float) - beta0
    U = oracle.u.reshape(n)
    Dt = (data.treatments - oracle.d0).reshape(n, d)
    dd = (oracle.d0 - np.asarray(d_hat)).reshape(n, d)
    ll = (oracle.l0 - np.asarray(l_hat)).reshape(n)
    e = ll - dd @ beta0
    terms = {
        "a": float(np.mean(U * (Dt @ delta))),
        "b": float(np.mean(U * (dd @ delta))),
        "c": float(np.mean(e * (Dt @ delta))),
        "d": float(np.mean(e * (dd @ delta))),
    }
    Yh = (data.y - np.asarray(l_hat)).reshape(n)
    Dh = (data.treatments - np.asarray(d_hat)).reshape(n, d)

    def Q(b):
        return float(np.mean((Yh - Dh @ b) ** 2))

    terms["lhs"] = Q(np.asarray(beta_hat, dtype=float)) - Q(beta0) - float(np.mean((Dh @ delta) ** 2))
    terms["rhs"] = -2.0 * (terms["a"] + terms["b"] + terms["c"] + terms["d"])
    return terms


# --------------------------------------------------------- baseline Lasso


def _baseline_system(data: PanelDataset, periods, standardize=True):
    X = np.concatenate([data.treatments, data.design()], axis=2)[:, periods]
    X = X.reshape(-1, X.shape[2])
    y = data.y[:, periods].reshape(-1)
    mean = X.mean(axis=0)
    scale = X.std(axis=0) if standardize else np.ones(X.shape[1])
    scale[scale == 0] = 1.0
    Xs = (X - mean) / scale
    n = len(y)
    return Xs.T @ Xs / n, Xs.T @ (y - y.mean()) / n, mean, scale, float(y.mean())


def fit_baseline_lasso(data: PanelDataset, lam_beta: float, lam_gamma: float,
                       standardize: bool = True, tol: float = 1e-7, max_iter: int = 10_000,
                       periods=None, warm_start=None):
    """One-stage Lasso of Y on (D, Z) with separate penalties for beta and gamma.

    Objective ``mean (Y - D'b - Z'g - mu)^2 + lam_beta |b|_1 + lam_gamma |g|_1``
    (penalties on standardized columns when ``standardize``). Returns
    ``(beta, gamma, intercept)``.
    """
    periods = np.arange(data.n_periods) if periods is None else np.asarray(periods)
    G, c, mean, scale, ybar = _baseline_system(data, periods, standardize)
    return _baseline_solve(G, c, mean, scale, ybar, data.n_treatments, lam_beta, lam_gamma,
                           tol, max_iter, warm_start)[:3]


def _baseline_solve(G, c, mean, scale, ybar, d, lam_beta, lam_gamma, tol=1e-7,
                    max_iter=10_000, warm_start=None):
    w = np.concatenate([np.full(d, lam_beta), np.full(len(c) - d, lam_gamma)])
    b, _, _, _ = _cd.solve(G, c, 1.0, w=w, b0=warm_start, tol=tol, max_iter=max_iter)
    coef = b / scale
    return coef[:d], coef[d:], ybar - float(mean @ coef), b


def _baseline_cv(data: PanelDataset, n_blocks=5, n_lambdas=25, min_ratio=1e-3):
    _, c, _, _, _ = _baseline_system(data, np.arange(data.n_periods))
    grid = 2.0 * np.abs(c).max() * np.geomspace(1.0, min_ratio, n_lambdas)
    parts = partition_folds(data.n_periods, min(n_blocks, data.n_periods))
    d = data.n_treatments
    X3 = data.design()
    err = np.zeros(n_lambdas)
    for k in range(parts.n_folds):
        held = parts.periods(k)
        system = _baseline_system(data, parts.complement(k))
        warm = None
        for li, lam in enumerate(grid):
            bb, gg, mu, warm = _baseline_solve(*system, d, lam, lam, warm_start=warm)
            pred = data.treatments[:, held] @ bb + X3[:, held] @ gg + mu
            err[li] += np.sum((data.y[:, held] - pred) ** 2)
    return float(grid[np.argmin(err)])


@dataclass(frozen=True)
class ComparisonRecord:
    baseline_l1: float
    orthogonal_l1: float
    lam_beta: float
    lam_gamma: float
    lam_orthogonal: float
    baseline_support: tuple
    orthogonal_support: tuple

    @property
    def orthogonal_wins(self) -> bool:
        return self.orthogonal_l1 <= self.baseline_l1


def baseline_lasso_comparison(data: PanelDataset, oracle: OracleBundle, lam_pair="cv",
                              pipeline: Optional[PipelineConfig] = None, seed: int = 0,
                              residuals: Optional[ResidualizedPanel] = None) -> ComparisonRecord:
    """l1 errors of the one-stage baseline Lasso and of the Orthogonal Lasso.

    ``lam_pair`` is ``(lam_beta, lam_gamma)`` or ``"cv"`` (one common
    penalty from time-blocked cross-validation).
    """
    pipeline = pipeline or PipelineConfig(estimators=("lasso",))
    if isinstance(lam_pair, str):
        if lam_pair != "cv":
            raise DataValidationError("lam_pair must be 'cv' or a pair of penalties")
        lb = lg = _baseline_cv(data)
    else:
        lb, lg = (float(v) for v in lam_pair)
    bb, _, _ = fit_baseline_lasso(data, lb, lg)
    if residuals is None:
        from .first_stage import cross_fit, residualize

        residuals = residualize(data, cross_fit(data, config=pipeline.first_stage))
    lam_seed = int(np.random.SeedSequence(seed).generate_state(1)[0])
    lam = opt_lambda(residuals, pipeline.lambda_policy, lam_seed, pipeline.cluster_by)
    fit = orthogonal_lasso(residuals, lam, pipeline.tol, pipeline.max_iter)
    return ComparisonRecord(
        baseline_l1=float(np.abs(bb - oracle.beta).sum()),
        orthogonal_l1=float(np.abs(fit.beta - oracle.beta).sum()),
        lam_beta=lb, lam_gamma=lg, lam_orthogonal=float(lam),
        baseline_support=tuple(int(j) for j in np.flatnonzero(bb)),
        orthogonal_support=fit.active_set,
    )


# ------------------------------------------------------------ Monte Carlo


def replication_seeds(seed: int, rep: int):
    """``(data SeedSequence, estimation seed)`` for replication ``rep``."""
    ss = np.random.SeedSequence(seed, spawn_key=(rep,))
    data_ss, aux = ss.spawn(2)
    return data_ss, int(aux.generate_state(1)[0])


def _first_stage_rmse(data, fits, oracle):
    """Out-of-fold RMSE of l_hat and d_hat against the truth, per fold (m_N, l_N proxies)."""
    l_hat, d_hat, _ = predict_nuisances(data, fits)
    out_l, out_d = [], []
    for k in range(fits.folds.n_folds):
        per = fits.folds.periods(k)
        out_l.append(float(np.sqrt(np.mean((l_hat[:, per] - oracle.l0[:, per]) ** 2))))
        out_d.append(float(np.sqrt(np.mean((d_hat[:, per] - oracle.d0[:, per]) ** 2))))
    return out_l, out_d, (l_hat, d_hat)


def _summarize(result, beta0):
    beta = np.asarray(result.beta)
    rec = {"beta": beta.tolist(), "l2": float(np.linalg.norm(beta - beta0)),
           "l1": float(np.abs(beta - beta0).sum())}
    if result.pointwise is not None:
        rec["se"] = np.asarray(result.se).tolist()
        rec["covered"] = ((result.pointwise.lower <= beta0)
                          & (beta0 <= result.pointwise.upper)).tolist()
    if result.simultaneous is not None:
        rec["sim_covered"] = bool(np.all((result.simultaneous.lower <= beta0)
                                         & (beta0 <= result.simultaneous.upper)))
        rec["sim_c"] = float(result.simultaneous.band_constant)
    if "active_set" in result.info:
        rec["active_set"] = list(result.info["active_set"])
        rec["lambda"] = result.info["lambda"]
    return rec


def run_replication(cfg: DgpConfig, pipeline: PipelineConfig, seed: int, rep: int,
                    oracle: bool = True, baseline=None) -> dict:
    """One replication: generate, estimate (feasible and oracle), record metrics."""
    data_ss, est_seed = replication_seeds(seed, rep)
    data, bundle = generate_panel(cfg, data_ss)
    t0 = time.perf_counter()
    results, res, fits = run_estimation(data, pipeline, est_seed)
    beta0 = bundle.beta
    rec = {"rep": rep, "estimators": {k: _summarize(v, beta0) for k, v in results.items()}}
    rmse_l, rmse_d, nuis = _first_stage_rmse(data, fits, bundle)
    rec["fs_rmse_l"] = rmse_l
    rec["fs_rmse_d"] = rmse_d
    rec["grad_sup_beta0"] = gradient_sup_norm(res, beta0)
    if oracle:
        ores = oracle_residualize(data, bundle, res.fold_used)
        oresults = estimate_from_residuals(ores, pipeline, est_seed, data, (bundle.l0, bundle.d0))
        for k, v in oresults.items():
            rec["estimators"]["oracle_" + k] = _summarize(v, beta0)
            rec["estimators"][k]["oracle_gap"] = float(
                np.linalg.norm(np.asarray(results[k].beta) - np.asarray(v.beta)))
        rec["q_n"] = empirical_q_n(res, ores)
        rec["grad_sup_beta0_oracle"] = gradient_sup_norm(ores, beta0)
    if baseline is not None:
        cmp_ = baseline_lasso_comparison(data, bundle, baseline, pipeline, est_seed, res)
        rec["baseline"] = {"baseline_l1": cmp_.baseline_l1, "orthogonal_l1": cmp_.orthogonal_l1,
                           "lam_beta": cmp_.lam_beta, "lam_orthogonal": cmp_.lam_orthogonal,
                           "orthogonal_wins": cmp_.orthogonal_wins}
    rec["_seconds"] = time.perf_counter() - t0
    return rec


def _rep_worker(args):
    cfg, pipeline, seed, rep, oracle, baseline = args
    try:
        return run_replication(cfg, pipeline, seed, rep, oracle, baseline)
    except Exception as exc:  # noqa: BLE001 - re-raised with seed context below
        return {"rep": rep, "_error": exc}


@dataclass
class MonteCarloReport:
    n_reps: int
    seed: int
    beta0: np.ndarray
    support: tuple
    estimators: dict
    diagnostics: dict
    records: list = field(repr=False, default_factory=list)
    wall_clock: float = 0.0

    def to_dict(self) -> dict:
        """JSON-ready summary (wall clock excluded so it is reproducible)."""
        return {"n_reps": self.n_reps, "seed": self.seed, "beta0": self.beta0.tolist(),
                "support": list(self.support), "estimators": self.estimators,
                "diagnostics": self.diagnostics}


def _aggregate_estimator(recs, beta0, support):
    n = len(recs)
    B = np.array([r["beta"] for r in recs])
    err = B - beta0
    bias = err.mean(axis=0)
    out = {
        "n_reps": n,
        "mean_bias": bias.tolist(),
        "rmse": float(np.sqrt(np.mean(np.sum(err ** 2, axis=1)))),
        "mean_l2": float(np.mean([r["l2"] for r in recs])),
        "mean_l1": float(np.mean([r["l1"] for r in recs])),
        "mean_abs_bias_active": (float(np.mean(np.abs(bias[list(support)])))
                                 if support else None),
    }
    if all("covered" in r for r in recs):
        cov = np.array([r["covered"] for r in recs], dtype=float).mean(axis=0)
        out["coverage"] = cov.tolist()
        out["coverage_active"] = [float(cov[j]) for j in support]
        out["coverage_n"] = n
    if all("sim_covered" in r for r in recs):
        out["simultaneous_coverage"] = float(np.mean([r["sim_covered"] for r in recs]))
        out["simultaneous_n"] = n
    if all("oracle_gap" in r for r in recs):
        out["mean_oracle_gap"] = float(np.mean([r["oracle_gap"] for r in recs]))
    if all("active_set" in r for r in recs):
        sup = set(support)
        out["support_recovery"] = float(np.mean([set(r["active_set"]) == sup for r in recs]))
        out["true_positive_rate"] = (float(np.mean(
            [len(sup & set(r["active_set"])) / len(sup) for r in recs])) if sup else None)
        out["mean_false_positives"] = float(np.mean([len(set(r["active_set"]) - sup)
                                                     for r in recs]))
    return out


def _aggregate(recs, beta0, support):
    names = list(recs[0]["estimators"])
    est = {k: _aggregate_estimator([r["estimators"][k] for r in recs], beta0, support)
           for k in names}
    diag = {"n_reps": len(recs),
            "fs_rmse_l": np.mean([r["fs_rmse_l"] for r in recs], axis=0).tolist(),
            "fs_rmse_d": np.mean([r["fs_rmse_d"] for r in recs], axis=0).tolist(),
            "grad_sup_beta0": float(np.mean([r["grad_sup_beta0"] for r in recs]))}
    if "q_n" in recs[0]:
        diag["q_n"] = float(np.mean([r["q_n"] for r in recs]))
        diag["grad_sup_beta0_oracle"] = float(np.mean([r["grad_sup_beta0_oracle"] for r in recs]))
    if "baseline" in recs[0]:
        b = [r["baseline"] for r in recs]
        diag["baseline"] = {
            "orthogonal_win_rate": float(np.mean([x["orthogonal_wins"] for x in b])),
            "mean_baseline_l1": float(np.mean([x["baseline_l1"] for x in b])),
            "mean_orthogonal_l1": float(np.mean([x["orthogonal_l1"] for x in b])),
            "n_reps": len(b)}
    return est, diag


def run_monte_carlo(cfg: DgpConfig, pipeline: Optional[PipelineConfig] = None, reps: int = 100,
                    seed: int = 0, workers: int = 1, oracle: bool = True,
                    baseline=None) -> MonteCarloReport:
    """Replicate ``generate_panel`` plus the estimation pipeline ``reps`` times.

    Replication ``r`` draws from ``SeedSequence(seed, spawn_key=(r,))``, so
    results do not depend on ``workers`` or scheduling order.

    Raises
    ------
    ReplicationError
        Wrapping the first failing replication, with its seed.
    """
    if int(reps) < 1:
        raise DataValidationError("reps must be ≥ 1")
    if int(workers) < 1:
        raise DataValidationError("workers must be ≥ 1")
    pipeline = pipeline or PipelineConfig()
    jobs = [(cfg, pipeline, seed, r, oracle, baseline) for r in range(reps)]
    t0 = time.perf_counter()
    if workers == 1:
        recs = [_rep_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, reps)) as pool:
            recs = list(pool.map(_rep_worker, jobs, chunksize=max(1, reps // (4 * workers))))
    wall = time.perf_counter() - t0
    for rec in recs:
        if "_error" in rec:
            exc = rec["_error"]
            raise ReplicationError(rec["rep"], f"{seed}:{rec['rep']}", exc) from exc
    beta0 = cfg.beta_spec.coefficients
    support = tuple(int(j) for j in cfg.beta_spec.support)
    est, diag = _aggregate(recs, beta0, support)
    return MonteCarloReport(reps, seed, beta0, support, est, diag, recs, wall)
