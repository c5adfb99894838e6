"""High-dimensional sparse second stage.

Orthogonal Lasso on cross-fitted residuals, approximate inverses of the
residual Gram matrix (CLIME, ridge), the one-step debiased estimator and
max-norm simultaneous bands.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg, optimize, sparse
from scipy.stats import norm

from . import _cd
from .errors import ConvergenceError, DataValidationError, InfeasibleError, InvariantError
from .first_stage import ResidualizedPanel
from .panel_core import partition_folds
from .second_stage_ld import ConfidenceSet, cluster_meat

__all__ = [
    "HdsLassoFit",
    "PrecisionApprox",
    "DebiasedFit",
    "LassoPenaltyPolicy",
    "REDiagnostic",
    "orthogonal_lasso",
    "opt_lambda",
    "clime",
    "ridge_inverse",
    "exact_inverse",
    "default_mu",
    "default_ridge_gamma",
    "debias",
    "simultaneous_quantile",
    "gradient_sup_norm",
    "restricted_eigenvalue_diag",
]

CLIME_CONSTANT = 2.0


def _rng(seed):
    return np.random.Generator(np.random.Philox(seed))


def _moments(res: ResidualizedPanel):
    D, y = res.stacked()
    n = D.shape[0]
    return D.T @ D / n, D.T @ y / n, D, y


# ----------------------------------------------------------- Orthogonal Lasso


@dataclass(frozen=True)
class HdsLassoFit:
    beta: np.ndarray
    lam: float
    active_set: tuple
    gradient_sup: float
    trace: np.ndarray
    n_iter: int = 0
    kkt_gap: float = 0.0


def gradient_sup_norm(res: ResidualizedPanel, b) -> float:
    """``2 * || E_N D (Y - D'b) ||_inf``."""
    Q, c, _, _ = _moments(res)
    return float(2.0 * np.abs(c - Q @ np.asarray(b, dtype=float)).max(initial=0.0))


def orthogonal_lasso(res: ResidualizedPanel, lam: float, tol: float = 1e-7,
                     max_iter: int = 10_000, warm_start=None) -> HdsLassoFit:
    """``argmin_b E_N (Y - D'b)^2 + lam ||b||_1`` (no intercept, no rescaling)."""
    if lam < 0:
        raise DataValidationError("lambda must be nonnegative")
    Q, c, _, y = _moments(res)
    b, n_iter, gap, trace = _cd.solve(Q, c, lam, b0=warm_start, tol=tol, max_iter=max_iter)
    if gap > tol:
        raise ConvergenceError(
            f"orthogonal lasso did not converge in {max_iter} sweeps (KKT gap {gap:.3g})",
            gap, n_iter)
    return HdsLassoFit(
        beta=b,
        lam=float(lam),
        active_set=tuple(int(j) for j in np.flatnonzero(b)),
        gradient_sup=float(2.0 * np.abs(c - Q @ b).max(initial=0.0)),
        trace=trace + float(np.mean(y ** 2)),
        n_iter=n_iter,
        kkt_gap=float(gap),
    )


@dataclass(frozen=True)
class LassoPenaltyPolicy:
    """Second-stage penalty rule.

    ``gradient-quantile`` takes ``c`` times the ``1 - alpha`` quantile of
    ``||2 E_N D eps*||_inf`` under Gaussian multipliers on the pilot scores
    ``D * Y`` (cluster-summed), drawn from their exact conditional law so the
    value does not depend on observation order. ``refine`` > 0 repeats the
    draw with scores built from the residuals of a Lasso fitted at the
    previous value, which targets the score at beta0 rather than at zero.
    ``paper-opt`` evaluates
    ``c * max(l_N m_N, s m_N^2, lambda_N)`` from user-supplied rate proxies.
    """

    kind: str = "gradient-quantile"
    value: float = 0.0
    c: float = 1.1
    alpha: float = 0.1
    n_draws: int = 500
    refine: int = 0
    cv_folds: int = 5
    l_n: float = 0.0
    m_n: float = 0.0
    lambda_n: float = 0.0
    s: float = 1.0

    @classmethod
    def parse(cls, text) -> "LassoPenaltyPolicy":
        if isinstance(text, LassoPenaltyPolicy):
            return text
        if isinstance(text, dict):
            return cls(**text)
        text = str(text).strip()
        kind, _, arg = text.partition(":")
        try:
            if kind == "fixed":
                return cls("fixed", value=float(arg))
            if kind == "cv":
                return cls("cv", cv_folds=int(arg) if arg else 5)
            if kind in ("gradient-quantile", "paper-opt"):
                kw = {}
                for part in filter(None, arg.split(",")):
                    k, _, v = part.partition("=")
                    k = k.strip().replace("-", "_")
                    kw[k] = int(v) if k in ("n_draws", "cv_folds", "refine") else float(v)
                return cls(kind, **kw)
        except (ValueError, TypeError):
            pass
        raise DataValidationError(f"unrecognized lambda policy {text!r}")


def _score_covariance(res: ResidualizedPanel, u, cluster_by):
    D, _ = res.stacked()
    n = D.shape[0]
    meat, _ = cluster_meat(D, u, res.cluster_index(cluster_by), n)
    return meat / n


def _psd_sqrt(S):
    w, V = np.linalg.eigh(0.5 * (S + S.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def opt_lambda(res: ResidualizedPanel, policy="gradient-quantile", seed: int = 0,
               cluster_by="group_time") -> float:
    pol = LassoPenaltyPolicy.parse(policy)
    if pol.kind == "fixed":
        return float(pol.value)
    if pol.kind == "paper-opt":
        return float(pol.c * max(pol.l_n * pol.m_n, pol.s * pol.m_n ** 2, pol.lambda_n))
    if pol.kind == "gradient-quantile":
        D, u = res.stacked()
        lam = 0.0
        for it in range(pol.refine + 1):
            if it:
                u = res.stacked()[1] - D @ orthogonal_lasso(res, lam).beta
            # Var(E_N D eps*) = (1/N^2) sum_g s_g s_g'
            S = _score_covariance(res, u, cluster_by)
            draws = _rng(seed).standard_normal((pol.n_draws, S.shape[0])) @ _psd_sqrt(4.0 * S)
            lam = float(pol.c * np.quantile(np.abs(draws).max(axis=1), 1.0 - pol.alpha))
        return lam
    if pol.kind == "cv":
        return _cv_lambda(res, pol.cv_folds)
    raise DataValidationError(f"unknown lambda policy {pol.kind!r}")


def _cv_lambda(res: ResidualizedPanel, n_blocks, n_lambdas=25, min_ratio=1e-3):
    n_i, n_t = res.y_res.shape
    Q, c, _, _ = _moments(res)
    lmax = 2.0 * np.abs(c).max(initial=0.0)
    if lmax == 0:
        return 0.0
    grid = lmax * np.geomspace(1.0, min_ratio, n_lambdas)
    parts = partition_folds(n_t, min(n_blocks, n_t))
    err = np.zeros(n_lambdas)
    for k in range(parts.n_folds):
        held = parts.periods(k)
        keep = parts.complement(k)
        Dk = res.d_res[:, keep].reshape(-1, res.n_treatments)
        yk = res.y_res[:, keep].reshape(-1)
        Dh = res.d_res[:, held].reshape(-1, res.n_treatments)
        yh = res.y_res[:, held].reshape(-1)
        Qk, ck = Dk.T @ Dk / len(yk), Dk.T @ yk / len(yk)
        b = None
        for li, lam in enumerate(grid):
            b, _, _, _ = _cd.solve(Qk, ck, lam, b0=b)
            err[li] += np.sum((yh - Dh @ b) ** 2)
    return float(grid[np.argmin(err)])


# ------------------------------------------------------ approximate inverses


@dataclass(frozen=True)
class PrecisionApprox:
    """Approximate inverse ``M`` of the residual Gram matrix (row j is m_j)."""

    matrix: np.ndarray
    kind: str
    infeasibility: np.ndarray
    row_l1: np.ndarray
    mu: Optional[float] = None
    gamma: Optional[float] = None

    @property
    def max_row_support(self) -> int:
        M = self.matrix
        tol = 1e-10 * max(np.abs(M).max(initial=0.0), 1.0)
        return int((np.abs(M) > tol).sum(axis=1).max(initial=0))


def default_mu(d: int, n: int, a: float = CLIME_CONSTANT) -> float:
    """``a * sqrt(log d / N)``."""
    return a * math.sqrt(math.log(d) / n) if d > 1 else 0.0


def default_ridge_gamma(d: int, n: int) -> float:
    return math.sqrt(math.log(max(d, 2)) / n)


def _row_infeasibility(Q, M):
    return np.abs(M @ Q - np.eye(Q.shape[0])).max(axis=1)


def _clime_model(Qs, mu, tol):
    import highspy

    d = Qs.shape[0]
    inf = highspy.kHighsInf
    A = sparse.csc_matrix(np.block([[Qs, -Qs], [-Qs, Qs]]))
    lp = highspy.HighsLp()
    lp.num_col_ = 2 * d
    lp.num_row_ = 2 * d
    lp.col_cost_ = np.ones(2 * d)
    lp.col_lower_ = np.zeros(2 * d)
    lp.col_upper_ = np.full(2 * d, inf)
    lp.row_lower_ = np.full(2 * d, -inf)
    lp.row_upper_ = np.full(2 * d, mu)
    lp.a_matrix_.format_ = highspy.MatrixFormat.kColwise
    lp.a_matrix_.start_ = A.indptr
    lp.a_matrix_.index_ = A.indices
    lp.a_matrix_.value_ = A.data
    h = highspy.Highs()
    h.setOptionValue("output_flag", False)
    h.setOptionValue("presolve", "off")
    h.setOptionValue("primal_feasibility_tolerance", tol)
    h.setOptionValue("dual_feasibility_tolerance", tol)
    h.passModel(lp)
    return h, highspy


def clime(Q, mu: float, tol: float = 1e-9) -> PrecisionApprox:
    """Row-wise ``min ||m_j||_1 s.t. ||Q m_j - e_j||_inf <= mu``.

    Each row is a linear program in the positive and negative parts of m_j
    (2d variables, 2d inequalities). Rows share the constraint matrix and
    differ only in two bounds, so the dual simplex is warm-started from the
    previous row's basis.

    Raises
    ------
    InfeasibleError
        When some row admits no feasible m_j.
    """
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    if Q.ndim != 2 or Q.shape != (d, d):
        raise DataValidationError("clime expects a square matrix")
    if mu < 0:
        raise DataValidationError("mu must be nonnegative")
    Qs = 0.5 * (Q + Q.T)
    h, hp = _clime_model(Qs, mu, tol)
    rows = np.arange(2 * d, dtype=np.int32)
    lower = np.full(2 * d, -hp.kHighsInf)
    M = np.zeros((d, d))
    for j in range(d):
        ub = np.full(2 * d, float(mu))
        ub[j] += 1.0
        ub[d + j] -= 1.0
        h.changeRowsBounds(2 * d, rows, lower, ub)
        h.run()
        status = h.getModelStatus()
        if status == hp.HighsModelStatus.kInfeasible:
            raise InfeasibleError(f"CLIME row {j} is infeasible at mu={mu:.3g}", row=j)
        if status != hp.HighsModelStatus.kOptimal:
            raise InfeasibleError(
                f"CLIME row {j}: LP solver failed ({h.modelStatusToString(status)})", row=j)
        x = np.asarray(h.getSolution().col_value)
        M[j] = x[:d] - x[d:]
    return PrecisionApprox(M, "clime", _row_infeasibility(Qs, M), np.abs(M).sum(axis=1), mu=mu)


def ridge_inverse(Q, gamma: float) -> PrecisionApprox:
    """``M = (Q + gamma I)^-1``."""
    if gamma <= 0:
        raise DataValidationError("ridge gamma must be positive")
    Q = np.asarray(Q, dtype=float)
    Qs = 0.5 * (Q + Q.T)
    I = np.eye(Q.shape[0])
    M = linalg.solve(Qs + gamma * I, I, assume_a="sym")
    M = 0.5 * (M + M.T)
    return PrecisionApprox(M, "ridge-inverse", _row_infeasibility(Qs, M), np.abs(M).sum(axis=1),
                           gamma=gamma)


def exact_inverse(Q) -> PrecisionApprox:
    from .second_stage_ld import solve_spd

    Q = np.asarray(Q, dtype=float)
    M = solve_spd(Q, np.eye(Q.shape[0]))
    M = 0.5 * (M + M.T)
    return PrecisionApprox(M, "exact-inverse", _row_infeasibility(0.5 * (Q + Q.T), M),
                           np.abs(M).sum(axis=1), mu=0.0)


# ---------------------------------------------------------------- debiasing


@dataclass(frozen=True)
class DebiasedFit:
    beta: np.ndarray
    base_fit: HdsLassoFit
    precision: PrecisionApprox
    covariance: np.ndarray
    std_errors: np.ndarray
    pointwise: ConfidenceSet
    simultaneous: Optional[ConfidenceSet]
    n_effective: int

    @property
    def estimator(self):
        return "ridge" if self.precision.kind == "ridge-inverse" else "dol"


def debias(res: ResidualizedPanel, base: HdsLassoFit, precision: PrecisionApprox,
           cluster_by="group_time", xi: float = 0.05, n_draws: int = 10_000,
           seed: int = 0) -> DebiasedFit:
    """One-step correction ``beta_L + M E_N D (Y - D'beta_L)``.

    The covariance ``M Gamma M'`` uses the Lasso residuals. The simultaneous
    band is omitted (None) if ``n_draws == 0`` or a coordinate has zero
    variance.
    """
    Q, c, D, y = _moments(res)
    M = np.asarray(precision.matrix)
    bl = np.asarray(base.beta)
    if M.shape != Q.shape or bl.shape != (Q.shape[0],):
        raise DataValidationError("debias: shapes of residuals, base fit and M disagree")
    n = D.shape[0]
    beta = bl + M @ (c - Q @ bl)
    u = y - D @ bl
    meat, _ = cluster_meat(D, u, res.cluster_index(cluster_by), n)
    omega = M @ meat @ M.T
    omega = 0.5 * (omega + omega.T)
    se = np.sqrt(np.maximum(np.diag(omega), 0.0) / n)
    z = norm.ppf(1 - xi / 2)
    point = ConfidenceSet(1 - xi, beta - z * se, beta + z * se)
    band = None
    if n_draws > 0:
        if np.all(np.diag(omega) > 0):
            cz = simultaneous_quantile(omega, xi, n_draws, seed)
            band = ConfidenceSet(1 - xi, beta - cz * se, beta + cz * se, "simultaneous", cz)
        else:
            warnings.warn("degenerate coordinate: simultaneous band not computed")
    return DebiasedFit(beta, base, precision, omega, se, point, band, n)


def _correlation_root(omega):
    omega = 0.5 * (np.asarray(omega, dtype=float) + np.asarray(omega, dtype=float).T)
    dg = np.diag(omega)
    if np.any(dg <= 0):
        bad = int(np.flatnonzero(dg <= 0)[0])
        raise DataValidationError(f"degenerate coordinate {bad}: zero variance")
    s = 1.0 / np.sqrt(dg)
    C = omega * s[:, None] * s[None, :]
    w, V = np.linalg.eigh(C)
    if w[0] < -1e-8 * max(w[-1], 1.0):
        raise InvariantError(f"correlation matrix is not PSD (eigenvalue {w[0]:.3g})")
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


def simultaneous_quantile(omega, xi: float = 0.05, n_draws: int = 10_000, seed: int = 0) -> float:
    """``(1 - xi)`` quantile of ``||Z||_inf`` for ``Z ~ N(0, C)``, C the correlation of omega."""
    if not 0 < xi < 1:
        raise DataValidationError("xi must lie in (0, 1)")
    root = _correlation_root(omega)
    d = root.shape[0]
    rng = _rng(seed)
    out = np.empty(n_draws)
    chunk = max(1, min(n_draws, 2_000_000 // max(d, 1)))
    for start in range(0, n_draws, chunk):
        m = min(chunk, n_draws - start)
        out[start:start + m] = np.abs(rng.standard_normal((m, d)) @ root).max(axis=1)
    return float(np.quantile(out, 1.0 - xi))


# ------------------------------------------------- restricted eigenvalue


@dataclass(frozen=True)
class REDiagnostic:
    """Sampled minimum over the cone (an upper bound on kappa) and, for small d, the exact value."""

    sampled: float
    exact: Optional[float]
    n_grid: int


def _cone_ratio(Q, delta, support, s):
    quad = np.einsum("ij,jk,ik->i", delta, Q, delta)
    l1 = np.abs(delta[:, support]).sum(axis=1)
    return math.sqrt(s) * np.sqrt(np.clip(quad, 0.0, None)) / l1


def _exact_kappa(Q, support, c_bar):
    d = Q.shape[0]
    T = list(support)
    Tc = [j for j in range(d) if j not in support]
    s, r = len(T), len(Tc)
    best = np.inf
    # sign patterns on the support; the global sign is irrelevant
    for mask in range(2 ** (s - 1)):
        sig = np.array([1.0] + [(-1.0 if (mask >> k) & 1 else 1.0) for k in range(s - 1)])

        def unpack(x):
            delta = np.zeros(d)
            delta[T] = sig * x[:s]
            if r:
                delta[Tc] = x[s:s + r] - x[s + r:]
            return delta

        def f(x):
            dl = unpack(x)
            return dl @ Q @ dl

        def grad(x):
            g = 2.0 * Q @ unpack(x)
            out = np.empty_like(x)
            out[:s] = sig * g[T]
            if r:
                out[s:s + r] = g[Tc]
                out[s + r:] = -g[Tc]
            return out

        cons = [{"type": "eq", "fun": lambda x: x[:s].sum() - 1.0,
                 "jac": lambda x: np.concatenate([np.ones(s), np.zeros(2 * r)])}]
        if r:
            cons.append({"type": "ineq", "fun": lambda x: c_bar - x[s:].sum(),
                         "jac": lambda x: np.concatenate([np.zeros(s), -np.ones(2 * r)])})
        x0 = np.concatenate([np.full(s, 1.0 / s), np.zeros(2 * r)])
        sol = optimize.minimize(f, x0, jac=grad, constraints=cons, method="SLSQP",
                                bounds=[(0, None)] * (s + 2 * r),
                                options={"ftol": 1e-14, "maxiter": 1000})
        best = min(best, max(float(sol.fun), 0.0))
    return math.sqrt(s) * math.sqrt(best)


def restricted_eigenvalue_diag(Q, support, c_bar: float = 1.0, grid: int = 10_000,
                               seed: int = 0, exact: Optional[bool] = None) -> REDiagnostic:
    """Diagnostic for ``kappa = min_cone sqrt(s) * sqrt(delta'Q delta) / ||delta_T||_1``.

    The cone is ``||delta_Tc||_1 <= c_bar ||delta_T||_1``. The sampled value
    minimizes over ``grid`` seeded random cone directions and therefore
    over-estimates kappa. The exact value (quadratic programs over sign
    patterns on the support) is computed when ``d <= 8`` unless disabled.
    """
    Q = np.asarray(Q, dtype=float)
    d = Q.shape[0]
    support = sorted(int(j) for j in support)
    if not support:
        raise DataValidationError("restricted eigenvalue needs a nonempty support")
    if c_bar < 1:
        raise DataValidationError("c_bar must be >= 1")
    s = len(support)
    Tc = [j for j in range(d) if j not in support]
    rng = _rng(seed)
    best = np.inf
    chunk = 100_000
    for start in range(0, grid, chunk):
        m = min(chunk, grid - start)
        delta = np.zeros((m, d))
        dt = rng.standard_normal((m, s))
        dt /= np.abs(dt).sum(axis=1, keepdims=True)
        delta[:, support] = dt
        if Tc:
            dc = rng.standard_normal((m, len(Tc)))
            dc /= np.abs(dc).sum(axis=1, keepdims=True)
            delta[:, Tc] = dc * (c_bar * rng.uniform(size=(m, 1)))
        best = min(best, float(_cone_ratio(Q, delta, support, s).min()))
    if exact is None:
        exact = d <= 8
    ex = _exact_kappa(Q, support, c_bar) if exact else None
    return REDiagnostic(best, ex, grid)
