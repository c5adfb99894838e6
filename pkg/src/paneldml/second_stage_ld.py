"""Low-dimensional second stage: least squares on cross-fitted residuals."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import linalg
from scipy.stats import norm

from .errors import DataValidationError, SingularMatrixError
from .first_stage import NuisanceFits, ResidualizedPanel, predict_nuisances
from .panel_core import FoldPartition, PanelDataset

__all__ = [
    "OlsFit",
    "ConfidenceSet",
    "orthogonal_ols",
    "cluster_robust_covariance",
    "cluster_meat",
    "doubly_robust_dml",
    "drdml_from_nuisances",
    "wald_intervals",
    "solve_spd",
]

SINGULAR_RTOL = 1e-10


@dataclass(frozen=True)
class ConfidenceSet:
    level: float
    lower: np.ndarray
    upper: np.ndarray
    kind: str = "pointwise"
    band_constant: Optional[float] = None


@dataclass(frozen=True)
class OlsFit:
    beta: np.ndarray
    gram: np.ndarray
    covariance: np.ndarray
    std_errors: np.ndarray
    n_effective: int
    estimator: str = "ols"


def solve_spd(A, b, what="Q_hat"):
    """Solve ``A x = b`` for symmetric PSD ``A`` with a relative-eigenvalue guard."""
    A = np.asarray(A, dtype=float)
    A = 0.5 * (A + A.T)
    ev = np.linalg.eigvalsh(A)
    top = max(ev[-1], 0.0)
    if ev[0] <= SINGULAR_RTOL * top or top == 0.0:
        raise SingularMatrixError(
            f"{what} is singular (min eigenvalue {ev[0]:.3g}, max {top:.3g})", float(ev[0]))
    # LU rather than LDL: the 1 x 1 case then reduces to b / a exactly
    return linalg.solve(A, b)


def _cross_moments(X, chunk=512):
    """``X'X / n`` by row-wise accumulation.

    Every entry is summed in the same order, so identical columns give
    bit-identical moments (BLAS kernels can round them differently
    depending on memory layout).
    """
    n, k = X.shape
    out = np.zeros((k, k))
    for s in range(0, n, chunk):
        blk = X[s:s + chunk]
        out += np.einsum("ij,ik->jk", blk, blk, optimize=False)
    return out / n


def cluster_meat(d_res, u, clusters, n_obs):
    """``(1/N) sum_g s_g s_g'`` with ``s_g`` the within-cluster sum of ``d_res * u``."""
    scores = d_res * u[:, None]
    _, inv = np.unique(clusters, return_inverse=True)
    S = np.zeros((inv.max() + 1, d_res.shape[1]))
    np.add.at(S, inv, scores)
    return S.T @ S / n_obs, S.shape[0]


def cluster_robust_covariance(res: ResidualizedPanel, beta, cluster_by="group_time",
                              small_sample=False):
    """White cluster-robust sandwich ``Q^-1 Gamma Q^-1``.

    Clusters default to (group, period) blocks. Standard errors are
    ``sqrt(diag / N)``. ``small_sample`` multiplies by G/(G-1).
    """
    D, y = res.stacked()
    n = D.shape[0]
    Q = D.T @ D / n
    u = y - D @ np.asarray(beta, dtype=float)
    meat, n_clusters = cluster_meat(D, u, res.cluster_index(cluster_by), n)
    Qinv = solve_spd(Q, np.eye(Q.shape[0]))
    omega = Qinv @ meat @ Qinv
    omega = 0.5 * (omega + omega.T)
    if small_sample and n_clusters > 1:
        omega = omega * n_clusters / (n_clusters - 1)
    return omega


def orthogonal_ols(res: ResidualizedPanel, cluster_by="group_time",
                   small_sample=False) -> OlsFit:
    """``beta = (E_N D D')^-1 E_N D Y`` on residuals, pooled over all (i, t)."""
    D, y = res.stacked()
    n, d = D.shape
    if d > n:
        raise DataValidationError(f"orthogonal OLS needs d <= N (d={d}, N={n})")
    if d / n > 0.2:
        warnings.warn(f"d/N = {d / n:.2f} is large for the low-dimensional estimator")
    M = _cross_moments(np.column_stack([D, y]))
    Q = M[:d, :d]
    beta = solve_spd(Q, M[:d, d])
    omega = cluster_robust_covariance(res, beta, cluster_by, small_sample)
    se = np.sqrt(np.maximum(np.diag(omega), 0.0) / n)
    return OlsFit(beta=beta, gram=Q, covariance=omega, std_errors=se, n_effective=n)


def doubly_robust_dml(data: PanelDataset, fits: NuisanceFits,
                      folds: Optional[FoldPartition] = None, cluster_by="group_time") -> OlsFit:
    """``(E_N[(D - d_hat) D'])^-1 E_N[(D - d_hat)(Y - l_hat)]``.

    The covariance is the analogous sandwich ``A^-1 Gamma A^-T`` with scores
    ``(D - d_hat)(Y - l_hat - D'beta)``.
    """
    l_hat, d_hat, _ = predict_nuisances(data, fits)
    return drdml_from_nuisances(data, l_hat, d_hat, cluster_by)


def drdml_from_nuisances(data: PanelDataset, l_hat, d_hat, cluster_by="group_time") -> OlsFit:
    """Doubly robust estimate for arbitrary nuisance arrays (e.g. the true ones)."""
    n = data.n_obs
    D = data.treatments.reshape(n, -1)
    V = D - np.asarray(d_hat, dtype=float).reshape(n, -1)
    W = (data.y - np.asarray(l_hat, dtype=float)).reshape(n)
    A = V.T @ D / n
    sv = np.linalg.svd(A, compute_uv=False)
    if sv[-1] <= SINGULAR_RTOL * sv[0] or sv[0] == 0:
        raise SingularMatrixError(
            f"E_N[(D - d_hat) D'] is singular (min singular value {sv[-1]:.3g})", float(sv[-1]))
    beta = linalg.solve(A, V.T @ W / n)
    u = W - D @ beta
    res = ResidualizedPanel(W.reshape(data.y.shape), V.reshape(data.treatments.shape),
                            np.zeros(data.n_periods, dtype=int), np.asarray(data.group))
    meat, _ = cluster_meat(V, u, res.cluster_index(cluster_by), n)
    Ainv = linalg.inv(A)
    omega = Ainv @ meat @ Ainv.T
    omega = 0.5 * (omega + omega.T)
    se = np.sqrt(np.maximum(np.diag(omega), 0.0) / n)
    return OlsFit(beta=beta, gram=A, covariance=omega, std_errors=se, n_effective=n,
                  estimator="drdml")


def wald_intervals(fit, xi=0.05) -> ConfidenceSet:
    """Pointwise ``beta_j +- z_(1-xi/2) * se_j``."""
    if not 0 < xi < 1:
        raise DataValidationError("xi must lie in (0, 1)")
    z = norm.ppf(1 - xi / 2)
    beta = np.asarray(fit.beta)
    se = np.asarray(fit.std_errors)
    return ConfidenceSet(level=1 - xi, lower=beta - z * se, upper=beta + z * se)
