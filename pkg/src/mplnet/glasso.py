"""Graphical lasso with an off-diagonal l1 penalty and pinned zero entries.

Solves

    min_Theta  -log det(Theta)/2 + tr(Theta Sigma)/2 + lam * sum_{l != m} |Theta_lm|
    s.t.       Theta > 0,  Theta_lm = 0 for (l, m) in the zero-edge set

by blockwise coordinate descent on the covariance W = Theta^{-1}: each column
is a lasso problem ``min_b b'W11 b/2 - b's12 + 2 lam ||b||_1`` (the factor 2
because both (l, m) and (m, l) are penalized).  Pinned entries are simply
never updated, so they stay exactly zero.
"""

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import linalg

from .errors import InputError, NumericalError, ParameterError
from .pln import cholesky_lower


@dataclass(frozen=True)
class ZeroEdgeSet:
    """Unordered index pairs (l, m), l != m, whose precision entry is fixed at 0."""

    pairs: frozenset = frozenset()

    def __post_init__(self):
        norm = set()
        for l, m in self.pairs:
            l, m = int(l), int(m)
            if l == m:
                raise InputError(f"zero-edge pair ({l}, {m}) is on the diagonal")
            if l < 0 or m < 0:
                raise InputError("zero-edge indices must be non-negative")
            norm.add((min(l, m), max(l, m)))
        object.__setattr__(self, "pairs", frozenset(norm))

    def __len__(self):
        return len(self.pairs)

    def mask(self, p):
        """Boolean p x p matrix, True where an entry is free to move."""
        free = np.ones((p, p), dtype=bool)
        for l, m in self.pairs:
            if m >= p:
                raise InputError(f"zero-edge pair ({l}, {m}) out of range for p={p}")
            free[l, m] = free[m, l] = False
        return free


@dataclass
class GlassoSolution:
    precision: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    jitter: float = 0.0


def glasso_objective(precision, cov, lambda_eff):
    """-log det(Theta)/2 + tr(Theta Sigma)/2 + lambda * sum_{l != m} |Theta_lm|."""
    precision = np.asarray(precision, dtype=float)
    L = cholesky_lower(precision)
    logdet = 2.0 * np.log(np.diag(L)).sum()
    off = np.abs(precision).sum() - np.abs(np.diag(precision)).sum()
    return float(-0.5 * logdet + 0.5 * np.sum(precision * np.asarray(cov)) + lambda_eff * off)


@njit(cache=True)
def _sweeps(S, W, B, free, lam2, max_sweeps, tol, lasso_tol, lasso_max):
    p = S.shape[0]
    wb = np.empty(p)
    n_done = 0
    for sweep in range(max_sweeps):
        n_done = sweep + 1
        max_dw = 0.0
        for j in range(p):
            for k in range(p):
                acc = 0.0
                if k != j:
                    for m in range(p):
                        if m != j and B[m, j] != 0.0:
                            acc += W[k, m] * B[m, j]
                wb[k] = acc
            for it in range(lasso_max):
                max_change = 0.0
                for k in range(p):
                    if k == j or not free[k, j]:
                        continue
                    old = B[k, j]
                    z = S[k, j] - (wb[k] - W[k, k] * old)
                    if z > lam2:
                        new = (z - lam2) / W[k, k]
                    elif z < -lam2:
                        new = (z + lam2) / W[k, k]
                    else:
                        new = 0.0
                    if new != old:
                        delta = new - old
                        B[k, j] = new
                        for m in range(p):
                            if m != j:
                                wb[m] += W[m, k] * delta
                        change = abs(delta) * W[k, k]
                        if change > max_change:
                            max_change = change
                if max_change < lasso_tol:
                    break
            for k in range(p):
                if k != j:
                    dw = abs(wb[k] - W[k, j])
                    if dw > max_dw:
                        max_dw = dw
                    W[k, j] = wb[k]
                    W[j, k] = wb[k]
        if max_dw < tol:
            break
    return n_done


def _precision_from_blocks(W, B):
    p = W.shape[0]
    theta = np.zeros((p, p))
    for j in range(p):
        others = np.arange(p) != j
        beta = B[others, j]
        denom = W[j, j] - W[others, j] @ beta
        if not denom > 0:
            raise NumericalError(f"glasso column {j} lost positive definiteness")
        theta[j, j] = 1.0 / denom
        theta[others, j] = -beta * theta[j, j]
    return 0.5 * (theta + theta.T)


def kkt_residual(precision, cov, lambda_eff, free=None):
    """Sup-norm violation of the optimality conditions.

    Diagonal: ``Sigma_jj - W_jj``; nonzero free off-diagonals:
    ``Sigma - W + 2 lam sign(Theta)``; zero free off-diagonals: the excess
    of ``|Sigma - W|`` over ``2 lam``.  Pinned entries are unconstrained.
    """
    p = precision.shape[0]
    if free is None:
        free = np.ones((p, p), dtype=bool)
    W = linalg.inv(precision)
    R = cov - W
    off = ~np.eye(p, dtype=bool) & free
    nz = off & (precision != 0)
    zero = off & (precision == 0)
    res = [np.abs(np.diag(R)).max()]
    if nz.any():
        res.append(np.abs(R[nz] + 2 * lambda_eff * np.sign(precision[nz])).max())
    if zero.any():
        res.append(np.maximum(np.abs(R[zero]) - 2 * lambda_eff, 0.0).max())
    return float(max(res))


def glasso_fit(cov, lambda_eff, zeros=None, tol=1e-6, warm_start=None,
               max_sweeps=1000, max_rounds=8):
    """Sparse precision estimate from a covariance matrix.

    Parameters
    ----------
    cov : ndarray, shape (p, p)
        Symmetric PSD matrix with positive diagonal.
    lambda_eff : float
        Penalty on ``sum_{l != m} |Theta_lm|``.
    zeros : ZeroEdgeSet, optional
        Entries pinned at exactly zero.
    tol : float
        Target KKT residual.
    warm_start : ndarray, optional
        Previous precision estimate used to initialize the sweeps.

    Returns
    -------
    GlassoSolution
    """
    cov = np.array(cov, dtype=float)
    p = cov.shape[0]
    if cov.shape != (p, p):
        raise InputError("cov must be square")
    if np.max(np.abs(cov - cov.T)) > 1e-10:
        raise InputError("cov is not symmetric")
    if not np.all(np.diag(cov) > 0):
        raise InputError("cov must have a strictly positive diagonal")
    if lambda_eff < 0:
        raise InputError("lambda_eff must be non-negative")
    cov = 0.5 * (cov + cov.T)
    zeros = zeros if zeros is not None else ZeroEdgeSet()
    free = zeros.mask(p)

    jitter = 0.0
    try:
        linalg.cholesky(cov, lower=True)
    except linalg.LinAlgError:
        jitter = 1e-8 * float(np.mean(np.diag(cov)))
        cov_used = cov + jitter * np.eye(p)
    else:
        cov_used = cov

    if lambda_eff == 0 and len(zeros) == 0:
        try:
            theta = linalg.inv(cov_used)
            cholesky_lower(theta)
        except (linalg.LinAlgError, ParameterError) as exc:
            raise NumericalError("unpenalized problem has a singular covariance") from exc
        theta = 0.5 * (theta + theta.T)
        return GlassoSolution(theta, glasso_objective(theta, cov, 0.0),
                              kkt_residual(theta, cov_used, 0.0), 0, jitter)

    W, B = None, np.zeros((p, p))
    if warm_start is not None:
        theta0 = np.asarray(warm_start, dtype=float)
        try:
            cholesky_lower(theta0)
            W = linalg.inv(theta0)
            np.fill_diagonal(W, np.diag(cov_used))
            linalg.cholesky(W, lower=True)
        except (ParameterError, linalg.LinAlgError):
            W = None
        else:
            B = -theta0 / np.diag(theta0)[None, :]
            B[~free] = 0.0
            np.fill_diagonal(B, 0.0)
    if W is None:
        W = cov_used.copy()
        B = np.zeros((p, p))
    W = np.ascontiguousarray(W)
    B = np.ascontiguousarray(B)

    lam2 = 2.0 * float(lambda_eff)
    inner_tol = 0.1 * tol
    total = 0
    residual = np.inf
    theta = None
    for _ in range(max_rounds):
        total += _sweeps(cov_used, W, B, free, lam2, max_sweeps, inner_tol,
                         0.01 * inner_tol, 10000)
        try:
            theta = _precision_from_blocks(W, B)
            theta[~free] = 0.0
            cholesky_lower(theta)
        except (NumericalError, ParameterError):
            theta = None
            inner_tol *= 0.1
            continue
        residual = kkt_residual(theta, cov_used, lambda_eff, free)
        if residual <= tol:
            break
        inner_tol *= 0.1
    if theta is None or residual > tol:
        raise NumericalError(
            f"glasso did not reach KKT tolerance {tol:g} (residual {residual:.3g}, "
            f"{total} sweeps)")
    return GlassoSolution(theta, glasso_objective(theta, cov, lambda_eff), residual, total, jitter)
