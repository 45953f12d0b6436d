"""ADMM solver for the variational-mean (M) step.

For component g and sample i the subproblem is

    min_m  (m - mu)' Theta (m - mu) / 2 + sum_j [-y_j m_j + exp(m_j + s_j/2 + log l)]

It is split as m = nu: the Poisson part stays separable in m (one Newton
solve per coordinate) and the Gaussian part in nu has the closed form
(rho I + Theta)^{-1}(rho m + alpha + Theta mu), so one Cholesky factorization
of rho I + Theta serves every sample of the component.
"""

import threading
import warnings

import numpy as np
from numba import njit
from scipy import linalg

from .errors import NumericalError, ParameterError
from .pln import resolve_scaling

NEWTON_TOL = 1e-10
BRACKET = (-60.0, 60.0)
PRIMAL_TOL = 1e-6

_factorizations = 0
_counter_lock = threading.Lock()


def factorization_count():
    """Number of (rho I + Theta) factorizations computed so far in this process."""
    return _factorizations


class AdmmConvergenceWarning(RuntimeWarning):
    pass


class AdmmWorkspace:
    """Cached factorization of ``rho I + Theta_g`` plus ADMM settings.

    Parameters
    ----------
    theta : ndarray, shape (p, p)
    rho : float
        Fixed ADMM step size.
    max_iter : int
        Iteration cap T.
    tol : float
        Relative change of the augmented objective that counts as converged.
    """

    def __init__(self, theta, rho=1.0, max_iter=100, tol=1e-6):
        global _factorizations
        if rho <= 0:
            raise ParameterError("rho must be positive")
        self.rho = float(rho)
        self.max_iter = int(max_iter)
        self.tol = float(tol)
        self.theta = np.array(theta, dtype=float)
        p = self.theta.shape[0]
        try:
            self.cached_solver = linalg.cho_factor(self.rho * np.eye(p) + self.theta, lower=True)
        except linalg.LinAlgError as exc:
            raise ParameterError("rho I + Theta is not positive definite") from exc
        with _counter_lock:
            _factorizations += 1
        self.multiplier = np.zeros(p)
        self.last_delta = None
        self.n_unconverged = 0

    def solve(self, rhs):
        """(rho I + Theta)^{-1} rhs for rhs of shape (p,) or (k, p)."""
        rhs = np.asarray(rhs, dtype=float)
        return linalg.cho_solve(self.cached_solver, rhs.T).T


@njit(cache=True)
def _h(m, y, shift, n_target, alpha, rho):
    return -y + np.exp(min(m + shift, 700.0)) + alpha + rho * (m - n_target)


@njit(cache=True)
def _newton_kernel(y, shift, n_target, alpha, rho, tol, max_iter, start, out):
    """Elementwise safeguarded Newton; returns -1 on success, else -2 - idx
    for an unbracketed root or idx for a non-converged coordinate."""
    lo0, hi0 = BRACKET
    eps = np.finfo(np.float64).eps
    for k in range(y.size):
        yk, sk, nk, ak = y[k], shift[k], n_target[k], alpha[k]
        if _h(lo0, yk, sk, nk, ak, rho) > 0 or _h(hi0, yk, sk, nk, ak, rho) < 0:
            return -2 - k
        lo, hi = lo0, hi0
        # start right of the root, where Newton descends monotonically
        cand_a = min(max(nk + (yk - ak) / rho, lo0), hi0)
        cand_b = min(max(np.log(abs(yk - ak) + 1.0) - sk, lo0), hi0)
        if start.size:
            # a Newton step from the left of a convex increasing root lands right of it
            m = min(max(start[k], lo0), hi0)
            hm = _h(m, yk, sk, nk, ak, rho)
            if hm < 0:
                lo = m
                m = min(m - hm / (np.exp(min(m + sk, 700.0)) + rho), hi0)
        else:
            m = cand_a
            if _h(cand_b, yk, sk, nk, ak, rho) >= 0:
                m = min(cand_a, cand_b)
        if _h(m, yk, sk, nk, ak, rho) < 0:
            m = hi0
        ok = False
        for _ in range(max_iter):
            hm = _h(m, yk, sk, nk, ak, rho)
            if abs(hm) <= tol or hi - lo <= 4 * eps * max(1.0, abs(m)):
                ok = True
                break
            if hm < 0:
                lo = m
            elif hm > 0:
                hi = m
            step = hm / (np.exp(min(m + sk, 700.0)) + rho)
            cand = m - step
            if lo < cand < hi:
                m = cand
                # a vanishing Newton step means the root is resolved to round-off
                if abs(step) <= 4 * eps * max(1.0, abs(m)):
                    ok = True
                    break
            else:
                m = 0.5 * (lo + hi)
        if not ok:
            hm = _h(m, yk, sk, nk, ak, rho)
            if not (abs(hm) <= tol or hi - lo <= 4 * eps * max(1.0, abs(m))):
                out[k] = m
                return k
        out[k] = m
    return -1


def newton_1d_m(y, l, s, n_target, alpha, rho, tol=NEWTON_TOL, max_iter=200, start=None):
    """Root of ``-y + exp(m + s/2 + log l) + alpha + rho (m - n_target)``.

    The left side is strictly increasing and convex in m, so Newton started
    to the right of the root descends monotonically; a bisection bracket
    inside ``[-60, 60]`` guards against round-off.  Works elementwise on
    broadcastable arrays.  ``start`` is an optional warm start of the same
    shape (e.g. the previous ADMM iterate).
    """
    y, l, s, n_target, alpha = np.broadcast_arrays(
        *(np.asarray(v, dtype=float) for v in (y, l, s, n_target, alpha)))
    if np.any(s <= 0) or rho <= 0:
        raise ParameterError("need s > 0 and rho > 0")
    shape = y.shape
    shift = (0.5 * s + np.log(l)).ravel()
    out = np.empty(y.size)
    start = (np.empty(0) if start is None
             else np.ascontiguousarray(np.broadcast_to(np.asarray(start, float), shape)).ravel())
    code = _newton_kernel(y.ravel(), shift, np.ascontiguousarray(n_target).ravel(),
                          np.ascontiguousarray(alpha).ravel(), float(rho), float(tol),
                          int(max_iter), start, out)
    if code <= -2:
        bad = np.unravel_index(-2 - code, shape)
        raise NumericalError(f"M-step root not bracketed in {BRACKET} at coordinate {bad}")
    if code >= 0:
        raise NumericalError(f"M-step Newton failed at coordinate {np.unravel_index(code, shape)}")
    return out.reshape(shape)


def row_objective(m, y, log_l, s, theta, mu):
    """Objective of the M subproblem for each row of ``m`` (shape (k, p))."""
    d = m - mu
    return (0.5 * np.sum((d @ theta) * d, axis=1)
            + (-y * m + np.exp(m + 0.5 * s + log_l[:, None])).sum(axis=1))


def _augmented_objective(m, nu, y, log_l, s, theta, mu):
    d = nu - mu
    return (0.5 * np.sum((d @ theta) * d, axis=1)
            + (-y * m + np.exp(m + 0.5 * s + log_l[:, None])).sum(axis=1))


def admm_rows(y, log_l, s, m0, mu, ws):
    """Run the ADMM iterations for a block of independent rows.

    Each row keeps iterating until its relative objective change is below
    ``ws.tol`` and its primal residual ``||m - nu||`` is below
    ``1e-6 (1 + ||m||)``, or until ``ws.max_iter`` iterations.  Rows are
    updated independently, so the result for a row does not depend on which
    other rows share the block.

    Returns
    -------
    m : ndarray, shape (k, p)
    converged : ndarray of bool, shape (k,)
    delta : ndarray, shape (k,)
        Last relative objective change per row.
    """
    y = np.atleast_2d(np.asarray(y, dtype=float))
    s = np.atleast_2d(np.asarray(s, dtype=float))
    m0 = np.atleast_2d(np.asarray(m0, dtype=float))
    log_l = np.atleast_1d(np.asarray(log_l, dtype=float))
    k, p = m0.shape
    rho, theta = ws.rho, ws.theta
    theta_mu = theta @ mu
    m, nu = m0.copy(), m0.copy()
    alpha = np.zeros((k, p))
    prev = _augmented_objective(m, nu, y, log_l, s, theta, mu)
    delta = np.full(k, np.inf)
    converged = np.zeros(k, dtype=bool)
    active = np.arange(k)
    for _ in range(ws.max_iter):
        if active.size == 0:
            break
        ya, sa, la = y[active], s[active], log_l[active]
        m_new = newton_1d_m(ya, np.exp(la)[:, None], sa, nu[active], alpha[active], rho,
                            start=m[active])
        nu_new = ws.solve(rho * m_new + alpha[active] + theta_mu)
        alpha[active] += rho * (m_new - nu_new)
        m[active], nu[active] = m_new, nu_new
        cur = _augmented_objective(m_new, nu_new, ya, la, sa, theta, mu)
        d = np.abs(cur - prev[active]) / np.maximum(np.abs(prev[active]), 1e-300)
        delta[active] = d
        prev[active] = cur
        primal = np.linalg.norm(m_new - nu_new, axis=1)
        ok = (d <= ws.tol) & (primal <= PRIMAL_TOL * (1.0 + np.linalg.norm(m_new, axis=1)))
        converged[active[ok]] = True
        active = active[~ok]
    ws.multiplier = alpha[-1].copy() if k else ws.multiplier
    return m, converged, delta


def m_step_component(counts, log_l, s, m0, mu, ws, warn=True):
    """ADMM update of all rows of one component.

    A row whose ADMM result has a larger subproblem objective than its
    starting point keeps the starting point, so the step never loses ground.
    """
    m, converged, delta = admm_rows(counts, log_l, s, m0, mu, ws)
    f_new = row_objective(m, counts, log_l, s, ws.theta, mu)
    f_old = row_objective(m0, counts, log_l, s, ws.theta, mu)
    worse = ~(f_new <= f_old)
    if np.any(worse):
        m[worse] = m0[worse]
    n_bad = int(np.sum(~converged))
    ws.n_unconverged = n_bad
    ws.last_delta = float(np.max(delta)) if delta.size else 0.0
    if n_bad and warn:
        warnings.warn(f"ADMM hit the iteration cap on {n_bad} rows "
                      f"(max relative change {ws.last_delta:.3g})", AdmmConvergenceWarning)
    return m


def m_row_update(i, g, data, params, state, ws, log_scaling=None):
    """ADMM update of the single row M_g[i, :]; see :func:`admm_rows`."""
    if log_scaling is None:
        log_scaling = np.log(resolve_scaling(data))
    y = data.counts[i:i + 1].astype(float)
    m = m_step_component(y, np.asarray(log_scaling)[i:i + 1],
                         state.var_variances[g][i:i + 1], state.var_means[g][i:i + 1],
                         params.means[g], ws)
    return m[0]
