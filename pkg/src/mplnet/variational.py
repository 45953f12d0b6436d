"""Variational family, evidence lower bound and the closed-form block updates.

The variational posterior factorizes as ``q(Z_i) prod_j q(X_ij | Z_i = g)``
with ``q(X_ij | Z_i = g) = N(M_g[i, j], S_g[i, j])`` and
``q(Z_i) = Multinomial(1, P_i)``.  Arrays are stacked per component:
``var_means`` and ``var_variances`` have shape ``(G, n, p)`` and
``responsibilities`` has shape ``(n, G)``.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln

from .errors import DegenerateComponentError, NumericalError, ParameterError
from .pln import cholesky_lower, resolve_scaling

logger = logging.getLogger(__name__)

EXP_CLAMP = 30.0
WEIGHT_FLOOR = 1e-8


@dataclass
class VariationalState:
    var_means: np.ndarray
    var_variances: np.ndarray
    responsibilities: np.ndarray

    def __post_init__(self):
        self.var_means = np.asarray(self.var_means, dtype=float)
        self.var_variances = np.asarray(self.var_variances, dtype=float)
        self.responsibilities = np.asarray(self.responsibilities, dtype=float)

    @property
    def n_components(self):
        return self.responsibilities.shape[1]

    def validate(self):
        G, n, p = self.var_means.shape
        if self.var_variances.shape != (G, n, p):
            raise ParameterError("var_variances shape does not match var_means")
        if self.responsibilities.shape != (n, G):
            raise ParameterError("responsibilities must be n x G")
        if not np.all(self.var_variances > 0):
            raise ParameterError("variational variances must be strictly positive")
        P = self.responsibilities
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1.0)) > 1e-12:
            raise ParameterError("responsibility rows must lie on the simplex")
        return self

    def copy(self):
        return VariationalState(self.var_means.copy(), self.var_variances.copy(),
                                self.responsibilities.copy())

    def permuted(self, order):
        order = np.asarray(order)
        return VariationalState(self.var_means[order].copy(), self.var_variances[order].copy(),
                                self.responsibilities[:, order].copy())


@dataclass
class ElboBreakdown:
    """ELBO split by component, with the aggregated Lambda terms.

    ``term_values`` maps ``lambda1`` ... ``lambda5`` and ``K`` to length-G
    arrays of the responsibility-weighted sums entering each component's
    bound (``lambda2`` is stored with a positive sign and subtracted).
    """

    per_component: np.ndarray
    total: float
    term_values: dict = field(default_factory=dict)


def log_factorials(counts):
    return gammaln(np.asarray(counts, dtype=float) + 1.0)


def expected_rate(log_scaling, M, S):
    """Expected Poisson rate exp(M + S/2 + log l), exponent clamped at EXP_CLAMP."""
    expo = M + 0.5 * S + np.asarray(log_scaling)[:, None]
    if np.any(expo > EXP_CLAMP):
        logger.warning("clamping %d expected-rate exponents at %g",
                       int(np.sum(expo > EXP_CLAMP)), EXP_CLAMP)
        expo = np.minimum(expo, EXP_CLAMP)
    return np.exp(expo)


def _logdet(theta):
    L = cholesky_lower(theta)
    return 2.0 * np.log(np.diag(L)).sum()


def prior_fit_terms(theta, mean, M, S):
    """Per-row prior fit (log det Theta - tr(Theta Sigma_gi)) / 2."""
    d = M - mean
    quad = np.sum((d @ theta) * d, axis=1)
    return 0.5 * (_logdet(theta) - quad - S @ np.diag(theta))


def data_fit_terms(counts, log_scaling, M, S):
    """Row sums of Y*M - rate + log(S)/2: the g-dependent Poisson and entropy part."""
    return (counts * M - expected_rate(log_scaling, M, S) + 0.5 * np.log(S)).sum(axis=1)


class _Cache:
    """Per-dataset constants reused by every ELBO evaluation."""

    def __init__(self, data):
        self.counts = data.counts.astype(float)
        self.log_scaling = np.log(resolve_scaling(data))
        self.const_rows = (-log_factorials(data.counts)
                           + self.counts * self.log_scaling[:, None]).sum(axis=1)


_cache_registry = {}


def _cache_for(data):
    key = id(data)
    hit = _cache_registry.get(key)
    if hit is not None and hit[0] is data:
        return hit[1]
    cache = _Cache(data)
    _cache_registry.clear()
    _cache_registry[key] = (data, cache)
    return cache


def elbo(data, params, state):
    """Evidence lower bound of the mixture PLN model.

    Returns
    -------
    ElboBreakdown
    """
    if np.any(state.var_variances <= 0):
        raise ParameterError("variational variances must be strictly positive")
    c = _cache_for(data)
    P = state.responsibilities
    G = P.shape[1]
    per = np.empty(G)
    terms = {k: np.empty(G) for k in ("lambda1", "lambda2", "lambda3", "lambda4", "lambda5", "K")}
    with np.errstate(divide="ignore"):
        log_pi = np.log(params.proportions)
    for g in range(G):
        M, S, w = state.var_means[g], state.var_variances[g], P[:, g]
        terms["lambda1"][g] = w @ (c.counts * M).sum(axis=1)
        terms["lambda2"][g] = w @ expected_rate(c.log_scaling, M, S).sum(axis=1)
        terms["lambda3"][g] = w @ (0.5 * np.log(S)).sum(axis=1)
        pos = w > 0
        terms["lambda4"][g] = np.sum(w[pos] * (log_pi[g] - np.log(w[pos])))
        terms["lambda5"][g] = w @ prior_fit_terms(params.precisions[g], params.means[g], M, S)
        terms["K"][g] = w @ c.const_rows
        per[g] = (terms["lambda1"][g] - terms["lambda2"][g] + terms["lambda3"][g]
                  + terms["lambda4"][g] + terms["lambda5"][g] + terms["K"][g])
    return ElboBreakdown(per_component=per, total=float(per.sum()), term_values=terms)


def offdiag_l1(theta):
    """sum_{l != m} |theta_lm| (both orders counted)."""
    return float(np.abs(theta).sum() - np.abs(np.diag(theta)).sum())


def penalized_objective(data, params, state, lam):
    """-ELBO + sum_g lambda_g ||Theta_g||_{1,off}; ``lam`` scalar or length G."""
    lam = np.broadcast_to(np.asarray(lam, dtype=float), (params.n_components,))
    penalty = sum(lam[g] * offdiag_l1(params.precisions[g]) for g in range(params.n_components))
    return -elbo(data, params, state).total + penalty


def _softmax_rows(logits):
    top = logits.max(axis=1, keepdims=True)
    if np.any(~np.isfinite(top)):
        row = int(np.flatnonzero(~np.isfinite(top.ravel()))[0])
        raise NumericalError(f"all responsibility logits are -inf or invalid in row {row}")
    e = np.exp(logits - top)
    return e / e.sum(axis=1, keepdims=True)


def p_step(data, params, state, mode="paper"):
    """Responsibility update.

    ``mode="paper"`` uses only the prior-fit term in the logits;
    ``mode="exact"`` adds the component-dependent Poisson and entropy row
    terms, giving the exact coordinate maximizer of the ELBO in P.
    """
    if mode not in ("paper", "exact"):
        raise ValueError(f"unknown p-step mode {mode!r}")
    G = params.n_components
    n = state.responsibilities.shape[0]
    U = np.empty((n, G))
    if mode == "exact":
        c = _cache_for(data)
    for g in range(G):
        M, S = state.var_means[g], state.var_variances[g]
        U[:, g] = prior_fit_terms(params.precisions[g], params.means[g], M, S)
        if mode == "exact":
            U[:, g] += data_fit_terms(c.counts, c.log_scaling, M, S)
    with np.errstate(divide="ignore"):
        logits = np.log(params.proportions)[None, :] + U
    return _softmax_rows(logits)


def pi_step(state):
    return state.responsibilities.mean(axis=0)


def component_weights(state, floor=WEIGHT_FLOOR):
    w = state.responsibilities.sum(axis=0)
    low = np.flatnonzero(w < floor)
    if low.size:
        g = int(low[0])
        raise DegenerateComponentError(
            f"component {g} has total responsibility {w[g]:.3g} < {floor:g}", component=g)
    return w


def mu_step(state):
    """Responsibility-weighted row means of each M_g, shape (G, p)."""
    w = component_weights(state)
    P = state.responsibilities
    return np.stack([P[:, g] @ state.var_means[g] / w[g] for g in range(P.shape[1])])


def weighted_covariance(state, means, g):
    """sum_i P_ig {(M_gi - mu_g)(M_gi - mu_g)^T + D(S_gi)} / sum_i P_ig."""
    w_all = component_weights(state)
    w = state.responsibilities[:, g]
    d = state.var_means[g] - np.asarray(means)[g]
    cov = (d * w[:, None]).T @ d + np.diag(w @ state.var_variances[g])
    cov /= w_all[g]
    return 0.5 * (cov + cov.T)


def solve_variance(a, theta_jj, tol=1e-8, max_iter=100):
    """Minimize a*exp(S/2) + theta_jj*S/2 - log(S)/2 over S > 0, elementwise.

    ``a = l * exp(M)``.  The stationarity condition
    ``a exp(S/2)/2 + theta_jj/2 - 1/(2S) = 0`` has a unique root bracketed by
    ``[1/(theta_jj + a exp(hi/2)), hi]`` with ``hi = min(1/theta_jj, 1/a)``.
    """
    a, theta_jj = np.broadcast_arrays(np.asarray(a, float), np.asarray(theta_jj, float))
    if np.any(theta_jj <= 0):
        raise ParameterError("precision diagonal must be positive in the S-step")

    def half_exp(S):
        # only the sign of the gradient matters far from the root
        return np.exp(np.minimum(0.5 * S, 300.0))

    def grad(S):
        return 0.5 * (a * half_exp(S) + theta_jj - 1.0 / S)

    with np.errstate(divide="ignore"):
        hi = np.minimum(1.0 / theta_jj, 1.0 / a)
    lo = 1.0 / (theta_jj + a * half_exp(hi))
    S = 0.5 * (lo + hi)
    last_step = hi - lo
    for _ in range(max_iter):
        gS = grad(S)
        done = (np.abs(gS) <= tol) | (hi - lo <= 4 * np.finfo(float).eps * hi)
        if np.all(done):
            return S
        lo = np.where(gS < 0, S, lo)
        hi = np.where(gS > 0, S, hi)
        dg = 0.5 * (0.5 * a * half_exp(S) + 1.0 / S ** 2)
        newton = S - gS / dg
        # bisect when Newton leaves the bracket or stops halving the step
        ok = (newton > lo) & (newton < hi) & (np.abs(newton - S) <= 0.5 * last_step)
        nxt = np.where(ok, newton, 0.5 * (lo + hi))
        last_step = np.abs(nxt - S)
        S = np.where(done, S, nxt)
    gS = grad(S)
    bad = ~((np.abs(gS) <= tol) | (hi - lo <= 4 * np.finfo(float).eps * hi))
    if np.any(bad):
        idx = tuple(int(v) for v in np.argwhere(bad)[0])
        raise NumericalError(f"S-step did not converge at index {idx} (gradient {gS[idx]:.3g})")
    return S


def s_step(data, params, state):
    """Variance update for every (g, i, j); returns an array shaped like var_variances."""
    c = _cache_for(data)
    out = np.empty_like(state.var_variances)
    for g in range(params.n_components):
        expo = np.minimum(state.var_means[g] + c.log_scaling[:, None], 700.0)
        try:
            out[g] = solve_variance(np.exp(expo), np.diag(params.precisions[g])[None, :])
        except NumericalError as exc:
            raise NumericalError(f"component {g}: {exc}") from exc
    return out
