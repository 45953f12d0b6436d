"""Poisson log-normal (PLN) and mixture PLN model: data containers, exact
sampler, closed-form factorial moments and a small-dimension likelihood
oracle.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.special import gammaln, logsumexp

from .errors import InputError, NumericalError, ParameterError, SamplingError

MAX_POISSON_RATE = 1e9


def cholesky_lower(theta, what="precision"):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    Raises ParameterError instead of LinAlgError so callers can report which
    parameter is broken.
    """
    theta = np.asarray(theta, dtype=float)
    try:
        return linalg.cholesky(theta, lower=True)
    except linalg.LinAlgError as exc:
        raise ParameterError(f"{what} matrix is not positive definite") from exc


@dataclass
class CountDataset:
    """Observed count matrix plus per-sample scaling factors.

    Parameters
    ----------
    counts : ndarray, shape (n, p)
        Non-negative integer counts.
    scaling : ndarray, shape (n,), optional
        Known library sizes ``l_i``; ``None`` means "estimate from counts".
    feature_names : list of str, optional
    true_labels, latent : ndarray, optional
        Ground truth, only present for simulated data.
    """

    counts: np.ndarray
    scaling: np.ndarray | None = None
    feature_names: list = None
    true_labels: np.ndarray | None = None
    latent: np.ndarray | None = None

    def __post_init__(self):
        counts = np.asarray(self.counts)
        if counts.ndim != 2:
            raise InputError("counts must be a 2-d array")
        if counts.size and (not np.all(np.isfinite(counts)) or np.any(counts < 0)
                            or np.any(counts != np.round(counts))):
            raise InputError("counts must be non-negative integers")
        self.counts = counts.astype(np.int64)
        n, p = self.counts.shape
        if self.scaling is not None:
            scaling = np.asarray(self.scaling, dtype=float).ravel()
            if scaling.shape != (n,):
                raise InputError(f"scaling has length {scaling.size}, expected {n}")
            if not np.all(np.isfinite(scaling)) or np.any(scaling <= 0):
                raise InputError("scaling factors must be positive and finite")
            self.scaling = scaling
        if self.feature_names is None:
            self.feature_names = [f"f{j}" for j in range(p)]
        else:
            self.feature_names = [str(f) for f in self.feature_names]
            if len(self.feature_names) != p:
                raise InputError("feature_names length does not match counts")
        if self.true_labels is not None:
            self.true_labels = np.asarray(self.true_labels, dtype=np.int64).ravel()
            if self.true_labels.shape != (n,):
                raise InputError("true_labels length does not match counts")
        if self.latent is not None:
            self.latent = np.asarray(self.latent, dtype=float)
            if self.latent.shape != (n, p):
                raise InputError("latent shape does not match counts")

    @property
    def n(self):
        return self.counts.shape[0]

    @property
    def p(self):
        return self.counts.shape[1]

    def subset(self, rows):
        """Row subset, keeping every per-sample field aligned."""
        rows = np.asarray(rows)
        return CountDataset(
            counts=self.counts[rows],
            scaling=None if self.scaling is None else self.scaling[rows],
            feature_names=list(self.feature_names),
            true_labels=None if self.true_labels is None else self.true_labels[rows],
            latent=None if self.latent is None else self.latent[rows],
        )


@dataclass
class MixtureParams:
    """Mixture parameters: proportions, per-component means and precisions."""

    proportions: np.ndarray
    means: np.ndarray
    precisions: np.ndarray

    def __post_init__(self):
        self.proportions = np.asarray(self.proportions, dtype=float).ravel()
        self.means = np.atleast_2d(np.asarray(self.means, dtype=float))
        self.precisions = np.asarray(self.precisions, dtype=float)
        if self.precisions.ndim == 2:
            self.precisions = self.precisions[None]

    @property
    def n_components(self):
        return self.proportions.size

    @property
    def p(self):
        return self.means.shape[1]

    def validate(self, allow_zero_weight=False):
        G = self.n_components
        if G < 1:
            raise ParameterError("need at least one component")
        if self.means.shape[0] != G or self.precisions.shape[0] != G:
            raise ParameterError("proportions, means and precisions disagree on G")
        p = self.means.shape[1]
        if self.precisions.shape[1:] != (p, p):
            raise ParameterError("precision matrices must be p x p")
        pi = self.proportions
        if np.any(pi < 0) or (not allow_zero_weight and np.any(pi <= 0)):
            raise ParameterError("proportions must be positive")
        if abs(pi.sum() - 1.0) > 1e-9:
            raise ParameterError(f"proportions sum to {pi.sum()!r}, not 1")
        for g in range(G):
            if not np.allclose(self.precisions[g], self.precisions[g].T, atol=1e-10):
                raise ParameterError(f"precision {g} is not symmetric")
            cholesky_lower(self.precisions[g], what=f"precision {g}")
        return self

    def permuted(self, order):
        order = np.asarray(order)
        return MixtureParams(self.proportions[order].copy(), self.means[order].copy(),
                             self.precisions[order].copy())

    def copy(self):
        return self.permuted(np.arange(self.n_components))


@dataclass(frozen=True)
class MomentIndex:
    """Orders ``(n_1, ..., n_p)`` of a joint factorial moment."""

    orders: tuple = field(default_factory=tuple)

    def __post_init__(self):
        orders = tuple(int(o) for o in np.asarray(self.orders).ravel())
        if any(o < 0 for o in orders):
            raise ParameterError("moment orders must be non-negative")
        object.__setattr__(self, "orders", orders)

    def as_array(self):
        return np.array(self.orders, dtype=float)


def _orders(index):
    if isinstance(index, MomentIndex):
        return index.as_array()
    return MomentIndex(index).as_array()


def sample_mpln(params, scaling, seed):
    """Draw a dataset from the mixture Poisson log-normal model.

    Each sample gets a component label from ``Multinomial(1, pi)``, a latent
    vector from ``N(mu_g, Theta_g^{-1})`` and counts
    ``Y_ij ~ Poisson(l_i exp(X_ij))``.

    Parameters
    ----------
    params : MixtureParams
    scaling : array-like, shape (n,)
        Positive scaling factors; ``n`` is taken from its length.
    seed : int or numpy Generator

    Returns
    -------
    CountDataset
        With ``true_labels`` and ``latent`` filled in.
    """
    params.validate()
    scaling = np.asarray(scaling, dtype=float).ravel()
    if not np.all(np.isfinite(scaling)) or np.any(scaling <= 0):
        raise ParameterError("scaling factors must be positive and finite")
    rng = np.random.default_rng(seed)
    n, p, G = scaling.size, params.p, params.n_components

    labels = rng.choice(G, size=n, p=params.proportions)
    noise = rng.standard_normal((n, p))
    latent = np.empty((n, p))
    for g in range(G):
        rows = labels == g
        L = cholesky_lower(params.precisions[g], what=f"precision {g}")
        # Theta = L L^T  =>  x = mu + L^{-T} z has covariance Theta^{-1}
        latent[rows] = params.means[g] + linalg.solve_triangular(
            L, noise[rows].T, lower=True, trans="T").T

    with np.errstate(over="ignore"):
        rates = scaling[:, None] * np.exp(latent)
    bad = ~np.isfinite(rates) | (rates > MAX_POISSON_RATE)
    if bad.any():
        i, j = map(int, np.argwhere(bad)[0])
        raise SamplingError(
            f"Poisson rate {rates[i, j]:.3g} at (i={i}, j={j}) exceeds {MAX_POISSON_RATE:g}")
    counts = rng.poisson(rates)
    return CountDataset(counts=counts, scaling=scaling, true_labels=labels, latent=latent)


def falling_factorial(y, n):
    """phi(y, n) = y (y-1) ... (y-n+1), with phi(y, 0) = 1 (vectorized over y)."""
    y = np.asarray(y, dtype=float)
    out = np.ones_like(y)
    for k in range(int(n)):
        out = out * (y - k)
    return out


def pln_log_factorial_moment(index, mean, precision):
    """log E[prod_j phi(Y_j, n_j)] = N'mu + N' Theta^{-1} N / 2 for Y ~ PLN."""
    N = _orders(index)
    mean = np.asarray(mean, dtype=float).ravel()
    if N.size != mean.size:
        raise ParameterError("moment index dimension does not match the mean")
    L = cholesky_lower(precision)
    w = linalg.solve_triangular(L, N, lower=True)
    return float(N @ mean + 0.5 * w @ w)


def pln_factorial_moment(index, mean, precision):
    """Closed-form joint factorial moment of a PLN vector (unit scaling)."""
    return float(np.exp(pln_log_factorial_moment(index, mean, precision)))


def empirical_factorial_moment(data, index):
    """Sample mean and standard error of ``prod_j phi(Y_ij, n_j)`` over rows."""
    counts = data.counts if isinstance(data, CountDataset) else np.atleast_2d(data)
    N = _orders(index).astype(int)
    if counts.shape[0] == 0:
        raise InputError("empty dataset")
    if N.size != counts.shape[1]:
        raise InputError(f"moment index has {N.size} entries, data has p={counts.shape[1]}")
    stat = np.ones(counts.shape[0])
    for j, nj in enumerate(N):
        if nj:
            stat *= falling_factorial(counts[:, j], nj)
    estimate = float(stat.mean())
    if np.all(stat == stat[0]):
        return estimate, 0.0
    return estimate, float(stat.std(ddof=1) / np.sqrt(stat.size))


# --------------------------------------------------------------------------
# exact likelihood for p <= 2 by adaptive Gauss-Hermite quadrature


def _laplace_mode(y, log_l, mean, theta, max_iter=200):
    """Mode of log p(y|x) + log N(x; mean, theta^{-1}) by damped Newton."""
    x = np.where(y > 0, np.log(np.maximum(y, 0.5)) - log_l, mean)
    x = 0.5 * (x + mean)

    def objective(x):
        d = x - mean
        return y @ x - np.exp(x + log_l).sum() - 0.5 * d @ theta @ d

    f = objective(x)
    for _ in range(max_iter):
        rate = np.exp(x + log_l)
        grad = y - rate - theta @ (x - mean)
        hess = np.diag(rate) + theta
        step = np.linalg.solve(hess, grad)
        t = 1.0
        while True:
            x_new = x + t * step
            f_new = objective(x_new)
            if f_new >= f - 1e-12 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        x, f = x_new, f_new
        if np.max(np.abs(t * step)) < 1e-12:
            break
    hess = np.diag(np.exp(x + log_l)) + theta
    return x, hess


def _log_component_integral(y, log_l, mean, theta, n_nodes):
    p = y.size
    xhat, hess = _laplace_mode(y, log_l, mean, theta)
    cov_chol = linalg.cholesky(linalg.inv(hess), lower=True)
    t, w = np.polynomial.hermite.hermgauss(n_nodes)
    grids = np.meshgrid(*([t] * p), indexing="ij")
    nodes = np.stack([g.ravel() for g in grids], axis=1)
    logw = np.sum(np.log(np.stack(np.meshgrid(*([w] * p), indexing="ij"), 0).reshape(p, -1)), 0)
    x = xhat + np.sqrt(2.0) * nodes @ cov_chol.T
    d = x - mean
    chol_theta = cholesky_lower(theta)
    logdet_theta = 2.0 * np.log(np.diag(chol_theta)).sum()
    log_f = (x @ y + y.sum() * log_l - np.exp(x + log_l).sum(axis=1) - gammaln(y + 1).sum()
             + 0.5 * logdet_theta - 0.5 * p * np.log(2 * np.pi)
             - 0.5 * np.einsum("ki,ij,kj->k", d, theta, d))
    log_jac = 0.5 * p * np.log(2.0) + np.log(np.diag(cov_chol)).sum()
    return log_jac + logsumexp(logw + (nodes ** 2).sum(axis=1) + log_f)


def loglik_oracle(data, params, quad_nodes=60, rtol=1e-6, max_nodes=400):
    """Exact mixture PLN log-likelihood for p <= 2.

    Each per-sample, per-component integral is computed by Gauss-Hermite
    quadrature centred at the Laplace mode and scaled by the inverse Hessian.
    The node count grows until two successive rules agree to ``rtol``
    (relative, on the integral).

    Returns
    -------
    float
        ``sum_i log sum_g pi_g int p(Y_i | x) N(x; mu_g, Theta_g^{-1}) dx``.
    """
    if data.p > 2:
        raise InputError(f"loglik_oracle supports p <= 2 only (got p={data.p})")
    if quad_nodes < 50:
        raise InputError("quad_nodes must be at least 50")
    params.validate()
    scaling = np.ones(data.n) if data.scaling is None else data.scaling
    log_pi = np.log(params.proportions)
    total = 0.0
    for i in range(data.n):
        y = data.counts[i].astype(float)
        log_l = float(np.log(scaling[i]))
        terms = np.empty(params.n_components)
        for g in range(params.n_components):
            mean, theta = params.means[g], params.precisions[g]
            k = quad_nodes
            prev = _log_component_integral(y, log_l, mean, theta, k)
            while True:
                k_next = int(k * 1.5)
                cur = _log_component_integral(y, log_l, mean, theta, k_next)
                if abs(np.expm1(cur - prev)) <= rtol:
                    break
                if k_next > max_nodes:
                    raise NumericalError(
                        f"quadrature did not converge for sample {i}, component {g}: "
                        f"log-integral {prev:.10g} ({k} nodes) vs {cur:.10g} ({k_next} nodes)")
                k, prev = k_next, cur
            terms[g] = log_pi[g] + cur
        total += logsumexp(terms)
    return float(total)


def estimate_scaling(counts, total=1e4):
    """Library-size estimate ``l_i = sum_j Y_ij / total``."""
    counts = np.asarray(counts)
    row_sums = counts.sum(axis=1).astype(float)
    if np.any(row_sums <= 0):
        bad = int(np.flatnonzero(row_sums <= 0)[0])
        raise InputError(f"sample {bad} has no counts; cannot estimate its scaling factor")
    return row_sums / total


def resolve_scaling(data):
    """The dataset's own scaling factors, or the library-size estimate."""
    if data.scaling is not None:
        return data.scaling
    return estimate_scaling(data.counts)
