"""Block-coordinate variational EM for the lasso-penalized mixture PLN model,
plus tuning-parameter selection.

One outer iteration runs, in order: responsibilities (P), proportions (pi),
variational means (M, by ADMM), variational variances (S), component means
(mu) and precisions (Theta, by graphical lasso).  Iteration stops once both
the relative ELBO change and the sign-pattern change of the precisions are
below their tolerances.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from math import comb

import numpy as np
from threadpoolctl import threadpool_limits

from . import variational as vi
from .admm import AdmmWorkspace, m_step_component
from .errors import DegenerateComponentError, InputError, MplnError
from .glasso import ZeroEdgeSet, glasso_fit, glasso_objective
from .kmeans import kmeans
from .pln import CountDataset, MixtureParams, resolve_scaling

logger = logging.getLogger(__name__)


@dataclass
class FitConfig:
    """Settings of one VMPLN fit.

    ``lam`` is the penalty multiplying ``sum_g ||Theta_g||_{1,off}`` in the
    negative ELBO (a scalar or one value per component).  The per-component
    graphical lasso sees ``lam_g / sum_i P_ig``.
    """

    components: int = 1
    lam: object = 0.0
    zero_edges: ZeroEdgeSet = field(default_factory=ZeroEdgeSet)
    max_outer: int = 100
    min_outer: int = 1
    tol_elbo: float = 1e-6
    tol_sign: float = 1e-4
    rho: float = 1.0
    admm_max_iter: int = 100
    admm_tol: float = 1e-6
    p_step_mode: str = "paper"
    seed: int = 0
    kmeans_restarts: int = 10
    glasso_tol: float = 1e-6
    threads: int = 1

    def __post_init__(self):
        if self.components < 1:
            raise InputError("components must be >= 1")
        if self.tol_elbo <= 0 or self.tol_sign <= 0:
            raise InputError("tolerances must be positive")
        if not (self.max_outer >= self.min_outer >= 1):
            raise InputError("need max_outer >= min_outer >= 1")
        if self.p_step_mode not in ("paper", "exact"):
            raise InputError(f"unknown p_step_mode {self.p_step_mode!r}")
        if self.rho <= 0:
            raise InputError("rho must be positive")
        lam = np.asarray(self.lam, dtype=float)
        if np.any(lam < 0) or lam.ndim > 1 or (lam.ndim == 1 and lam.size != self.components):
            raise InputError("lam must be non-negative, scalar or one value per component")

    def lam_vector(self):
        return np.broadcast_to(np.asarray(self.lam, dtype=float), (self.components,)).copy()

    def replace(self, **changes):
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return FitConfig(**values)

    def to_dict(self):
        d = asdict(self)
        d["lam"] = np.asarray(self.lam, dtype=float).tolist()
        d["zero_edges"] = sorted(list(p) for p in self.zero_edges.pairs)
        return d


@dataclass
class FitResult:
    params: MixtureParams
    state: vi.VariationalState
    trace: list
    status: str
    lam: np.ndarray
    scaling: np.ndarray
    elbo: vi.ElboBreakdown = None
    message: str = ""

    @property
    def n_iter(self):
        return len(self.trace)

    def labels(self):
        return self.state.responsibilities.argmax(axis=1)

    def permuted(self, order):
        order = np.asarray(order)
        eb = None
        if self.elbo is not None:
            eb = vi.ElboBreakdown(self.elbo.per_component[order], self.elbo.total,
                                  {k: v[order] for k, v in self.elbo.term_values.items()})
        return FitResult(self.params.permuted(order), self.state.permuted(order), self.trace,
                         self.status, self.lam[order], self.scaling, eb, self.message)


def resolve_threads(threads=None):
    if threads:
        return max(1, int(threads))
    env = os.environ.get("MPLNET_THREADS")
    if not env:
        return 1
    try:
        return max(1, int(env))
    except ValueError as exc:
        raise InputError(f"MPLNET_THREADS must be an integer, got {env!r}") from exc


def normalized_log_counts(counts, scaling):
    """log(Y + 1) - log(l) 1'."""
    return np.log(np.asarray(counts, dtype=float) + 1.0) - np.log(scaling)[:, None]


def _with_scaling(data):
    if data.scaling is not None:
        return data
    return CountDataset(data.counts, resolve_scaling(data), data.feature_names,
                        data.true_labels, data.latent)


def sign_change(old, new):
    """max_g sum_{l<m} |sign(new_glm) - sign(old_glm)| / C(p, 2)."""
    p = old.shape[-1]
    if p < 2:
        return 0.0
    iu = np.triu_indices(p, 1)
    diffs = [np.abs(np.sign(new[g][iu]) - np.sign(old[g][iu])).sum()
             for g in range(old.shape[0])]
    return float(max(diffs) / comb(p, 2))


def edge_density(theta):
    """Fraction of nonzero off-diagonal pairs."""
    p = theta.shape[0]
    iu = np.triu_indices(p, 1)
    return float(np.count_nonzero(theta[iu]) / comb(p, 2)) if p > 1 else 0.0


def _cluster_covariance(X):
    n = X.shape[0]
    d = X - X.mean(axis=0)
    cov = d.T @ d / max(n, 1)
    if n < 2 or np.any(np.diag(cov) <= 0):
        # a singleton or constant cluster has no spread; borrow the unit
        # initial variational variance so the precision is defined
        cov = cov + np.eye(X.shape[1])
    return cov


def initialize(data, config):
    """Starting values from K-means on the normalized log counts.

    Returns
    -------
    params : MixtureParams
    state : VariationalState
    """
    data = _with_scaling(data)
    G = config.components
    Yt = normalized_log_counts(data.counts, data.scaling)
    labels, centers, _ = kmeans(Yt, G, seed=config.seed, restarts=config.kmeans_restarts)
    P = np.eye(G)[labels] + 1e-6
    P /= P.sum(axis=1, keepdims=True)
    n_g = P.sum(axis=0)
    lam = config.lam_vector()
    precisions = np.empty((G, data.p, data.p))
    for g in range(G):
        cov = _cluster_covariance(Yt[labels == g])
        precisions[g] = glasso_fit(cov, lam[g] / n_g[g], config.zero_edges,
                                   tol=config.glasso_tol).precision
    params = MixtureParams(P.mean(axis=0), centers.copy(), precisions)
    state = vi.VariationalState(np.repeat(Yt[None], G, axis=0), np.ones((G, data.n, data.p)), P)
    return params, state


def _map(fn, items, threads):
    if threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def m_step(data, params, state, config, threads=1):
    """ADMM update of every M_g; one factorization of (rho I + Theta_g) per component.

    Returns the new var_means and the number of rows that hit the ADMM cap.
    """
    log_l = np.log(data.scaling)
    counts = data.counts.astype(float)

    def one(g):
        ws = AdmmWorkspace(params.precisions[g], rho=config.rho,
                           max_iter=config.admm_max_iter, tol=config.admm_tol)
        m = m_step_component(counts, log_l, state.var_variances[g], state.var_means[g],
                             params.means[g], ws, warn=False)
        return m, ws.n_unconverged

    out = _map(one, list(range(params.n_components)), threads)
    return np.stack([o[0] for o in out]), sum(o[1] for o in out)


def theta_step(params, state, config, lam, threads=1):
    """Graphical lasso on each component's weighted covariance.

    The previous precision is the warm start, and is kept if the new solution
    does not improve the component objective.
    """
    w = vi.component_weights(state)

    def one(g):
        cov = vi.weighted_covariance(state, params.means, g)
        lam_eff = lam[g] / w[g]
        sol = glasso_fit(cov, lam_eff, config.zero_edges, tol=config.glasso_tol,
                         warm_start=params.precisions[g])
        old = params.precisions[g]
        if glasso_objective(old, cov, lam_eff) < sol.objective:
            return old.copy()
        return sol.precision

    return np.stack(_map(one, list(range(params.n_components)), threads))


def fit(data, config, init=None, relabel=True, step_callback=None):
    """Fit the lasso-penalized mixture PLN model by variational EM.

    Parameters
    ----------
    data : CountDataset
        Missing scaling factors are estimated as row sums / 1e4.
    config : FitConfig
    init : (MixtureParams, VariationalState), optional
        Warm start; by default :func:`initialize` is used.
    relabel : bool
        Sort components by decreasing proportion before returning.
    step_callback : callable, optional
        Called as ``step_callback(name, params, state)`` after every block.

    Returns
    -------
    FitResult
        ``status`` is ``"converged"``, ``"max_iter"`` or ``"degenerate"``.
    """
    data = _with_scaling(data)
    threads = resolve_threads(config.threads)
    lam = config.lam_vector()
    if init is None:
        params, state = initialize(data, config)
    else:
        params, state = init[0].copy(), init[1].copy()
    if params.n_components != config.components or state.var_means.shape[1:] != data.counts.shape:
        raise InputError("warm start does not match the data or the number of components")

    def notify(name):
        if step_callback is not None:
            step_callback(name, params, state)

    trace = []
    status, message = "max_iter", ""
    # BLAS stays single-threaded so reductions do not depend on the thread
    # count; parallelism comes from running components side by side
    with threadpool_limits(limits=1):
        current = vi.elbo(data, params, state).total
        for k in range(config.max_outer):
            old_precisions = params.precisions.copy()
            try:
                state.responsibilities = vi.p_step(data, params, state, config.p_step_mode)
                notify("P")
                params.proportions = vi.pi_step(state)
                notify("pi")
                state.var_means, n_capped = m_step(data, params, state, config, threads)
                notify("M")
                state.var_variances = vi.s_step(data, params, state)
                notify("S")
                params.means = vi.mu_step(state)
                notify("mu")
                params.precisions = theta_step(params, state, config, lam, threads)
                notify("Theta")
            except DegenerateComponentError as exc:
                status, message = "degenerate", str(exc)
                break
            except MplnError as exc:
                raise type(exc)(f"outer iteration {k}: {exc}") from exc
            new = vi.elbo(data, params, state).total
            delta_l = abs(new - current) / abs(current) if current != 0 else abs(new)
            delta_s = sign_change(old_precisions, params.precisions)
            penalty = sum(lam[g] * vi.offdiag_l1(params.precisions[g])
                          for g in range(params.n_components))
            trace.append({"iteration": k + 1, "elbo": new, "objective": -new + penalty,
                          "delta_elbo": delta_l, "delta_sign": delta_s,
                          "admm_capped_rows": int(n_capped)})
            current = new
            if k + 1 >= config.min_outer and delta_l <= config.tol_elbo and delta_s <= config.tol_sign:
                status = "converged"
                break
    breakdown = vi.elbo(data, params, state) if status != "degenerate" else None
    result = FitResult(params, state, trace, status, lam, data.scaling, breakdown, message)
    if relabel and status != "degenerate":
        result = result.permuted(np.argsort(-params.proportions, kind="stable"))
    return result


# --------------------------------------------------------------------------
# tuning-parameter selection


def icl_score(result, g, count="all"):
    """-2 ELBO_g + log(sum_i P_ig) * s(Theta_g).

    ``count="all"`` counts every nonzero entry of Theta_g (diagonal and both
    triangles); ``count="pairs"`` counts nonzero off-diagonal pairs only.
    """
    weight = result.state.responsibilities[:, g].sum()
    if not weight > 0:
        raise DegenerateComponentError(f"component {g} has no weight", component=g)
    theta = result.params.precisions[g]
    if count == "all":
        s = np.count_nonzero(theta)
    elif count == "pairs":
        s = np.count_nonzero(theta[np.triu_indices(theta.shape[0], 1)])
    else:
        raise ValueError(f"unknown count mode {count!r}")
    return float(-2.0 * result.elbo.per_component[g] + np.log(weight) * s)


def default_lambda_grid(data, config, size=20):
    """Log-spaced grid over [1e-3, 1] x max_g (n_g * max |offdiag Sigma_g|) at initialization."""
    params, state = initialize(data, config.replace(lam=0.0))
    w = state.responsibilities.sum(axis=0)
    top = 0.0
    for g in range(config.components):
        cov = vi.weighted_covariance(state, params.means, g)
        off = np.abs(cov - np.diag(np.diag(cov))).max()
        top = max(top, w[g] * off)
    if top <= 0:
        top = 1.0
    return np.geomspace(1e-3 * top, top, size)


@dataclass
class Selection:
    lam: np.ndarray
    fit: FitResult
    grid: np.ndarray = None
    scores: np.ndarray = None
    densities: np.ndarray = None
    status: str = "ok"
    steps: int = 0


def select_lambda_icl(data, config, grid=None, count="all"):
    """Choose one penalty per component by minimizing the ICL over a grid.

    The grid is fitted from the largest value down, each fit warm-started
    from the previous one; ties go to the larger penalty.
    """
    data = _with_scaling(data)
    grid = default_lambda_grid(data, config) if grid is None else np.unique(np.asarray(grid, float))
    if grid.size == 0:
        raise InputError("lambda grid is empty")
    G = config.components
    scores = np.full((grid.size, G), np.inf)
    fits = [None] * grid.size
    init = None
    for idx in range(grid.size - 1, -1, -1):
        res = fit(data, config.replace(lam=float(grid[idx])), init=init, relabel=False)
        if res.status == "degenerate":
            continue
        fits[idx] = res
        init = (res.params, res.state)
        scores[idx] = [icl_score(res, g, count) for g in range(G)]
    if all(f is None for f in fits):
        raise DegenerateComponentError("every fit on the lambda grid was degenerate")
    chosen = np.empty(G, dtype=int)
    for g in range(G):
        best = np.min(scores[:, g])
        chosen[g] = np.flatnonzero(scores[:, g] == best).max()
    lam = grid[chosen]
    if np.all(chosen == chosen[0]):
        final = fits[chosen[0]]
    else:
        start = fits[chosen.min()]
        final = fit(data, config.replace(lam=lam), init=(start.params, start.state), relabel=False)
    order = np.argsort(-final.params.proportions, kind="stable")
    final = final.permuted(order)
    return Selection(lam=lam[order], fit=final, grid=grid, scores=scores[:, order])


def select_lambda_density(data, config, target_density, per_component=True,
                          rel_tol=0.1, max_steps=30, init=None):
    """Bisection on log(lambda) until the network density hits a target.

    Density is the fraction of nonzero off-diagonal pairs.  With
    ``per_component`` each component's penalty is bisected separately
    (inside the same sequence of joint fits); otherwise one shared penalty
    is tuned on the mean density.
    """
    if not 0 < target_density <= 1:
        raise InputError("target density must lie in (0, 1]")
    if max_steps < 1:
        raise InputError("max_steps must be >= 1")
    data = _with_scaling(data)
    G = config.components
    width = G if per_component else 1

    def densities(res):
        d = np.array([edge_density(res.params.precisions[g]) for g in range(G)])
        return d if per_component else np.array([d.mean()])

    def run(lam_vals, start):
        lam_full = lam_vals if per_component else np.repeat(lam_vals, G)
        return fit(data, config.replace(lam=lam_full), init=start, relabel=False)

    def within(d):
        return np.abs(d - target_density) <= rel_tol * target_density

    if init is None:
        init = initialize(data, config.replace(lam=0.0))
    params0, state0 = init
    w = state0.responsibilities.sum(axis=0)
    top = np.empty(G)
    for g in range(G):
        cov = vi.weighted_covariance(state0, params0.means, g)
        top[g] = w[g] * np.abs(cov - np.diag(np.diag(cov))).max()
    top = np.maximum(top, 1e-12)
    hi = top.copy() if per_component else np.array([top.max()])
    lo = hi * 1e-4
    steps = 0

    # an unpenalized fit is dense on every free pair, so the target can only
    # be out of reach when pinned zeros leave too few free pairs
    p = data.p
    free_fraction = 1.0 - len(config.zero_edges) / (p * (p - 1) / 2) if p > 1 else 0.0
    if target_density == 1.0 or free_fraction < target_density * (1 + rel_tol):
        res0 = run(np.zeros(width), init)
        steps += 1
        d0 = densities(res0)
        if target_density == 1.0 or np.any(d0 < target_density) or np.all(within(d0)):
            status = "ok" if np.all(d0 >= target_density) or np.all(within(d0)) else "unreachable"
            if status == "unreachable":
                logger.warning("target density %g unreachable even at lambda = 0", target_density)
            final = res0.permuted(np.argsort(-res0.params.proportions, kind="stable"))
            return Selection(lam=np.zeros(G), fit=final, densities=d0, status=status, steps=steps)
        lo = np.zeros(width)

    lam = np.sqrt(lo * hi) if np.all(lo > 0) else 0.5 * (lo + hi)
    done = np.zeros(width, dtype=bool)
    current = init
    res, d, used = None, None, lo.copy()
    for _ in range(max_steps):
        used = lam.copy()
        res = run(used, current)
        steps += 1
        current = (res.params, res.state)
        d = densities(res)
        done = within(d)
        if np.all(done):
            break
        for g in np.flatnonzero(~done):
            if d[g] > target_density:
                lo[g] = lam[g]
            else:
                hi[g] = lam[g]
            lam[g] = np.sqrt(lo[g] * hi[g]) if lo[g] > 0 else 0.5 * (lo[g] + hi[g])
    status = "ok" if np.all(done) else "max_steps"
    lam_full = used if per_component else np.repeat(used, G)
    order = np.argsort(-res.params.proportions, kind="stable")
    return Selection(lam=lam_full[order], fit=res.permuted(order),
                     densities=d[order] if per_component else d, status=status, steps=steps)
