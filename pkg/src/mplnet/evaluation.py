"""Edge scores, partial-AUPRC ratios, stability and the two-step baseline."""

import logging
import warnings
from dataclasses import dataclass, field
from itertools import combinations
from math import comb

import numpy as np
from scipy.optimize import linear_sum_assignment

from .engine import edge_density, normalized_log_counts
from .errors import InputError, MplnError, ParameterError
from .glasso import glasso_fit
from .kmeans import kmeans
from .pln import resolve_scaling

logger = logging.getLogger(__name__)


@dataclass
class EdgeScoreList:
    """Scores of every unordered pair ``l < m`` of a p-node network.

    ``scores`` is aligned with ``np.triu_indices(p, 1)``; zero means the
    pair is unconnected.
    """

    p: int
    scores: np.ndarray

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=float).ravel()
        if self.scores.size != comb(self.p, 2):
            raise InputError(f"need {comb(self.p, 2)} pair scores for p={self.p}")
        if not np.all(np.isfinite(self.scores)) or np.any(self.scores < 0):
            raise InputError("edge scores must be finite and non-negative")

    @property
    def entries(self):
        iu = np.triu_indices(self.p, 1)
        return [(int(l), int(m), float(s)) for l, m, s in zip(iu[0], iu[1], self.scores)]

    @property
    def density(self):
        return float(np.count_nonzero(self.scores) / self.scores.size) if self.scores.size else 0.0

    def top(self, k):
        """Boolean mask of the ``k`` highest positive scores (ties by pair order)."""
        order = np.argsort(-self.scores, kind="stable")[:k]
        keep = np.zeros(self.scores.size, dtype=bool)
        keep[order[self.scores[order] > 0]] = True
        return keep


@dataclass
class EvalReport:
    method: str
    pauprc: float
    pauprc_ratio: float
    ari: float = float("nan")
    stability_jaccard: float = float("nan")
    density: float = float("nan")
    per_component: list = field(default_factory=list)
    runtime: float = float("nan")

    def as_dict(self):
        return {"method": self.method, "pauprc": self.pauprc, "pauprc_ratio": self.pauprc_ratio,
                "ari": self.ari, "stability_jaccard": self.stability_jaccard,
                "density": self.density, "per_component": list(self.per_component),
                "runtime": self.runtime}


def partial_correlations(precision):
    theta = np.asarray(precision, dtype=float)
    d = np.diag(theta)
    if np.any(d <= 0):
        raise ParameterError("precision diagonal must be strictly positive")
    r = -theta / np.sqrt(np.outer(d, d))
    np.fill_diagonal(r, 1.0)
    return r


def edge_scores(precision):
    """Absolute partial correlations of all pairs ``l < m``."""
    theta = np.asarray(precision, dtype=float)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise InputError("precision must be square")
    p = theta.shape[0]
    iu = np.triu_indices(p, 1)
    return EdgeScoreList(p, np.abs(partial_correlations(theta)[iu]))


def _truth_mask(truth, p):
    """Accept a boolean pair vector, a p x p matrix, or an iterable of pairs."""
    if isinstance(truth, np.ndarray) and truth.ndim == 2:
        return truth[np.triu_indices(p, 1)] != 0
    if isinstance(truth, np.ndarray) and truth.dtype == bool:
        if truth.size != comb(p, 2):
            raise InputError("boolean truth vector has the wrong length")
        return truth.copy()
    mask = np.zeros((p, p), dtype=bool)
    for l, m in truth:
        mask[min(l, m), max(l, m)] = True
    return mask[np.triu_indices(p, 1)]


def pr_points(scores, truth):
    """Precision and recall at every distinct positive score, descending."""
    s = scores.scores
    is_true = _truth_mask(truth, scores.p)
    n_true = int(is_true.sum())
    if n_true == 0:
        raise InputError("truth has no edges")
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], is_true[order]
    pos = s_sorted > 0
    s_sorted, t_sorted = s_sorted[pos], t_sorted[pos]
    if s_sorted.size == 0:
        raise InputError("all edge scores are zero; the network is empty at this density")
    tp = np.cumsum(t_sorted)
    # last index of each run of tied scores
    cut = np.flatnonzero(np.r_[s_sorted[1:] != s_sorted[:-1], True])
    k = cut + 1
    return tp[cut] / k, tp[cut] / n_true


def pauprc_ratio(scores, truth):
    """Partial area under the precision-recall curve and its ratio to random.

    The curve joins the (recall, precision) points at all distinct positive
    score thresholds; the area is the trapezoid rule over the reached recall
    span ``[r_min, r_max]``.  A random ranking has expected precision equal
    to the true-edge density ``d0`` at every recall, so its area is
    ``d0 * (r_max - r_min)``.  When the span is empty the ratio falls back to
    the precision at the highest threshold over ``d0``.

    Returns
    -------
    pauprc : float
    ratio : float
    """
    precision, recall = pr_points(scores, truth)
    d0 = _truth_mask(truth, scores.p).sum() / comb(scores.p, 2)
    span = recall[-1] - recall[0]
    if span <= 0:
        return 0.0, float(precision[0] / d0)
    area = float(np.sum(np.diff(recall) * 0.5 * (precision[1:] + precision[:-1])))
    return area, float(area / (d0 * span))


def match_components(weights_a, weights_b):
    """Permutation ``perm`` with component ``g`` of A matched to ``perm[g]`` of B.

    Hungarian assignment maximizing the overlap ``weights_a' weights_b``,
    where the inputs are n x G membership weights on shared samples.
    """
    overlap = np.asarray(weights_a, float).T @ np.asarray(weights_b, float)
    rows, cols = linear_sum_assignment(-overlap)
    perm = np.empty(overlap.shape[0], dtype=int)
    perm[rows] = cols
    return perm


def one_hot(labels, G):
    return np.eye(G)[np.asarray(labels, dtype=int)]


def jaccard(a, b):
    union = np.count_nonzero(a | b)
    return 1.0 if union == 0 else np.count_nonzero(a & b) / union


def _unpack(out):
    if hasattr(out, "params") and hasattr(out, "state"):
        return list(out.params.precisions), out.state.responsibilities
    precisions, resp = out
    return list(precisions), np.asarray(resp, dtype=float)


def jaccard_stability(data, fit_procedure, downsample_frac=0.9, reps=100,
                      density_target=0.05, seed=0):
    """Median pairwise Jaccard index of networks fitted on row subsamples.

    Parameters
    ----------
    data : CountDataset
    fit_procedure : callable
        ``fit_procedure(subset)`` returns a FitResult or a pair
        ``(precisions, responsibilities)`` for the subset's rows.
    downsample_frac : float
        Fraction of rows kept in each replicate, drawn without replacement.
    reps : int
    density_target : float
        Each network is cut to its top ``density_target * C(p, 2)`` edges.
    seed : int

    Returns
    -------
    float
        Median over replicate pairs of the component-averaged Jaccard index,
        components matched by responsibility overlap on shared rows.
    """
    if not 0 < downsample_frac <= 1:
        raise InputError("downsample_frac must lie in (0, 1]")
    if reps < 2:
        raise InputError("need at least two replicates")
    rng = np.random.default_rng(seed)
    n, p = data.n, data.p
    k_edges = int(round(density_target * comb(p, 2)))
    size = max(1, int(round(downsample_frac * n)))
    runs = []
    for r in range(reps):
        rows = np.sort(rng.choice(n, size=size, replace=False))
        try:
            precisions, resp = _unpack(fit_procedure(data.subset(rows)))
        except MplnError as exc:
            warnings.warn(f"stability replicate {r} failed and is skipped: {exc}")
            continue
        full = np.full((n, resp.shape[1]), np.nan)
        full[rows] = resp
        edges = [edge_scores(t).top(k_edges) for t in precisions]
        runs.append((full, edges))
    if len(runs) < 2:
        raise MplnError("fewer than two stability replicates succeeded")
    values = []
    for (ra, ea), (rb, eb) in combinations(runs, 2):
        shared = ~np.isnan(ra[:, 0]) & ~np.isnan(rb[:, 0])
        perm = match_components(ra[shared], rb[shared])
        values.append(np.mean([jaccard(ea[g], eb[perm[g]]) for g in range(len(ea))]))
    return float(np.median(values))


def glasso_at_density(cov, target_density, rel_tol=0.1, max_steps=30, tol=1e-6):
    """Graphical lasso with the penalty bisected on a log scale to a target density.

    Returns the solution and the penalty used; the closest density wins if
    the tolerance is never met.
    """
    p = cov.shape[0]
    off = np.abs(cov - np.diag(np.diag(cov)))
    hi = max(off.max() / 2.0, 1e-12)
    lo = hi * 1e-4
    best = None
    warm = None
    for _ in range(max_steps):
        lam = np.sqrt(lo * hi)
        sol = glasso_fit(cov, lam, tol=tol, warm_start=warm)
        warm = sol.precision
        d = edge_density(sol.precision) if p > 1 else 0.0
        gap = abs(d - target_density)
        if best is None or gap < best[0]:
            best = (gap, sol, lam)
        if gap <= rel_tol * target_density:
            break
        if d > target_density:
            lo = lam
        else:
            hi = lam
    return best[1], best[2]


@dataclass
class TwoStepResult:
    solutions: list
    labels: np.ndarray
    lambdas: np.ndarray

    @property
    def precisions(self):
        return [s.precision for s in self.solutions]


def two_step_baseline(data, G, lam=None, density_target=None, seed=0, restarts=10):
    """K-means on log(Y+1) - log(l), then a graphical lasso per cluster.

    Give either ``lam`` (penalty on the sum over both triangles, used for
    every cluster) or ``density_target`` (penalty bisected per cluster).
    """
    if (lam is None) == (density_target is None):
        raise InputError("give exactly one of lam and density_target")
    if G > data.n:
        raise InputError("more clusters than samples")
    Yt = normalized_log_counts(data.counts, resolve_scaling(data))
    labels, _, _ = kmeans(Yt, G, seed=seed, restarts=restarts)
    solutions, lambdas = [], []
    for g in range(G):
        X = Yt[labels == g]
        if X.shape[0] == 0:
            raise InputError(f"k-means cluster {g} is empty")
        d = X - X.mean(axis=0)
        cov = d.T @ d / X.shape[0]
        if np.any(np.diag(cov) <= 0):
            raise InputError(f"cluster {g} has a constant feature; covariance is degenerate")
        if density_target is not None:
            sol, used = glasso_at_density(cov, density_target)
        else:
            sol, used = glasso_fit(cov, lam), lam
        solutions.append(sol)
        lambdas.append(used)
    return TwoStepResult(solutions, labels, np.asarray(lambdas, dtype=float))


def score_against_truth(precisions, weights, true_precisions, true_labels):
    """Per-true-component pAUPRC and pAUPRC ratio after matching components.

    ``weights`` are the n x G memberships (responsibilities or one-hot
    labels); each true component is paired with the estimated component it
    shares most samples with.

    Returns
    -------
    areas, ratios : ndarray, shape (G,)
    """
    G = len(true_precisions)
    perm = match_components(one_hot(true_labels, G), weights)
    areas, ratios = np.empty(G), np.empty(G)
    for g in range(G):
        areas[g], ratios[g] = pauprc_ratio(edge_scores(precisions[perm[g]]), true_precisions[g])
    return areas, ratios
