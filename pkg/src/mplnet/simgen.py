"""Synthetic mixture PLN benchmark data.

Four graph families give the component precisions; component means are
built from a dropout-specific vector ``v = (v1, v2, v3, v4)``: the first
``p_d`` coordinates differ between components, the rest are shared.  The
number of discriminative coordinates ``p_d`` controls how well k-means can
separate the populations, measured by the adjusted Rand index (ARI).
"""

import warnings
from dataclasses import dataclass, field, replace
from math import comb

import numpy as np

from .engine import normalized_log_counts
from .errors import CalibrationError, InputError
from .kmeans import kmeans
from .pln import CountDataset, MixtureParams, cholesky_lower, estimate_scaling, sample_mpln

GRAPH_KINDS = ("random", "hub", "blocked", "scale_free")

DROPOUT_VECTORS = {
    "low": (2.4, -0.1, 0.9, -0.1),
    "high": (1.4, -1.1, -0.1, -1.1),
}

# ARI bands, open on the left and closed on the right
MIXING_BANDS = {
    "low": (0.9, 1.0),
    "middle": (0.75, 0.85),
    "high": (0.65, 0.75),
}

EDGE_PROB = 0.1
HUB_FRACTION = 0.2
N_BLOCKS = 5
MIN_EIGENVALUE = 0.1
DIAG_MARGIN = 0.01
SCALING_LOG_MEAN = np.log(10.0)
SCALING_LOG_VAR = 0.05


@dataclass
class SimConfig:
    """One simulation scenario.

    ``p_d`` fixes the number of discriminative mean coordinates; when it is
    None it is calibrated to ``mixing_level``.
    """

    populations: int = 3
    proportions: tuple = None
    n: int = 3000
    p: int = 100
    graph_kind: str = "random"
    dropout_level: str = "low"
    mixing_level: str = "low"
    edge_magnitude: float = 0.3
    seed: int = 0
    p_d: int = None
    calibration_seeds: int = 5
    max_candidates: int = 50

    def __post_init__(self):
        if self.proportions is None:
            self.proportions = tuple([1.0 / self.populations] * self.populations)
        props = np.asarray(self.proportions, dtype=float)
        if props.size != self.populations or np.any(props < 0) or abs(props.sum() - 1) > 1e-12:
            raise InputError("proportions must be a length-G point on the simplex")
        if self.p < 2:
            raise InputError("p must be at least 2")
        if self.n < self.populations:
            raise InputError("need at least one sample per population")
        if self.graph_kind not in GRAPH_KINDS:
            raise InputError(f"graph_kind must be one of {GRAPH_KINDS}")
        if self.dropout_level not in DROPOUT_VECTORS:
            raise InputError("dropout_level must be 'low' or 'high'")
        if self.mixing_level not in MIXING_BANDS:
            raise InputError("mixing_level must be 'low', 'middle' or 'high'")
        if self.p_d is not None and not 0 <= self.p_d <= self.p:
            raise InputError("p_d must lie in [0, p]")

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass
class SyntheticDataset:
    dataset: CountDataset
    true_precisions: list
    achieved_ari: float
    p_d_used: int
    means: np.ndarray = None
    config: SimConfig = None
    extra: dict = field(default_factory=dict)

    def true_params(self):
        props = np.asarray(self.config.proportions) if self.config else None
        return MixtureParams(props, self.means, self.true_precisions)


def ari(labels_a, labels_b):
    """Adjusted Rand index between two labelings."""
    a = np.asarray(labels_a).ravel()
    b = np.asarray(labels_b).ravel()
    if a.size != b.size:
        raise InputError(f"label vectors differ in length ({a.size} vs {b.size})")
    n = a.size
    if n < 2:
        return 1.0
    _, ia = np.unique(a, return_inverse=True)
    _, ib = np.unique(b, return_inverse=True)
    table = np.zeros((ia.max() + 1, ib.max() + 1), dtype=np.int64)
    np.add.at(table, (ia, ib), 1)

    def pairs(x):
        x = np.asarray(x, dtype=float)
        return float(np.sum(x * (x - 1) / 2))

    index = pairs(table)
    sum_a = pairs(table.sum(axis=1))
    sum_b = pairs(table.sum(axis=0))
    expected = sum_a * sum_b / comb(n, 2)
    top = 0.5 * (sum_a + sum_b)
    if top == expected:
        return 1.0
    return (index - expected) / (top - expected)


def _rng(seed):
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def graph_adjacency(kind, p, seed):
    """Symmetric boolean adjacency matrix (no self loops) of one graph family."""
    if kind not in GRAPH_KINDS:
        raise InputError(f"graph kind must be one of {GRAPH_KINDS}")
    if p < 2:
        raise InputError("p must be at least 2")
    rng = _rng(seed)
    adj = np.zeros((p, p), dtype=bool)
    iu = np.triu_indices(p, k=1)

    if kind == "random":
        adj[iu] = rng.random(iu[0].size) < EDGE_PROB
    elif kind == "hub":
        n_hub = int(round(HUB_FRACTION * p))
        hubs = np.zeros(p, dtype=bool)
        hubs[rng.choice(p, size=n_hub, replace=False)] = True
        draw = rng.random(iu[0].size) < EDGE_PROB
        adj[iu] = draw & (hubs[iu[0]] | hubs[iu[1]])
    elif kind == "blocked":
        if p % N_BLOCKS:
            warnings.warn(f"p={p} is not divisible by {N_BLOCKS}; block sizes differ by one")
        block = np.empty(p, dtype=int)
        for k, idx in enumerate(np.array_split(np.arange(p), N_BLOCKS)):
            block[idx] = k
        draw = rng.random(iu[0].size) < EDGE_PROB
        adj[iu] = draw & (block[iu[0]] == block[iu[1]])
    else:
        # preferential attachment, one edge per new node, weight = degree
        degree = np.zeros(p)
        for new in range(1, p):
            w = degree[:new]
            target = rng.integers(new) if w.sum() == 0 else rng.choice(new, p=w / w.sum())
            adj[target, new] = True
            degree[target] += 1
            degree[new] += 1
    return adj | adj.T


def gen_graph(kind, p, seed, edge_magnitude=0.3):
    """Sparse precision matrix of the given graph family.

    Edges get ``+edge_magnitude`` or ``-edge_magnitude`` with equal
    probability.  The diagonal starts at 1 and is then raised by
    ``max(0, 0.1 - lambda_min) + 0.01``.
    """
    rng = _rng(seed)
    adj = graph_adjacency(kind, p, rng)
    theta = np.zeros((p, p))
    iu = np.triu_indices(p, k=1)
    on = adj[iu]
    signs = np.where(rng.random(int(on.sum())) < 0.5, -1.0, 1.0)
    theta[iu[0][on], iu[1][on]] = edge_magnitude * signs
    theta = theta + theta.T
    np.fill_diagonal(theta, 1.0)
    lam_min = np.linalg.eigvalsh(theta)[0]
    theta[np.diag_indices(p)] += max(0.0, MIN_EIGENVALUE - lam_min) + DIAG_MARGIN
    cholesky_lower(theta)
    return theta


def gen_means(G, p, p_d, dropout_level, seed):
    """Component means: ``p_d`` component-specific entries, then shared ones."""
    v1, v2, v3, v4 = DROPOUT_VECTORS[dropout_level]
    rng = _rng(seed)
    means = np.empty((G, p))
    means[:, :p_d] = rng.choice([v1, 0.5 * (v1 + v2), v2], size=(G, p_d))
    means[:, p_d:] = rng.choice([v3, v4], size=p - p_d)[None, :]
    return means


def gen_scaling(n, seed):
    return np.exp(SCALING_LOG_MEAN + np.sqrt(SCALING_LOG_VAR) * _rng(seed).standard_normal(n))


def kmeans_ari(dataset, G, seed=0, restarts=10):
    """ARI between the true labels and k-means on log(Y+1) - log(rowsum/1e4)."""
    Yt = normalized_log_counts(dataset.counts, estimate_scaling(dataset.counts))
    labels, _, _ = kmeans(Yt, G, seed=seed, restarts=restarts)
    return ari(dataset.true_labels, labels)


def _draw(config, p_d, key):
    """One dataset for a given p_d; ``key`` indexes an independent seed stream."""
    ss = np.random.SeedSequence([int(config.seed), int(key)])
    s_graph, s_mean, s_scale, s_sample, s_km = ss.spawn(5)
    G = config.populations
    graph_rngs = [np.random.default_rng(s) for s in s_graph.spawn(G)]
    precisions = [gen_graph(config.graph_kind, config.p, r, config.edge_magnitude)
                  for r in graph_rngs]
    means = gen_means(G, config.p, p_d, config.dropout_level, np.random.default_rng(s_mean))
    scaling = gen_scaling(config.n, np.random.default_rng(s_scale))
    params = MixtureParams(np.asarray(config.proportions, dtype=float), means, precisions)
    data = sample_mpln(params, scaling, np.random.default_rng(s_sample))
    km_seed = int(s_km.generate_state(1)[0])
    return data, precisions, means, kmeans_ari(data, G, seed=km_seed)


def _in_band(value, band):
    lo, hi = band
    return lo < value <= hi


def _band_distance(value, band):
    lo, hi = band
    return 0.0 if _in_band(value, band) else min(abs(value - lo), abs(value - hi))


def calibrate_mixing(config):
    """Number of discriminative coordinates whose mean ARI lands in the band.

    Integer bisection over ``p_d`` in ``[0, p]``; each candidate is scored
    by the average k-means ARI over ``config.calibration_seeds`` draws.  If
    the bisection closes without a hit, the two boundary values are
    re-scored on fresh draws until ``config.max_candidates`` evaluations.

    Returns
    -------
    p_d : int
    ari : float
        Mean ARI of the accepted candidate.
    """
    band = MIXING_BANDS[config.mixing_level]
    reps = config.calibration_seeds
    counter = {"evals": 0, "key": 0}
    best = (np.inf, None, None)

    def score(p_d):
        nonlocal best
        vals = []
        for _ in range(reps):
            counter["key"] += 1
            vals.append(_draw(config, p_d, 1000 + counter["key"])[3])
        counter["evals"] += 1
        mean = float(np.mean(vals))
        dist = _band_distance(mean, band)
        if dist < best[0]:
            best = (dist, p_d, mean)
        return mean

    lo, hi = 0, config.p
    boundary = None
    while lo <= hi and counter["evals"] < config.max_candidates:
        mid = (lo + hi) // 2
        a = score(mid)
        if _in_band(a, band):
            return mid, a
        if a <= band[0]:
            lo = mid + 1
        else:
            hi = mid - 1
    boundary = [v for v in (hi, lo) if 0 <= v <= config.p]
    k = 0
    while boundary and counter["evals"] < config.max_candidates:
        cand = boundary[k % len(boundary)]
        a = score(cand)
        if _in_band(a, band):
            return cand, a
        k += 1
    closest = best[2]
    near = min(MIXING_BANDS, key=lambda name: _band_distance(closest, MIXING_BANDS[name]))
    raise CalibrationError(
        f"no p_d reached the {config.mixing_level} mixing band {band} after "
        f"{counter['evals']} candidates; closest mean ARI {closest:.3f} at p_d={best[1]}",
        closest_ari=closest, closest_band=near)


def gen_dataset(config, max_redraws=100):
    """Generate a scenario dataset whose k-means ARI is inside the mixing band.

    When ``config.p_d`` is set the band check is skipped and the first draw
    is returned.
    """
    if config.p_d is not None:
        data, precisions, means, a = _draw(config, config.p_d, 0)
        return SyntheticDataset(data, precisions, a, config.p_d, means, config)
    p_d, _ = calibrate_mixing(config)
    band = MIXING_BANDS[config.mixing_level]
    closest = None
    for key in range(max_redraws):
        data, precisions, means, a = _draw(config, p_d, key)
        if _in_band(a, band):
            return SyntheticDataset(data, precisions, a, p_d, means, config,
                                    {"redraws": key})
        if closest is None or _band_distance(a, band) < _band_distance(closest, band):
            closest = a
    raise CalibrationError(
        f"p_d={p_d} gave no draw in the {config.mixing_level} band after {max_redraws} tries",
        closest_ari=closest, closest_band=config.mixing_level)


def true_edges(theta):
    """Boolean upper-triangle edge indicator of a precision matrix."""
    iu = np.triu_indices(theta.shape[0], k=1)
    return theta[iu] != 0
