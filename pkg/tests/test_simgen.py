import warnings

import numpy as np
import pytest
from hypothesis import given, strategies as st
from sklearn.metrics import adjusted_rand_score

from mplnet import simgen
from mplnet.errors import CalibrationError, InputError
from mplnet.simgen import (SimConfig, ari, calibrate_mixing, gen_dataset, gen_graph,
                           gen_means, gen_scaling, graph_adjacency, true_edges)


# -- ARI --------------------------------------------------------------------

def test_ari_identical():
    assert ari([0, 0, 1, 2, 2], [5, 5, 7, 9, 9]) == 1.0


def test_ari_constant_against_balanced():
    assert ari([0, 0, 0, 1, 1, 1], [3, 3, 3, 3, 3, 3]) == 0.0


def test_ari_hand_computed_contingency():
    # contingency [[2, 1], [1, 2]], n = 6
    a = [0, 0, 0, 1, 1, 1]
    b = [0, 0, 1, 0, 1, 1]
    index = 1 + 0 + 0 + 1
    rows = cols = 3 + 3
    expected = rows * cols / 15
    ref = (index - expected) / (0.5 * (rows + cols) - expected)
    assert ari(a, b) == pytest.approx(ref, rel=1e-14)
    assert ref == pytest.approx(-1 / 9)


def test_ari_length_mismatch():
    with pytest.raises(InputError):
        ari([0, 1], [0, 1, 1])


@given(seed=st.integers(0, 10_000), n=st.integers(2, 60), k=st.integers(1, 5))
def test_ari_matches_sklearn(seed, n, k):
    rng = np.random.default_rng(seed)
    a, b = rng.integers(0, k, n), rng.integers(0, k, n)
    assert ari(a, b) == pytest.approx(adjusted_rand_score(a, b), abs=1e-12)


# -- graphs -----------------------------------------------------------------

def test_random_graph_density():
    adj = graph_adjacency("random", 100, 0)
    iu = np.triu_indices(100, 1)
    m = iu[0].size
    frac = adj[iu].mean()
    assert abs(frac - 0.1) <= 4 * np.sqrt(0.1 * 0.9 / m)


def test_hub_graph_structure():
    adj = graph_adjacency("hub", 100, 3)
    # non-hub nodes only touch hubs, so the 20 highest-degree nodes cover every edge
    degree = adj.sum(axis=1)
    hubs = np.argsort(-degree, kind="stable")[:20]
    cover = np.zeros(100, dtype=bool)
    cover[hubs] = True
    l, m = np.nonzero(np.triu(adj, 1))
    assert np.all(cover[l] | cover[m])
    rest = ~cover
    assert not adj[np.ix_(rest, rest)].any()


def test_blocked_graph_structure():
    adj = graph_adjacency("blocked", 100, 1)
    block = np.repeat(np.arange(5), 20)
    assert not adj[block[:, None] != block[None, :]].any()
    assert adj.any()


def test_blocked_uneven_p_warns():
    with pytest.warns(UserWarning, match="not divisible"):
        adj = graph_adjacency("blocked", 12, 0)
    sizes = [len(b) for b in np.array_split(np.arange(12), 5)]
    assert max(sizes) - min(sizes) <= 1
    assert adj.shape == (12, 12)


def test_scale_free_is_tree_with_heavy_tail():
    adj = graph_adjacency("scale_free", 50, 0)
    assert np.triu(adj, 1).sum() == 49
    # connected: breadth-first search reaches every node
    seen, frontier = {0}, [0]
    while frontier:
        nxt = [int(j) for i in frontier for j in np.flatnonzero(adj[i]) if j not in seen]
        seen.update(nxt)
        frontier = nxt
    assert len(seen) == 50
    degree = adj.sum(axis=1)
    assert degree.max() >= 5 and np.median(degree) <= 2


def test_unknown_kind_and_small_p():
    with pytest.raises(InputError):
        graph_adjacency("ring", 10, 0)
    with pytest.raises(InputError):
        graph_adjacency("random", 1, 0)


@given(kind=st.sampled_from(simgen.GRAPH_KINDS), p=st.integers(5, 60),
       seed=st.integers(0, 10_000))
def test_precision_invariants(kind, p, seed):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        theta = gen_graph(kind, p, seed)
    np.linalg.cholesky(theta)
    assert np.array_equal(theta, theta.T)
    assert np.linalg.eigvalsh(theta)[0] >= 0.1 - 1e-12
    d = np.diag(theta)
    assert np.all(d == d[0]) and d[0] >= 1.0
    off = theta[np.triu_indices(p, 1)]
    assert set(np.unique(np.abs(off[off != 0]))) <= {0.3}


def test_diagonal_raise_rule():
    theta = gen_graph("random", 100, 7)
    base = theta.copy()
    np.fill_diagonal(base, 1.0)
    lam_min = np.linalg.eigvalsh(base)[0]
    assert theta[0, 0] == pytest.approx(1.0 + max(0.0, 0.1 - lam_min) + 0.01, rel=1e-14)


# -- means and scaling ------------------------------------------------------

def test_means_zero_pd_are_shared():
    means = gen_means(3, 20, 0, "low", 0)
    assert np.all(means == means[0])
    assert set(np.unique(means)) <= {0.9, -0.1}


def test_means_discriminative_values():
    means = gen_means(3, 20, 8, "high", 1)
    assert set(np.unique(means[:, :8])) <= {1.4, 0.5 * (1.4 - 1.1), -1.1}
    assert np.all(means[:, 8:] == means[0, 8:])


def test_scaling_distribution():
    l = gen_scaling(200_000, 0)
    z = np.log(l)
    assert abs(z.mean() - np.log(10)) <= 4 * np.sqrt(0.05 / z.size)
    assert abs(z.var() - 0.05) <= 4 * 0.05 * np.sqrt(2 / z.size)


# -- datasets ---------------------------------------------------------------

def small_config(**kw):
    base = dict(n=300, p=20, graph_kind="random", p_d=5, seed=0)
    base.update(kw)
    return SimConfig(**base)


def test_config_validation():
    with pytest.raises(InputError):
        SimConfig(proportions=(0.5, 0.6, -0.1))
    with pytest.raises(InputError):
        SimConfig(p=1)
    with pytest.raises(InputError):
        SimConfig(p=10, p_d=11)
    with pytest.raises(InputError):
        SimConfig(dropout_level="medium")


def test_dataset_byte_identical_for_same_seed():
    a, b = gen_dataset(small_config()), gen_dataset(small_config())
    assert a.dataset.counts.tobytes() == b.dataset.counts.tobytes()
    assert a.dataset.scaling.tobytes() == b.dataset.scaling.tobytes()
    assert all(x.tobytes() == y.tobytes() for x, y in zip(a.true_precisions, b.true_precisions))


def test_dataset_differs_across_graph_kinds():
    a = gen_dataset(small_config(graph_kind="random"))
    b = gen_dataset(small_config(graph_kind="hub"))
    assert not all(np.array_equal(x, y) for x, y in zip(a.true_precisions, b.true_precisions))


def test_dataset_fields():
    sd = gen_dataset(small_config())
    assert sd.dataset.counts.shape == (300, 20)
    assert sd.p_d_used == 5 and len(sd.true_precisions) == 3
    assert -1.0 <= sd.achieved_ari <= 1.0
    sd.true_params().validate()
    assert true_edges(sd.true_precisions[0]).shape == (190,)


def test_high_dropout_gives_more_zeros():
    low = [np.mean(gen_dataset(small_config(seed=s, dropout_level="low")).dataset.counts == 0)
           for s in range(10)]
    high = [np.mean(gen_dataset(small_config(seed=s, dropout_level="high")).dataset.counts == 0)
            for s in range(10)]
    assert np.mean(high) > np.mean(low)
    assert all(h > l for h, l in zip(high, low))


# -- calibration ------------------------------------------------------------

def test_full_discrimination_reaches_low_mixing():
    sd = gen_dataset(SimConfig(n=600, p=40, p_d=40, seed=1))
    assert sd.achieved_ari > 0.9


def test_no_discrimination_is_chance_level():
    sd = gen_dataset(SimConfig(n=600, p=40, p_d=0, seed=1))
    assert abs(sd.achieved_ari) < 0.05


def test_calibration_lands_in_band():
    cfg = SimConfig(n=600, p=40, mixing_level="middle", seed=2)
    p_d, a = calibrate_mixing(cfg)
    assert 0.75 < a <= 0.85 and 0 < p_d <= 40


def test_calibration_error_reports_closest():
    # two samples per population cannot produce a middle-band average
    cfg = SimConfig(n=6, p=4, mixing_level="middle", seed=0, max_candidates=4,
                    calibration_seeds=1)
    with pytest.raises(CalibrationError) as info:
        calibrate_mixing(cfg)
    assert info.value.closest_ari is not None
    assert info.value.closest_band in simgen.MIXING_BANDS
