import numpy as np
import pytest
from hypothesis import given, strategies as st

from mplnet import engine as E
from mplnet import variational as vi
from mplnet.engine import (FitConfig, fit, icl_score, initialize, select_lambda_density,
                           select_lambda_icl)
from mplnet.errors import (DegenerateComponentError, InitializationError, InputError,
                           NumericalError)
from mplnet.glasso import ZeroEdgeSet, glasso_fit
from mplnet.kmeans import kmeans
from mplnet.pln import CountDataset, MixtureParams, sample_mpln
from mplnet.simgen import ari

from conftest import random_pd


def two_cluster_data(seed, n=2000, p=10, sep=2.0, base=1.5):
    rng = np.random.default_rng(seed)
    mu1 = np.full(p, base)
    mu2 = mu1.copy()
    mu2[: p // 2] += sep
    thetas = np.stack([random_pd(rng, p, ridge=1.0), random_pd(rng, p, ridge=1.0)])
    params = MixtureParams([0.5, 0.5], np.stack([mu1, mu2]), thetas)
    return sample_mpln(params, np.ones(n), seed=seed), params


def small_data(seed=0, n=60, p=3, G=2):
    rng = np.random.default_rng(seed)
    means = np.stack([np.full(p, 1.0 + 1.5 * g) for g in range(G)])
    params = MixtureParams(np.full(G, 1.0 / G), means,
                           np.stack([random_pd(rng, p, ridge=1.0) for _ in range(G)]))
    return sample_mpln(params, np.ones(n), seed=seed)


# -- helpers ----------------------------------------------------------------

def test_sign_change_identical_patterns_is_zero(rng):
    thetas = np.stack([random_pd(rng, 4) for _ in range(2)])
    assert E.sign_change(thetas, thetas * 3.0) == 0.0


def test_sign_change_example():
    old = np.eye(3)[None]
    new = np.array([[[1, -0.2, 0], [-0.2, 1, 0], [0, 0, 1.0]]])
    assert E.sign_change(old, new) == pytest.approx(1 / 3)


@given(seed=st.integers(0, 10_000), p=st.integers(2, 7))
def test_sign_change_range(seed, p):
    rng = np.random.default_rng(seed)
    a = rng.choice([-1.0, 0.0, 1.0], size=(2, p, p))
    b = rng.choice([-1.0, 0.0, 1.0], size=(2, p, p))
    d = E.sign_change(a, b)
    assert 0.0 <= d <= 3.0
    iu = np.triu_indices(p, 1)
    same = all(np.array_equal(np.sign(a[g][iu]), np.sign(b[g][iu])) for g in range(2))
    assert (d == 0.0) == same


def test_edge_density():
    theta = np.eye(4)
    theta[0, 1] = theta[1, 0] = 0.1
    assert E.edge_density(theta) == pytest.approx(1 / 6)


def test_resolve_threads(monkeypatch):
    monkeypatch.setenv("MPLNET_THREADS", "3")
    assert E.resolve_threads(None) == 3
    assert E.resolve_threads(2) == 2
    monkeypatch.delenv("MPLNET_THREADS")
    assert E.resolve_threads(None) == 1


def test_config_validation():
    with pytest.raises(InputError):
        FitConfig(components=0)
    with pytest.raises(InputError):
        FitConfig(tol_elbo=0.0)
    with pytest.raises(InputError):
        FitConfig(max_outer=1, min_outer=2)
    with pytest.raises(InputError):
        FitConfig(components=2, lam=[1.0, 2.0, 3.0])
    with pytest.raises(InputError):
        FitConfig(lam=-1.0)


# -- kmeans -----------------------------------------------------------------

def test_kmeans_separated_clouds(rng):
    X = np.vstack([rng.normal(0, 0.1, (50, 2)), rng.normal(5, 0.1, (50, 2))])
    truth = np.repeat([0, 1], 50)
    labels, _, _ = kmeans(X, 2, seed=0)
    assert ari(labels, truth) == 1.0


def test_kmeans_single_cluster(rng):
    X = rng.normal(size=(30, 3))
    _, centers, _ = kmeans(X, 1)
    assert np.allclose(centers[0], X.mean(axis=0))


def test_kmeans_overlapping_gaussians_imperfect():
    rng = np.random.default_rng(0)
    X = np.vstack([rng.normal(0, 1, (500, 2)), rng.normal(1.7, 1, (500, 2))])
    truth = np.repeat([0, 1], 500)
    labels, _, _ = kmeans(X, 2, seed=0)
    assert ari(labels, truth) < 1.0


def test_kmeans_deterministic(rng):
    X = rng.normal(size=(100, 3))
    a = kmeans(X, 3, seed=5)
    b = kmeans(X, 3, seed=5)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])


def test_kmeans_rejects_k_above_n():
    with pytest.raises(InitializationError):
        kmeans(np.zeros((2, 2)), 3)


# -- initialize -------------------------------------------------------------

def test_initialize_one_point_per_cluster():
    counts = np.array([[1, 50], [50, 1], [20, 20]])
    data = CountDataset(counts=counts, scaling=np.ones(3))
    _, state = initialize(data, FitConfig(components=3))
    P = state.responsibilities
    assert np.allclose(np.sort(P, axis=1)[:, -1], 1 / (1 + 3e-6))
    assert sorted(P.argmax(axis=1)) == [0, 1, 2]


def test_initialize_identical_rows_fails():
    data = CountDataset(counts=np.full((10, 3), 4), scaling=np.ones(10))
    with pytest.raises(InitializationError):
        initialize(data, FitConfig(components=2))


def test_initialize_unit_scaling_from_row_sums():
    counts = np.array([[5000, 5000], [2500, 7500], [9000, 1000]])
    data = CountDataset(counts=counts)
    _, state = initialize(data, FitConfig(components=1))
    assert np.allclose(state.var_means[0], np.log(counts + 1.0))
    assert np.all(state.var_variances == 1.0)


def test_initialize_precisions_use_configured_lambda():
    data = small_data()
    params, state = initialize(data, FitConfig(components=2, lam=0.0))
    Yt = E.normalized_log_counts(data.counts, data.scaling)
    labels = state.responsibilities.argmax(axis=1)
    for g in range(2):
        X = Yt[labels == g]
        cov = np.cov(X.T, bias=True)
        assert np.allclose(params.precisions[g], np.linalg.inv(cov), rtol=1e-6)
        assert np.allclose(params.means[g], X.mean(axis=0))


# -- fit --------------------------------------------------------------------

def test_single_component_self_consistency():
    rng = np.random.default_rng(0)
    params = MixtureParams([1.0], np.array([[1.0, 1.5]]), random_pd(rng, 2)[None])
    data = sample_mpln(params, np.ones(300), seed=0)
    cfg = FitConfig(components=1, lam=5.0)
    res = fit(data, cfg)
    assert np.all(res.state.responsibilities == 1.0)
    cov = vi.weighted_covariance(res.state, res.params.means, 0)
    ref = glasso_fit(cov, 5.0 / 300, tol=cfg.glasso_tol,
                     warm_start=res.params.precisions[0]).precision
    assert np.allclose(res.params.precisions[0], ref, atol=1e-5)


def test_exact_mode_objective_monotone():
    data = small_data(seed=3, n=80, p=4)
    res = fit(data, FitConfig(components=2, lam=2.0, p_step_mode="exact", max_outer=30))
    obj = [t["objective"] for t in res.trace]
    for a, b in zip(obj, obj[1:]):
        assert b <= a + 1e-8 * abs(a)


def test_fit_trace_and_status():
    data = small_data(seed=1)
    res = fit(data, FitConfig(components=2, lam=1.0))
    assert res.status in ("converged", "max_iter")
    t = res.trace[-1]
    assert set(t) >= {"elbo", "objective", "delta_elbo", "delta_sign"}
    if res.status == "converged":
        assert t["delta_elbo"] <= 1e-6 and t["delta_sign"] <= 1e-4
    res.params.validate()
    assert np.all(np.diff(res.params.proportions) <= 0)


def test_fit_max_iter_status():
    res = fit(small_data(seed=2), FitConfig(components=2, lam=1.0, max_outer=1))
    assert res.status == "max_iter" and res.n_iter == 1


def test_degenerate_component_reported():
    data = small_data(seed=4)
    params, state = initialize(data, FitConfig(components=2))
    state.responsibilities[:] = [1.0, 0.0]
    params.proportions = np.array([1.0, 0.0])
    res = fit(data, FitConfig(components=2), init=(params, state))
    assert res.status == "degenerate" and "component 1" in res.message


def test_substep_error_carries_iteration(monkeypatch):
    def boom(*args, **kwargs):
        raise NumericalError("synthetic failure")

    monkeypatch.setattr(vi, "s_step", boom)
    with pytest.raises(NumericalError, match="outer iteration 0"):
        fit(small_data(), FitConfig(components=2))


def test_warm_start_shape_checked():
    data = small_data()
    init = initialize(data, FitConfig(components=2))
    with pytest.raises(InputError):
        fit(data, FitConfig(components=3), init=init)


def test_thread_count_does_not_change_result():
    data = small_data(seed=5, n=120, p=5, G=3)
    a = fit(data, FitConfig(components=3, lam=1.0, threads=1))
    b = fit(data, FitConfig(components=3, lam=1.0, threads=3))
    assert np.max(np.abs(a.params.precisions - b.params.precisions)) <= 1e-12
    assert np.max(np.abs(a.state.var_means - b.state.var_means)) <= 1e-12
    assert a.trace == b.trace


def test_repeat_runs_identical():
    data = small_data(seed=6)
    a = fit(data, FitConfig(components=2, lam=0.5, seed=3))
    b = fit(data, FitConfig(components=2, lam=0.5, seed=3))
    assert a.params.precisions.tobytes() == b.params.precisions.tobytes()


def test_row_permutation_invariance():
    data, _ = two_cluster_data(0, n=400, p=4, sep=3.0)
    perm = np.random.default_rng(1).permutation(data.n)
    shuffled = CountDataset(data.counts[perm], data.scaling[perm])
    cfg = FitConfig(components=2, lam=1.0, tol_elbo=1e-10, max_outer=300)
    a, b = fit(data, cfg), fit(shuffled, cfg)
    la, lb = a.labels(), b.labels()
    if ari(la, lb[np.argsort(perm)]) == 1.0 and la[0] != lb[np.argsort(perm)][0]:
        b = b.permuted([1, 0])
    assert np.allclose(a.params.means, b.params.means, atol=1e-4)
    assert np.allclose(a.params.precisions, b.params.precisions, atol=1e-3)
    assert np.allclose(a.state.responsibilities, b.state.responsibilities[np.argsort(perm)],
                       atol=1e-4)


def test_well_separated_clusters_recovered():
    hits = 0
    for seed in range(20):
        data, _ = two_cluster_data(seed)
        res = fit(data, FitConfig(components=2, lam=1.0, seed=seed))
        hits += ari(res.labels(), data.true_labels) >= 0.95
    assert hits >= 18


# -- ICL --------------------------------------------------------------------

def fitted(seed=0, lam=1.0):
    return fit(small_data(seed=seed), FitConfig(components=2, lam=lam))


def test_icl_matches_recomputation():
    res = fitted()
    for g in range(2):
        w = res.state.responsibilities[:, g].sum()
        s = np.count_nonzero(res.params.precisions[g])
        ref = -2 * res.elbo.per_component[g] + np.log(w) * s
        assert icl_score(res, g) == pytest.approx(ref, rel=1e-14)


def test_icl_extra_edge_costs_two_log_weight():
    res = fitted()
    theta = res.params.precisions[0]
    base = res.permuted([0, 1])
    base.params.precisions[0] = np.diag(np.diag(theta))
    more = res.permuted([0, 1])
    more.params.precisions[0] = np.diag(np.diag(theta))
    more.params.precisions[0][0, 1] = more.params.precisions[0][1, 0] = 1e-3
    w = res.state.responsibilities[:, 0].sum()
    assert icl_score(more, 0) - icl_score(base, 0) == pytest.approx(2 * np.log(w), rel=1e-12)


def test_icl_diagonal_only_counts_p():
    res = fitted()
    res.params.precisions[1] = np.diag(np.diag(res.params.precisions[1]))
    w = res.state.responsibilities[:, 1].sum()
    p = res.params.p
    assert icl_score(res, 1) == pytest.approx(-2 * res.elbo.per_component[1] + p * np.log(w))
    assert icl_score(res, 1, count="pairs") == pytest.approx(-2 * res.elbo.per_component[1])


def test_icl_zero_weight_error():
    res = fitted()
    res.state.responsibilities[:, 1] = 0.0
    with pytest.raises(DegenerateComponentError):
        icl_score(res, 1)


# -- selection --------------------------------------------------------------

def test_icl_single_grid_point():
    sel = select_lambda_icl(small_data(), FitConfig(components=2), grid=[3.0])
    assert np.all(sel.lam == 3.0)


def test_icl_duplicate_grid_entries():
    data = small_data()
    cfg = FitConfig(components=2)
    a = select_lambda_icl(data, cfg, grid=[0.5, 5.0, 50.0])
    b = select_lambda_icl(data, cfg, grid=[0.5, 5.0, 5.0, 50.0, 0.5])
    assert np.array_equal(a.lam, b.lam)
    assert np.array_equal(a.fit.params.precisions, b.fit.params.precisions)


def test_icl_empty_grid():
    with pytest.raises(InputError):
        select_lambda_icl(small_data(), FitConfig(components=2), grid=[])


def test_icl_recovers_sparse_support():
    truth = np.eye(5)
    truth[0, 1] = truth[1, 0] = 0.45
    truth[2, 3] = truth[3, 2] = -0.45
    true_support = truth[np.triu_indices(5, 1)] != 0
    hits = 0
    for seed in range(20):
        params = MixtureParams([1.0], np.full((1, 5), 2.0), truth[None])
        data = sample_mpln(params, np.ones(1000), seed=seed)
        sel = select_lambda_icl(data, FitConfig(components=1, seed=seed))
        est = sel.fit.params.precisions[0][np.triu_indices(5, 1)] != 0
        hits += np.array_equal(est, true_support)
    assert hits > 10


def test_density_target_one_accepts_zero_lambda():
    sel = select_lambda_density(small_data(), FitConfig(components=2), 1.0)
    assert np.all(sel.lam == 0.0) and sel.status == "ok"
    assert np.allclose(sel.densities, 1.0)


def test_density_unreachable_with_pinned_zeros():
    data = small_data(p=3)
    zeros = ZeroEdgeSet(frozenset({(0, 1), (0, 2)}))
    sel = select_lambda_density(data, FitConfig(components=2, zero_edges=zeros), 0.8)
    assert sel.status == "unreachable" and np.all(sel.lam == 0.0)


def test_density_rejects_bad_target():
    with pytest.raises(InputError):
        select_lambda_density(small_data(), FitConfig(components=2), 0.0)
