import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedshield.representative import (BijectiveRepresentatives, ClusteringError, DynamicKMeans,
                                      bijective_generate, cluster_generate, dynamic_clustering,
                                      inertia, kmeans, silhouette, similarity)

from oracles import bijective_reference


def test_similarity_examples():
    v = np.array([0.3, -2.0, 1.0])
    assert similarity(v, v) == pytest.approx(1.0)
    assert similarity(v, -v) == 0.0
    assert similarity([1, 1], [1, 0]) == pytest.approx(0.7071, abs=1e-4)
    assert similarity([0, 0], [1, 0]) == 0.0


def test_tau_zero_is_local_model():
    rng = np.random.default_rng(0)
    G, U = rng.normal(size=5), rng.normal(size=(4, 5))
    for rep, u in zip(bijective_generate(G, U, 0.0), U):
        np.testing.assert_array_equal(rep.params, G + u)


def test_identical_updates():
    v = np.array([1.0, -2.0, 0.5])
    for rep in bijective_generate(np.zeros(3), np.stack([v, v]), 0.75):
        np.testing.assert_allclose(rep.update, v, rtol=1e-12)


def test_hand_example_against_reference():
    U = np.array([[2.0, 0.0], [1.0, 1.0], [0.0, -3.0]])
    rep = bijective_generate(np.zeros(2), U, 0.75)[0]
    # only [1, 1] agrees with [2, 0], so the sibling term is [1, 1] itself
    np.testing.assert_allclose(rep.update, [1.25, 0.75])
    np.testing.assert_allclose(rep.update, bijective_reference([0, 0], U.tolist(), 0.75)[0])
    assert rep.contributions == pytest.approx({0: 0.25, 1: 0.75})


def test_no_agreeing_sibling_falls_back_to_base():
    U = np.array([[1.0, 0.0], [-1.0, 0.0]])
    for rep, u in zip(bijective_generate(np.ones(2), U, 0.75), U):
        np.testing.assert_array_equal(rep.update, u)
        assert rep.contributions == {rep.base_id: 1.0}


def test_null_sibling_is_skipped():
    U = np.array([[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]])
    rep = bijective_generate(np.zeros(2), U, 0.5)[0]
    assert 1 not in rep.contributions
    np.testing.assert_allclose(rep.update, bijective_reference([0, 0], U.tolist(), 0.5)[0])


def test_bijective_needs_two_updates():
    with pytest.raises(ValueError):
        bijective_generate(np.zeros(2), np.ones((1, 2)), 0.75)


@settings(max_examples=200, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 8), d=st.integers(1, 6),
       tau=st.floats(0.01, 0.99))
def test_bijective_matches_reference_and_contributions_are_convex(seed, n, d, tau):
    rng = np.random.default_rng(seed)
    G, U = rng.normal(size=d), rng.normal(size=(n, d))
    reps = bijective_generate(G, U, tau)
    ref = bijective_reference(G.tolist(), U.tolist(), tau)
    for rep, r in zip(reps, ref):
        np.testing.assert_allclose(rep.params, r, rtol=1e-10, atol=1e-12)
        w = np.array(list(rep.contributions.values()))
        assert (w >= 0).all() and (w <= 1).all()
        assert w.sum() == pytest.approx(1.0, abs=1e-9)
        if len(rep.contributions) > 1:
            assert rep.contributions[rep.base_id] == pytest.approx(1 - tau, abs=1e-12)
        mix = sum(w * U[j] for j, w in rep.contributions.items())
        np.testing.assert_allclose(rep.update, mix, rtol=1e-10, atol=1e-12)


def test_bijective_transformer():
    U = np.random.default_rng(1).normal(size=(5, 3))
    t = BijectiveRepresentatives(tau=0.5).fit(U)
    np.testing.assert_allclose(t.mixing_.sum(axis=1), 1.0)
    assert t.transform(U).shape == U.shape
    assert t.get_params() == {"tau": 0.5}


def test_kmeans_separates_two_clouds():
    rng = np.random.default_rng(2)
    X = np.r_[rng.normal(-5, 0.2, (15, 3)), rng.normal(5, 0.2, (15, 3))]
    truth = np.r_[np.zeros(15, int), np.ones(15, int)]
    labels = kmeans(X, 2, rng)
    assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)


def test_kmeans_k_equals_n_and_errors():
    X = np.random.default_rng(3).normal(size=(6, 2))
    labels = kmeans(X, 6, 0)
    assert len(set(labels)) == 6 and inertia(X, labels) == 0
    with pytest.raises(ClusteringError):
        kmeans(np.ones((4, 2)), 2, 0)


def test_kmeans_duplicate_dataset_same_centroids():
    rng = np.random.default_rng(4)
    X = np.r_[rng.normal(-3, 0.1, (5, 2)), rng.normal(3, 0.1, (5, 2))]
    a = kmeans(X, 2, 0)
    b = kmeans(np.r_[X, X], 2, 0)
    cents = lambda Z, l: sorted(map(tuple, np.round([Z[l == j].mean(0) for j in range(2)], 10)))
    assert cents(X, a) == cents(np.r_[X, X], b)


def test_silhouette_examples():
    rng = np.random.default_rng(5)
    X = np.r_[rng.normal(-10, 0.1, (10, 2)), rng.normal(10, 0.1, (10, 2))]
    assert silhouette(X, np.repeat([0, 1], 10)) > 0.9
    assert silhouette(np.ones((6, 2)), np.arange(6) % 2) == 0.0
    vals = [silhouette(r.uniform(size=(40, 2)), r.integers(0, 3, 40))
            for r in map(np.random.default_rng, range(10))]
    assert all(abs(v) < 0.3 for v in vals)


def test_silhouette_matches_sklearn():
    from sklearn.metrics import silhouette_score
    rng = np.random.default_rng(6)
    X = rng.normal(size=(30, 4))
    labels = rng.integers(0, 3, 30)
    assert silhouette(X, labels) == pytest.approx(silhouette_score(X, labels), abs=1e-12)


def test_cluster_generate_identical_updates():
    U = np.tile([1.0, 2.0], (6, 1))
    labels, reps = cluster_generate(np.zeros(2), U, 2, 3, np.random.default_rng(0))
    assert len(reps) == 2
    for rep in reps:
        np.testing.assert_array_equal(rep.params, [1.0, 2.0])


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.integers(4, 12))
def test_cluster_representatives_are_member_means(seed, n):
    rng = np.random.default_rng(seed)
    U = rng.normal(size=(n, 3))
    G = rng.normal(size=3)
    labels, reps = cluster_generate(G, U, 2, n // 2, np.random.default_rng(seed))
    assert 2 <= len(reps) <= max(2, n // 2)
    for j, rep in enumerate(reps):
        np.testing.assert_array_equal(rep.update, U[labels == j].mean(axis=0))
        np.testing.assert_allclose(rep.params, G + rep.update)
        assert sum(rep.contributions.values()) == pytest.approx(1.0)
    assert sorted(i for r in reps for i in r.members) == list(range(n))


def test_dynamic_clustering_picks_true_k():
    rng = np.random.default_rng(7)
    X = np.r_[[rng.normal(c, 0.1, (6, 2)) for c in (-10, 0, 10)]].reshape(-1, 2)
    labels, k, score = dynamic_clustering(X, 2, 8, rng)
    assert k == 3 and score > 0.9


def test_dynamic_kmeans_estimator():
    rng = np.random.default_rng(8)
    X = np.r_[rng.normal(-4, 0.1, (8, 2)), rng.normal(4, 0.1, (8, 2))]
    est = DynamicKMeans(random_state=0).fit(X)
    assert est.n_clusters_ == 2
    assert np.array_equal(est.predict(X), est.labels_)
