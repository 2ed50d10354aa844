import numpy as np
import pytest

from textdistill.coreset import (herding_select, kcenters_select, kmeans,
                                 random_select, select_centers)
from textdistill.data import make_synthetic_task


def two_blobs(n_per, gap=100.0, spread=1.0, seed=0, dim=2):
    rng = np.random.default_rng(seed)
    a = rng.normal(0.0, spread, size=(n_per, dim))
    b = rng.normal(0.0, spread, size=(n_per, dim)) + gap
    return np.vstack([a, b]), np.array([0] * n_per + [1] * n_per)


def test_kmeans_recovers_separated_blobs():
    for seed in range(5):
        points, truth = two_blobs(30, seed=seed)
        result = kmeans(points, 2, seed=seed)
        # assignment equals blob membership up to cluster relabeling
        first = result.assignment[:30]
        second = result.assignment[30:]
        assert len(set(first)) == 1 and len(set(second)) == 1
        assert first[0] != second[0]


def test_kmeans_k_equals_n_gives_zero_inertia():
    rng = np.random.default_rng(1)
    points = rng.normal(size=(8, 3))
    result = kmeans(points, 8, seed=0)
    assert result.inertia == pytest.approx(0.0, abs=1e-24)
    assert sorted(result.assignment) == list(range(8))


def test_kmeans_inertia_monotone_under_lloyd():
    for seed in range(10):
        rng = np.random.default_rng(seed)
        points = rng.normal(size=(60, 4))
        result = kmeans(points, 5, seed=seed)
        hist = result.inertia_history
        assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))


def test_kmeans_k_larger_than_n_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        kmeans(np.zeros((3, 2)), 4)


def test_kmeans_rejects_non_finite_points():
    pts = np.zeros((4, 2))
    pts[1, 0] = np.nan
    with pytest.raises(ValueError, match="finite"):
        kmeans(pts, 2)


def test_kmeans_repairs_empty_clusters():
    # many duplicate points force potential empty clusters
    points = np.array([[0.0, 0.0]] * 10 + [[5.0, 5.0], [100.0, 100.0]])
    result = kmeans(points, 3, seed=2)
    assert len(set(result.assignment)) == 3


def _feature_fn_factory(dataset):
    # deterministic toy features: token histogram
    def fn(samples):
        out = np.zeros((len(samples), dataset.vocab.content_size))
        for i, s in enumerate(samples):
            for t in s.tokens:
                out[i, t] += 1.0
        return out
    return fn


def test_kcenters_selects_nearest_to_centroid_within_cluster():
    ds = make_synthetic_task("keyword", 40, seed=3)
    fn = _feature_fn_factory(ds)
    sel = kcenters_select(ds, 5, fn, seed=4)
    for c, idxs in sel.per_class.items():
        feats = fn(ds.classes[c])
        picks, result = select_centers(
            feats, 5, seed=__import__("textdistill.seeds", fromlist=["rng_for"])
            .rng_for(4, "kcenters", c).integers(2**63))
        assert picks == idxs
        for j, pick in enumerate(picks):
            members = np.flatnonzero(result.assignment == j)
            dists = ((feats[members] - result.centroids[j]) ** 2).sum(axis=1)
            best = members[dists.argmin()]
            assert pick == best
            assert result.assignment[pick] == j


def test_kcenters_two_blob_class_selects_one_per_blob():
    ds = make_synthetic_task("keyword", 20, seed=5)
    points, _ = two_blobs(10, seed=6)

    def fn(samples):
        return points[:len(samples)]

    sel = kcenters_select(ds, 2, fn, seed=7)
    idxs = sel.per_class[0]
    sides = {int(points[i][0] > 50) for i in idxs}
    assert sides == {0, 1}


def test_kcenters_seed_reproducibility():
    ds = make_synthetic_task("keyword", 30, seed=8)
    fn = _feature_fn_factory(ds)
    a = kcenters_select(ds, 4, fn, seed=1)
    b = kcenters_select(ds, 4, fn, seed=1)
    assert a.per_class == b.per_class


def test_herding_first_pick_is_nearest_to_class_mean():
    ds = make_synthetic_task("keyword", 25, seed=9)
    fn = _feature_fn_factory(ds)
    sel = herding_select(ds, 1, fn)
    for c, idxs in sel.per_class.items():
        feats = fn(ds.classes[c])
        mu = feats.mean(axis=0)
        dists = ((feats - mu) ** 2).sum(axis=1)
        assert idxs[0] == int(dists.argmin())


def test_herding_each_step_is_greedy_optimal():
    ds = make_synthetic_task("keyword", 30, seed=10)
    fn = _feature_fn_factory(ds)
    k = 6
    sel = herding_select(ds, k, fn)
    for c, idxs in sel.per_class.items():
        feats = fn(ds.classes[c])
        mu = feats.mean(axis=0)
        chosen = []
        for j, pick in enumerate(idxs, start=1):
            best_cost = None
            best_idx = None
            for cand in range(len(feats)):
                if cand in chosen:
                    continue
                cost = float((((feats[chosen + [cand]].sum(axis=0)) / j - mu) ** 2).sum())
                if best_cost is None or cost < best_cost - 1e-15:
                    best_cost = cost
                    best_idx = cand
            assert pick == best_idx
            chosen.append(pick)


def test_herding_selecting_all_matches_class_mean():
    ds = make_synthetic_task("keyword", 12, seed=11)
    fn = _feature_fn_factory(ds)
    sel = herding_select(ds, 12, fn)
    for c, idxs in sel.per_class.items():
        assert sorted(idxs) == list(range(12))
        feats = fn(ds.classes[c])
        assert np.allclose(feats[idxs].mean(axis=0), feats.mean(axis=0))


def test_herding_is_permutation_stable_as_a_multiset():
    ds = make_synthetic_task("keyword", 20, seed=12)
    fn = _feature_fn_factory(ds)
    sel = herding_select(ds, 5, fn)
    # reverse each bucket; selected samples must be the same multiset
    reversed_ds = make_synthetic_task("keyword", 20, seed=12)
    for c in range(2):
        reversed_ds.classes[c] = list(reversed(reversed_ds.classes[c]))
    sel_rev = herding_select(reversed_ds, 5, fn)
    for c in range(2):
        orig = sorted((ds.classes[c][i].tokens for i in sel.per_class[c]))
        rev = sorted((reversed_ds.classes[c][i].tokens for i in sel_rev.per_class[c]))
        assert orig == rev


def test_random_select_full_class_and_reproducibility():
    ds = make_synthetic_task("keyword", 10, seed=13)
    sel_all = random_select(ds, 10, seed=0)
    assert sorted(sel_all.per_class[0]) == list(range(10))
    a = random_select(ds, 3, seed=5)
    b = random_select(ds, 3, seed=5)
    assert a.per_class == b.per_class
    assert len(set(a.per_class[0])) == 3


def test_random_select_inclusion_frequencies():
    ds = make_synthetic_task("keyword", 10, seed=14)
    n, k, trials = 10, 3, 10_000
    counts = np.zeros(n)
    for seed in range(trials):
        sel = random_select(ds, k, seed=seed)
        for i in sel.per_class[0]:
            counts[i] += 1
    p = k / n
    sigma = np.sqrt(trials * p * (1 - p))
    assert np.all(np.abs(counts - trials * p) <= 3 * sigma)


def test_selection_results_have_requested_counts_and_distinct_indices():
    ds = make_synthetic_task("pair-order3", 15, seed=15)
    fn = _feature_fn_factory(ds)
    for sel in (random_select(ds, 4, seed=1), kcenters_select(ds, 4, fn, seed=1),
                herding_select(ds, 4, fn)):
        for c in range(3):
            idxs = sel.per_class[c]
            assert len(idxs) == 4
            assert len(set(idxs)) == 4
