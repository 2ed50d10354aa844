"""K-means clustering and the three per-class sample selection strategies
(random, cluster centers, herding) used as baselines and inside the
distillation pipeline. All selections are reproducible: ties break toward the
lowest index and randomness comes only from explicit seeds."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .seeds import rng_for


@dataclass
class ClusterResult:
    centroids: np.ndarray        # (k, d)
    assignment: np.ndarray       # (n,) index of nearest centroid
    inertia: float               # total within-cluster squared distance
    inertia_history: list = field(default_factory=list)


@dataclass
class SelectionResult:
    per_class: dict              # class id -> list of indices into its bucket
    strategy: str
    seed: int = None

    def samples(self, dataset):
        out = [[] for _ in range(dataset.num_classes)]
        for c, idxs in self.per_class.items():
            out[c] = [dataset.classes[c][i] for i in idxs]
        return out


def _sq_dists(points, centroids):
    # (n, k) squared euclidean distances
    return ((points[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp_init(points, k, rng):
    n = len(points)
    centroids = np.empty((k, points.shape[1]))
    chosen = np.zeros(n, dtype=bool)
    first = int(rng.integers(0, n))
    centroids[0] = points[first]
    chosen[first] = True
    d2 = ((points - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            # duplicates exhausted the spread; take the lowest unchosen index
            idx = int(np.flatnonzero(~chosen)[0])
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = points[idx]
        chosen[idx] = True
        d2 = np.minimum(d2, ((points - centroids[j]) ** 2).sum(axis=1))
    return centroids


def kmeans(points, k, max_iters=100, seed=0):
    """Lloyd iterations from a k-means++ start until the assignment stops
    changing. Empty clusters steal the point currently farthest from its
    centroid."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError("points must be a 2-D array")
    if not np.isfinite(points).all():
        raise ValueError("points must be finite")
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(points, k, rng)
    history = []
    prev_assign = None
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(points, centroids)
        assign = d2.argmin(axis=1)
        # repair empty clusters before measuring
        counts = np.bincount(assign, minlength=k)
        while (counts == 0).any():
            empty = int(np.flatnonzero(counts == 0)[0])
            far = int(d2[np.arange(n), assign].argmax())
            centroids[empty] = points[far]
            d2[:, empty] = ((points - centroids[empty]) ** 2).sum(axis=1)
            assign = d2.argmin(axis=1)
            counts = np.bincount(assign, minlength=k)
        history.append(float(d2[np.arange(n), assign].sum()))
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        prev_assign = assign
        for j in range(k):
            centroids[j] = points[assign == j].mean(axis=0)
    return ClusterResult(centroids, assign, history[-1], history)


def select_centers(features, k, seed=0, max_iters=100):
    """Cluster feature rows into k groups and pick, per group, the member
    nearest its centroid (lowest index on ties). Returns sorted-free list of
    one index per cluster."""
    result = kmeans(features, k, max_iters=max_iters, seed=seed)
    picks = []
    for j in range(k):
        members = np.flatnonzero(result.assignment == j)
        dists = ((features[members] - result.centroids[j]) ** 2).sum(axis=1)
        picks.append(int(members[dists.argmin()]))
    return picks, result


def kcenters_select(dataset, k_per_class, feature_fn, seed=0):
    """Per class: k-means over features, then the real sample nearest each
    centroid."""
    per_class = {}
    for c, bucket in enumerate(dataset.classes):
        if k_per_class > len(bucket):
            raise ValueError(f"k_per_class={k_per_class} exceeds class {c} "
                             f"size {len(bucket)}")
        feats = np.asarray(feature_fn(bucket), dtype=np.float64)
        picks, _ = select_centers(feats, k_per_class,
                                  seed=rng_for(seed, "kcenters", c).integers(2**63))
        per_class[c] = picks
    return SelectionResult(per_class, "kcenters", seed)


def herding_select(dataset, k_per_class, feature_fn):
    """Per class, greedily grow the subset whose feature mean best matches the
    class feature mean. Deterministic and seed-free."""
    per_class = {}
    for c, bucket in enumerate(dataset.classes):
        if k_per_class > len(bucket):
            raise ValueError(f"k_per_class={k_per_class} exceeds class {c} "
                             f"size {len(bucket)}")
        feats = np.asarray(feature_fn(bucket), dtype=np.float64)
        mu = feats.mean(axis=0)
        chosen = []
        chosen_mask = np.zeros(len(bucket), dtype=bool)
        running = np.zeros_like(mu)
        for j in range(1, k_per_class + 1):
            cand = np.flatnonzero(~chosen_mask)
            cost = (((running + feats[cand]) / j - mu) ** 2).sum(axis=1)
            pick = int(cand[cost.argmin()])
            chosen.append(pick)
            chosen_mask[pick] = True
            running += feats[pick]
        per_class[c] = chosen
    return SelectionResult(per_class, "herding")


def random_select(dataset, k_per_class, seed=0):
    """Uniform without replacement per class."""
    per_class = {}
    for c, bucket in enumerate(dataset.classes):
        if k_per_class > len(bucket):
            raise ValueError(f"k_per_class={k_per_class} exceeds class {c} "
                             f"size {len(bucket)}")
        rng = rng_for(seed, "random-select", c)
        per_class[c] = sorted(int(i) for i in
                              rng.choice(len(bucket), size=k_per_class, replace=False))
    return SelectionResult(per_class, "random", seed)
