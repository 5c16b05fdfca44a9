"""Per-class k-means partitioning and the free/residual split of the retain set."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError
from .nn import feature_extract

MAX_ITERS = 100


@dataclass
class Cluster:
    class_label: int
    member_ids: np.ndarray
    centroid: np.ndarray

    def __len__(self):
        return len(self.member_ids)


@dataclass
class Partition:
    clusters: list
    k: int
    n_classes: int
    # classes that had fewer than k samples -> the k actually used
    reduced_k: dict = field(default_factory=dict)

    def member_ids(self):
        if not self.clusters:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([c.member_ids for c in self.clusters])

    def to_json(self):
        return {
            "k": self.k,
            "n_classes": self.n_classes,
            "reduced_k": {str(c): v for c, v in self.reduced_k.items()},
            "clusters": [
                {
                    "cluster_id": i,
                    "class_label": int(c.class_label),
                    "member_ids": [int(m) for m in c.member_ids],
                    "centroid": [float(v) for v in c.centroid],
                }
                for i, c in enumerate(self.clusters)
            ],
        }

    @classmethod
    def from_json(cls, obj):
        clusters = [
            Cluster(int(c["class_label"]), np.asarray(c["member_ids"], dtype=np.int64),
                    np.asarray(c["centroid"], dtype=np.float64))
            for c in sorted(obj["clusters"], key=lambda c: c["cluster_id"])
        ]
        reduced = {int(c): int(v) for c, v in obj.get("reduced_k", {}).items()}
        return cls(clusters, int(obj["k"]), int(obj["n_classes"]), reduced)

    def save(self, path):
        with open(path, "w") as f:
            json.dump(self.to_json(), f, indent=1)

    @classmethod
    def load(cls, path):
        with open(path) as f:
            return cls.from_json(json.load(f))


@dataclass
class SplitResult:
    free_cluster_ids: np.ndarray
    residual_image_ids: np.ndarray
    forget_cluster_ids: np.ndarray

    def free_member_ids(self, partition):
        if len(self.free_cluster_ids) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.concatenate([partition.clusters[i].member_ids for i in self.free_cluster_ids])


def _sq_dists(x, centroids):
    return ((x[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)


def _kmeans_pp(x, k, rng):
    n = len(x)
    centroids = [x[rng.integers(n)]]
    d2 = ((x - centroids[0]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining mass sits on chosen points; pick any unchosen row
            i = int(rng.integers(n))
        else:
            i = int(rng.choice(n, p=d2 / total))
        centroids.append(x[i])
        d2 = np.minimum(d2, ((x - x[i]) ** 2).sum(axis=1))
    return np.array(centroids)


def inertia(x, assignments, centroids):
    return float(((x - centroids[assignments]) ** 2).sum())


def kmeans(features, k, seed, max_iters=MAX_ITERS, trace=None):
    """Lloyd's algorithm with k-means++ seeding.

    Ties go to the lowest centroid index. A cluster that empties is
    reseeded at the point farthest from its current centroid. If ``trace``
    is a list, the inertia after every assignment step is appended to it.
    """
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise InputError("features must be a 2-D matrix")
    n = len(x)
    if k < 1 or k > n:
        raise InputError(f"k={k} must lie in [1, {n}]")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    assign = None
    for _ in range(max_iters):
        d2 = _sq_dists(x, centroids)
        new = np.argmin(d2, axis=1)
        counts = np.bincount(new, minlength=k)
        for j in np.flatnonzero(counts == 0):
            dist_own = d2[np.arange(n), new]
            # only steal from clusters that keep at least one member
            dist_own[counts[new] <= 1] = -1.0
            far = int(np.argmax(dist_own))
            counts[new[far]] -= 1
            new[far] = j
            counts[j] = 1
            centroids[j] = x[far]
        if trace is not None:
            trace.append(inertia(x, new, centroids))
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        centroids = np.array([x[assign == j].mean(axis=0) for j in range(k)])
    return assign, centroids


def class_seed(seed, label):
    """Independent stream per (seed, class) so per-class runs are order-free."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, int(label)])


def partition_dataset(samples, labels, ext, k, seed, ids=None):
    samples = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels)
    if len(samples) == 0:
        raise InputError("cannot partition an empty dataset")
    if k < 1:
        raise InputError("k must be >= 1")
    ids = np.arange(len(samples)) if ids is None else np.asarray(ids, dtype=np.int64)
    if len(ids) != len(samples) or len(labels) != len(samples):
        raise InputError("ids, labels and samples must have equal length")
    feats = np.asarray(feature_extract(ext, samples))
    n_classes = int(labels.max()) + 1
    clusters, reduced = [], {}
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        kc = min(k, len(rows))
        if kc < k:
            reduced[int(c)] = kc
        assign, centroids = kmeans(feats[rows], kc, class_seed(seed, c))
        for j in range(kc):
            members = rows[assign == j]
            clusters.append(Cluster(int(c), ids[members], centroids[j]))
    return Partition(clusters, k, n_classes, reduced)


def sample_F(partition, forget_ids):
    """Split clusters into free (no forget member) and forget-touching ones.

    Residual images are the non-forget members of forget-touching clusters.
    """
    forget = np.unique(np.asarray(list(forget_ids), dtype=np.int64))
    all_ids = partition.member_ids()
    unknown = np.setdiff1d(forget, all_ids)
    if len(unknown):
        raise InputError(f"forget ids not in the partition: {unknown[:10].tolist()}")
    free, touched, residual = [], [], []
    for i, c in enumerate(partition.clusters):
        hit = np.isin(c.member_ids, forget)
        if hit.any():
            touched.append(i)
            residual.append(c.member_ids[~hit])
        else:
            free.append(i)
    residual = np.concatenate(residual) if residual else np.zeros(0, dtype=np.int64)
    return SplitResult(np.asarray(free, dtype=np.int64), residual.astype(np.int64),
                       np.asarray(touched, dtype=np.int64))
