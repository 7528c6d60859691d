"""Agglomerative clustering of multi-embedding recordings and max-over-cluster scoring."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .core import DataError, Embedding
from .quality import weighted_average

DEFAULT_THRESHOLD = 0.5


@dataclass(frozen=True)
class Partition:
    clusters: tuple  # tuple of sorted index tuples

    def __len__(self):
        return len(self.clusters)


@dataclass(frozen=True)
class ClusterSet:
    clusters: tuple
    k_max: int

    def __len__(self):
        return len(self.clusters)


def _matrix(embeddings) -> np.ndarray:
    if isinstance(embeddings, np.ndarray):
        x = np.atleast_2d(np.asarray(embeddings, dtype=float))
    else:
        x = np.vstack([np.asarray(e.values if isinstance(e, Embedding) else e, dtype=float)
                       for e in embeddings]) if len(embeddings) else np.zeros((0, 1))
    return x


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=float)
    v = np.asarray(v, dtype=float)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DataError("cosine of a zero vector")
    return float(np.clip(u @ v / (nu * nv), -1.0, 1.0))


def _cosine_matrix(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1)
    if np.any(norms == 0):
        raise DataError("zero vector in clustering input")
    u = x / norms[:, None]
    return u @ u.T


def _merges(x: np.ndarray):
    """Average-linkage agglomeration; yields (linkage, clusters) before each merge.

    Clusters are kept ordered by their smallest member, and ties on the
    linkage go to the lexicographically smallest (i, j) position pair.
    """
    n = x.shape[0]
    sim = _cosine_matrix(x)
    clusters = [[i] for i in range(n)]
    link = sim.copy()
    while len(clusters) > 1:
        m = len(clusters)
        iu = np.triu_indices(m, k=1)
        vals = link[iu]
        best = float(np.max(vals))
        pos = int(np.flatnonzero(vals == best)[0])  # row-major: smallest (i, j)
        i, j = int(iu[0][pos]), int(iu[1][pos])
        yield best, clusters
        ni, nj = len(clusters[i]), len(clusters[j])
        merged_row = (ni * link[i] + nj * link[j]) / (ni + nj)
        link[i] = merged_row
        link[:, i] = merged_row
        link = np.delete(np.delete(link, j, axis=0), j, axis=1)
        clusters = clusters[:i] + [sorted(clusters[i] + clusters[j])] + clusters[i + 1:j] + clusters[j + 1:]
    yield None, clusters


def _freeze(clusters) -> Partition:
    return Partition(tuple(tuple(c) for c in clusters))


def ahc(embeddings, threshold: Optional[float] = None, k: Optional[int] = None) -> Partition:
    """Cluster by average-linkage cosine AHC.

    Exactly one of ``threshold`` (stop once the best linkage falls below it)
    or ``k`` (stop at exactly k clusters) must be given.
    """
    if (threshold is None) == (k is None):
        raise DataError("give exactly one of threshold or k")
    x = _matrix(embeddings)
    n = x.shape[0]
    if n == 0:
        raise DataError("cannot cluster an empty collection")
    if k is not None and not (1 <= k <= n):
        raise DataError(f"k must lie in [1, {n}], got {k}")
    for best, clusters in _merges(x):
        if k is not None and len(clusters) == k:
            return _freeze(clusters)
        if threshold is not None and (best is None or best < threshold):
            return _freeze(clusters)
    raise AssertionError("unreachable")


def partition_union(embeddings, k_max: int) -> ClusterSet:
    x = _matrix(embeddings)
    n = x.shape[0]
    if not (1 <= k_max <= n):
        raise DataError(f"k_max must lie in [1, {n}], got {k_max}")
    by_k = {}
    for _, clusters in _merges(x):
        if len(clusters) <= k_max:
            by_k[len(clusters)] = [tuple(c) for c in clusters]
    out = []
    seen = set()
    for kk in range(1, k_max + 1):
        for c in by_k[kk]:
            if c not in seen:
                seen.add(c)
                out.append(c)
    return ClusterSet(tuple(out), k_max)


def aggregate_cluster(embeddings, cluster: Sequence[int], qualities=None) -> np.ndarray:
    if len(cluster) == 0:
        raise DataError("empty cluster")
    x = _matrix(embeddings)[list(cluster)]
    if qualities is None:
        return x.mean(axis=0)
    q = np.asarray(qualities, dtype=float)[list(cluster)]
    return weighted_average(x, q)


def trial_score(enroll_agg, embeddings, clusters, qualities=None,
                backend: Optional[Callable] = None) -> tuple:
    """Max over clusters of ``backend(enroll_agg, cluster_aggregate)``.

    Returns ``(score, best_cluster_index)``; ties go to the smallest index.
    """
    members = clusters.clusters if isinstance(clusters, (ClusterSet, Partition)) else tuple(clusters)
    if not members:
        raise DataError("empty cluster set")
    backend = backend or cosine
    best, arg = -np.inf, -1
    for idx, c in enumerate(members):
        s = backend(enroll_agg, aggregate_cluster(embeddings, c, qualities))
        if s > best:
            best, arg = s, idx
    return float(best), arg
