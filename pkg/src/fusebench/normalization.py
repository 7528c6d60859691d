"""Adaptive symmetric score normalization (as-norm) against an imposter cohort."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import DataError

SIGMA_FLOOR = 1e-6
DEFAULT_TOP_K = 200


@dataclass(frozen=True)
class CohortStats:
    id: str
    mu: float
    sigma: float
    k_used: int


def cohort_stats(scores_vs_cohort, top_k: int = DEFAULT_TOP_K, id: str = "") -> CohortStats:
    """Mean and population std of the ``top_k`` highest cohort scores."""
    s = np.asarray(scores_vs_cohort, dtype=float).ravel()
    if s.size == 0:
        raise DataError("empty cohort")
    if top_k < 2:
        raise DataError(f"top_k must be >= 2, got {top_k}")
    k = min(top_k, s.size)
    top = np.sort(s)[-k:]
    mu = float(np.mean(top))
    sigma = max(float(np.std(top)), SIGMA_FLOOR)
    return CohortStats(id, mu, sigma, k)


def as_norm(s: float, enroll_stats: CohortStats, test_stats: CohortStats) -> float:
    ze = (s - enroll_stats.mu) / enroll_stats.sigma
    zt = (s - test_stats.mu) / test_stats.sigma
    return 0.5 * (ze + zt)


class Cohort:
    """Unit-normalised cohort matrix with cosine top-K statistics."""

    def __init__(self, vectors, top_k: int = DEFAULT_TOP_K):
        m = np.asarray(vectors, dtype=float)
        if m.ndim != 2 or m.shape[0] == 0:
            raise DataError("cohort must be a non-empty matrix")
        norms = np.linalg.norm(m, axis=1)
        if np.any(norms == 0):
            raise DataError("zero vector in cohort")
        self.matrix = m / norms[:, None]
        self.top_k = top_k

    def stats(self, v, id: str = "") -> CohortStats:
        v = np.asarray(v, dtype=float)
        n = np.linalg.norm(v)
        if n == 0:
            raise DataError("zero vector scored against cohort")
        return cohort_stats(self.matrix @ (v / n), self.top_k, id)
