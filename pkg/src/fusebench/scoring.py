"""Trial scoring over embedding files: grouping, clustering, optional quality and as-norm."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np

from .clustering import ClusterSet, aggregate_cluster, ahc, cosine, partition_union
from .core import DataError, ScoreTable, SystemScore, TrialRecord, group_by_prefix, stack
from .normalization import Cohort, as_norm
from .quality import quality_batch


class Recording:
    """Segments of one enrollment or test recording with optional qualities."""

    def __init__(self, rec_id: str, embeddings: list, qnet=None):
        self.id = rec_id
        self.x = stack(embeddings)
        self.q = quality_batch(qnet, self.x) if qnet is not None else None

    def aggregate(self, members=None) -> np.ndarray:
        members = range(self.x.shape[0]) if members is None else members
        return aggregate_cluster(self.x, list(members), self.q)

    def mean_quality(self, members=None) -> Optional[float]:
        if self.q is None:
            return None
        members = range(self.x.shape[0]) if members is None else members
        return float(np.mean(self.q[list(members)]))


def recordings(embeddings: list, qnet=None) -> dict:
    return {rid: Recording(rid, embs, qnet) for rid, embs in group_by_prefix(embeddings).items()}


def recording_clusters(rec: Recording, k_max: int = 3, threshold: Optional[float] = None):
    n = rec.x.shape[0]
    if threshold is not None:
        return ahc(rec.x, threshold=threshold)
    return partition_union(rec.x, min(k_max, n))


def score_pairs(pairs: list, enroll: dict, test: dict, system: str = "cos", k_max: int = 3,
                threshold: Optional[float] = None, cohort: Optional[Cohort] = None,
                threads: int = 1, labels: Optional[dict] = None) -> ScoreTable:
    """Max-over-cluster scores for (enroll_id, test_id) pairs.

    With a cohort every cluster score is as-normed before the maximum.
    Results do not depend on ``threads``.
    """
    for e, t in pairs:
        if e not in enroll:
            raise DataError(f"no enrollment embeddings for {e}")
        if t not in test:
            raise DataError(f"no test embeddings for {t}")
    enroll_agg = {}
    for e in {e for e, _ in pairs}:
        agg = enroll[e].aggregate()
        enroll_agg[e] = (agg, cohort.stats(agg, e) if cohort is not None else None)
    clusters = {}
    for t in {t for _, t in pairs}:
        clusters[t] = recording_clusters(test[t], k_max, threshold).clusters

    def one(pair):
        e, t = pair
        agg_e, stats_e = enroll_agg[e]
        rec = test[t]
        best, best_c = -np.inf, None
        for c in clusters[t]:
            agg = rec.aggregate(c)
            s = cosine(agg_e, agg)
            if stats_e is not None:
                s = as_norm(s, stats_e, cohort.stats(agg))
            if s > best:
                best, best_c = s, c
        entry = SystemScore(float(best), enroll[e].mean_quality(), rec.mean_quality(best_c))
        label = labels.get(pair) if labels else None
        return TrialRecord(e, t, label, {system: entry})

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            records = list(pool.map(one, pairs))
    else:
        records = [one(p) for p in pairs]
    return ScoreTable(records, (system,))


def norm_table(table: ScoreTable, enroll: dict, test: dict, cohort: Cohort) -> ScoreTable:
    """As-norm every score using whole-recording aggregates on both sides."""
    cache = {}

    def stats(side, rid):
        key = (side, rid)
        if key not in cache:
            recs = enroll if side == "e" else test
            if rid not in recs:
                raise DataError(f"no {'enrollment' if side == 'e' else 'test'} embeddings for {rid}")
            cache[key] = cohort.stats(recs[rid].aggregate(), rid)
        return cache[key]

    out = []
    for r in table.records:
        se, st = stats("e", r.enroll_id), stats("t", r.test_id)
        systems = {
            name: SystemScore(as_norm(s.score, se, st), s.q_enroll, s.q_test)
            for name, s in r.systems.items()
        }
        out.append(TrialRecord(r.enroll_id, r.test_id, r.label, systems))
    return ScoreTable(out, table.roster)
