"""Detection metrics: DET sweep, EER, detection cost, minC/actC and Cllr.

Decisions accept a trial iff ``score >= threshold``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import DataError

DEFAULT_P_TAR = 0.05


@dataclass(frozen=True)
class DetPoint:
    threshold: float
    p_fn: float
    p_fp: float


@dataclass(frozen=True)
class CostConfig:
    p_tar: float = DEFAULT_P_TAR

    def __post_init__(self):
        if not (0.0 < self.p_tar < 1.0):
            raise DataError(f"p_tar must lie in (0,1), got {self.p_tar}")

    @property
    def beta(self) -> float:
        # 1/p - 1 rather than (1-p)/p: exact 19 for p = 0.05
        return 1.0 / self.p_tar - 1.0

    @property
    def bayes_threshold(self) -> float:
        return math.log(self.beta)


def _as_cfg(cfg) -> CostConfig:
    if cfg is None:
        return CostConfig()
    if isinstance(cfg, CostConfig):
        return cfg
    return CostConfig(float(cfg))


def _check(tar, non):
    tar = np.asarray(tar, dtype=float).ravel()
    non = np.asarray(non, dtype=float).ravel()
    if tar.size == 0 or non.size == 0:
        raise DataError("both target and nontarget scores are required")
    if np.isnan(tar).any() or np.isnan(non).any():
        raise DataError("NaN score")
    return tar, non


def _thresholds(tar, non):
    u = np.unique(np.concatenate([tar, non]))
    mids = 0.5 * (u[:-1] + u[1:])
    return np.concatenate([[u[0] - 1.0], mids, [u[-1] + 1.0]])


def _rates(tar, non, thr):
    tar_sorted = np.sort(tar)
    non_sorted = np.sort(non)
    p_fn = np.searchsorted(tar_sorted, thr, side="left") / tar.size
    p_fp = (non.size - np.searchsorted(non_sorted, thr, side="left")) / non.size
    return p_fn, p_fp


def det_curve(tar, non):
    """Vectorised sweep; returns (thresholds, p_fn, p_fp) arrays."""
    tar, non = _check(tar, non)
    thr = _thresholds(tar, non)
    p_fn, p_fp = _rates(tar, non, thr)
    return thr, p_fn, p_fp


def det_points(tar, non) -> list:
    thr, p_fn, p_fp = det_curve(tar, non)
    return [DetPoint(float(t), float(a), float(b)) for t, a, b in zip(thr, p_fn, p_fp)]


def eer(tar, non) -> float:
    _, p_fn, p_fp = det_curve(tar, non)
    diff = p_fn - p_fp
    # diff is non-decreasing, starts at -1 and ends at +1
    k = int(np.argmax(diff >= 0.0))
    if diff[k] == 0.0:
        return float(p_fn[k])
    d0, d1 = diff[k - 1], diff[k]
    t = -d0 / (d1 - d0)
    return float(p_fn[k - 1] + t * (p_fn[k] - p_fn[k - 1]))


def detection_cost(p_fn: float, p_fp: float, cfg=None) -> float:
    cfg = _as_cfg(cfg)
    return p_fn + cfg.beta * p_fp


def min_c(tar, non, cfg=None) -> float:
    cfg = _as_cfg(cfg)
    _, p_fn, p_fp = det_curve(tar, non)
    return float(np.min(p_fn + cfg.beta * p_fp))


def act_c(tar, non, cfg=None) -> float:
    cfg = _as_cfg(cfg)
    tar, non = _check(tar, non)
    theta = cfg.bayes_threshold
    p_fn = np.count_nonzero(tar < theta) / tar.size
    p_fp = np.count_nonzero(non >= theta) / non.size
    return detection_cost(p_fn, p_fp, cfg)


def cllr(tar, non) -> float:
    tar, non = _check(tar, non)
    c_tar = np.mean(np.logaddexp(0.0, -tar))
    c_non = np.mean(np.logaddexp(0.0, non))
    return float(0.5 * (c_tar + c_non) / math.log(2.0))


def summary(tar, non, cfg=None) -> dict:
    cfg = _as_cfg(cfg)
    return {
        "eer": eer(tar, non),
        "min_c": min_c(tar, non, cfg),
        "act_c": act_c(tar, non, cfg),
        "cllr": cllr(tar, non),
    }
