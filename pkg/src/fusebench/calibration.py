"""Prior-weighted logistic regression for calibration and score fusion.

The fused log-likelihood ratio of a trial is

    LLR = sum_i a_i * s_i + b_i * q_enroll_i + c_i * q_test_i + d

Feature rows put every system score first (roster order), then the
``(q_enroll, q_test)`` pair of every quality-flagged system (roster order).
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np

from .core import DataError, FormatError, ScoreTable, SystemScore, TrialRecord, atomic_write, fmt_float

log = logging.getLogger(__name__)

DEFAULT_PRIOR = 0.05
DEFAULT_RIDGE = 1e-6
GRAD_TOL = 1e-9
MAX_NEWTON = 200
COND_LIMIT = 1e12
FUSED_SYSTEM = "fused"


@dataclass
class FusionParams:
    coef: dict = field(default_factory=dict)  # system -> (a, b, c)
    offset: float = 0.0
    prior: float = DEFAULT_PRIOR
    use_q: dict = field(default_factory=dict)

    @property
    def systems(self) -> tuple:
        return tuple(self.coef)


@dataclass
class LRResult:
    w: np.ndarray
    d: float
    converged: bool
    iterations: int
    grad_norm: float


def _softplus(z):
    return np.logaddexp(0.0, z)


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


class CllrObjective:
    """Prior-weighted cross-entropy over (w, d) packed as one vector."""

    def __init__(self, x, y, prior: float, ridge: float):
        self.x = np.asarray(x, dtype=float)
        if self.x.ndim == 1:
            self.x = self.x[:, None]
        self.y = np.asarray(y, dtype=bool)
        n_tar = int(self.y.sum())
        n_non = int(self.y.size - n_tar)
        if n_tar == 0 or n_non == 0:
            raise DataError("calibration needs both target and nontarget trials")
        if not np.all(np.isfinite(self.x)):
            raise DataError("non-finite feature value")
        if not (0.0 < prior < 1.0):
            raise DataError(f"prior must lie in (0,1), got {prior}")
        if ridge < 0:
            raise DataError("ridge must be >= 0")
        self.prior = prior
        self.ridge = ridge
        self.tau = math.log(prior / (1.0 - prior))
        self.weights = np.where(self.y, prior / n_tar, (1.0 - prior) / n_non)
        # +1 for targets: loss softplus(-z); -1 for nontargets: softplus(z)
        self.sign = np.where(self.y, 1.0, -1.0)
        self.xa = np.hstack([self.x, np.ones((self.x.shape[0], 1))])
        self.penalty = np.ones(self.xa.shape[1])
        self.penalty[-1] = 0.0

    def _z(self, theta):
        return self.xa @ theta + self.tau

    def value(self, theta) -> float:
        z = self._z(theta)
        data = float(np.sum(self.weights * _softplus(-self.sign * z)))
        return data + self.ridge * float(np.sum(self.penalty * theta * theta))

    def gradient(self, theta) -> np.ndarray:
        z = self._z(theta)
        r = -self.sign * _sigmoid(-self.sign * z) * self.weights
        return self.xa.T @ r + 2.0 * self.ridge * self.penalty * theta

    def hessian(self, theta) -> np.ndarray:
        z = self._z(theta)
        p = _sigmoid(z)
        h = self.weights * p * (1.0 - p)
        return (self.xa * h[:, None]).T @ self.xa + np.diag(2.0 * self.ridge * self.penalty)


def _backtrack(obj, theta, f0, g, step, max_halvings=60):
    slope = float(g @ step)
    t = 1.0
    for _ in range(max_halvings):
        cand = theta + t * step
        fc = obj.value(cand)
        if fc <= f0 + 1e-4 * t * slope:
            return cand, fc
        t *= 0.5
    return theta, f0


def train_cllr_lr(x, y, prior: float = DEFAULT_PRIOR, ridge: float = DEFAULT_RIDGE) -> LRResult:
    """Fit (w, d) so that ``w.x + d`` is a calibrated LLR at the given prior.

    Damped Newton with backtracking; iterations whose Hessian condition
    estimate exceeds 1e12 take a gradient step instead.
    """
    obj = CllrObjective(x, y, prior, ridge)
    theta = np.zeros(obj.xa.shape[1])
    f = obj.value(theta)
    g = obj.gradient(theta)
    it = 0
    gd_scale = 1.0
    while it < MAX_NEWTON and np.max(np.abs(g)) > GRAD_TOL:
        it += 1
        h = obj.hessian(theta)
        step = None
        if np.linalg.cond(h) <= COND_LIMIT:
            try:
                step = -np.linalg.solve(h, g)
            except np.linalg.LinAlgError:
                step = None
        if step is None or not np.all(np.isfinite(step)) or float(g @ step) >= 0:
            step = -gd_scale * g
        new_theta, new_f = _backtrack(obj, theta, f, g, step)
        if new_f >= f and np.array_equal(new_theta, theta):
            break
        theta, f = new_theta, new_f
        g = obj.gradient(theta)
    gnorm = float(np.max(np.abs(g)))
    converged = gnorm <= GRAD_TOL
    if not converged:
        log.warning("logistic regression stopped at gradient norm %.3g after %d iterations", gnorm, it)
    return LRResult(theta[:-1].copy(), float(theta[-1]), converged, it, gnorm)


def apply_lr(w, d: float, x) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x[:, None] if w.size == 1 else x[None, :]
    if x.shape[1] != w.size:
        raise DataError(f"feature length {x.shape[1]} does not match {w.size} parameters")
    return x @ w + d


def feature_layout(roster: Sequence[str], use_q: Mapping[str, bool]) -> list:
    """Column names in the fixed order: scores, then quality pairs."""
    cols = [(s, "a") for s in roster]
    for s in roster:
        if use_q.get(s, False):
            cols += [(s, "b"), (s, "c")]
    return cols


def build_features(table: ScoreTable, use_q: Optional[Mapping[str, bool]] = None,
                   roster: Optional[Sequence[str]] = None) -> np.ndarray:
    roster = tuple(roster or table.roster)
    use_q = dict(use_q or {})
    unknown = [s for s in use_q if s not in roster]
    if unknown:
        raise DataError(f"quality flags for unknown systems {unknown}")
    cols = feature_layout(roster, use_q)
    x = np.empty((len(table), len(cols)))
    for i, rec in enumerate(table.records):
        for j, (name, kind) in enumerate(cols):
            entry = rec.systems.get(name)
            if entry is None:
                raise DataError(f"trial {rec.enroll_id} {rec.test_id} has no score for {name}")
            if kind == "a":
                x[i, j] = entry.score
            else:
                if not entry.has_quality:
                    raise DataError(f"trial {rec.enroll_id} {rec.test_id}: system {name} lacks qualities")
                x[i, j] = entry.q_enroll if kind == "b" else entry.q_test
    return x


def params_vector(params: FusionParams) -> tuple:
    use_q = {s: params.use_q.get(s, False) for s in params.coef}
    cols = feature_layout(params.systems, use_q)
    idx = {"a": 0, "b": 1, "c": 2}
    w = np.array([params.coef[s][idx[k]] for s, k in cols])
    return w, use_q


def apply_fusion(params: FusionParams, table: ScoreTable, name: str = FUSED_SYSTEM) -> ScoreTable:
    missing = [s for s in params.systems if s not in table.roster]
    if missing:
        raise DataError(f"score table lacks systems {missing}")
    w, use_q = params_vector(params)
    x = build_features(table, use_q, params.systems)
    llr = apply_lr(w, params.offset, x)
    return _single_system_table(table, llr, name)


def _single_system_table(table: ScoreTable, scores, name: str) -> ScoreTable:
    recs = [
        TrialRecord(r.enroll_id, r.test_id, r.label, {name: SystemScore(float(s))})
        for r, s in zip(table.records, scores)
    ]
    return ScoreTable(recs, (name,))


def sum_fuse(table: ScoreTable, name: str = "sum") -> ScoreTable:
    total = np.zeros(len(table))
    for i, rec in enumerate(table.records):
        for sys_name in table.roster:
            if sys_name not in rec.systems:
                raise DataError(f"trial {rec.enroll_id} {rec.test_id} has no score for {sys_name}")
            total[i] += rec.systems[sys_name].score
    return _single_system_table(table, total, name)


def fuse_with_qualities(table: ScoreTable, prior: float = DEFAULT_PRIOR,
                        use_q: Optional[Mapping[str, bool]] = None,
                        ridge: float = DEFAULT_RIDGE, name: str = FUSED_SYSTEM):
    """Train Cllr-LR fusion on a labeled table; return (params, fused table)."""
    use_q = {s: bool((use_q or {}).get(s, False)) for s in table.roster}
    x = build_features(table, use_q)
    y = table.labels()
    res = train_cllr_lr(x, y, prior, ridge)
    coef = {s: [0.0, 0.0, 0.0] for s in table.roster}
    for (s, kind), v in zip(feature_layout(table.roster, use_q), res.w):
        coef[s]["abc".index(kind)] = float(v)
    params = FusionParams({s: tuple(v) for s, v in coef.items()}, res.d, prior, use_q)
    return params, _single_system_table(table, apply_lr(res.w, res.d, x), name)


def calibrate(table: ScoreTable, system: str, prior: float = DEFAULT_PRIOR,
              ridge: float = DEFAULT_RIDGE) -> FusionParams:
    """Affine calibrator for one system (the two-parameter special case)."""
    sub = ScoreTable(
        [TrialRecord(r.enroll_id, r.test_id, r.label, {system: r.systems[system]}) for r in table.records],
        (system,),
    )
    params, _ = fuse_with_qualities(sub, prior, None, ridge)
    return params


def format_params(params: FusionParams) -> str:
    lines = []
    for s, (a, b, c) in params.coef.items():
        lines.append("\t".join([s, fmt_float(a), fmt_float(b), fmt_float(c)]))
    lines.append("\t".join(["OFFSET", fmt_float(params.offset), "PI", fmt_float(params.prior)]))
    return "\n".join(lines) + "\n"


def save_params(params: FusionParams, path: str) -> None:
    atomic_write(path, format_params(params))


def load_params(path: str) -> FusionParams:
    coef = {}
    offset = prior = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if not line.strip() or line.startswith("#"):
                continue
            parts = line.split("\t")
            try:
                if parts[0] == "OFFSET":
                    if len(parts) != 4 or parts[2] != "PI":
                        raise FormatError("offset line must be OFFSET<TAB>d<TAB>PI<TAB>prior", lineno, path)
                    offset, prior = float(parts[1]), float(parts[3])
                    continue
                if len(parts) != 4:
                    raise FormatError(f"expected 4 fields, got {len(parts)}", lineno, path)
                coef[parts[0]] = (float(parts[1]), float(parts[2]), float(parts[3]))
            except ValueError as exc:
                if isinstance(exc, FormatError):
                    raise
                raise FormatError(f"unparsable number: {exc}", lineno, path) from None
    if offset is None:
        raise DataError(f"{path}: missing OFFSET line")
    use_q = {s: (b != 0.0 or c != 0.0) for s, (_, b, c) in coef.items()}
    return FusionParams(coef, offset, prior, use_q)
