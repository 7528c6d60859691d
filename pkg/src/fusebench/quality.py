"""Embedding quality network.

A one-hidden-layer MLP maps an embedding to a quality in (0, 1).  It is
trained by weighting tuples of same-identity embeddings with their predicted
qualities, averaging them, and classifying the average with an additive
angular margin (ArcFace) softmax head.  All gradients are analytic.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .core import DataError, Embedding, FormatError, atomic_write, fmt_float

log = logging.getLogger(__name__)

Q_MIN = 1e-6
COS_EPS = 1e-12


@dataclass
class TrainConfig:
    tuple_size: int = 3
    epochs: int = 30
    learning_rate: float = 0.05
    seed: int = 0
    scale: float = 30.0
    margin: float = 0.2
    hidden: Optional[int] = None  # default max(16, d // 2, n_classes)
    init_gain: float = 3.0

    def hidden_width(self, dim: int, n_classes: int = 0) -> int:
        if self.hidden is not None:
            return self.hidden
        return max(16, dim // 2, n_classes)


@dataclass
class QualityNetParams:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    head: np.ndarray
    scale: float = 30.0
    margin: float = 0.2
    classes: tuple = ()
    history: list = field(default_factory=list)

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    def copy(self) -> "QualityNetParams":
        return QualityNetParams(self.W1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2),
                                self.head.copy(), self.scale, self.margin, tuple(self.classes),
                                list(self.history))


_Q_LO = np.finfo(float).tiny
_Q_HI = np.nextafter(1.0, 0.0)


def _sigmoid(z):
    ez = np.exp(-np.abs(z))
    q = np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))
    # saturated outputs stay strictly inside (0, 1)
    return np.clip(q, _Q_LO, _Q_HI)


def _values(e) -> np.ndarray:
    return np.asarray(e.values if isinstance(e, Embedding) else e, dtype=float)


def quality_forward(params: QualityNetParams, e) -> float:
    x = _values(e)
    if x.shape != (params.dim,):
        raise DataError(f"embedding dim {x.size} does not match quality net dim {params.dim}")
    hidden = np.maximum(params.W1 @ x + params.b1, 0.0)
    return float(_sigmoid(np.array(params.w2 @ hidden + params.b2)))


def quality_batch(params: QualityNetParams, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise DataError(f"embedding dim does not match quality net dim {params.dim}")
    hidden = np.maximum(x @ params.W1.T + params.b1, 0.0)
    return _sigmoid(hidden @ params.w2 + params.b2)


def predict_qualities(params: QualityNetParams, embeddings: Sequence[Embedding]) -> list:
    if not embeddings:
        return []
    x = np.vstack([_values(e) for e in embeddings])
    q = quality_batch(params, x)
    return [(e.id, float(v)) for e, v in zip(embeddings, q)]


def weighted_average(embeddings, q) -> np.ndarray:
    """Quality-weighted mean ``sum q_i e_i / sum q_i`` with q floored at 1e-6.

    Only the floor is applied, so the result is invariant to rescaling q.
    """
    x = np.vstack([_values(e) for e in embeddings]) if len(embeddings) else np.zeros((0, 0))
    q = np.asarray(q, dtype=float).ravel()
    if x.shape[0] == 0:
        raise DataError("weighted average of an empty set")
    if q.size != x.shape[0]:
        raise DataError(f"{x.shape[0]} embeddings but {q.size} qualities")
    if np.any(~np.isfinite(q)):
        raise DataError("non-finite quality")
    w = np.maximum(q, Q_MIN)
    return (w @ x) / np.sum(w)


def arcface_loss(head: np.ndarray, e_bar, y: int, scale: float = 30.0, margin: float = 0.2):
    """Additive angular margin softmax loss.

    Returns ``(loss, grad_e_bar, grad_head)``.  ``head`` rows are used as
    given; callers keep them unit-norm.
    """
    e_bar = np.asarray(e_bar, dtype=float)
    norm = np.linalg.norm(e_bar)
    if norm == 0:
        raise DataError("zero-norm embedding in arcface loss")
    if not (0 <= y < head.shape[0]):
        raise DataError(f"class index {y} out of range")
    u = e_bar / norm
    cos = head @ u
    cy = float(np.clip(cos[y], -1.0 + COS_EPS, 1.0 - COS_EPS))
    sy = np.sqrt(1.0 - cy * cy)
    cm, sm = np.cos(margin), np.sin(margin)
    logits = scale * cos
    logits[y] = scale * (cy * cm - sy * sm)
    top = np.max(logits)
    lse = top + np.log(np.sum(np.exp(logits - top)))
    rest = np.delete(logits, y) - logits[y]
    if rest.size and np.max(rest) < 0.0:
        # log1p avoids cancellation when the true class dominates
        loss = float(np.log1p(np.sum(np.exp(rest))))
    else:
        loss = float(lse - logits[y])

    p = np.exp(logits - lse)
    g_logit = p.copy()
    g_logit[y] -= 1.0
    g_cos = scale * g_logit
    g_cos[y] *= cm + sm * cy / sy
    grad_head = np.outer(g_cos, u)
    g_u = head.T @ g_cos
    grad_e = (g_u - u * (u @ g_u)) / norm
    return loss, grad_e, grad_head


def tuple_loss(params: QualityNetParams, x: np.ndarray, y: int):
    """Loss of one training tuple and gradients for every parameter."""
    pre = x @ params.W1.T + params.b1  # (M, h)
    hidden = np.maximum(pre, 0.0)
    z = hidden @ params.w2 + params.b2
    q = _sigmoid(z)
    w = np.maximum(q, Q_MIN)
    total = np.sum(w)
    e_bar = (w @ x) / total
    loss, g_e, g_head = arcface_loss(params.head, e_bar, y, params.scale, params.margin)

    g_w = (x - e_bar) @ g_e / total
    g_w = np.where(q >= Q_MIN, g_w, 0.0)
    g_z = g_w * q * (1.0 - q)
    g_w2 = hidden.T @ g_z
    g_b2 = float(np.sum(g_z))
    g_pre = np.outer(g_z, params.w2) * (pre > 0)
    g_W1 = g_pre.T @ x
    g_b1 = g_pre.sum(axis=0)
    grads = {"W1": g_W1, "b1": g_b1, "w2": g_w2, "b2": g_b2, "head": g_head}
    return loss, grads


def _normalize_rows(m: np.ndarray) -> np.ndarray:
    return m / np.linalg.norm(m, axis=1, keepdims=True)


def init_params(dim: int, n_classes: int, cfg: TrainConfig, rng: np.random.Generator,
                class_means: Optional[np.ndarray] = None) -> QualityNetParams:
    h = cfg.hidden_width(dim, n_classes)
    W1 = rng.normal(0.0, np.sqrt(2.0 / dim), size=(h, dim))
    b1 = np.zeros(h)
    w2 = rng.normal(0.0, np.sqrt(1.0 / h), size=h)
    if class_means is None:
        head = _normalize_rows(rng.normal(size=(n_classes, dim)))
    else:
        head = _normalize_rows(class_means)
        # hidden units start as centroid detectors; the output layer stays random
        k = min(h, n_classes)
        W1[:k] = cfg.init_gain * head[:k]
    return QualityNetParams(W1, b1, w2, 0.0, head, cfg.scale, cfg.margin)


def train_quality_net(embeddings: Sequence[Embedding], cfg: Optional[TrainConfig] = None) -> QualityNetParams:
    """SGD training of the quality MLP and the ArcFace head.

    Each step draws one identity and ``tuple_size`` of its embeddings without
    replacement.  The head rows and the first hidden rows start at the
    normalised class means.  Deterministic for a fixed seed.
    """
    cfg = cfg or TrainConfig()
    if cfg.tuple_size < 2:
        raise DataError("tuple_size must be >= 2")
    by_id = {}
    for e in embeddings:
        if e.identity is None:
            raise DataError(f"embedding {e.id} has no identity label")
        by_id.setdefault(e.identity, []).append(_values(e))
    usable = {}
    for ident, rows in by_id.items():
        if len(rows) < cfg.tuple_size:
            log.warning("identity %s has %d < %d samples; skipped", ident, len(rows), cfg.tuple_size)
            continue
        usable[ident] = np.vstack(rows)
    if len(usable) < 2:
        raise DataError("need at least two identities with enough samples")
    classes = tuple(sorted(usable))
    dims = {m.shape[1] for m in usable.values()}
    if len(dims) != 1:
        raise DataError("mixed embedding dimensions")
    dim = dims.pop()

    rng = np.random.default_rng(cfg.seed)
    means = np.vstack([usable[c].mean(axis=0) for c in classes])
    params = init_params(dim, len(classes), cfg, rng, means)
    params.classes = classes
    counts = np.array([usable[c].shape[0] for c in classes])
    probs = counts / counts.sum()
    steps = max(1, int(counts.sum()) // cfg.tuple_size)
    lr = cfg.learning_rate

    for epoch in range(cfg.epochs):
        labels = rng.choice(len(classes), size=steps, p=probs)
        total = 0.0
        for y in labels:
            pool = usable[classes[y]]
            idx = rng.choice(pool.shape[0], size=cfg.tuple_size, replace=False)
            loss, g = tuple_loss(params, pool[idx], int(y))
            total += loss
            params.W1 -= lr * g["W1"]
            params.b1 -= lr * g["b1"]
            params.w2 -= lr * g["w2"]
            params.b2 -= lr * g["b2"]
            params.head -= lr * g["head"]
            params.head = _normalize_rows(params.head)
        params.history.append(total / steps)
        log.debug("quality epoch %d mean loss %.5f", epoch + 1, params.history[-1])
    return params


_FIELDS = ("W1", "b1", "w2", "b2", "head", "scale", "margin")


def format_params(params: QualityNetParams) -> str:
    arrays = {
        "W1": params.W1,
        "b1": params.b1[None, :],
        "w2": params.w2[None, :],
        "b2": np.array([[params.b2]]),
        "head": params.head,
        "scale": np.array([[params.scale]]),
        "margin": np.array([[params.margin]]),
    }
    lines = ["#fusebench-quality-net\n"]
    for name in _FIELDS:
        m = arrays[name]
        lines.append(f"{name}\t{m.shape[0]}\t{m.shape[1]}\n")
        for row in m:
            lines.append("\t".join(fmt_float(v) for v in row) + "\n")
    return "".join(lines)


def save_params(params: QualityNetParams, path: str) -> None:
    atomic_write(path, format_params(params))


def load_params(path: str) -> QualityNetParams:
    with open(path, encoding="utf-8") as fh:
        lines = [(i, ln.rstrip("\n")) for i, ln in enumerate(fh, start=1)]
    lines = [(i, ln) for i, ln in lines if ln.strip() and not ln.startswith("#")]
    arrays = {}
    pos = 0
    while pos < len(lines):
        lineno, head = lines[pos]
        parts = head.split("\t")
        if len(parts) != 3 or parts[0] not in _FIELDS:
            raise FormatError(f"expected shape header name<TAB>rows<TAB>cols, got {head!r}", lineno, path)
        try:
            rows, cols = int(parts[1]), int(parts[2])
        except ValueError:
            raise FormatError("bad shape", lineno, path) from None
        data = []
        for r in range(rows):
            pos += 1
            if pos >= len(lines):
                raise FormatError(f"truncated block {parts[0]}", lineno, path)
            ln, text = lines[pos]
            vals = text.split("\t")
            if len(vals) != cols:
                raise FormatError(f"expected {cols} values, got {len(vals)}", ln, path)
            try:
                data.append([float(v) for v in vals])
            except ValueError:
                raise FormatError("unparsable value", ln, path) from None
        arrays[parts[0]] = np.array(data, dtype=float).reshape(rows, cols)
        pos += 1
    missing = [f for f in _FIELDS if f not in arrays]
    if missing:
        raise DataError(f"{path}: missing blocks {missing}")
    return QualityNetParams(
        arrays["W1"], arrays["b1"][0], arrays["w2"][0], float(arrays["b2"][0, 0]), arrays["head"],
        float(arrays["scale"][0, 0]), float(arrays["margin"][0, 0]),
    )
