"""Shared data types and the TSV file formats used by every stage.

Score files hold one line per (trial, system)::

    enroll_id<TAB>test_id<TAB>system<TAB>score[<TAB>q_enroll<TAB>q_test]

Key files hold ``enroll_id<TAB>test_id<TAB>target|nontarget`` and embedding
files start with a ``#dim<TAB>D<TAB>modality`` header followed by
``id[<TAB>identity]<TAB>v1 ... vD``.  Other ``#`` lines are comments.
"""
from __future__ import annotations

import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

MODALITIES = ("speaker", "face")
LABELS = ("target", "nontarget")


class DataError(ValueError):
    """Invalid input data."""


class FormatError(DataError):
    """A malformed line in a text artifact; carries the 1-based line number."""

    def __init__(self, message: str, lineno: int, path: Optional[str] = None):
        self.lineno = lineno
        self.path = path
        where = f"{path}:{lineno}" if path else f"line {lineno}"
        super().__init__(f"{where}: {message}")


def fmt_float(x: float) -> str:
    return "%.17g" % x


@dataclass(frozen=True)
class Embedding:
    id: str
    modality: str
    values: np.ndarray
    identity: Optional[str] = None
    true_noise: Optional[float] = None

    @property
    def dim(self) -> int:
        return len(self.values)

    def __eq__(self, other):
        if not isinstance(other, Embedding):
            return NotImplemented
        return (
            self.id == other.id
            and self.modality == other.modality
            and self.identity == other.identity
            and self.true_noise == other.true_noise
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class SystemScore:
    score: float
    q_enroll: Optional[float] = None
    q_test: Optional[float] = None

    @property
    def has_quality(self) -> bool:
        return self.q_enroll is not None and self.q_test is not None


@dataclass
class TrialRecord:
    enroll_id: str
    test_id: str
    label: Optional[str] = None
    systems: dict = field(default_factory=dict)

    @property
    def key(self) -> tuple:
        return (self.enroll_id, self.test_id)

    @property
    def is_target(self) -> bool:
        return self.label == "target"


@dataclass
class ScoreTable:
    records: list = field(default_factory=list)
    roster: tuple = ()

    def __len__(self):
        return len(self.records)

    def __iter__(self) -> Iterator[TrialRecord]:
        return iter(self.records)

    def validate(self) -> None:
        seen = set()
        for rec in self.records:
            if rec.key in seen:
                raise DataError(f"duplicate trial {rec.enroll_id} {rec.test_id}")
            seen.add(rec.key)
            if tuple(rec.systems) != tuple(self.roster) and set(rec.systems) != set(self.roster):
                raise DataError(
                    f"trial {rec.enroll_id} {rec.test_id} has systems "
                    f"{sorted(rec.systems)}, roster is {list(self.roster)}"
                )
            for name, s in rec.systems.items():
                if not math.isfinite(s.score):
                    raise DataError(f"non-finite score for {rec.key} system {name}")

    def labeled(self) -> bool:
        return all(r.label is not None for r in self.records)

    def scores(self, system: str) -> np.ndarray:
        return np.array([r.systems[system].score for r in self.records], dtype=float)

    def labels(self) -> np.ndarray:
        """Boolean target mask; raises if any trial lacks a label."""
        if not self.labeled():
            raise DataError("score table has unlabeled trials")
        return np.array([r.is_target for r in self.records], dtype=bool)

    def split_scores(self, system: str) -> tuple:
        s = self.scores(system)
        y = self.labels()
        return s[y], s[~y]


def atomic_write(path: str, text: str) -> None:
    """Write ``text`` to ``path`` through a temporary file and rename."""
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _data_lines(path: str) -> Iterator[tuple]:
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if not line.strip() or line.startswith("#"):
                continue
            yield lineno, line


def _parse_float(tok: str, what: str, lineno: int, path: str) -> float:
    try:
        return float(tok)
    except ValueError:
        raise FormatError(f"cannot parse {what} {tok!r}", lineno, path) from None


def _parse_quality(tok: str, what: str, lineno: int, path: str) -> float:
    q = _parse_float(tok, what, lineno, path)
    if not (0.0 <= q <= 1.0):
        raise FormatError(f"{what} {tok} outside [0,1]", lineno, path)
    return q


def load_key(path: str) -> dict:
    """Read a key file into ``{(enroll_id, test_id): label}`` preserving order."""
    key = {}
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) != 3:
            raise FormatError(f"expected 3 fields, got {len(parts)}", lineno, path)
        enroll, test, label = parts
        if label not in LABELS:
            raise FormatError(f"label must be target|nontarget, got {label!r}", lineno, path)
        if (enroll, test) in key:
            raise FormatError(f"duplicate key trial {enroll} {test}", lineno, path)
        key[(enroll, test)] = label
    return key


def load_trial_list(path: str) -> list:
    """Read (enroll_id, test_id) pairs; a third label column is allowed and ignored."""
    pairs = []
    seen = set()
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) not in (2, 3):
            raise FormatError(f"expected 2 or 3 fields, got {len(parts)}", lineno, path)
        pair = (parts[0], parts[1])
        if pair in seen:
            raise FormatError(f"duplicate trial {pair[0]} {pair[1]}", lineno, path)
        seen.add(pair)
        pairs.append(pair)
    return pairs


def load_score_table(path: str, key_path: Optional[str] = None) -> ScoreTable:
    records = {}
    roster = []
    for lineno, line in _data_lines(path):
        parts = line.split("\t")
        if len(parts) not in (4, 6):
            raise FormatError(f"expected 4 or 6 fields, got {len(parts)}", lineno, path)
        enroll, test, system = parts[:3]
        score = _parse_float(parts[3], "score", lineno, path)
        if not math.isfinite(score):
            raise FormatError(f"non-finite score {parts[3]}", lineno, path)
        q_e = q_t = None
        if len(parts) == 6:
            q_e = _parse_quality(parts[4], "q_enroll", lineno, path)
            q_t = _parse_quality(parts[5], "q_test", lineno, path)
        rec = records.get((enroll, test))
        if rec is None:
            rec = records[(enroll, test)] = TrialRecord(enroll, test)
        if system in rec.systems:
            raise FormatError(f"duplicate entry ({enroll}, {test}, {system})", lineno, path)
        rec.systems[system] = SystemScore(score, q_e, q_t)
        if system not in roster:
            roster.append(system)

    for rec in records.values():
        missing = [s for s in roster if s not in rec.systems]
        if missing:
            raise DataError(f"{path}: trial {rec.enroll_id} {rec.test_id} lacks systems {missing}")
        rec.systems = {s: rec.systems[s] for s in roster}

    if key_path is not None:
        key = load_key(key_path)
        absent = [k for k in key if k not in records]
        if absent:
            raise DataError(
                f"{key_path}: {len(absent)} keyed trial(s) missing from scores, "
                f"first: {absent[0][0]} {absent[0][1]}"
            )
        for k, rec in records.items():
            rec.label = key.get(k)
    return ScoreTable(list(records.values()), tuple(roster))


def format_score_table(table: ScoreTable) -> str:
    out = []
    for rec in table.records:
        for name in table.roster:
            s = rec.systems[name]
            fields = [rec.enroll_id, rec.test_id, name, fmt_float(s.score)]
            if s.has_quality:
                fields += [fmt_float(s.q_enroll), fmt_float(s.q_test)]
            out.append("\t".join(fields) + "\n")
    return "".join(out)


def save_score_table(table: ScoreTable, path: str) -> None:
    atomic_write(path, format_score_table(table))


def format_key(table_or_pairs) -> str:
    if isinstance(table_or_pairs, ScoreTable):
        items = [(r.enroll_id, r.test_id, r.label) for r in table_or_pairs.records]
    else:
        items = list(table_or_pairs)
    return "".join(f"{e}\t{t}\t{lab}\n" for e, t, lab in items if lab is not None)


def save_key(table_or_pairs, path: str) -> None:
    atomic_write(path, format_key(table_or_pairs))


def load_embeddings(path: str) -> list:
    header = None
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n").rstrip("\r")
            if line.startswith("#dim"):
                if header is not None:
                    raise FormatError("second #dim header", lineno, path)
                parts = line.split("\t")
                if len(parts) != 3:
                    raise FormatError("header must be #dim<TAB>D<TAB>modality", lineno, path)
                try:
                    dim = int(parts[1])
                except ValueError:
                    raise FormatError(f"bad dimension {parts[1]!r}", lineno, path) from None
                if dim < 1:
                    raise FormatError(f"dimension must be >= 1, got {dim}", lineno, path)
                if parts[2] not in MODALITIES:
                    raise FormatError(f"unknown modality {parts[2]!r}", lineno, path)
                header = (dim, parts[2])
                continue
            if not line.strip() or line.startswith("#"):
                continue
            if header is None:
                raise FormatError("data line before #dim header", lineno, path)
            dim, modality = header
            parts = line.split("\t")
            if len(parts) == dim + 1:
                ident, identity, toks = parts[0], None, parts[1:]
            elif len(parts) == dim + 2:
                ident, identity, toks = parts[0], parts[1], parts[2:]
            else:
                raise FormatError(
                    f"expected {dim} values (dim={dim}), got {len(parts) - 1} fields", lineno, path
                )
            vals = np.array([_parse_float(t, "value", lineno, path) for t in toks], dtype=float)
            if not np.all(np.isfinite(vals)):
                raise FormatError("non-finite embedding value", lineno, path)
            out.append(Embedding(ident, modality, vals, identity))
    if header is None:
        raise DataError(f"{path}: empty embedding file (no #dim header)")
    return out


def format_embeddings(embeddings: Sequence[Embedding], modality: Optional[str] = None) -> str:
    if not embeddings and modality is None:
        raise DataError("cannot infer dimension of an empty embedding collection")
    dim = embeddings[0].dim if embeddings else 0
    modality = modality or embeddings[0].modality
    lines = [f"#dim\t{dim}\t{modality}\n"]
    for e in embeddings:
        if e.dim != dim:
            raise DataError(f"embedding {e.id} has dim {e.dim}, expected {dim}")
        head = [e.id] if e.identity is None else [e.id, e.identity]
        lines.append("\t".join(head + [fmt_float(v) for v in e.values]) + "\n")
    return "".join(lines)


def save_embeddings(embeddings: Sequence[Embedding], path: str) -> None:
    atomic_write(path, format_embeddings(embeddings))


def stack(embeddings: Iterable[Embedding]) -> np.ndarray:
    rows = [e.values for e in embeddings]
    if not rows:
        return np.zeros((0, 0))
    dims = {len(r) for r in rows}
    if len(dims) != 1:
        raise DataError(f"mixed embedding dimensions {sorted(dims)}")
    return np.vstack(rows)


def group_by_prefix(embeddings: Iterable[Embedding]) -> dict:
    """Group ``recid/segid`` embeddings by recording id, keeping file order."""
    groups = {}
    for e in embeddings:
        rec = e.id.split("/", 1)[0]
        groups.setdefault(rec, []).append(e)
    return groups
