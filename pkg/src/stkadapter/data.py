"""Temporal knowledge graph loading, indexing and chronological splits.

Facts are quadruples ``(subject, relation, object, timestamp)`` of integer
ids. Every base relation ``r`` in ``0..|R|-1`` has an inverse ``r + |R|``;
loading materializes the inverse of each fact so object and subject queries
share one code path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, NamedTuple, Sequence

import numpy as np

from . import container


class ParseError(ValueError):
    """A quadruple line could not be parsed."""


class ValidationError(ValueError):
    """Loaded data violates a structural or chronological invariant."""


class Quadruple(NamedTuple):
    subject: int
    relation: int
    object: int
    timestamp: int


class Vocab:
    """Bidirectional string <-> id map with first-appearance ordering."""

    def __init__(self, items: Iterable[str] = ()):
        self._id: dict[str, int] = {}
        self._str: list[str] = []
        for item in items:
            self.intern(item)

    def intern(self, item: str) -> int:
        idx = self._id.get(item)
        if idx is None:
            idx = len(self._str)
            self._id[item] = idx
            self._str.append(item)
        return idx

    def id(self, item: str) -> int:
        return self._id[item]

    def name(self, idx: int) -> str:
        return self._str[idx]

    def __contains__(self, item: str) -> bool:
        return item in self._id

    def __len__(self) -> int:
        return len(self._str)

    def __iter__(self):
        return iter(self._str)

    def __eq__(self, other) -> bool:
        return isinstance(other, Vocab) and self._str == other._str

    def to_list(self) -> list[str]:
        return list(self._str)


def parse_quadruple(line: str, entities: Vocab, relations: Vocab, lineno: int = 0) -> Quadruple:
    """Parse one ``subject\\trelation\\tobject\\ttimestamp`` line.

    Strings are interned into ``entities``/``relations``; the timestamp is kept
    as its raw integer value (normalization happens in :func:`load_dataset`).
    Extra trailing fields are ignored.
    """
    fields = line.rstrip("\r\n").split("\t")
    if len(fields) < 4:
        raise ParseError(f"line {lineno}: expected 4 tab-separated fields, got {len(fields)}")
    s, r, o, raw_t = (f.strip() for f in fields[:4])
    try:
        t_float = float(raw_t)
    except ValueError:
        raise ParseError(f"line {lineno}: non-numeric timestamp {raw_t!r}") from None
    if not math.isfinite(t_float) or t_float != int(t_float):
        raise ParseError(f"line {lineno}: timestamp {raw_t!r} is not an integer")
    return Quadruple(entities.intern(s), relations.intern(r), entities.intern(o), int(t_float))


class TemporalKG:
    """Immutable set of facts sorted by timestamp, inverse facts included.

    ``facts`` is an ``[N, 4]`` int64 array. ``offsets[t]:offsets[t+1]`` is the
    contiguous range of facts at time ``t``.
    """

    def __init__(
        self,
        facts: np.ndarray,
        entities: Vocab,
        relations: Vocab,
        num_times: int,
        time_values: Sequence[int] | None = None,
        granularity: int = 1,
    ):
        facts = np.asarray(facts, dtype=np.int64).reshape(-1, 4)
        if len(facts) and np.any(np.diff(facts[:, 3]) < 0):
            raise ValidationError("facts must be sorted by timestamp")
        self.facts = facts
        self.facts.setflags(write=False)
        self.entities = entities
        self.relations = relations
        self.num_times = int(num_times)
        self.time_values = list(time_values) if time_values is not None else list(range(self.num_times))
        self.granularity = granularity
        if len(facts):
            if facts[:, [0, 2]].max() >= len(entities) or facts[:, 1].max() >= 2 * len(relations):
                raise ValidationError("fact references an id outside the vocabularies")
            if facts[:, 3].max() >= self.num_times or facts.min() < 0:
                raise ValidationError("timestamp outside 0..num_times-1")
        self.offsets = np.searchsorted(facts[:, 3], np.arange(self.num_times + 1), side="left")

    @property
    def num_entities(self) -> int:
        return len(self.entities)

    @property
    def num_relations(self) -> int:
        """Number of base relations |R| (ids 0..2|R|-1 once inverses are counted)."""
        return len(self.relations)

    def __len__(self) -> int:
        return len(self.facts)

    def inverse(self, relation: int) -> int:
        n = self.num_relations
        return relation + n if relation < n else relation - n

    def relation_name(self, relation: int) -> str:
        n = self.num_relations
        if relation < n:
            return self.relations.name(relation)
        return "inv_" + self.relations.name(relation - n)

    def snapshot_at(self, t: int) -> np.ndarray:
        if not 0 <= t < self.num_times:
            raise IndexError(f"time id {t} outside 0..{self.num_times - 1}")
        return self.facts[self.offsets[t]:self.offsets[t + 1]]

    def quadruples(self) -> list[Quadruple]:
        return [Quadruple(*map(int, row)) for row in self.facts]

    def prefix(self, n_facts: int) -> "TemporalKG":
        """The first ``n_facts`` facts, sharing vocabularies and time axis."""
        return TemporalKG(self.facts[:n_facts], self.entities, self.relations, self.num_times,
                          self.time_values, self.granularity)

    def slice(self, start: int, stop: int) -> "TemporalKG":
        return TemporalKG(self.facts[start:stop], self.entities, self.relations, self.num_times,
                          self.time_values, self.granularity)

    def before(self, t: int) -> "TemporalKG":
        return self.prefix(int(self.offsets[min(max(t, 0), self.num_times)]))

    @cached_property
    def by_subject(self) -> dict[int, np.ndarray]:
        """subject -> its facts (rows of ``facts``), in timestamp order."""
        out: dict[int, np.ndarray] = {}
        if not len(self.facts):
            return out
        order = np.argsort(self.facts[:, 0], kind="stable")
        subj = self.facts[order, 0]
        bounds = np.flatnonzero(np.diff(subj)) + 1
        for chunk in np.split(order, bounds):
            out[int(self.facts[chunk[0], 0])] = self.facts[chunk]
        return out

    @cached_property
    def by_subject_relation(self) -> dict[tuple[int, int], np.ndarray]:
        """(subject, relation) -> facts in timestamp order."""
        out: dict[tuple[int, int], np.ndarray] = {}
        for s, rows in self.by_subject.items():
            order = np.argsort(rows[:, 1], kind="stable")
            rel = rows[order, 1]
            bounds = np.flatnonzero(np.diff(rel)) + 1
            for chunk in np.split(order, bounds):
                out[(s, int(rows[chunk[0], 1]))] = rows[chunk]
        return out

    @cached_property
    def by_relation(self) -> dict[int, np.ndarray]:
        out: dict[int, np.ndarray] = {}
        if not len(self.facts):
            return out
        order = np.argsort(self.facts[:, 1], kind="stable")
        rel = self.facts[order, 1]
        bounds = np.flatnonzero(np.diff(rel)) + 1
        for chunk in np.split(order, bounds):
            out[int(self.facts[chunk[0], 1])] = self.facts[chunk]
        return out


@dataclass(frozen=True)
class DatasetSplit:
    train: tuple[int, int]
    valid: tuple[int, int]
    test: tuple[int, int]
    boundary_timestamps: tuple[int, int]
    base_counts: dict[str, int] = field(default_factory=dict)


def _read_lines(path: Path, entities: Vocab, relations: Vocab) -> list[Quadruple]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            out.append(parse_quadruple(line, entities, relations, lineno))
    return out


def _with_inverses(quads: np.ndarray, num_relations: int) -> np.ndarray:
    inv = quads[:, [2, 1, 0, 3]].copy()
    inv[:, 1] += num_relations
    return np.concatenate([quads, inv])


def build_tkg(
    splits: Sequence[Sequence[Quadruple]],
    entities: Vocab,
    relations: Vocab,
) -> tuple[TemporalKG, DatasetSplit]:
    """Normalize timestamps, add inverse facts, sort, and lay splits out contiguously."""
    raw = [np.asarray(s, dtype=np.int64).reshape(-1, 4) for s in splits]
    all_raw_t = np.unique(np.concatenate([r[:, 3] for r in raw])) if any(len(r) for r in raw) else np.zeros(0, np.int64)
    if len(all_raw_t) > 1:
        granularity = int(np.gcd.reduce(np.diff(all_raw_t)))
    else:
        granularity = 1
    t0 = int(all_raw_t[0]) if len(all_raw_t) else 0
    num_times = int((all_raw_t[-1] - t0) // granularity + 1) if len(all_raw_t) else 0
    time_values = [t0 + i * granularity for i in range(num_times)]

    names = ("train", "valid", "test")
    previous_max = None
    blocks = []
    for idx, quads in enumerate(raw):
        if len(quads) == 0:
            blocks.append(np.zeros((0, 4), dtype=np.int64))
            continue
        quads = quads.copy()
        quads[:, 3] = (quads[:, 3] - t0) // granularity
        if previous_max is not None and quads[:, 3].min() < previous_max:
            raise ValidationError(
                f"{names[idx]} split starts at time {quads[:, 3].min()} before the previous split ends at {previous_max}"
            )
        previous_max = int(quads[:, 3].max())
        blocks.append(_with_inverses(quads, len(relations)))

    keys, rows = [], []
    for split_idx, block in enumerate(blocks):
        n = len(block)
        half = n // 2
        inverse_flag = np.r_[np.zeros(half, np.int64), np.ones(n - half, np.int64)]
        keys.append(np.stack([block[:, 3], np.full(n, split_idx), inverse_flag, np.arange(n)], axis=1))
        rows.append(block)
    all_rows = np.concatenate(rows) if rows else np.zeros((0, 4), np.int64)
    all_keys = np.concatenate(keys) if keys else np.zeros((0, 4), np.int64)
    order = np.lexsort(all_keys[:, ::-1].T)
    facts = all_rows[order]

    sizes = [len(b) for b in blocks] + [0] * (3 - len(blocks))
    starts = np.cumsum([0] + sizes)
    split_ranges = [(int(starts[i]), int(starts[i + 1])) for i in range(3)]
    tkg = TemporalKG(facts, entities, relations, num_times, time_values, granularity)

    def _max_t(block):
        return int(block[:, 3].max()) if len(block) else -1

    split = DatasetSplit(
        train=split_ranges[0],
        valid=split_ranges[1],
        test=split_ranges[2],
        boundary_timestamps=(_max_t(blocks[0]), _max_t(blocks[1]) if len(blocks) > 1 else -1),
        base_counts={names[i]: sizes[i] // 2 for i in range(3)},
    )
    return tkg, split


def load_dataset(train_path, valid_path, test_path) -> tuple[TemporalKG, DatasetSplit]:
    """Load three quadruple TSV files into one TemporalKG plus split ranges.

    Vocabulary ids follow first appearance: train file first, then valid,
    then test. Facts in a later split may not precede facts of an earlier one.
    """
    entities, relations = Vocab(), Vocab()
    parts = []
    for path in (train_path, valid_path, test_path):
        path = Path(path)
        try:
            parts.append(_read_lines(path, entities, relations))
        except ParseError as exc:
            raise ParseError(f"{path}: {exc}") from None
    return build_tkg(parts, entities, relations)


def split_view(tkg: TemporalKG, span: tuple[int, int]) -> TemporalKG:
    return tkg.slice(*span)


def save_bundle(path, tkg: TemporalKG, split: DatasetSplit) -> None:
    meta = {
        "kind": "dataset",
        "entities": tkg.entities.to_list(),
        "relations": tkg.relations.to_list(),
        "num_times": tkg.num_times,
        "time_values": tkg.time_values,
        "granularity": tkg.granularity,
        "split": {
            "train": list(split.train),
            "valid": list(split.valid),
            "test": list(split.test),
            "boundary_timestamps": list(split.boundary_timestamps),
            "base_counts": split.base_counts,
        },
    }
    container.save(path, {"facts": tkg.facts}, meta)


def load_bundle(path) -> tuple[TemporalKG, DatasetSplit]:
    arrays, meta = container.load(path)
    if meta.get("kind") != "dataset":
        raise ValidationError(f"{path} is not a dataset bundle")
    tkg = TemporalKG(
        arrays["facts"],
        Vocab(meta["entities"]),
        Vocab(meta["relations"]),
        meta["num_times"],
        meta["time_values"],
        meta["granularity"],
    )
    sp = meta["split"]
    split = DatasetSplit(
        train=tuple(sp["train"]),
        valid=tuple(sp["valid"]),
        test=tuple(sp["test"]),
        boundary_timestamps=tuple(sp["boundary_timestamps"]),
        base_counts=dict(sp["base_counts"]),
    )
    return tkg, split
