"""Temporal logic rules: mining by time-decreasing walks, confidence, retrieval.

A rule ``head(X, Y, t) <- b1(X, Z1, t1) & b2(Z1, Z2, t2) & ... & bL(Z_{L-1}, Y, tL)``
requires ``t1 < t2 < ... < tL < t``. Walks start at the object of a head fact
and step backwards in time until they return to the subject; the visited
relations, inverted and reversed, form a candidate body.
"""

from __future__ import annotations

import logging
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, NamedTuple, Sequence

import numpy as np

from .data import Quadruple, TemporalKG

log = logging.getLogger(__name__)

RULES_HEADER = "# stk-adapter rules v1"
RECENCY = "recency-fallback"


@dataclass(frozen=True)
class TemporalRule:
    head: int
    body: tuple[int, ...]
    support: int = 0
    body_support: int = 0
    confidence: float = 0.0

    def __post_init__(self):
        if len(self.body) < 1:
            raise ValueError("rule body needs at least one relation")

    @property
    def rule_id(self) -> str:
        return f"{self.head}<-" + ",".join(map(str, self.body))

    def sort_key(self):
        return (-self.confidence, -self.support, self.body)


@dataclass
class RuleSet:
    rules_by_head: dict[int, list[TemporalRule]] = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def __post_init__(self):
        for head in self.rules_by_head:
            self.rules_by_head[head] = sorted(self.rules_by_head[head], key=TemporalRule.sort_key)

    def __len__(self) -> int:
        return sum(len(v) for v in self.rules_by_head.values())

    def __iter__(self) -> Iterator[TemporalRule]:
        for head in sorted(self.rules_by_head):
            yield from self.rules_by_head[head]

    def for_head(self, head: int) -> list[TemporalRule]:
        return self.rules_by_head.get(head, [])

    def to_text(self) -> str:
        lines = [RULES_HEADER]
        cfg = " ".join(f"{k}={v}" for k, v in sorted(self.config.items()))
        lines.append(f"# config {cfg}")
        lines.append("head\tbody\tsupport\tbody_support\tconfidence")
        for rule in self:
            body = ",".join(map(str, rule.body))
            lines.append(f"{rule.head}\t{body}\t{rule.support}\t{rule.body_support}\t{rule.confidence!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "RuleSet":
        lines = text.splitlines()
        if not lines or lines[0].strip() != RULES_HEADER:
            raise ValueError("missing rules format header")
        config: dict = {}
        by_head: dict[int, list[TemporalRule]] = defaultdict(list)
        for line in lines[1:]:
            if line.startswith("# config"):
                for item in line[len("# config"):].split():
                    key, _, value = item.partition("=")
                    config[key] = _coerce(value)
                continue
            if not line.strip() or line.startswith("#") or line.startswith("head\t"):
                continue
            head, body, support, body_support, confidence = line.split("\t")
            rule = TemporalRule(int(head), tuple(int(b) for b in body.split(",")),
                                int(support), int(body_support), float(confidence))
            by_head[rule.head].append(rule)
        return cls(dict(by_head), config)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "RuleSet":
        return cls.from_text(Path(path).read_text(encoding="utf-8"))


def _coerce(value: str):
    for cast in (int, float):
        try:
            return cast(value)
        except ValueError:
            pass
    return value


# transition distribution ------------------------------------------------------

def transition_probabilities(times, t_ref: float) -> np.ndarray:
    """``exp(t_u - t_ref) / sum exp(t_u' - t_ref)`` over the candidate edge times."""
    times = np.asarray(times, dtype=np.float64)
    if times.size == 0:
        raise ValueError("no candidate edges")
    z = times - t_ref
    z = z - z.max()
    w = np.exp(z)
    return w / w.sum()


def sample_transition(rng: np.random.Generator, times, t_ref: float) -> int:
    p = transition_probabilities(times, t_ref)
    return int(rng.choice(len(p), p=p))


# walks ------------------------------------------------------------------------

def _earlier_edges(tkg: TemporalKG, node: int, before: int) -> np.ndarray:
    rows = tkg.by_subject.get(node)
    if rows is None:
        return np.zeros((0, 4), dtype=np.int64)
    cut = np.searchsorted(rows[:, 3], before, side="left")
    return rows[:cut]


def temporal_walk(tkg: TemporalKG, head_fact, length: int, rng: np.random.Generator) -> tuple[int, ...] | None:
    """One cyclic time-decreasing walk; returns the rule body it induces, or None."""
    s, _, o, t_q = (int(x) for x in head_fact)
    node, cur_t = o, t_q
    walked: list[int] = []
    for step in range(length):
        cand = _earlier_edges(tkg, node, cur_t)
        if step == length - 1:
            cand = cand[cand[:, 2] == s]
        if len(cand) == 0:
            return None
        edge = cand[sample_transition(rng, cand[:, 3], t_q)]
        walked.append(int(edge[1]))
        node, cur_t = int(edge[2]), int(edge[3])
    return tuple(tkg.inverse(r) for r in reversed(walked))


# groundings and confidence ----------------------------------------------------

def iter_groundings(
    tkg: TemporalKG,
    body: Sequence[int],
    anchor: int | None = None,
    before: int | None = None,
) -> Iterator[tuple[np.ndarray, ...]]:
    """Yield every chain of facts matching ``body`` with strictly increasing times.

    With ``anchor`` the first fact must have that subject; with ``before``
    every fact must be strictly earlier than that time.
    """
    limit = tkg.num_times if before is None else before

    if anchor is None:
        first = tkg.by_relation.get(body[0], np.zeros((0, 4), np.int64))
    else:
        first = tkg.by_subject_relation.get((anchor, body[0]), np.zeros((0, 4), np.int64))
    first = first[first[:, 3] < limit]

    def extend(prefix: tuple, level: int):
        if level == len(body):
            yield prefix
            return
        last = prefix[-1]
        rows = tkg.by_subject_relation.get((int(last[2]), body[level]))
        if rows is None:
            return
        lo = np.searchsorted(rows[:, 3], last[3], side="right")
        hi = np.searchsorted(rows[:, 3], limit, side="left")
        for row in rows[lo:hi]:
            yield from extend(prefix + (row,), level + 1)

    for row in first:
        yield from extend((row,), 1)


class Confidence(NamedTuple):
    value: float
    support: int
    body_support: int
    no_body: bool


def rule_confidence(rule: TemporalRule, tkg: TemporalKG) -> Confidence:
    """Exhaustive TLogic-style confidence: support / body_support.

    A body grounding ``X -> ... -> Y`` (last time ``tL``) supports the rule when
    some fact ``(X, head, Y, t)`` with ``t > tL`` exists.
    """
    latest: dict[tuple[int, int], int] = {}
    head_rows = tkg.by_relation.get(rule.head)
    if head_rows is not None:
        for s, _, o, t in head_rows.tolist():
            key = (s, o)
            if t > latest.get(key, -1):
                latest[key] = t
    body_support = support = 0
    for chain in iter_groundings(tkg, rule.body):
        body_support += 1
        x, y, t_last = int(chain[0][0]), int(chain[-1][2]), int(chain[-1][3])
        if latest.get((x, y), -1) > t_last:
            support += 1
    if body_support == 0:
        return Confidence(0.0, 0, 0, True)
    return Confidence(support / body_support, support, body_support, False)


def mine_rules(
    tkg: TemporalKG,
    walks_per_relation: int = 100,
    max_body_len: int = 3,
    seed: int = 0,
) -> RuleSet:
    """Mine rules for every relation (inverses included) that has facts.

    Each head relation gets its own generator seeded from ``(seed, head)``, so
    heads can be mined independently and merged in any order.
    """
    if len(tkg) == 0:
        raise ValueError("cannot mine rules on an empty graph")
    rules: dict[int, list[TemporalRule]] = {}
    for head in range(2 * tkg.num_relations):
        head_facts = tkg.by_relation.get(head)
        if head_facts is None:
            log.warning("relation %d has no facts; skipped", head)
            continue
        rng = np.random.default_rng([seed, head])
        bodies: set[tuple[int, ...]] = set()
        for length in range(1, max_body_len + 1):
            for _ in range(walks_per_relation):
                fact = head_facts[rng.integers(len(head_facts))]
                body = temporal_walk(tkg, fact, length, rng)
                if body is not None:
                    bodies.add(body)
        found = []
        for body in sorted(bodies):
            conf = rule_confidence(TemporalRule(head, body), tkg)
            found.append(TemporalRule(head, body, conf.support, conf.body_support, conf.value))
        if found:
            rules[head] = found
    config = {"walks_per_relation": walks_per_relation, "max_body_len": max_body_len, "seed": seed}
    return RuleSet(rules, config)


def filter_rules(rules: RuleSet, min_confidence: float = 0.0, top_n: int | None = None) -> RuleSet:
    kept = {}
    for head, lst in rules.rules_by_head.items():
        lst = [r for r in lst if r.confidence >= min_confidence]
        if top_n is not None:
            lst = lst[:top_n]
        if lst:
            kept[head] = lst
    config = dict(rules.config, min_confidence=min_confidence, top_n=top_n if top_n is not None else "inf")
    return RuleSet(kept, config)


# retrieval --------------------------------------------------------------------

@dataclass(frozen=True)
class EventChain:
    events: tuple[Quadruple, ...] = ()
    provenance: tuple[str, ...] = ()

    def __len__(self) -> int:
        return len(self.events)


def retrieve_chain(
    query: tuple[int, int, int],
    rules: RuleSet,
    tkg: TemporalKG,
    max_events: int = 50,
    max_groundings: int = 10_000,
) -> EventChain:
    """Collect facts that ground the query relation's rules from its subject.

    Rules are visited in confidence order until ``max_events`` distinct facts
    are found; any shortfall is filled with the subject's most recent facts.
    The result keeps the ``max_events`` most recent events, oldest first.
    Only facts strictly before the query time are used.
    """
    s, r, t_q = (int(x) for x in query)
    if t_q < 1:
        return EventChain()
    found: dict[Quadruple, str] = {}
    for rule in rules.for_head(r):
        n = 0
        for chain in iter_groundings(tkg, rule.body, anchor=s, before=t_q):
            for row in chain:
                q = Quadruple(*map(int, row))
                found.setdefault(q, rule.rule_id)
            n += 1
            if n >= max_groundings:
                break
        if len(found) >= max_events:
            break
    if len(found) < max_events:
        recent = _earlier_edges(tkg, s, t_q)[::-1]
        for row in recent:
            if len(found) >= max_events:
                break
            found.setdefault(Quadruple(*map(int, row)), RECENCY)
    ordered = sorted(found, key=lambda q: (q.timestamp, q.subject, q.relation, q.object))
    ordered = ordered[-max_events:] if max_events > 0 else []
    return EventChain(tuple(ordered), tuple(found[q] for q in ordered))
