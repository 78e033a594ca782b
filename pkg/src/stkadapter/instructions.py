"""Linearize retrieved event chains into token sequences.

Every event renders as ``t: [s, r, k.o]`` where ``k`` is a per-instruction
index for object ``o``; the query renders as the open prefix ``t: [s, r,``.
Tokens are atomic symbols (one per entity, relation, time id, index value,
punctuation mark), so each event occupies exactly 11 tokens and the query
prefix 7.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import TemporalKG
from .rules import EventChain

PAD, BOS = "<pad>", "<bos>"
PUNCT = (":", "[", ",", ".", "]")
END = "]"

EVENT_LEN = 11
QUERY_LEN = 7
TARGET_LEN = 4


class SymbolVocab:
    """Token inventory with a class tag per token."""

    def __init__(self, num_entities: int, num_relation_ids: int, num_times: int, num_indices: int,
                 entity_names=None, relation_names=None, time_values=None):
        self.num_entities = num_entities
        self.num_relation_ids = num_relation_ids
        self.num_times = num_times
        self.num_indices = num_indices
        self.tokens: list[str] = []
        self.classes: list[str] = []
        self._entity_names = list(entity_names) if entity_names is not None else [str(i) for i in range(num_entities)]
        self._relation_names = (list(relation_names) if relation_names is not None
                                else [str(i) for i in range(num_relation_ids)])
        self._time_values = list(time_values) if time_values is not None else list(range(num_times))

        def add(tok, cls):
            self.tokens.append(tok)
            self.classes.append(cls)

        add(PAD, "special")
        add(BOS, "special")
        for p in PUNCT:
            add(p, "punct")
        self.index_base = len(self.tokens)
        for k in range(num_indices):
            add(f"#{k}", "index")
        self.entity_base = len(self.tokens)
        for e in range(num_entities):
            add(f"E:{e}", "entity")
        self.relation_base = len(self.tokens)
        for r in range(num_relation_ids):
            add(f"R:{r}", "relation")
        self.time_base = len(self.tokens)
        for t in range(num_times):
            add(f"T:{t}", "time")
        self._lookup = {tok: i for i, tok in enumerate(self.tokens)}

    @classmethod
    def from_tkg(cls, tkg: TemporalKG, max_events: int) -> "SymbolVocab":
        n_rel = 2 * tkg.num_relations
        return cls(tkg.num_entities, n_rel, tkg.num_times, max_events + 1,
                   tkg.entities.to_list(), [tkg.relation_name(r) for r in range(n_rel)], tkg.time_values)

    def __len__(self) -> int:
        return len(self.tokens)

    def id(self, token: str) -> int:
        return self._lookup[token]

    @property
    def pad(self) -> int:
        return 0

    @property
    def bos(self) -> int:
        return 1

    @property
    def end(self) -> int:
        return self._lookup[END]

    def entity(self, e: int) -> int:
        if not 0 <= e < self.num_entities:
            raise IndexError(f"entity id {e} out of range")
        return self.entity_base + e

    def relation(self, r: int) -> int:
        if not 0 <= r < self.num_relation_ids:
            raise IndexError(f"relation id {r} out of range")
        return self.relation_base + r

    def time(self, t: int) -> int:
        if not 0 <= t < self.num_times:
            raise IndexError(f"time id {t} out of range")
        return self.time_base + t

    def index(self, k: int) -> int:
        if not 0 <= k < self.num_indices:
            raise IndexError(f"index {k} exceeds the {self.num_indices} index tokens")
        return self.index_base + k

    def token_class(self, token_id: int) -> str:
        return self.classes[token_id]

    def decode_value(self, token_id: int) -> int | None:
        """Integer payload of an entity/relation/time/index token (None otherwise)."""
        cls = self.classes[token_id]
        base = {"index": self.index_base, "entity": self.entity_base,
                "relation": self.relation_base, "time": self.time_base}.get(cls)
        return None if base is None else token_id - base

    def render(self, token_id: int) -> str:
        cls = self.classes[token_id]
        value = self.decode_value(token_id)
        if cls == "entity":
            return self._entity_names[value]
        if cls == "relation":
            return self._relation_names[value]
        if cls == "time":
            return str(self._time_values[value])
        if cls == "index":
            return str(value)
        return self.tokens[token_id]

    def signature(self) -> dict:
        return {"num_entities": self.num_entities, "num_relation_ids": self.num_relation_ids,
                "num_times": self.num_times, "num_indices": self.num_indices, "size": len(self)}


@dataclass
class InstructionSequence:
    tokens: list[int]
    time_map: list[int]
    event_spans: list[tuple[int, int]]
    candidate_index: dict[int, int]
    query: tuple[int, int, int]
    target: list[int] = field(default_factory=list)
    gold: int | None = None

    @property
    def query_time_position(self) -> int:
        return self.event_spans[-1][0]

    def __len__(self) -> int:
        return len(self.tokens)

    def model_inputs(self, extra: int | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Token ids and time map for the prompt followed by the target.

        Positions past the prompt continue the query line, so they map to the
        query's time token. ``extra`` overrides how many positions follow the
        prompt (default: the full target).
        """
        n_extra = len(self.target) if extra is None else extra
        toks = np.asarray(self.tokens + self.target[:n_extra], dtype=np.int64)
        tau = np.asarray(self.time_map + [self.query_time_position] * n_extra, dtype=np.int64)
        return toks[: len(self.tokens) + n_extra], tau

    def render(self, vocab: SymbolVocab) -> str:
        lines = []
        for start, end in self.event_spans:
            parts = [vocab.render(t) for t in self.tokens[start:end]]
            lines.append(_join(parts))
        if self.target:
            lines[-1] = lines[-1] + " " + _join([vocab.render(t) for t in self.target])
        return "\n".join(lines)

    def to_record(self) -> dict:
        return {
            "tokens": self.tokens,
            "time_map": self.time_map,
            "event_spans": [list(s) for s in self.event_spans],
            "candidate_index": {str(k): v for k, v in self.candidate_index.items()},
            "query": list(self.query),
            "target": self.target,
            "gold": self.gold,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "InstructionSequence":
        return cls(
            tokens=list(rec["tokens"]),
            time_map=list(rec["time_map"]),
            event_spans=[tuple(s) for s in rec["event_spans"]],
            candidate_index={int(k): v for k, v in rec["candidate_index"].items()},
            query=tuple(rec["query"]),
            target=list(rec["target"]),
            gold=rec["gold"],
        )


def _join(parts: list[str]) -> str:
    # "330 : [ E1 , R1 , 0 . E2 ]" -> "330: [E1, R1, 0.E2]"
    out = ""
    for p in parts:
        if p in (":", ","):
            out += p
        elif p in (".", "]") or out.endswith("[") or out.endswith("."):
            out += p
        elif out:
            out += " " + p
        else:
            out = p
    return out


def build_instruction(
    query: tuple[int, int, int],
    chain: EventChain,
    vocab: SymbolVocab,
    gold: int | None = None,
) -> InstructionSequence:
    s, r, t_q = (int(x) for x in query)
    tokens = [vocab.bos]
    time_map = [0]
    spans: list[tuple[int, int]] = []
    index_of: dict[int, int] = {}
    for ev in chain.events:
        if ev.timestamp >= t_q:
            raise ValueError(f"event at time {ev.timestamp} does not precede query time {t_q}")
        k = index_of.setdefault(ev.object, len(index_of))
        start = len(tokens)
        tokens += [vocab.time(ev.timestamp), vocab.id(":"), vocab.id("["), vocab.entity(ev.subject),
                   vocab.id(","), vocab.relation(ev.relation), vocab.id(","), vocab.index(k),
                   vocab.id("."), vocab.entity(ev.object), vocab.id("]")]
        time_map += [start] * EVENT_LEN
        spans.append((start, len(tokens)))
    start = len(tokens)
    tokens += [vocab.time(t_q), vocab.id(":"), vocab.id("["), vocab.entity(s), vocab.id(","),
               vocab.relation(r), vocab.id(",")]
    time_map += [start] * QUERY_LEN
    spans.append((start, len(tokens)))

    target: list[int] = []
    if gold is not None:
        k = index_of.get(gold, len(index_of))
        target = [vocab.index(k), vocab.id("."), vocab.entity(gold), vocab.end]
    candidate_index = {k: e for e, k in index_of.items()}
    return InstructionSequence(tokens, time_map, spans, candidate_index, (s, r, t_q), target, gold)


def resolve_entity(generated: list[int], instruction: InstructionSequence, vocab: SymbolVocab) -> int | None:
    """Map generated ``k . o ]`` tokens to an entity id, or None if unresolvable.

    A known index resolves through the instruction's candidate index. The
    next fresh index resolves to the generated entity token, which is how a
    gold answer absent from the chain is written.
    """
    if len(generated) < 3 or vocab.token_class(generated[0]) != "index":
        return None
    if vocab.tokens[generated[1]] != ".":
        return None
    k = vocab.decode_value(generated[0])
    if k in instruction.candidate_index:
        return instruction.candidate_index[k]
    if k == len(instruction.candidate_index) and vocab.token_class(generated[2]) == "entity":
        return vocab.decode_value(generated[2])
    return None
