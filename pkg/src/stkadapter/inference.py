"""Beam-search decoding, hybrid LLM/graph ranking and single-step Hit@K evaluation."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from .adapter import ConfigError
from .backbone import ModelState, RoutingStats, make_batch, model_forward
from .data import TemporalKG, ValidationError
from .encoder import EncoderParams, encode_history, initial_graph_repr, tkg_score, GraphState
from .instructions import TARGET_LEN, InstructionSequence, SymbolVocab, build_instruction, resolve_entity
from .rules import EventChain, RuleSet, retrieve_chain
from .sampler import history_or_empty

log = logging.getLogger(__name__)

StepFn = Callable[[list[list[int]]], np.ndarray]


@dataclass
class BeamCandidate:
    tokens: list[int]
    log_prob: float
    entity: int | None = None

    @property
    def resolved(self) -> bool:
        return self.entity is not None


def beam_search_steps(step_fn: StepFn, beam_width: int, max_len: int, end_token: int | None = None) -> list[BeamCandidate]:
    """Generic beam search.

    ``step_fn`` maps a list of prefixes to ``[len(prefixes), V]`` next-token
    log-probabilities. Each beam expands by its top ``beam_width`` tokens and
    the global top ``beam_width`` survive by summed log-probability. Ties
    break toward the earlier (beam, token) pair. Beams ending in
    ``end_token`` are kept as finished and not expanded.
    """
    if beam_width < 1:
        raise ConfigError("beam width must be at least 1")
    if max_len < 1:
        raise ConfigError("max_len must be at least 1")
    # each beam: (tokens, score, finished)
    beams: list[tuple[list[int], float, bool]] = [([], 0.0, False)]
    for _ in range(max_len):
        live = [b for b in beams if not b[2]]
        if not live:
            break
        logp = np.asarray(step_fn([b[0] for b in live]), dtype=np.float64)
        k = min(beam_width, logp.shape[1])
        pool: list[tuple[list[int], float, bool]] = []
        i = 0
        for seq, score, finished in beams:
            if finished:
                pool.append((seq, score, True))
                continue
            for tok in np.argsort(-logp[i], kind="stable")[:k].tolist():
                pool.append((seq + [tok], score + float(logp[i, tok]), end_token is not None and tok == end_token))
            i += 1
        pool.sort(key=lambda b: -b[1])   # stable: earlier beams and tokens win ties
        beams = pool[:beam_width]
    return [BeamCandidate(seq, score) for seq, score, _ in beams]


def model_step_fn(state: ModelState, instruction: InstructionSequence, graph: GraphState | None,
                  use_adapters: bool = True) -> StepFn:
    prompt, tau = instruction.model_inputs(extra=0)
    q_pos = instruction.query_time_position

    def step(prefixes: list[list[int]]) -> np.ndarray:
        seqs = []
        for p in prefixes:
            toks = np.concatenate([prompt, np.asarray(p, dtype=np.int64)])
            seqs.append((toks, np.concatenate([tau, np.full(len(p), q_pos, dtype=np.int64)])))
        batch = make_batch(seqs, [graph] * len(seqs) if graph is not None else None, state.cfg.d_g)
        with ag.no_grad():
            res = model_forward(state, batch, use_adapters=use_adapters and graph is not None)
        last = batch.lengths - 1
        logits = res.logits.data[np.arange(len(seqs)), last]
        shifted = logits - logits.max(axis=-1, keepdims=True)
        return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))

    return step


def beam_search(state: ModelState, instruction: InstructionSequence, graph: GraphState | None,
                vocab: SymbolVocab, beam_width: int = 20, max_len: int = TARGET_LEN,
                use_adapters: bool = True) -> list[BeamCandidate]:
    """Decode answers ``k . o ]`` and resolve them to entity ids."""
    cands = beam_search_steps(model_step_fn(state, instruction, graph, use_adapters), beam_width, max_len, vocab.end)
    for c in cands:
        c.entity = resolve_entity(c.tokens, instruction, vocab)
    return cands


# ranking ------------------------------------------------------------------------

def llm_scores(candidates: Sequence[BeamCandidate], num_entities: int) -> np.ndarray:
    """Softmax over candidate log-probs, max-aggregated per resolved entity."""
    s = np.zeros(num_entities)
    if not candidates:
        return s
    lp = np.array([c.log_prob for c in candidates])
    p = np.exp(lp - lp.max())
    p /= p.sum()
    for c, pi in zip(candidates, p):
        if c.entity is not None and 0 <= c.entity < num_entities:
            s[c.entity] = max(s[c.entity], pi)
    return s


def hybrid_scores(candidates: Sequence[BeamCandidate], tkg_dist: np.ndarray, lam: float) -> np.ndarray:
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    tkg_dist = np.asarray(tkg_dist, dtype=np.float64)
    return (1.0 - lam) * llm_scores(candidates, len(tkg_dist)) + lam * tkg_dist


def hybrid_rank(candidates: Sequence[BeamCandidate], tkg_dist, lam: float) -> list[int]:
    """Entities with positive hybrid score, best first; ties go to the lower id."""
    s = hybrid_scores(candidates, tkg_dist, lam)
    ids = np.flatnonzero(s > 0)
    order = np.lexsort((ids, -s[ids]))
    return ids[order].tolist()


def hit_at_k(ranking: Sequence[int], truth: int, k: int) -> int:
    if k < 1:
        raise ValueError("K must be at least 1")
    return int(truth in list(ranking[:k]))


# evaluation ------------------------------------------------------------------------

@dataclass
class EvalConfig:
    beam_width: int = 20
    lam: float = 0.1
    max_len: int = TARGET_LEN
    max_events: int = 8
    fanout: int = 10
    depth: int = 1
    window: int = 16
    seed: int = 0
    append_gold: bool = True
    use_adapters: bool = True
    hybrid: bool = True
    max_queries: int | None = None


@dataclass
class QueryResult:
    query: tuple[int, int, int]
    gold: int
    ranking: list[int]
    chain: EventChain


@dataclass
class EvalReport:
    hit1: float
    hit3: float
    hit10: float
    num_queries: int
    config: dict
    results: list[QueryResult] = field(default_factory=list)
    unresolved: int = 0
    routing: RoutingStats | None = None

    def to_text(self) -> str:
        lines = ["# stk-adapter eval v1",
                 f"hit@1\t{self.hit1:.6f}", f"hit@3\t{self.hit3:.6f}", f"hit@10\t{self.hit10:.6f}",
                 f"queries\t{self.num_queries}", f"unresolved_candidates\t{self.unresolved}"]
        for k in sorted(self.config):
            lines.append(f"config.{k}\t{self.config[k]}")
        return "\n".join(lines) + "\n"

    def rankings_text(self, top: int = 10) -> str:
        lines = ["subject\trelation\ttime\tgold\tranking"]
        for r in self.results:
            s, rel, t = r.query
            lines.append(f"{s}\t{rel}\t{t}\t{r.gold}\t{','.join(map(str, r.ranking[:top]))}")
        return "\n".join(lines) + "\n"


def check_compatible(state: ModelState, encoder: EncoderParams, tkg: TemporalKG, vocab: SymbolVocab) -> None:
    """Raise :class:`ValidationError` if checkpoints and dataset disagree on vocabularies."""
    problems = []
    if state.cfg.vocab_size != len(vocab):
        problems.append(f"model vocab {state.cfg.vocab_size} != symbol vocab {len(vocab)}")
    if encoder.num_entities != tkg.num_entities:
        problems.append(f"encoder has {encoder.num_entities} entities, dataset {tkg.num_entities}")
    if encoder.num_relation_ids != 2 * tkg.num_relations:
        problems.append(f"encoder has {encoder.num_relation_ids} relation ids, dataset {2 * tkg.num_relations}")
    if vocab.num_entities != tkg.num_entities or vocab.num_relation_ids != 2 * tkg.num_relations:
        problems.append("symbol vocabulary was built for a different dataset")
    if vocab.num_times < tkg.num_times:
        problems.append("symbol vocabulary lacks time tokens for this dataset")
    if encoder.dim != state.cfg.d_g:
        problems.append(f"encoder dim {encoder.dim} != model d_g {state.cfg.d_g}")
    if problems:
        raise ValidationError("; ".join(problems))


def prepare_query(query: tuple[int, int, int], history: TemporalKG, rules: RuleSet, vocab: SymbolVocab,
                  encoder: EncoderParams, cfg: EvalConfig, gold: int | None = None):
    chain = retrieve_chain(query, rules, history, max_events=cfg.max_events)
    instruction = build_instruction(query, chain, vocab, gold)
    sub = history_or_empty(history, query, fanout=cfg.fanout, depth=cfg.depth, window=cfg.window, seed=cfg.seed)
    with ag.no_grad():
        enc = encode_history(sub, encoder)
    graph = initial_graph_repr(enc, query[:2])
    return chain, instruction, graph, enc


def evaluate(state: ModelState, encoder: EncoderParams, rules: RuleSet, tkg: TemporalKG,
             test_span: tuple[int, int], vocab: SymbolVocab, cfg: EvalConfig | None = None,
             ranker: Callable | None = None) -> EvalReport:
    """Single-step evaluation over the test facts (both directions).

    Queries are visited in time order. With ``append_gold`` the history for
    time ``t`` holds every fact before ``t``, test facts included, so each
    timestamp's gold facts become visible before the next one. Without it
    the history stops at the first test timestamp.

    ``ranker(query, gold, candidates, tkg_dist)`` may replace hybrid ranking
    (used by tests to plug in oracle rankers).
    """
    cfg = cfg or EvalConfig()
    check_compatible(state, encoder, tkg, vocab)
    test = tkg.facts[test_span[0]:test_span[1]]
    if cfg.max_queries is not None:
        test = test[: cfg.max_queries]
    if not len(test):
        raise ValueError("test split is empty")
    frozen = tkg.before(int(test[:, 3].min()))
    routing = RoutingStats.empty(state.cfg.n_layers, state.cfg.n_experts)
    results: list[QueryResult] = []
    hits = np.zeros(3)
    unresolved = 0
    cache: dict[int, TemporalKG] = {}
    for row in test:
        s, r, o, t = (int(x) for x in row)
        if cfg.append_gold:
            history = cache.setdefault(t, tkg.before(t))
        else:
            history = frozen
        chain, instruction, graph, enc = prepare_query((s, r, t), history, rules, vocab, encoder, cfg)
        cands = beam_search(state, instruction, graph, vocab, cfg.beam_width, cfg.max_len, cfg.use_adapters)
        unresolved += sum(1 for c in cands if not c.resolved)
        tkg_dist = tkg_score(enc, (s, r), np.arange(tkg.num_entities), encoder)
        if ranker is not None:
            ranking = ranker((s, r, t), o, cands, tkg_dist)
        else:
            ranking = hybrid_rank(cands, tkg_dist, cfg.lam if cfg.hybrid else 0.0)
        hits += [hit_at_k(ranking, o, k) for k in (1, 3, 10)]
        results.append(QueryResult((s, r, t), o, ranking, chain))
        if cfg.use_adapters:
            toks, tau = instruction.model_inputs(extra=0)
            with ag.no_grad():
                res = model_forward(state, make_batch([(toks, tau)], [graph], state.cfg.d_g))
            routing.add(res.records)
    n = len(results)
    h1, h3, h10 = (hits / n).tolist()
    echo = {"beam_width": cfg.beam_width, "lambda": cfg.lam if cfg.hybrid else 0.0, "append_gold": cfg.append_gold,
            "max_events": cfg.max_events, "use_adapters": cfg.use_adapters}
    if unresolved:
        log.info("%d beam candidates did not resolve to an entity and were dropped", unresolved)
    return EvalReport(h1, h3, h10, n, echo, results, unresolved, routing)
