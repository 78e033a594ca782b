"""Small shared builders for model-level tests."""

import numpy as np

from stkadapter.backbone import BackboneConfig, Example, ModelState
from stkadapter.data import Quadruple
from stkadapter.encoder import GraphState
from stkadapter.instructions import SymbolVocab, build_instruction
from stkadapter.rules import EventChain


def toy_vocab(num_entities=5, num_relation_ids=4, num_times=12, max_events=6) -> SymbolVocab:
    return SymbolVocab(num_entities, num_relation_ids, num_times, max_events + 1)


def random_instruction(vocab: SymbolVocab, rng, n_events=None, with_gold=True):
    """A valid instruction over random events that precede a random query."""
    max_ev = vocab.num_indices - 1
    n = int(rng.integers(0, max_ev + 1)) if n_events is None else n_events
    t_q = int(rng.integers(max(n, 1), vocab.num_times))
    times = sorted(rng.integers(0, t_q, size=n).tolist())
    events = tuple(
        Quadruple(int(rng.integers(vocab.num_entities)), int(rng.integers(vocab.num_relation_ids)),
                  int(rng.integers(vocab.num_entities)), t)
        for t in times
    )
    query = (int(rng.integers(vocab.num_entities)), int(rng.integers(vocab.num_relation_ids)), t_q)
    gold = int(rng.integers(vocab.num_entities)) if with_gold else None
    return build_instruction(query, EventChain(events, ("x",) * n), vocab, gold)


def random_graph(d_g: int, rng) -> GraphState:
    h = rng.normal(size=(1, 2 * d_g))
    return GraphState(h, h)


def toy_model(vocab_size: int, d_t=8, d_g=4, n_layers=2, n_heads=2, n_experts=2, top_k=1, d_k=3,
              seed=0, max_seq_len=96, alpha=0.5, randomize=0.0, **kw) -> ModelState:
    cfg = BackboneConfig(vocab_size=vocab_size, d_t=d_t, n_layers=n_layers, n_heads=n_heads, d_ffn=2 * d_t,
                         max_seq_len=max_seq_len, n_experts=n_experts, top_k=top_k, d_k=d_k, d_g=d_g,
                         seed=seed, alpha=alpha, **kw)
    state = ModelState(cfg)
    if randomize:
        rng = np.random.default_rng(seed + 1000)
        for p in state.parameters():
            if not p.name.endswith(("gamma", "beta")):
                p.data = rng.normal(0, randomize, p.shape)
    return state


def toy_examples(vocab, d_g, rng, count):
    return [Example(random_instruction(vocab, rng), random_graph(d_g, rng)) for _ in range(count)]
