import numpy as np
import pytest

from stkadapter.data import Quadruple
from stkadapter.instructions import (EVENT_LEN, QUERY_LEN, SymbolVocab, build_instruction, resolve_entity)
from stkadapter.rules import EventChain

from toy import random_instruction, toy_vocab


def named_vocab():
    # entity 0 = E1, entity 1 = E2; relation 0 = R1; time ids 0, 1 = 330, 331
    return SymbolVocab(2, 1, 2, 4, entity_names=["E1", "E2"], relation_names=["R1"], time_values=[330, 331])


def test_template_rendering():
    vocab = named_vocab()
    chain = EventChain((Quadruple(0, 0, 1, 0),), ("rule",))
    inst = build_instruction((0, 0, 1), chain, vocab)
    assert inst.render(vocab) == "330: [E1, R1, 0.E2]\n331: [E1, R1,"
    assert len(inst) == 1 + EVENT_LEN + QUERY_LEN


def test_gold_target_reuses_the_chain_index():
    vocab = named_vocab()
    inst = build_instruction((0, 0, 1), EventChain((Quadruple(0, 0, 1, 0),), ("x",)), vocab, gold=1)
    assert inst.render(vocab).splitlines()[-1] == "331: [E1, R1, 0.E2]"
    assert resolve_entity(inst.target, inst, vocab) == 1


def test_unseen_gold_gets_a_fresh_index():
    vocab = named_vocab()
    inst = build_instruction((0, 0, 1), EventChain((Quadruple(0, 0, 1, 0),), ("x",)), vocab, gold=0)
    assert vocab.decode_value(inst.target[0]) == 1
    assert resolve_entity(inst.target, inst, vocab) == 0


def test_empty_chain_is_only_the_query_prefix():
    vocab = named_vocab()
    inst = build_instruction((1, 0, 1), EventChain(), vocab)
    assert inst.render(vocab) == "331: [E2, R1,"
    assert inst.event_spans == [(1, 1 + QUERY_LEN)]
    assert set(inst.time_map[1:]) == {1}


def test_shared_object_shares_an_index():
    vocab = toy_vocab()
    events = (Quadruple(0, 0, 2, 1), Quadruple(3, 1, 2, 2), Quadruple(1, 0, 4, 3))
    inst = build_instruction((0, 0, 5), EventChain(events, ("x",) * 3), vocab)
    # independent scan: index = order of first appearance among objects
    seen = []
    for q in events:
        if q.object not in seen:
            seen.append(q.object)
    assert inst.candidate_index == dict(enumerate(seen))
    idx = [vocab.decode_value(inst.tokens[a + 7]) for a, _ in inst.event_spans[:-1]]
    assert idx == [0, 0, 1]


def test_event_at_query_time_is_rejected():
    vocab = named_vocab()
    with pytest.raises(ValueError):
        build_instruction((0, 0, 1), EventChain((Quadruple(0, 0, 1, 1),), ("x",)), vocab)


@pytest.mark.parametrize("seed", range(20))
def test_time_map_lands_on_time_tokens_of_the_same_span(seed):
    vocab = toy_vocab()
    inst = random_instruction(vocab, np.random.default_rng(seed))
    for start, end in inst.event_spans:
        for j in range(start, end):
            tau = inst.time_map[j]
            assert start <= tau < end
            assert vocab.token_class(inst.tokens[tau]) == "time"
    tokens, tau = inst.model_inputs()
    assert len(tokens) == len(tau) == len(inst) + len(inst.target)
    assert np.all(tau[len(inst):] == inst.query_time_position)


def test_record_round_trip():
    vocab = toy_vocab()
    inst = random_instruction(vocab, np.random.default_rng(3))
    back = type(inst).from_record(inst.to_record())
    assert back == inst


def test_resolve_rejects_malformed_output():
    vocab = named_vocab()
    inst = build_instruction((0, 0, 1), EventChain((Quadruple(0, 0, 1, 0),), ("x",)), vocab)
    dot, end = vocab.id("."), vocab.end
    assert resolve_entity([vocab.entity(1), dot, vocab.entity(1), end], inst, vocab) is None
    assert resolve_entity([vocab.index(0), end, vocab.entity(1), end], inst, vocab) is None
    assert resolve_entity([vocab.index(3), dot, vocab.entity(1), end], inst, vocab) is None
    assert resolve_entity([vocab.index(0)], inst, vocab) is None
