import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stkadapter import synthetic
from stkadapter.data import Quadruple, Vocab, build_tkg
from stkadapter.rules import (RECENCY, RuleSet, TemporalRule, filter_rules, mine_rules, retrieve_chain,
                              rule_confidence, sample_transition, transition_probabilities)


def kg(quads, n_ent=6, n_rel=2):
    quads = sorted((Quadruple(*q) for q in quads), key=lambda q: q.timestamp)
    tkg, _ = build_tkg([quads, [], []], Vocab([f"e{i}" for i in range(n_ent)]), Vocab([f"r{i}" for i in range(n_rel)]))
    return tkg


# transition distribution -------------------------------------------------------

def test_closer_edge_is_preferred_analytically():
    p = transition_probabilities([9, 8], 10)
    expected = math.exp(-1) / (math.exp(-1) + math.exp(-2))
    assert abs(p[0] - expected) < 1e-9
    assert abs(p[0] - 0.7311) < 1e-4 and abs(p[1] - 0.2689) < 1e-4


def test_equal_times_split_evenly():
    np.testing.assert_allclose(transition_probabilities([4, 4], 5), [0.5, 0.5], atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 200), min_size=1, max_size=12))
def test_distribution_sums_to_one_and_is_monotone(times):
    t_ref = max(times) + 1
    p = transition_probabilities(times, t_ref)
    assert abs(p.sum() - 1.0) < 1e-9
    for i, j in itertools.combinations(range(len(times)), 2):
        if times[i] > times[j]:
            assert p[i] > p[j]


def _tv_of_sampled_steps(seed, n=100_000):
    rng = np.random.default_rng(seed)
    times = rng.integers(0, 6, rng.integers(2, 6))
    t_ref = int(times.max()) + 1
    analytic = transition_probabilities(times, t_ref)
    draws = np.fromiter((sample_transition(rng, times, t_ref) for _ in range(n)), dtype=np.int64, count=n)
    freq = np.bincount(draws, minlength=len(times)) / n
    return 0.5 * np.abs(freq - analytic).sum()


def test_sampled_steps_match_the_analytic_distribution():
    for seed in range(10):
        assert _tv_of_sampled_steps(seed) < 0.01


# brute-force oracle ------------------------------------------------------------

def brute_force_bodies(facts, head, max_len, inverse):
    """Every cyclic time-decreasing path from a head fact's object back to its subject."""
    bodies = set()
    for s, r, o, t in facts:
        if r != head:
            continue

        def walk(node, cur_t, rels, left):
            for u, ru, v, tu in facts:
                if u != node or tu >= cur_t:
                    continue
                if left == 1:
                    if v == s:
                        bodies.add(tuple(inverse(x) for x in reversed(rels + [ru])))
                else:
                    walk(v, tu, rels + [ru], left - 1)

        for length in range(1, max_len + 1):
            walk(o, t, [], length)
    return bodies


def brute_force_confidence(facts, head, body):
    support = body_support = 0
    for chain in itertools.product(facts, repeat=len(body)):
        if any(f[1] != b for f, b in zip(chain, body)):
            continue
        if any(a[2] != b[0] or a[3] >= b[3] for a, b in zip(chain, chain[1:])):
            continue
        body_support += 1
        x, y, t_last = chain[0][0], chain[-1][2], chain[-1][3]
        if any(f[0] == x and f[1] == head and f[2] == y and f[3] > t_last for f in facts):
            support += 1
    return support, body_support


@pytest.mark.parametrize("seed", range(10))
def test_mining_matches_brute_force_enumeration(seed):
    facts = synthetic.random_facts(5, 2, 10, 6, seed)
    tkg = kg(facts, n_ent=5)
    rows = [tuple(f) for f in tkg.facts.tolist()]
    assert len(rows) <= 20
    mined = mine_rules(tkg, walks_per_relation=400, max_body_len=2, seed=seed)
    for head in range(2 * tkg.num_relations):
        expected = brute_force_bodies(rows, head, 2, tkg.inverse)
        got = {rule.body: rule for rule in mined.for_head(head)}
        assert set(got) == expected
        for body, rule in got.items():
            support, body_support = brute_force_confidence(rows, head, body)
            assert (rule.support, rule.body_support) == (support, body_support)
            assert rule.confidence == support / body_support


def test_rule_with_perfect_precursor():
    # r0(x, y, t) is always preceded by r1(x, y, t - 1)
    facts = []
    for i, t in enumerate(range(1, 16, 3)):
        x, y = i % 3, 3 + i % 2
        facts += [(x, 1, y, t - 1), (x, 0, y, t)]
    tkg = kg(facts)
    mined = mine_rules(tkg, walks_per_relation=50, max_body_len=1, seed=0)
    rule = next(r for r in mined.for_head(0) if r.body == (1,))
    assert rule.confidence == 1.0


def test_confidence_counts_body_matches():
    # body r1 matched 4 times, head r0 follows twice
    facts = [(0, 1, 1, 0), (0, 0, 1, 1), (2, 1, 3, 0), (2, 0, 3, 2), (4, 1, 5, 0), (4, 1, 3, 1)]
    conf = rule_confidence(TemporalRule(0, (1,)), kg(facts))
    assert (conf.support, conf.body_support, conf.value) == (2, 4, 0.5)


def test_unmatched_body_is_flagged():
    conf = rule_confidence(TemporalRule(0, (1,)), kg([(0, 0, 1, 0)]))
    assert conf.value == 0.0 and conf.no_body


def test_mining_is_deterministic_and_skips_empty_relations(caplog):
    facts = synthetic.random_facts(5, 2, 12, 6, 3)
    tkg = kg(facts, n_ent=5, n_rel=3)
    a = mine_rules(tkg, walks_per_relation=30, max_body_len=2, seed=7)
    b = mine_rules(tkg, walks_per_relation=30, max_body_len=2, seed=7)
    assert a.to_text() == b.to_text()
    assert "no facts" in caplog.text


# filtering ---------------------------------------------------------------------

def _ruleset():
    return RuleSet({0: [TemporalRule(0, (1,), 9, 10, 0.9), TemporalRule(0, (2,), 5, 10, 0.5),
                        TemporalRule(0, (3,), 3, 10, 0.3)]})


def test_filter_identity():
    rules = _ruleset()
    assert list(filter_rules(rules, 0.0, None)) == list(rules)


def test_filter_above_one_is_empty():
    assert len(filter_rules(_ruleset(), 1.01)) == 0


def test_filter_threshold_and_top_n():
    kept = list(filter_rules(_ruleset(), 0.4, 1))
    assert [r.confidence for r in kept] == [0.9]


def test_ruleset_text_round_trip(tmp_path):
    rules = filter_rules(_ruleset(), 0.1, 2)
    rules.save(tmp_path / "rules.txt")
    back = RuleSet.load(tmp_path / "rules.txt")
    assert list(back) == list(rules) and back.config == rules.config


def test_ruleset_rejects_headerless_text():
    with pytest.raises(ValueError):
        RuleSet.from_text("0\t1\t1\t1\t1.0\n")


# retrieval ---------------------------------------------------------------------

def test_recency_fallback_without_rules():
    tkg = kg([(0, 0, 1, 0), (0, 1, 2, 1), (0, 0, 3, 2), (4, 0, 5, 3)])
    chain = retrieve_chain((0, 0, 4), RuleSet(), tkg, max_events=50)
    own = [q for q in chain.events if q.subject == 0]
    assert [(q.object, q.timestamp) for q in own] == [(1, 0), (2, 1), (3, 2)]
    assert set(chain.provenance) == {RECENCY}


def test_rule_grounding_is_retrieved_with_its_id():
    facts = [(0, 1, 1, 2), (2, 0, 3, 0), (2, 1, 4, 1), (3, 1, 5, 1), (4, 0, 5, 2), (5, 1, 0, 3),
             (1, 0, 2, 3), (3, 0, 4, 4), (5, 0, 1, 4), (4, 1, 2, 5)]
    tkg = kg(facts)
    rule = TemporalRule(0, (1,), 1, 1, 1.0)
    chain = retrieve_chain((0, 0, 6), RuleSet({0: [rule]}), tkg, max_events=1)
    assert chain.events == (Quadruple(0, 1, 1, 2),)
    assert chain.provenance == (rule.rule_id,)


def test_trim_keeps_the_most_recent_match():
    facts = [(0, 1, i + 1, i) for i in range(5)]
    tkg = kg(facts)
    chain = retrieve_chain((0, 0, 6), RuleSet({0: [TemporalRule(0, (1,), 1, 1, 1.0)]}), tkg, max_events=1)
    assert chain.events == (Quadruple(0, 1, 5, 4),)


def test_retrieval_never_looks_ahead():
    facts = synthetic.random_facts(6, 2, 40, 10, 5)
    tkg = kg(facts)
    rules = mine_rules(tkg, 20, 2, 0)
    for s in range(6):
        chain = retrieve_chain((s, 0, 5), rules, tkg, max_events=8)
        times = [q.timestamp for q in chain.events]
        assert len(chain) <= 8 and all(t < 5 for t in times) and times == sorted(times)


def test_query_at_time_zero_gives_empty_chain():
    assert len(retrieve_chain((0, 0, 0), RuleSet(), kg([(0, 0, 1, 0)]))) == 0
