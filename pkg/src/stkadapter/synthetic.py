"""Deterministic synthetic TKGs for smoke tests and learnability checks."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .data import Quadruple


def copy_task_facts(
    num_entities: int = 20,
    num_relations: int = 5,
    num_times: int = 60,
    density: float = 0.5,
    seed: int = 0,
) -> list[Quadruple]:
    """Facts whose object is a fixed function of ``(subject, relation)``.

    Each entity ``s`` owns one base triple ``(s, s mod R, pi(s))`` where
    ``pi`` is a random permutation without fixed points. At every timestamp
    each base triple recurs independently with probability ``density``, so
    the answer to any query also appears in the subject's history.
    """
    if num_entities < 2 or num_relations < 1:
        raise ValueError("need at least two entities and one relation")
    rng = np.random.default_rng(seed)
    while True:
        perm = rng.permutation(num_entities)
        if np.all(perm != np.arange(num_entities)):
            break
    base = [(s, s % num_relations, int(perm[s])) for s in range(num_entities)]
    facts = []
    for t in range(num_times):
        keep = rng.random(len(base)) < density
        for (s, r, o), k in zip(base, keep):
            if k:
                facts.append(Quadruple(s, r, o, t))
    return facts


def random_facts(num_entities: int, num_relations: int, num_facts: int, num_times: int, seed: int = 0) -> list[Quadruple]:
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(num_facts):
        s, o = rng.choice(num_entities, size=2, replace=False)
        out.append(Quadruple(int(s), int(rng.integers(num_relations)), int(o), int(rng.integers(num_times))))
    return sorted(out, key=lambda q: (q.timestamp, q.subject, q.relation, q.object))


def chronological_split(facts: list[Quadruple], ratios=(0.8, 0.1, 0.1)) -> tuple[list, list, list]:
    """Split by timestamp so that roughly ``ratios`` of the facts land in each part.

    Whole timestamps are kept together, which makes the split strictly chronological.
    """
    facts = sorted(facts, key=lambda q: q.timestamp)
    times = np.array([q.timestamp for q in facts])
    uniq = np.unique(times)
    counts = np.array([(times == t).sum() for t in uniq])
    cum = np.cumsum(counts) / len(facts)
    n = len(uniq)
    if n < 3:
        raise ValueError("a three-way chronological split needs at least three timestamps")
    # every part keeps at least one timestamp
    cut1 = min(max(int(np.searchsorted(cum, ratios[0] - 1e-12)) + 1, 1), n - 2)
    cut2 = min(max(int(np.searchsorted(cum, ratios[0] + ratios[1] - 1e-12)) + 1, cut1 + 1), n - 1)
    t1, t2 = uniq[cut1], uniq[cut2]
    train = [q for q in facts if q.timestamp < t1]
    valid = [q for q in facts if t1 <= q.timestamp < t2]
    test = [q for q in facts if q.timestamp >= t2]
    return train, valid, test


def write_tsv(path, facts, prefix_entity: str = "e", prefix_relation: str = "r") -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for q in facts:
            fh.write(f"{prefix_entity}{q.subject}\t{prefix_relation}{q.relation}\t{prefix_entity}{q.object}\t{q.timestamp}\n")


def write_dataset(directory, facts, ratios=(0.8, 0.1, 0.1)) -> tuple[Path, Path, Path]:
    """Write ``train.txt``, ``valid.txt`` and ``test.txt`` under ``directory``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = (d / "train.txt", d / "valid.txt", d / "test.txt")
    for path, part in zip(paths, chronological_split(facts, ratios)):
        write_tsv(path, part)
    return paths
