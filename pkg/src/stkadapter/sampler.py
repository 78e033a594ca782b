"""Per-query historical subgraph sampling.

For a query ``(s, r, ?, t)`` every preceding snapshot in which ``s`` has an
incident edge yields a small subgraph grown breadth-first from ``s``: each
frontier node keeps at most ``fanout`` of its edges (uniform, without
replacement) towards nodes not yet sampled, for ``depth`` hops.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .data import TemporalKG


class EmptyHistoryError(ValueError):
    """The query sits at time 0, so no history exists."""


@dataclass(frozen=True)
class Snapshot:
    time: int
    edges: np.ndarray  # [n, 3] rows (subject, relation, object)
    nodes: frozenset[int]


@dataclass(frozen=True)
class SubgraphSequence:
    query: tuple[int, int, int]
    snapshots: tuple[Snapshot, ...] = ()
    fanout: int = 10
    depth: int = 1
    window: int = 16

    @property
    def sampled_nodes(self) -> list[frozenset[int]]:
        return [snap.nodes for snap in self.snapshots]

    def __len__(self) -> int:
        return len(self.snapshots)

    def dump(self, tkg: TemporalKG | None = None) -> str:
        s, r, t = self.query
        lines = [f"# query ({s}, {r}, ?, {t}) fanout={self.fanout} depth={self.depth} window={self.window}"]
        for snap in self.snapshots:
            lines.append(f"[t={snap.time}] nodes={sorted(snap.nodes)}")
            for a, rel, b in snap.edges.tolist():
                if tkg is not None:
                    lines.append(f"  {tkg.entities.name(a)}\t{tkg.relation_name(rel)}\t{tkg.entities.name(b)}")
                else:
                    lines.append(f"  {a}\t{rel}\t{b}")
            lines.append("")
        return "\n".join(lines)


def _sample_snapshot(facts: np.ndarray, root: int, fanout: int, depth: int,
                     rng: np.random.Generator) -> tuple[np.ndarray, frozenset[int]]:
    adjacency: dict[int, list[int]] = {}
    for i, s in enumerate(facts[:, 0].tolist()):
        adjacency.setdefault(s, []).append(i)
    sampled = {root}
    frontier = [root]
    chosen: list[int] = []
    for _ in range(depth):
        nxt: list[int] = []
        for node in frontier:
            cand = [i for i in adjacency.get(node, ()) if int(facts[i, 2]) not in sampled]
            if not cand:
                continue
            if len(cand) > fanout:
                picks = rng.choice(len(cand), size=fanout, replace=False)
                cand = [cand[j] for j in sorted(picks.tolist())]
            for i in cand:
                chosen.append(i)
                target = int(facts[i, 2])
                if target not in sampled:
                    sampled.add(target)
                    nxt.append(target)
        frontier = nxt
        if not frontier:
            break
    edges = facts[sorted(chosen)][:, :3] if chosen else np.zeros((0, 3), dtype=np.int64)
    return edges, frozenset(sampled)


def sample_history(
    tkg: TemporalKG,
    query: tuple[int, int, int],
    fanout: int = 10,
    depth: int = 1,
    window: int = 16,
    seed: int = 0,
) -> SubgraphSequence:
    """Sample the subgraph sequence preceding ``query = (subject, relation, time)``.

    Only the ``window`` most recent snapshots in which the subject has an
    edge are kept, ordered oldest first. Raises :class:`EmptyHistoryError`
    when ``time == 0``.
    """
    s, r, t_q = (int(x) for x in query)
    if fanout < 1 or depth < 1 or window < 1:
        raise ValueError("fanout, depth and window must be positive")
    if t_q <= 0:
        raise EmptyHistoryError(f"query at time {t_q} has no history")
    rng = np.random.default_rng([seed, s, r, t_q])
    snaps: list[Snapshot] = []
    subject_facts = tkg.by_subject.get(s)
    if subject_facts is None:
        return SubgraphSequence((s, r, t_q), (), fanout, depth, window)
    times = np.unique(subject_facts[:, 3])
    times = times[times < t_q][::-1][:window]
    for t in times.tolist():
        edges, nodes = _sample_snapshot(tkg.snapshot_at(t), s, fanout, depth, rng)
        snaps.append(Snapshot(int(t), edges, nodes))
    snaps.reverse()
    return SubgraphSequence((s, r, t_q), tuple(snaps), fanout, depth, window)


def history_or_empty(tkg: TemporalKG, query, **kwargs) -> SubgraphSequence:
    try:
        return sample_history(tkg, query, **kwargs)
    except EmptyHistoryError:
        s, r, t = query
        return SubgraphSequence((int(s), int(r), int(t)), (), kwargs.get("fanout", 10),
                                kwargs.get("depth", 1), kwargs.get("window", 16))
