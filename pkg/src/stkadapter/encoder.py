"""Evolving graph encoder and topology-aware candidate scorer.

A compact stand-in for REGCN-style encoders: each sampled snapshot drives one
round of relation-conditioned mean aggregation into the entities it touches,
followed by a GRU-style gated update of those rows. Rows not touched by a
snapshot are carried over unchanged.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from . import container
from .autograd import Parameter, Tensor
from .data import TemporalKG
from .optim import AdamW
from .sampler import SubgraphSequence, history_or_empty

log = logging.getLogger(__name__)

PARAM_NAMES = (
    "entity_embedding", "relation_embedding", "message_weight", "self_weight",
    "update_weight", "update_bias", "reset_weight", "reset_bias",
    "candidate_weight", "candidate_recurrent", "scorer_weight",
)


class EncoderParams:
    def __init__(self, num_entities: int, num_relation_ids: int, dim: int = 16, seed: int = 0):
        if dim <= 0:
            raise ValueError("embedding dimension must be positive")
        rng = np.random.default_rng(seed)
        d = dim
        scale = 1.0 / np.sqrt(d)
        self.dim = d
        self.entity_embedding = Parameter(rng.normal(0, scale, (num_entities, d)), "entity_embedding")
        self.relation_embedding = Parameter(rng.normal(0, scale, (num_relation_ids, d)), "relation_embedding")
        self.message_weight = Parameter(rng.normal(0, scale, (d, d)), "message_weight")
        self.self_weight = Parameter(rng.normal(0, scale, (d, d)), "self_weight")
        self.update_weight = Parameter(rng.normal(0, scale / np.sqrt(2), (2 * d, d)), "update_weight")
        self.update_bias = Parameter(np.zeros(d), "update_bias")
        self.reset_weight = Parameter(rng.normal(0, scale / np.sqrt(2), (2 * d, d)), "reset_weight")
        self.reset_bias = Parameter(np.zeros(d), "reset_bias")
        self.candidate_weight = Parameter(rng.normal(0, scale, (d, d)), "candidate_weight")
        self.candidate_recurrent = Parameter(rng.normal(0, scale, (d, d)), "candidate_recurrent")
        self.scorer_weight = Parameter(np.eye(d) + rng.normal(0, 0.1 * scale, (d, d)), "scorer_weight")

    @property
    def num_entities(self) -> int:
        return self.entity_embedding.shape[0]

    @property
    def num_relation_ids(self) -> int:
        return self.relation_embedding.shape[0]

    def parameters(self) -> list[Parameter]:
        return [getattr(self, name) for name in PARAM_NAMES]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        for p in self.parameters():
            if state[p.name].shape != p.shape:
                raise ValueError(f"shape mismatch for {p.name}: {state[p.name].shape} vs {p.shape}")
            p.data = np.array(state[p.name], dtype=np.float64)

    def save(self, path) -> None:
        container.save(path, self.state_dict(), {"kind": "encoder", "dim": self.dim})

    @classmethod
    def load(cls, path) -> "EncoderParams":
        arrays, meta = container.load(path)
        if meta.get("kind") != "encoder":
            raise ValueError(f"{path} is not an encoder checkpoint")
        out = cls(arrays["entity_embedding"].shape[0], arrays["relation_embedding"].shape[0], meta["dim"])
        out.load_state_dict(arrays)
        return out

    def fingerprint(self) -> str:
        import hashlib
        h = hashlib.sha256()
        for p in self.parameters():
            h.update(p.data.tobytes())
        return h.hexdigest()


@dataclass
class EncoderState:
    entities: Tensor   # [|E|, d_g]
    relations: Tensor  # [2|R|, d_g]
    as_of_time: int


@dataclass
class GraphState:
    h0: np.ndarray         # [1, 2*d_g], fixed
    h_current: np.ndarray  # [1, 2*d_g]

    def __post_init__(self):
        self.h0 = np.array(self.h0, dtype=np.float64).reshape(1, -1)
        self.h0.setflags(write=False)
        self.h_current = np.array(self.h_current, dtype=np.float64).reshape(1, -1)


def _snapshot_update(h: Tensor, rel: Tensor, edges: np.ndarray, params: EncoderParams) -> Tensor:
    # messages flow both ways along each sampled edge: b <- a via r, a <- b via r^-1
    n_rel = params.num_relation_ids // 2
    src = np.concatenate([edges[:, 0], edges[:, 2]])
    dst = np.concatenate([edges[:, 2], edges[:, 0]])
    r = edges[:, 1]
    r_inv = np.where(r < n_rel, r + n_rel, r - n_rel)
    rels = np.concatenate([r, r_inv])

    touched, local_dst = np.unique(dst, return_inverse=True)
    if not len(touched):
        return h
    if touched.max() >= params.num_entities or src.max() >= params.num_entities or rels.max() >= params.num_relation_ids:
        raise IndexError("edge references an unknown entity or relation")
    msg_in = ag.take_rows(h, src) + ag.take_rows(rel, rels)
    msgs = ag.linear(msg_in, params.message_weight)
    agg = ag.segment_mean(msgs, local_dst, len(touched))
    prev = ag.take_rows(h, touched)
    m = ag.tanh(agg + ag.linear(prev, params.self_weight))
    joint = ag.concat([prev, m], axis=-1)
    z = ag.sigmoid(ag.linear(joint, params.update_weight, params.update_bias))
    reset = ag.sigmoid(ag.linear(joint, params.reset_weight, params.reset_bias))
    cand = ag.tanh(ag.linear(m, params.candidate_weight) + ag.linear(reset * prev, params.candidate_recurrent))
    new_rows = prev + z * (cand - prev)
    return ag.put_rows(h, touched, new_rows)


def encode_history(subgraphs: SubgraphSequence, params: EncoderParams) -> EncoderState:
    h: Tensor = params.entity_embedding
    for snap in subgraphs.snapshots:
        if len(snap.edges):
            h = _snapshot_update(h, params.relation_embedding, np.asarray(snap.edges), params)
    as_of = subgraphs.snapshots[-1].time if subgraphs.snapshots else -1
    return EncoderState(h, params.relation_embedding, as_of)


def initial_graph_repr(state: EncoderState, query: tuple[int, int]) -> GraphState:
    s, r = (int(x) for x in query[:2])
    if not 0 <= s < state.entities.shape[0] or not 0 <= r < state.relations.shape[0]:
        raise IndexError(f"query ids ({s}, {r}) out of range")
    h0 = np.concatenate([state.entities.data[s], state.relations.data[r]])[None, :]
    return GraphState(h0, h0.copy())


def score_logits(state: EncoderState, query: tuple[int, int], candidates, params: EncoderParams) -> Tensor:
    """Raw scores ``((h_s * h_r) W) . h_o`` for each candidate object ``o``."""
    s, r = (int(x) for x in query[:2])
    hs = ag.take_rows(state.entities, [s])
    hr = ag.take_rows(state.relations, [r])
    q = ag.linear(hs * hr, params.scorer_weight)          # [1, d]
    cand = ag.take_rows(state.entities, np.asarray(candidates, dtype=np.int64))  # [c, d]
    return ag.reshape(ag.matmul(q, ag.swapaxes(cand, 0, 1)), (-1,))


def tkg_score(state: EncoderState, query: tuple[int, int], candidates, params: EncoderParams) -> np.ndarray:
    """Softmax-normalized candidate scores (a probability vector over ``candidates``)."""
    if len(candidates) == 0:
        raise ValueError("tkg_score needs at least one candidate")
    with ag.no_grad():
        return ag.softmax(score_logits(state, query, candidates, params)).data


def pretrain_encoder(
    tkg_train: TemporalKG,
    params: EncoderParams,
    epochs: int = 5,
    learning_rate: float = 1e-2,
    seed: int = 0,
    num_negatives: int | None = None,
    fanout: int = 10,
    depth: int = 1,
    window: int = 16,
    batch_size: int = 16,
    max_steps: int | None = None,
) -> EncoderParams:
    """Fit the encoder to predict training objects from their sampled history.

    Each training fact ``(s, r, o, t)`` is a query whose history is sampled from
    facts before ``t``; the loss is cross-entropy of the softmaxed scores over
    the gold object plus negatives (all entities when ``num_negatives`` is None).
    Returns ``params`` (updated in place) for convenience.
    """
    if epochs < 0:
        raise ValueError("epochs must be non-negative")
    rng = np.random.default_rng(seed)
    opt = AdamW(params.parameters(), lr=learning_rate, weight_decay=0.0)
    facts = tkg_train.facts
    n_ent = params.num_entities
    step = 0
    histories: dict[tuple[int, int, int], SubgraphSequence] = {}
    for epoch in range(epochs):
        order = rng.permutation(len(facts))
        total, count = 0.0, 0
        for b0 in range(0, len(order), batch_size):
            if max_steps is not None and step >= max_steps:
                return params
            opt.zero_grad()
            loss = None
            for i in order[b0:b0 + batch_size]:
                s, r, o, t = (int(x) for x in facts[i])
                key = (s, r, t)
                if key not in histories:
                    histories[key] = history_or_empty(tkg_train, key, fanout=fanout, depth=depth,
                                                      window=window, seed=seed)
                state = encode_history(histories[key], params)
                if num_negatives is None or num_negatives >= n_ent - 1:
                    cands = np.arange(n_ent)
                    gold_pos = o
                else:
                    neg = rng.choice(np.delete(np.arange(n_ent), o), size=num_negatives, replace=False)
                    cands = np.concatenate([[o], neg])
                    gold_pos = 0
                logits = score_logits(state, (s, r), cands, params)
                nll = ag.cross_entropy(ag.reshape(logits, (1, -1)), [gold_pos])
                loss = nll if loss is None else loss + nll
            n = len(order[b0:b0 + batch_size])
            loss = loss * (1.0 / n)
            if not np.isfinite(loss.item()):
                raise ag.NumericalError(f"encoder loss diverged at epoch {epoch}, step {step}")
            loss.backward()
            opt.step()
            total += loss.item() * n
            count += n
            step += 1
        log.info("encoder epoch %d loss %.4f", epoch, total / max(count, 1))
    return params
