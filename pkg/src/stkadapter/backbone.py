"""Miniature decoder-only transformer with one STK adapter per layer.

Each layer is pre-norm::

    h_attn = h + Attn(LN1(h))
    h_ffn  = FFN(LN2(h_attn))
    h_next = h_attn + h_ffn                       (plain backbone)
    h_next = h_attn + fusion(cma, ea) + h_ffn     (with adapters)

so a zero adapter output reproduces the plain backbone bit for bit. The
graph state threads through the layers as ``h_g <- st_moe(h_g) + h0``.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autograd as ag
from . import container
from .adapter import MODULES, AdapterConfig, AdapterFlags, AdapterLayer, ConfigError, StepRecord, adapter_layer_forward
from .autograd import NumericalError, Parameter, Tensor
from .encoder import GraphState
from .instructions import InstructionSequence
from .optim import AdamW, clip_grad_norm

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class SequenceLengthError(ValueError):
    pass


@dataclass
class BackboneConfig:
    vocab_size: int
    d_t: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 128
    max_seq_len: int = 256
    n_experts: int = 4
    top_k: int = 1
    d_k: int = 8
    d_g: int = 16
    seed: int = 0
    alpha: float = 0.01
    balance_reduction: str = "sum"   # how the three modules' balance terms combine: "sum" or "mean"
    disable_st: bool = False
    disable_ea: bool = False
    disable_cma: bool = False

    def __post_init__(self):
        if self.d_t % self.n_heads:
            raise ConfigError(f"d_t={self.d_t} is not divisible by n_heads={self.n_heads}")
        if min(self.vocab_size, self.d_t, self.n_layers, self.d_ffn, self.max_seq_len, self.d_g) < 1:
            raise ConfigError("sizes must be positive")
        if self.balance_reduction not in ("sum", "mean"):
            raise ConfigError(f"unknown balance_reduction {self.balance_reduction!r}")
        if self.alpha < 0:
            raise ConfigError("alpha must be non-negative")
        AdapterConfig(self.d_t, self.d_g, self.n_experts, self.top_k, self.d_k)

    @property
    def flags(self) -> AdapterFlags:
        return AdapterFlags(st=not self.disable_st, ea=not self.disable_ea, cma=not self.disable_cma)

    def adapter_config(self) -> AdapterConfig:
        return AdapterConfig(self.d_t, self.d_g, self.n_experts, self.top_k, self.d_k)


class ModelState:
    """Frozen backbone weights plus trainable adapters.

    The output head is tied to the token embedding.
    """

    def __init__(self, cfg: BackboneConfig):
        self.cfg = cfg
        rng = np.random.default_rng([cfg.seed, 0])
        d, f = cfg.d_t, cfg.d_ffn
        std = 0.02
        self.backbone: dict[str, Parameter] = {}

        def add(name, value):
            self.backbone[name] = Parameter(value, name)

        add("token_embedding", rng.normal(0, std, (cfg.vocab_size, d)))
        add("position_embedding", rng.normal(0, std, (cfg.max_seq_len, d)))
        for l in range(cfg.n_layers):
            p = f"layer{l}."
            add(p + "ln1.gamma", np.ones(d))
            add(p + "ln1.beta", np.zeros(d))
            add(p + "attn.w_qkv", rng.normal(0, std, (d, 3 * d)))
            add(p + "attn.w_out", rng.normal(0, std / np.sqrt(2 * cfg.n_layers), (d, d)))
            add(p + "ln2.gamma", np.ones(d))
            add(p + "ln2.beta", np.zeros(d))
            add(p + "ffn.w1", rng.normal(0, std, (d, f)))
            add(p + "ffn.b1", np.zeros(f))
            add(p + "ffn.w2", rng.normal(0, std / np.sqrt(2 * cfg.n_layers), (f, d)))
            add(p + "ffn.b2", np.zeros(d))
        add("ln_f.gamma", np.ones(d))
        add("ln_f.beta", np.zeros(d))

        adapter_rng = np.random.default_rng([cfg.seed, 1])
        acfg = cfg.adapter_config()
        self.adapters = [AdapterLayer(acfg, adapter_rng, prefix=f"adapter{l}.") for l in range(cfg.n_layers)]

    def backbone_parameters(self) -> list[Parameter]:
        return list(self.backbone.values())

    def adapter_parameters(self) -> list[Parameter]:
        return [p for layer in self.adapters for p in layer.parameters()]

    def parameters(self) -> list[Parameter]:
        return self.backbone_parameters() + self.adapter_parameters()

    def set_backbone_trainable(self, trainable: bool) -> None:
        for p in self.backbone_parameters():
            p.requires_grad = trainable

    def backbone_hash(self) -> str:
        h = hashlib.sha256()
        for name, p in sorted(self.backbone.items()):
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def adapter_state(self) -> dict[str, np.ndarray]:
        return {p.name: p.data.copy() for p in self.adapter_parameters()}

    def save(self, path, extra_meta: dict | None = None) -> None:
        arrays = {p.name: p.data for p in self.parameters()}
        meta = {"kind": "model", "version": CHECKPOINT_VERSION, "config": asdict(self.cfg)}
        meta.update(extra_meta or {})
        container.save(path, arrays, meta)

    @classmethod
    def load(cls, path) -> "ModelState":
        arrays, meta = container.load(path)
        if meta.get("kind") != "model":
            raise ValueError(f"{path} is not a model checkpoint")
        state = cls(BackboneConfig(**meta["config"]))
        for p in state.parameters():
            if p.name not in arrays or arrays[p.name].shape != p.shape:
                raise ValueError(f"checkpoint {path} lacks a matching {p.name}")
            p.data = np.array(arrays[p.name], dtype=np.float64)
        return state


# forward ------------------------------------------------------------------------

@dataclass
class Batch:
    """Right-padded model inputs."""

    tokens: np.ndarray   # [B, L]
    tau: np.ndarray      # [B, L]
    valid: np.ndarray    # [B, L] bool
    h0: np.ndarray       # [B, 1, 2*d_g]
    lengths: np.ndarray  # [B]


def make_batch(seqs: Sequence[tuple[np.ndarray, np.ndarray]], graphs: Sequence[GraphState | np.ndarray] | None,
               d_g: int, pad: int = 0) -> Batch:
    lengths = np.array([len(t) for t, _ in seqs], dtype=np.int64)
    B, L = len(seqs), int(lengths.max())
    tokens = np.full((B, L), pad, dtype=np.int64)
    tau = np.zeros((B, L), dtype=np.int64)
    valid = np.zeros((B, L), dtype=bool)
    for i, (t, m) in enumerate(seqs):
        tokens[i, : len(t)] = t
        tau[i, : len(t)] = m
        valid[i, : len(t)] = True
    h0 = np.zeros((B, 1, 2 * d_g))
    if graphs is not None:
        for i, g in enumerate(graphs):
            h0[i] = g.h0 if isinstance(g, GraphState) else np.asarray(g).reshape(1, -1)
    return Batch(tokens, tau, valid, h0, lengths)


@dataclass
class ForwardResult:
    logits: Tensor                        # [B, L, vocab]
    records: list[StepRecord] = field(default_factory=list)
    graph_states: list[Tensor] = field(default_factory=list)


def _attention(state: ModelState, prefix: str, x: Tensor, mask: np.ndarray) -> Tensor:
    cfg = state.cfg
    B, L, d = x.shape
    H = cfg.n_heads
    w = state.backbone
    qkv = ag.matmul(x, w[prefix + "attn.w_qkv"])                     # [B, L, 3d]
    qkv = ag.swapaxes(ag.reshape(qkv, (B, L, 3 * H, d // H)), 1, 2)  # [B, 3H, L, dh]
    q = ag.narrow(qkv, 1, 0, H)
    k = ag.narrow(qkv, 1, H, 2 * H)
    v = ag.narrow(qkv, 1, 2 * H, 3 * H)
    out = ag.scaled_dot_attention(q, k, v, mask)                     # [B, H, L, dh]
    out = ag.reshape(ag.swapaxes(out, 1, 2), (B, L, d))
    return ag.matmul(out, w[prefix + "attn.w_out"])


def model_forward(state: ModelState, batch: Batch, use_adapters: bool = True,
                  flags: AdapterFlags | None = None, collect: bool = False) -> ForwardResult:
    """Logits for every position of a right-padded batch.

    ``use_adapters=False`` runs the plain backbone (no graph input).
    ``collect`` keeps per-layer routing records and graph states.
    """
    cfg = state.cfg
    B, L = batch.tokens.shape
    if L > cfg.max_seq_len:
        raise SequenceLengthError(f"sequence of {L} tokens exceeds max_seq_len={cfg.max_seq_len}")
    if batch.tokens.max() >= cfg.vocab_size or batch.tokens.min() < 0:
        raise IndexError("token id outside the vocabulary")
    flags = flags or cfg.flags
    w = state.backbone
    h = ag.take_rows(w["token_embedding"], batch.tokens) + ag.take_rows(w["position_embedding"], np.arange(L))
    mask = ag.causal_mask(L)[None, None]
    h0 = Tensor(batch.h0)
    h_g = h0
    records: list[StepRecord] = []
    graph_states: list[Tensor] = []
    for l in range(cfg.n_layers):
        p = f"layer{l}."
        h_attn = h + _attention(state, p, ag.layer_norm(h, w[p + "ln1.gamma"], w[p + "ln1.beta"]), mask)
        x = ag.layer_norm(h_attn, w[p + "ln2.gamma"], w[p + "ln2.beta"])
        h_ffn = ag.linear(ag.gelu(ag.linear(x, w[p + "ffn.w1"], w[p + "ffn.b1"])), w[p + "ffn.w2"], w[p + "ffn.b2"])
        if use_adapters:
            rec = StepRecord()
            h, h_g = adapter_layer_forward(state.adapters[l], h_attn, h_ffn, h_g, h0, batch.tau,
                                           flags, rec, batch.valid)
            records.append(rec)
            if collect:
                graph_states.append(h_g)
        else:
            h = h_attn + h_ffn
    h = ag.layer_norm(h, w["ln_f.gamma"], w["ln_f.beta"])
    logits = ag.matmul(h, ag.swapaxes(w["token_embedding"], 0, 1))
    return ForwardResult(logits, records if (collect or use_adapters) else [], graph_states)


def forward_instruction(state: ModelState, instruction: InstructionSequence, graph: GraphState | None,
                        use_adapters: bool = True, extra: int | None = None) -> Tensor:
    """Unbatched convenience wrapper returning ``[seq_len, vocab]`` logits."""
    toks, tau = instruction.model_inputs(extra)
    batch = make_batch([(toks, tau)], [graph] if graph is not None else None, state.cfg.d_g)
    res = model_forward(state, batch, use_adapters=use_adapters and graph is not None)
    return ag.reshape(res.logits, res.logits.shape[1:])


# loss ---------------------------------------------------------------------------

def balance_term(records: Sequence[StepRecord], reduction: str = "sum") -> Tensor:
    """``sum_j f_j p_j`` per module, combined over modules, averaged over layers."""
    if not records:
        return Tensor(0.0)
    per_layer = []
    for rec in records:
        terms = [rec.stats[m].balance() for m in MODULES if m in rec.stats and rec.stats[m].rows > 0]
        if not terms:
            continue
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        if reduction == "mean":
            total = total * (1.0 / len(terms))
        per_layer.append(total)
    if not per_layer:
        return Tensor(0.0)
    out = per_layer[0]
    for t in per_layer[1:]:
        out = out + t
    return out * (1.0 / len(per_layer))


@dataclass
class LossParts:
    total: Tensor
    ce: float
    balance: float


def compute_loss(logits: Tensor, target_positions: np.ndarray, targets: np.ndarray,
                 records: Sequence[StepRecord] = (), alpha: float = 0.01, reduction: str = "sum",
                 num_examples: int = 1) -> LossParts:
    """Teacher-forced cross-entropy over answer positions plus ``alpha`` times the balance term.

    ``target_positions`` are ``(batch, position)`` pairs whose logits predict
    ``targets``. The CE term is summed over targets and divided by ``num_examples``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise ValueError("empty target")
    pos = np.asarray(target_positions, dtype=np.int64).reshape(-1, 2)
    V = logits.shape[-1]
    L = logits.shape[-2]
    flat = ag.reshape(logits, (-1, V))
    rows = ag.take_rows(flat, pos[:, 0] * L + pos[:, 1])
    ce = ag.cross_entropy(rows, targets) * (1.0 / num_examples)
    bal = balance_term(records, reduction)
    total = ce + bal * alpha if alpha else ce
    return LossParts(total, ce.item(), bal.item())


# training ------------------------------------------------------------------------

@dataclass
class Example:
    instruction: InstructionSequence
    graph: GraphState


def teacher_forced_batch(examples: Sequence[Example], d_g: int) -> tuple[Batch, np.ndarray, np.ndarray]:
    seqs, pos, targets = [], [], []
    for i, ex in enumerate(examples):
        ins = ex.instruction
        if not ins.target:
            raise ValueError("training example has no target")
        seqs.append(ins.model_inputs(extra=len(ins.target) - 1))
        start = len(ins.tokens) - 1
        for j, tok in enumerate(ins.target):
            pos.append((i, start + j))
            targets.append(tok)
    batch = make_batch(seqs, [ex.graph for ex in examples], d_g)
    return batch, np.asarray(pos, dtype=np.int64), np.asarray(targets, dtype=np.int64)


@dataclass
class TrainConfig:
    epochs: int = 2
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    clip: float = 1.0
    batch_size: int = 16
    seed: int = 0
    warmup_steps: int = 0


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for b in range(0, n, batch_size):
        yield order[b:b + batch_size]


def train(state: ModelState, dataset: Sequence[Example], cfg: TrainConfig | None = None,
          log_sink: Callable[[dict], None] | None = None) -> ModelState:
    """Fine-tune the adapters only; backbone weights stay bit-identical.

    Each step logs ``{"step", "epoch", "ce", "balance", "loss", "grad_norm"}``
    to ``log_sink``. A non-finite loss raises :class:`NumericalError`.
    """
    cfg = cfg or TrainConfig()
    if not dataset:
        raise ValueError("training dataset is empty")
    mcfg = state.cfg
    rng = np.random.default_rng([cfg.seed, 2])
    params = state.adapter_parameters()
    opt = AdamW(params, lr=cfg.learning_rate, weight_decay=cfg.weight_decay, warmup_steps=cfg.warmup_steps)
    before = state.backbone_hash()
    state.set_backbone_trainable(False)
    step = 0
    try:
        for epoch in range(cfg.epochs):
            for idx in _batches(len(dataset), cfg.batch_size, rng):
                exs = [dataset[i] for i in idx]
                batch, pos, targets = teacher_forced_batch(exs, mcfg.d_g)
                opt.zero_grad()
                res = model_forward(state, batch)
                parts = compute_loss(res.logits, pos, targets, res.records, mcfg.alpha,
                                     mcfg.balance_reduction, num_examples=len(exs))
                if not np.isfinite(parts.total.item()):
                    raise NumericalError(
                        f"non-finite loss at epoch {epoch} step {step}: ce={parts.ce} balance={parts.balance}")
                parts.total.backward()
                norm = clip_grad_norm(params, cfg.clip)
                opt.step()
                record = {"step": step, "epoch": epoch, "ce": parts.ce, "balance": parts.balance,
                          "loss": parts.total.item(), "grad_norm": norm}
                if log_sink is not None:
                    log_sink(record)
                step += 1
    finally:
        state.set_backbone_trainable(True)
    if state.backbone_hash() != before:
        raise RuntimeError("backbone weights changed during adapter training")
    return state


def pretrain_backbone(state: ModelState, sequences: Sequence[np.ndarray], epochs: int = 3,
                      learning_rate: float = 3e-3, batch_size: int = 16, seed: int = 0,
                      log_sink: Callable[[dict], None] | None = None) -> ModelState:
    """Plain next-token training of the backbone on token sequences (no graph input)."""
    if epochs > 0 and not len(sequences):
        raise ValueError("no pretraining sequences")
    rng = np.random.default_rng([seed, 3])
    params = state.backbone_parameters()
    opt = AdamW(params, lr=learning_rate, weight_decay=0.0, warmup_steps=10)
    step = 0
    for epoch in range(epochs):
        for idx in _batches(len(sequences), batch_size, rng):
            seqs = [np.asarray(sequences[i], dtype=np.int64) for i in idx]
            inputs = [(s[:-1], np.zeros(len(s) - 1, dtype=np.int64)) for s in seqs]
            batch = make_batch(inputs, None, state.cfg.d_g)
            pos, targets = [], []
            for i, s in enumerate(seqs):
                for j in range(len(s) - 1):
                    pos.append((i, j))
                    targets.append(s[j + 1])
            opt.zero_grad()
            res = model_forward(state, batch, use_adapters=False)
            parts = compute_loss(res.logits, np.asarray(pos), np.asarray(targets), (), 0.0,
                                 num_examples=len(targets))
            if not np.isfinite(parts.total.item()):
                raise NumericalError(f"backbone pretraining diverged at epoch {epoch} step {step}")
            parts.total.backward()
            clip_grad_norm(params, 1.0)
            opt.step()
            if log_sink is not None:
                log_sink({"step": step, "epoch": epoch, "ce": parts.ce})
            step += 1
    return state


# routing statistics -----------------------------------------------------------------

@dataclass
class RoutingStats:
    """Top-1 assignment counts per layer, module and expert."""

    counts: np.ndarray  # [n_layers, 3, n_experts]

    @classmethod
    def empty(cls, n_layers: int, n_experts: int) -> "RoutingStats":
        return cls(np.zeros((n_layers, len(MODULES), n_experts)))

    def add(self, records: Sequence[StepRecord]) -> None:
        for l, rec in enumerate(records):
            for m, name in enumerate(MODULES):
                if name in rec.stats:
                    self.counts[l, m] += rec.stats[name].counts

    def ratios(self) -> np.ndarray:
        tot = self.counts.sum(axis=-1, keepdims=True)
        return np.divide(self.counts, tot, out=np.zeros_like(self.counts), where=tot > 0)

    def to_text(self) -> str:
        lines = ["# stk-adapter routing-stats v1", "layer\tmodule\texpert\tcount\tratio"]
        r = self.ratios()
        for l in range(self.counts.shape[0]):
            for m, name in enumerate(MODULES):
                for j in range(self.counts.shape[2]):
                    lines.append(f"{l}\t{name}\t{j}\t{int(self.counts[l, m, j])}\t{r[l, m, j]:.6f}")
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps({"counts": self.counts.tolist(), "modules": list(MODULES)})
