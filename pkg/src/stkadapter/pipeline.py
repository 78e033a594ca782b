"""Pipeline configuration and the stages shared by the CLI and the tests.

Stages: ingest -> pretrain encoder -> mine rules -> build instructions ->
pretrain backbone + train adapters -> evaluate.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from pathlib import Path
from typing import Any, Callable

import numpy as np

from . import autograd as ag
from . import container
from .adapter import AdapterLayer, ConfigError
from .backbone import BackboneConfig, Example, ModelState, TrainConfig, pretrain_backbone, train
from .data import TemporalKG, DatasetSplit
from .encoder import EncoderParams, GraphState, pretrain_encoder
from .inference import EvalConfig, EvalReport, evaluate, prepare_query
from .instructions import EVENT_LEN, QUERY_LEN, TARGET_LEN, InstructionSequence, SymbolVocab
from .rules import RuleSet, filter_rules, mine_rules

log = logging.getLogger(__name__)


# configuration -------------------------------------------------------------------

@dataclass
class DataConfig:
    train: str = ""
    valid: str = ""
    test: str = ""


@dataclass
class SamplerConfig:
    fanout: int = 10
    depth: int = 1
    window: int = 16


@dataclass
class RulesConfig:
    walks_per_relation: int = 100
    max_body_len: int = 3
    min_confidence: float = 0.01
    top_n: int = 20
    max_events: int = 8
    seed: int = 0


@dataclass
class EncoderConfig:
    d_g: int = 16
    epochs: int = 2
    lr: float = 0.03
    batch_size: int = 16
    num_negatives: int | None = None
    seed: int = 0


@dataclass
class BackboneSection:
    d_t: int = 64
    n_layers: int = 4
    n_heads: int = 4
    d_ffn: int = 128
    pretrain_epochs: int = 3
    pretrain_lr: float = 3e-3
    seed: int = 0


@dataclass
class AdapterSection:
    n_experts: int = 4
    top_k: int = 1
    d_k: int = 8
    alpha: float = 0.01
    balance_reduction: str = "sum"
    seed: int = 0


@dataclass
class TrainingSection:
    epochs: int = 2
    lr: float = 1e-3
    clip: float = 1.0
    batch_size: int = 16
    weight_decay: float = 0.01
    seed: int = 0


@dataclass
class InferenceSection:
    beam_width: int = 20
    lam: float = 0.1
    max_len: int = TARGET_LEN
    append_gold: bool = True
    max_queries: int | None = None


@dataclass
class AblationSection:
    disable_st_moe: bool = False
    disable_ea_moe: bool = False
    disable_cma_moe: bool = False
    disable_hybrid_score: bool = False
    single_adapter_mode: bool = False


@dataclass
class PipelineConfig:
    name: str = "default"
    runs_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    rules: RulesConfig = field(default_factory=RulesConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    backbone: BackboneSection = field(default_factory=BackboneSection)
    adapter: AdapterSection = field(default_factory=AdapterSection)
    training: TrainingSection = field(default_factory=TrainingSection)
    inference: InferenceSection = field(default_factory=InferenceSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def validate(self) -> "PipelineConfig":
        checks = [
            (self.sampler.fanout >= 1 and self.sampler.depth >= 1 and self.sampler.window >= 1,
             "sampler fanout, depth and window must be >= 1"),
            (self.rules.max_body_len >= 1, "rules.max_body_len must be >= 1"),
            (0.0 <= self.rules.min_confidence <= 1.0, "rules.min_confidence must lie in [0, 1]"),
            (self.rules.max_events >= 0, "rules.max_events must be >= 0"),
            (self.encoder.d_g >= 1 and self.encoder.epochs >= 0, "encoder.d_g >= 1 and epochs >= 0 required"),
            (self.backbone.d_t % self.backbone.n_heads == 0, "backbone.d_t must be divisible by n_heads"),
            (1 <= self.adapter.top_k <= self.adapter.n_experts, "need 1 <= adapter.top_k <= n_experts"),
            (self.adapter.alpha >= 0, "adapter.alpha must be >= 0"),
            (self.training.lr >= 0 and self.training.clip > 0, "training.lr >= 0 and clip > 0 required"),
            (self.inference.beam_width >= 1, "inference.beam_width must be >= 1"),
            (0.0 <= self.inference.lam <= 1.0, "inference.lam must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        return self

    @property
    def run_dir(self) -> Path:
        return Path(self.runs_dir) / self.name

    def backbone_config(self, vocab_size: int) -> BackboneConfig:
        b, a, ab = self.backbone, self.adapter, self.ablation
        n, k = (1, 1) if ab.single_adapter_mode else (a.n_experts, a.top_k)
        return BackboneConfig(
            vocab_size=vocab_size, d_t=b.d_t, n_layers=b.n_layers, n_heads=b.n_heads, d_ffn=b.d_ffn,
            max_seq_len=max_sequence_length(self.rules.max_events), n_experts=n, top_k=k, d_k=a.d_k,
            d_g=self.encoder.d_g, seed=b.seed, alpha=a.alpha, balance_reduction=a.balance_reduction,
            disable_st=ab.disable_st_moe, disable_ea=ab.disable_ea_moe, disable_cma=ab.disable_cma_moe,
        )

    def eval_config(self) -> EvalConfig:
        i = self.inference
        return EvalConfig(beam_width=i.beam_width, lam=i.lam, max_len=i.max_len, max_events=self.rules.max_events,
                          fanout=self.sampler.fanout, depth=self.sampler.depth, window=self.sampler.window,
                          seed=self.rules.seed, append_gold=i.append_gold,
                          hybrid=not self.ablation.disable_hybrid_score, max_queries=i.max_queries)

    def train_config(self) -> TrainConfig:
        t = self.training
        return TrainConfig(epochs=t.epochs, learning_rate=t.lr, weight_decay=t.weight_decay, clip=t.clip,
                           batch_size=t.batch_size, seed=t.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, raw: dict) -> "PipelineConfig":
        return _build(cls, raw, "")


def max_sequence_length(max_events: int) -> int:
    return 1 + EVENT_LEN * max_events + QUERY_LEN + TARGET_LEN


def _build(cls, raw: dict, path: str):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {path or '<root>'} must be a mapping")
    known = {f.name: f for f in fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in known:
            raise ConfigError(f"unknown config key {path + key}")
        default = getattr(cls(), key)
        if is_dataclass(default):
            kwargs[key] = _build(type(default), value, f"{path}{key}.")
        else:
            kwargs[key] = _coerce_value(value, default, path + key)
    return cls(**kwargs)


def _coerce_value(value, default, key: str):
    if default is None or value is None:
        return value
    try:
        if isinstance(default, bool):
            if isinstance(value, str):
                if value.lower() in ("1", "true", "yes", "on"):
                    return True
                if value.lower() in ("0", "false", "no", "off"):
                    return False
                raise ValueError(value)
            return bool(value)
        return type(default)(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{key}: cannot interpret {value!r} as {type(default).__name__}") from None


def apply_override(raw: dict, dotted: str, value: str) -> dict:
    """Set ``raw[a][b] = parsed(value)`` for ``dotted = "a.b"``; values are parsed as JSON when possible."""
    try:
        parsed: Any = json.loads(value)
    except json.JSONDecodeError:
        parsed = value
    node = raw
    parts = dotted.split(".")
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"override {dotted}: {part} is not a section")
    node[parts[-1]] = parsed
    return raw


def load_config(path: str | None, overrides: list[tuple[str, str]] = ()) -> PipelineConfig:
    raw: dict = {}
    if path:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    for key, value in overrides:
        apply_override(raw, key, value)
    return PipelineConfig.from_dict(raw).validate()


# stages --------------------------------------------------------------------------

def train_encoder(cfg: PipelineConfig, tkg: TemporalKG, split: DatasetSplit) -> EncoderParams:
    e, s = cfg.encoder, cfg.sampler
    params = EncoderParams(tkg.num_entities, 2 * tkg.num_relations, e.d_g, seed=e.seed)
    train_kg = tkg.slice(*split.train)
    return pretrain_encoder(train_kg, params, epochs=e.epochs, learning_rate=e.lr, seed=e.seed,
                            num_negatives=e.num_negatives, fanout=s.fanout, depth=s.depth, window=s.window,
                            batch_size=e.batch_size)


def mine(cfg: PipelineConfig, tkg: TemporalKG, split: DatasetSplit) -> RuleSet:
    r = cfg.rules
    mined = mine_rules(tkg.slice(*split.train), r.walks_per_relation, r.max_body_len, r.seed)
    return filter_rules(mined, r.min_confidence, r.top_n)


def build_examples(cfg: PipelineConfig, tkg: TemporalKG, span: tuple[int, int], rules: RuleSet,
                   vocab: SymbolVocab, encoder: EncoderParams) -> list[Example]:
    """Teacher-forcing examples for every fact in ``span``; history is everything earlier."""
    ecfg = cfg.eval_config()
    facts = tkg.facts[span[0]:span[1]]
    out = []
    cache: dict[int, TemporalKG] = {}
    for s, r, o, t in facts.tolist():
        history = cache.setdefault(t, tkg.before(t))
        _, instruction, graph, _ = prepare_query((s, r, t), history, rules, vocab, encoder, ecfg, gold=o)
        out.append(Example(instruction, graph))
    return out


def save_examples(directory, examples: list[Example], vocab: SymbolVocab) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "train.jsonl", "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "stk-adapter instructions", "version": 1}) + "\n")
        for ex in examples:
            fh.write(json.dumps(ex.instruction.to_record()) + "\n")
    h0 = np.stack([ex.graph.h0[0] for ex in examples]) if examples else np.zeros((0, 0))
    container.save(d / "graphs.bin", {"h0": h0}, {"kind": "graphs", "count": len(examples)})
    (d / "vocab.json").write_text(json.dumps({"version": 1, **vocab.signature()}), encoding="utf-8")


def load_examples(directory) -> tuple[list[Example], dict]:
    d = Path(directory)
    lines = (d / "train.jsonl").read_text(encoding="utf-8").splitlines()
    header = json.loads(lines[0])
    if header.get("format") != "stk-adapter instructions":
        raise ValueError(f"{d / 'train.jsonl'} lacks the instructions header")
    records = [InstructionSequence.from_record(json.loads(line)) for line in lines[1:] if line.strip()]
    arrays, _ = container.load(d / "graphs.bin")
    graphs = [GraphState(h, h) for h in arrays["h0"]]
    if len(graphs) != len(records):
        raise ValueError("instruction and graph counts differ")
    signature = json.loads((d / "vocab.json").read_text(encoding="utf-8"))
    return [Example(i, g) for i, g in zip(records, graphs)], signature


def fit_model(cfg: PipelineConfig, examples: list[Example], vocab_size: int,
              log_sink: Callable[[dict], None] | None = None, backbone: ModelState | None = None) -> ModelState:
    """Pretrain the backbone (unless one is supplied) and train adapters on ``examples``."""
    bcfg = cfg.backbone_config(vocab_size)
    if backbone is None:
        state = ModelState(bcfg)
        seqs = [np.asarray(ex.instruction.tokens + ex.instruction.target) for ex in examples]
        pretrain_backbone(state, seqs, epochs=cfg.backbone.pretrain_epochs, learning_rate=cfg.backbone.pretrain_lr,
                          batch_size=cfg.training.batch_size, seed=cfg.backbone.seed)
    else:
        state = with_backbone(backbone, bcfg)
    _reseed_adapters(state, cfg.adapter.seed)
    return train(state, examples, cfg.train_config(), log_sink)


def _reseed_adapters(state: ModelState, seed: int) -> None:
    rng = np.random.default_rng([seed, 1])
    state.adapters = [AdapterLayer(state.cfg.adapter_config(), rng, prefix=f"adapter{l}.")
                      for l in range(state.cfg.n_layers)]


def with_backbone(source: ModelState, cfg: BackboneConfig) -> ModelState:
    """A new model with ``cfg``'s adapters and a copy of ``source``'s backbone weights."""
    state = ModelState(cfg)
    for name, p in source.backbone.items():
        if state.backbone[name].shape != p.shape:
            raise ConfigError(f"backbone shape mismatch for {name}")
        state.backbone[name].data = p.data.copy()
    return state


@dataclass
class PipelineResult:
    tkg: TemporalKG
    split: DatasetSplit
    encoder: EncoderParams
    rules: RuleSet
    vocab: SymbolVocab
    examples: list[Example]
    model: ModelState
    report: EvalReport


def run_in_memory(cfg: PipelineConfig, tkg: TemporalKG, split: DatasetSplit,
                  backbone: ModelState | None = None) -> PipelineResult:
    """All stages without touching disk."""
    cfg.validate()
    encoder = train_encoder(cfg, tkg, split)
    rules = mine(cfg, tkg, split)
    vocab = SymbolVocab.from_tkg(tkg, cfg.rules.max_events)
    examples = build_examples(cfg, tkg, split.train, rules, vocab, encoder)
    model = fit_model(cfg, examples, len(vocab), backbone=backbone)
    with ag.no_grad():
        report = evaluate(model, encoder, rules, tkg, split.test, vocab, cfg.eval_config())
    return PipelineResult(tkg, split, encoder, rules, vocab, examples, model, report)


def variant(cfg: PipelineConfig, **ablation) -> PipelineConfig:
    return replace(cfg, ablation=replace(cfg.ablation, **ablation))
