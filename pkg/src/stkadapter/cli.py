"""Command-line entry point: ``stk <subcommand> [--config FILE] [--section.key VALUE ...]``.

Artifacts live under ``<runs_dir>/<name>/``::

    dataset.bin  encoder.ckpt  rules.txt  instructions/  model.ckpt
    train_log.jsonl  eval.txt  rankings.tsv  routing_stats.txt  config.json

Exit codes: 0 success, 2 configuration error, 3 missing artifact,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from filelock import FileLock, Timeout

from . import __version__
from . import autograd as ag
from .adapter import ConfigError
from .backbone import ModelState, RoutingStats, make_batch, model_forward
from .data import ParseError, ValidationError, load_bundle, load_dataset, save_bundle
from .encoder import EncoderParams
from .inference import evaluate
from .instructions import SymbolVocab
from .pipeline import (PipelineConfig, build_examples, fit_model, load_config, load_examples, mine,
                       save_examples, train_encoder)
from .rules import RuleSet

log = logging.getLogger("stkadapter")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4

COMMANDS = ("ingest", "pretrain-encoder", "mine-rules", "build-instructions", "train", "eval", "routing-stats")

# shortcut flags -> dotted config keys
SHORTCUTS = {
    "--lambda": ("inference.lam", None),
    "--beam-width": ("inference.beam_width", None),
    "--name": ("name", None),
    "--runs-dir": ("runs_dir", None),
    "--train": ("data.train", None),
    "--valid": ("data.valid", None),
    "--test": ("data.test", None),
    "--disable-st-moe": ("ablation.disable_st_moe", "true"),
    "--disable-ea-moe": ("ablation.disable_ea_moe", "true"),
    "--disable-cma-moe": ("ablation.disable_cma_moe", "true"),
    "--disable-hybrid-score": ("ablation.disable_hybrid_score", "true"),
    "--single-adapter-mode": ("ablation.single_adapter_mode", "true"),
    "--no-append-gold": ("inference.append_gold", "false"),
}


class MissingArtifact(Exception):
    pass


def _need(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifact(f"required artifact {path} not found; run the upstream stage first")
    return path


def parse_overrides(extra: list[str]) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    i = 0
    while i < len(extra):
        tok = extra[i]
        key, eq, inline = tok.partition("=")
        if key in SHORTCUTS:
            dotted, fixed = SHORTCUTS[key]
            if fixed is not None:
                out.append((dotted, fixed))
                i += 1
                continue
        elif key.startswith("--") and len(key) > 2:
            dotted = key[2:].replace("-", "_")
        else:
            raise ConfigError(f"unexpected argument {tok!r}")
        if eq:
            out.append((dotted, inline))
            i += 1
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"{key} needs a value")
            out.append((dotted, extra[i + 1]))
            i += 2
    return out


# commands --------------------------------------------------------------------------

def cmd_ingest(cfg: PipelineConfig, run: Path) -> str:
    paths = [cfg.data.train, cfg.data.valid, cfg.data.test]
    if not all(paths):
        raise ConfigError("data.train, data.valid and data.test must be set")
    for p in paths:
        _need(Path(p))
    tkg, split = load_dataset(*paths)
    save_bundle(run / "dataset.bin", tkg, split)
    return (f"ingested {split.base_counts} facts, |E|={tkg.num_entities} |R|={tkg.num_relations} "
            f"|T|={tkg.num_times}")


def _dataset(run: Path):
    return load_bundle(_need(run / "dataset.bin"))


def cmd_pretrain_encoder(cfg: PipelineConfig, run: Path) -> str:
    tkg, split = _dataset(run)
    params = train_encoder(cfg, tkg, split)
    params.save(run / "encoder.ckpt")
    return f"encoder trained for {cfg.encoder.epochs} epochs (d_g={cfg.encoder.d_g})"


def cmd_mine_rules(cfg: PipelineConfig, run: Path) -> str:
    tkg, split = _dataset(run)
    rules = mine(cfg, tkg, split)
    rules.save(run / "rules.txt")
    return f"mined {len(rules)} rules over {len(rules.rules_by_head)} head relations"


def cmd_build_instructions(cfg: PipelineConfig, run: Path) -> str:
    tkg, split = _dataset(run)
    rules = RuleSet.load(_need(run / "rules.txt"))
    encoder = EncoderParams.load(_need(run / "encoder.ckpt"))
    vocab = SymbolVocab.from_tkg(tkg, cfg.rules.max_events)
    examples = build_examples(cfg, tkg, split.train, rules, vocab, encoder)
    save_examples(run / "instructions", examples, vocab)
    return f"built {len(examples)} training instructions (vocab {len(vocab)})"


def cmd_train(cfg: PipelineConfig, run: Path) -> str:
    examples, signature = load_examples(_need(run / "instructions"))
    log_path = run / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"format": "stk-adapter train log", "version": 1}) + "\n")

        def sink(rec):
            fh.write(json.dumps(rec) + "\n")

        state = fit_model(cfg, examples, signature["size"], log_sink=sink)
    state.save(run / "model.ckpt", {"vocab": signature})
    return f"trained adapters on {len(examples)} examples for {cfg.training.epochs} epochs"


def _load_all(cfg: PipelineConfig, run: Path):
    tkg, split = _dataset(run)
    rules = RuleSet.load(_need(run / "rules.txt"))
    encoder = EncoderParams.load(_need(run / "encoder.ckpt"))
    model = ModelState.load(_need(run / "model.ckpt"))
    # ablation flags at eval time apply on top of the trained adapters
    model.cfg.disable_st |= cfg.ablation.disable_st_moe
    model.cfg.disable_ea |= cfg.ablation.disable_ea_moe
    model.cfg.disable_cma |= cfg.ablation.disable_cma_moe
    vocab = SymbolVocab.from_tkg(tkg, cfg.rules.max_events)
    return tkg, split, rules, encoder, model, vocab


def cmd_eval(cfg: PipelineConfig, run: Path) -> str:
    tkg, split, rules, encoder, model, vocab = _load_all(cfg, run)
    with ag.no_grad():
        report = evaluate(model, encoder, rules, tkg, split.test, vocab, cfg.eval_config())
    (run / "eval.txt").write_text(report.to_text(), encoding="utf-8")
    (run / "rankings.tsv").write_text(report.rankings_text(), encoding="utf-8")
    (run / "routing_stats.txt").write_text(report.routing.to_text(), encoding="utf-8")
    return (f"hit@1={report.hit1:.4f} hit@3={report.hit3:.4f} hit@10={report.hit10:.4f} "
            f"over {report.num_queries} queries")


def cmd_routing_stats(cfg: PipelineConfig, run: Path) -> str:
    examples, _ = load_examples(_need(run / "instructions"))
    model = ModelState.load(_need(run / "model.ckpt"))
    stats = RoutingStats.empty(model.cfg.n_layers, model.cfg.n_experts)
    for i in range(0, len(examples), 16):
        chunk = examples[i:i + 16]
        batch = make_batch([ex.instruction.model_inputs(extra=0) for ex in chunk], [ex.graph for ex in chunk],
                           model.cfg.d_g)
        with ag.no_grad():
            stats.add(model_forward(model, batch).records)
    (run / "routing_stats.txt").write_text(stats.to_text(), encoding="utf-8")
    return f"routing statistics over {len(examples)} instructions written"


HANDLERS = {
    "ingest": cmd_ingest,
    "pretrain-encoder": cmd_pretrain_encoder,
    "mine-rules": cmd_mine_rules,
    "build-instructions": cmd_build_instructions,
    "train": cmd_train,
    "eval": cmd_eval,
    "routing-stats": cmd_routing_stats,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stk", description="Temporal KG extrapolation with MoE adapters.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="JSON config file")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config, parse_overrides(extra))
        run = cfg.run_dir
        run.mkdir(parents=True, exist_ok=True)
        with FileLock(str(run / ".lock"), timeout=0):
            (run / f"config.{args.command}.json").write_text(
                json.dumps({"version": 1, "command": args.command, "config": cfg.to_dict()}, indent=2),
                encoding="utf-8")
            summary = HANDLERS[args.command](cfg, run)
    except (ConfigError, ParseError, ValidationError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Timeout:
        print("config error: run directory is locked by another process", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifact as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (ag.NumericalError, FloatingPointError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"{args.command}: {summary}")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
