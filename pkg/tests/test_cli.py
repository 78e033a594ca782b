import json

import pytest
from filelock import FileLock

from stkadapter import synthetic
from stkadapter.cli import EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC, EXIT_OK, main, parse_overrides
from stkadapter.adapter import ConfigError
from stkadapter.pipeline import PipelineConfig, load_config

STAGES = ("ingest", "pretrain-encoder", "mine-rules", "build-instructions", "train", "eval")

TINY = {
    "sampler": {"fanout": 4, "window": 4},
    "rules": {"walks_per_relation": 10, "max_body_len": 2, "max_events": 3},
    "encoder": {"d_g": 4, "epochs": 1},
    "backbone": {"d_t": 8, "n_layers": 1, "n_heads": 2, "d_ffn": 16, "pretrain_epochs": 1},
    "adapter": {"n_experts": 2, "d_k": 3},
    "training": {"epochs": 1, "batch_size": 8},
    "inference": {"beam_width": 3, "max_queries": 8},
}


@pytest.fixture
def setup(tmp_path):
    train, valid, test = synthetic.write_dataset(tmp_path / "data", synthetic.copy_task_facts(8, 3, 15, seed=0))
    cfg = dict(TINY, runs_dir=str(tmp_path / "runs"), data={"train": str(train), "valid": str(valid), "test": str(test)})
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps(cfg))
    return tmp_path, path


def run(path, command, *extra):
    return main([command, "--config", str(path), *extra])


def test_full_pipeline_is_deterministic(setup, capsys):
    tmp, cfg = setup
    outputs = []
    for name in ("a", "b"):
        for stage in STAGES:
            assert run(cfg, stage, "--name", name) == EXIT_OK, stage
        assert run(cfg, "routing-stats", "--name", name) == EXIT_OK
        outputs.append(tmp / "runs" / name)
    a, b = outputs
    for artifact in ("dataset.bin", "encoder.ckpt", "rules.txt", "model.ckpt", "eval.txt", "rankings.tsv"):
        assert (a / artifact).read_bytes() == (b / artifact).read_bytes(), artifact
    log = (a / "train_log.jsonl").read_text().splitlines()
    assert json.loads(log[0])["format"] == "stk-adapter train log"
    assert {"step", "epoch", "ce", "balance", "loss", "grad_norm"} <= set(json.loads(log[1]))
    assert (a / "routing_stats.txt").read_text().startswith("# stk-adapter routing-stats v1")
    out = capsys.readouterr().out
    assert "eval: hit@1=" in out


def _through_train(cfg, name="r"):
    for stage in STAGES[:-1]:
        assert run(cfg, stage, "--name", name) == EXIT_OK


def test_eval_overrides_and_ablation_flags(setup):
    tmp, cfg = setup
    _through_train(cfg)
    assert run(cfg, "eval", "--name", "r", "--lambda", "0.5", "--no-append-gold") == EXIT_OK
    text = (tmp / "runs" / "r" / "eval.txt").read_text()
    assert "config.lambda\t0.5" in text and "config.append_gold\tFalse" in text
    assert run(cfg, "eval", "--name", "r", "--disable-ea-moe", "--disable-hybrid-score") == EXIT_OK
    assert "config.lambda\t0.0" in (tmp / "runs" / "r" / "eval.txt").read_text()
    saved = json.loads((tmp / "runs" / "r" / "config.eval.json").read_text())
    assert saved["config"]["ablation"]["disable_ea_moe"] is True


def test_missing_upstream_artifacts(setup, capsys):
    _, cfg = setup
    assert run(cfg, "train", "--name", "empty") == EXIT_MISSING
    assert run(cfg, "eval", "--name", "empty") == EXIT_MISSING
    assert "dataset.bin" in capsys.readouterr().err


def test_missing_rules_names_the_file(setup, capsys):
    _, cfg = setup
    assert run(cfg, "ingest", "--name", "x") == EXIT_OK
    assert run(cfg, "pretrain-encoder", "--name", "x") == EXIT_OK
    assert run(cfg, "build-instructions", "--name", "x") == EXIT_MISSING
    assert "rules.txt" in capsys.readouterr().err


@pytest.mark.parametrize("extra", [["--nonsense.key", "1"], ["--inference.lam", "1.5"], ["--lambda", "abc"],
                                   ["--backbone.d_t", "9"], ["stray"]])
def test_config_errors(setup, extra):
    _, cfg = setup
    assert run(cfg, "ingest", *extra) == EXIT_CONFIG


def test_bad_input_file_is_a_config_error(tmp_path):
    bad = tmp_path / "bad.txt"
    bad.write_text("a\tb\tc\n")
    assert main(["ingest", "--runs-dir", str(tmp_path), "--train", str(bad), "--valid", str(bad),
                 "--test", str(bad)]) == EXIT_CONFIG


def test_missing_input_file(tmp_path):
    missing = str(tmp_path / "nope.txt")
    assert main(["ingest", "--runs-dir", str(tmp_path), "--train", missing, "--valid", missing,
                 "--test", missing]) == EXIT_MISSING


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_a_numerical_failure(setup):
    _, cfg = setup
    assert run(cfg, "ingest", "--name", "x") == EXIT_OK
    assert run(cfg, "pretrain-encoder", "--name", "x", "--encoder.lr", "1e300") == EXIT_NUMERIC


def test_locked_run_directory(setup):
    tmp, cfg = setup
    run_dir = tmp / "runs" / "locked"
    run_dir.mkdir(parents=True)
    with FileLock(str(run_dir / ".lock")):
        assert run(cfg, "ingest", "--name", "locked") == EXIT_CONFIG


def test_version(capsys):
    with pytest.raises(SystemExit) as exc:
        main(["--version"])
    assert exc.value.code == 0 and "stk" in capsys.readouterr().out


def test_override_parsing():
    assert parse_overrides(["--a.b", "1", "--c.d=x", "--lambda", "0.2", "--single-adapter-mode"]) == [
        ("a.b", "1"), ("c.d", "x"), ("inference.lam", "0.2"), ("ablation.single_adapter_mode", "true")]
    with pytest.raises(ConfigError):
        parse_overrides(["--a.b"])


def test_config_file_and_overrides(tmp_path):
    path = tmp_path / "c.json"
    path.write_text(json.dumps({"inference": {"lam": 0.3}, "rules": {"top_n": 5}}))
    cfg = load_config(path, [("inference.beam_width", "7"), ("ablation.single_adapter_mode", "true")])
    assert (cfg.inference.lam, cfg.inference.beam_width, cfg.rules.top_n) == (0.3, 7, 5)
    bb = cfg.backbone_config(50)
    assert (bb.n_experts, bb.top_k) == (1, 1)
    assert PipelineConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        load_config(None, [("training.epochs", "[1, 2]")])
