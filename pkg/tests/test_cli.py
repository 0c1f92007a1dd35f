import json

import pytest

from diffner.checkpoint import load_checkpoint
from diffner.cli import main
from diffner.config import TrainConfig
from diffner.corpus import load_dataset
from diffner.evaluation import evaluate
from diffner.schedule import make_schedule

SMALL = ["--set", "hidden_size=16", "--set", "encoder_width=16", "--set", "heads=2", "--set", "num_spans=8",
         "--set", "eval_spans=8", "--set", "timesteps=100", "--set", "dropout=0", "--set", "epochs=2",
         "--set", "encoder_ffn=2"]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["make-synthetic", "--out", str(root / "train.jsonl"), "--n", "40", "--seed", "1"]) == 0
    assert main(["make-synthetic", "--out", str(root / "dev.jsonl"), "--n", "12", "--seed", "2",
                 "--id-prefix", "dev"]) == 0
    code = main(["train", "--train", str(root / "train.jsonl"), "--dev", str(root / "dev.jsonl"),
                 "--out", str(root / "run"), "--json", str(root / "train.json"), *SMALL])
    assert code == 0
    return root


def test_make_synthetic_is_seeded(tmp_path):
    a, b = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    assert main(["make-synthetic", "--out", str(a), "--n", "5", "--seed", "3"]) == 0
    assert main(["make-synthetic", "--out", str(b), "--n", "5", "--seed", "3"]) == 0
    assert a.read_text() == b.read_text()
    assert len(load_dataset(a)) == 5


def test_train_writes_artifacts(workspace):
    run = workspace / "run"
    assert {"best.pt", "last.pt", "train_log.jsonl", "config.yaml"} <= {p.name for p in run.iterdir()}
    report = json.loads((workspace / "train.json").read_text())
    assert report["seed"] == 0 and len(report["config_hash"]) == 12
    assert len(report["history"]) == 2


def test_prediction_file_round_trip_matches_in_process(workspace, capsys):
    preds, out = workspace / "preds.jsonl", workspace / "eval.json"
    ckpt = str(workspace / "run" / "best.pt")
    assert main(["predict", "--checkpoint", ckpt, "--data", str(workspace / "dev.jsonl"), "--out", str(preds),
                 "--phi", "1.0"]) == 0
    assert main(["eval", "--predictions", str(preds), "--data", str(workspace / "dev.jsonl"),
                 "--json", str(out)]) == 0
    from_file = json.loads(out.read_text())["report"]["f1"]

    model, payload = load_checkpoint(ckpt)
    cfg = TrainConfig.from_dict(payload["train_config"]).replace(threshold=1.0)
    dev = load_dataset(workspace / "dev.jsonl", labels=payload["labels"])
    report, _ = evaluate(model, dev, cfg.sampler_config(), make_schedule(cfg.scheduler, cfg.timesteps),
                         cfg.scale_factor, cfg.eval_batch_size)
    assert abs(report.f1 - from_file) <= 1e-9
    assert json.loads(out.read_text())["seed"] == 0

    direct = workspace / "direct.json"
    assert main(["eval", "--checkpoint", ckpt, "--data", str(workspace / "dev.jsonl"), "--phi", "1.0",
                 "--json", str(direct)]) == 0
    assert abs(json.loads(direct.read_text())["report"]["f1"] - from_file) <= 1e-9
    assert "f1" in capsys.readouterr().out


def test_benchmark_reports_both_sweeps(workspace):
    out = workspace / "bench.json"
    code = main(["benchmark", "--checkpoint", str(workspace / "run" / "best.pt"),
                 "--data", str(workspace / "dev.jsonl"), "--gammas", "1,2", "--kevals", "3,8", "--json", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert [r["gamma"] for r in report["gamma"]] == [1, 2]
    assert [r["k_eval"] for r in report["k_eval"]] == [3, 8]
    assert "config_hash" in report


def test_exit_codes(workspace, tmp_path):
    data = str(workspace / "dev.jsonl")
    ckpt = str(workspace / "run" / "best.pt")
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--phi", "3.5"]) == 2
    assert main(["eval", "--checkpoint", ckpt, "--data", data, "--set", "nonsense=1"]) == 2
    assert main(["frobnicate"]) == 2
    assert main(["ablate", "--axis", "scheduler", "--train", data, "--dev", data, "--out", str(tmp_path)]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("timesteps: [1, 2\n")
    assert main(["train", "--config", str(bad), "--train", data, "--out", str(tmp_path / "x")]) == 2
    assert main(["eval", "--checkpoint", str(tmp_path / "missing.pt"), "--data", data]) == 1


def test_config_file_and_flag_precedence(workspace, tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("epochs: 0\nseed: 4\nhidden_size: 16\nencoder_width: 16\nheads: 2\n")
    out = tmp_path / "r.json"
    code = main(["train", "--config", str(cfg), "--seed", "9", "--train", str(workspace / "dev.jsonl"),
                 "--out", str(tmp_path / "run"), "--json", str(out)])
    assert code == 0
    assert json.loads(out.read_text())["seed"] == 9
    _, payload = load_checkpoint(tmp_path / "run" / "best.pt")
    assert payload["train_config"]["hidden_size"] == 16
