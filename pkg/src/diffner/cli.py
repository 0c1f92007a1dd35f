"""Command-line entry point: ``diffner <verb> [options]``.

Exit status is 0 on success, 2 when an input or configuration is invalid and 1 for
any other failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint
from .config import TrainConfig, dump_config, load_config
from .corpus import Dataset, SyntheticSpec, load_dataset, make_synthetic_corpus, write_span_json
from .errors import DiffNERError
from .evaluation import ABLATION_GRIDS, TIMED_REGION, ablate, compute_prf, format_table, sweep_gamma, sweep_keval
from .evaluation import evaluate
from .sampler import predict_file
from .schedule import make_schedule

logger = logging.getLogger("diffner")

EXIT_OK, EXIT_RUNTIME, EXIT_INVALID = 0, 1, 2


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="YAML file with configuration fields")
    common.add_argument("--seed", type=int)
    common.add_argument("--k-eval", type=int, dest="eval_spans", help="number of sampled noisy spans")
    common.add_argument("--gamma", type=int, dest="sampling_steps", help="denoising iterations")
    common.add_argument("--phi", type=float, dest="threshold", help="filtering threshold in [0, 3]")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any configuration field (repeatable)")
    common.add_argument("--format", default="span_json", choices=("span_json", "conll_bio"),
                        help="input data format")
    common.add_argument("--json", type=Path, dest="json_out", help="also write the report as JSON to this path")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="diffner", description="Boundary-denoising diffusion NER")
    verbs = p.add_subparsers(dest="verb", required=True)

    t = verbs.add_parser("train", parents=[common], help="train a model")
    t.add_argument("--train", type=Path, required=True)
    t.add_argument("--dev", type=Path)
    t.add_argument("--out", type=Path, required=True, help="output directory")

    e = verbs.add_parser("eval", parents=[common], help="score a checkpoint or a predictions file")
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint", type=Path)
    src.add_argument("--predictions", type=Path)
    e.add_argument("--data", type=Path, required=True, help="gold data")

    pr = verbs.add_parser("predict", parents=[common], help="write scored predictions")
    pr.add_argument("--checkpoint", type=Path, required=True)
    pr.add_argument("--data", type=Path, required=True)
    pr.add_argument("--out", type=Path, required=True)

    b = verbs.add_parser("benchmark", parents=[common], help="gamma and K_eval sweeps")
    b.add_argument("--checkpoint", type=Path, required=True)
    b.add_argument("--data", type=Path, required=True)
    b.add_argument("--gammas", type=_int_list, default=[1, 5, 10])
    b.add_argument("--kevals", type=_int_list, default=[10, 60, 300])
    b.add_argument("--repeats", type=int, default=1, help="timing repeats per gamma (fastest kept)")

    a = verbs.add_parser("ablate", parents=[common], help="train one model per scheduler or expansion variant")
    a.add_argument("--axis", required=True, choices=sorted(ABLATION_GRIDS))
    a.add_argument("--train", type=Path, required=True)
    a.add_argument("--dev", type=Path, required=True)
    a.add_argument("--out", type=Path, required=True)
    a.add_argument("--accept-compute-budget", action="store_true",
                   help="acknowledge that every variant trains a full model")

    s = verbs.add_parser("make-synthetic", parents=[common], help="generate a synthetic corpus")
    s.add_argument("--out", type=Path, required=True)
    s.add_argument("--n", type=int, default=2000, help="number of sentences")
    s.add_argument("--nesting-rate", type=float, default=0.2)
    s.add_argument("--id-prefix", default="syn")
    return p


def _overrides(args) -> dict:
    out = {k: getattr(args, k) for k in ("seed", "eval_spans", "sampling_steps", "threshold")}
    for item in args.set:
        key, sep, value = item.partition("=")
        if not sep:
            raise DiffNERError(f"--set expects KEY=VALUE, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve_config(args, base: dict | None = None) -> TrainConfig:
    """Config file, else the checkpoint's stored config, then flag overrides."""
    if args.config is not None or base is None:
        return load_config(args.config, **_overrides(args))
    return TrainConfig.from_dict(base).replace(**_overrides(args))


def _emit(args, title: str, rows: list[dict], payload: dict) -> None:
    print(f"# {title}")
    print(format_table(rows))
    text = json.dumps(payload, indent=2, sort_keys=True, default=str)
    print(text)
    if args.json_out is not None:
        args.json_out.parent.mkdir(parents=True, exist_ok=True)
        args.json_out.write_text(text + "\n", encoding="utf-8")


def _meta(cfg: TrainConfig) -> dict:
    return {"seed": cfg.seed, "config_hash": cfg.digest()}


def _load_model(args):
    model, payload = load_checkpoint(args.checkpoint)
    cfg = _resolve_config(args, payload["train_config"])
    torch.manual_seed(cfg.seed)
    data = load_dataset(args.data, format=args.format, labels=payload["labels"])
    return model, cfg, data


def _report_row(report) -> dict:
    return {"precision": report.precision, "recall": report.recall, "f1": report.f1,
            "gold": report.gold, "predicted": report.predicted, "correct": report.correct}


def cmd_train(args) -> None:
    from .trainer import train

    cfg = _resolve_config(args)
    train_data = load_dataset(args.train, format=args.format)
    dev = load_dataset(args.dev, format=args.format, labels=train_data.labels) if args.dev else None
    args.out.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, args.out / "config.yaml")
    result = train(cfg, train_data, args.out, dev=dev)
    rows = [{k: r[k] for k in ("epoch", "step", "loss", "lr", "dev_f1")} for r in result.history]
    best = result.best_f1 if math.isfinite(result.best_f1) else None
    _emit(args, "training", rows, {**_meta(cfg), "checkpoint": str(result.checkpoint), "best_dev_f1": best,
                                   "history": result.history})


def cmd_eval(args) -> None:
    if args.predictions is not None:
        header = _predictions_header(args.predictions)
        gold = load_dataset(args.data, format=args.format, labels=header.get("labels", ()))
        pred = load_dataset(args.predictions, format="span_json", labels=gold.labels)
        report = compute_prf({ex.sentence.id: ex.entities for ex in pred},
                             {ex.sentence.id: ex.entities for ex in gold}, labels=pred.labels)
        meta = {"seed": header.get("seed"), "config_hash": header.get("config_hash"), "source": str(args.predictions)}
    else:
        model, cfg, gold = _load_model(args)
        sched = make_schedule(cfg.scheduler, cfg.timesteps)
        report, _ = evaluate(model, gold, cfg.sampler_config(), sched, cfg.scale_factor, cfg.eval_batch_size)
        meta = {**_meta(cfg), "source": str(args.checkpoint)}
    _emit(args, "exact-match evaluation", [_report_row(report)], {**meta, "report": report.to_dict()})


def _predictions_header(path: Path) -> dict:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        record = json.loads(first) if first.strip() else {}
    except json.JSONDecodeError:
        return {}
    return record.get("header", {}) if isinstance(record, dict) else {}


def cmd_predict(args) -> None:
    model, cfg, data = _load_model(args)
    sched = make_schedule(cfg.scheduler, cfg.timesteps)
    n = predict_file(model, data, cfg.sampler_config(), sched, cfg.scale_factor, args.out,
                     header=_meta(cfg), batch_size=cfg.eval_batch_size)
    _emit(args, "prediction", [{"sentences": len(data), "entities": n}],
          {**_meta(cfg), "output": str(args.out), "sentences": len(data), "entities": n})


def cmd_benchmark(args) -> None:
    model, cfg, data = _load_model(args)
    sched = make_schedule(cfg.scheduler, cfg.timesteps)
    sampler = cfg.sampler_config()
    gam = sweep_gamma(model, data, args.gammas, sampler, sched, cfg.scale_factor, cfg.eval_batch_size,
                      repeats=args.repeats)
    kev = sweep_keval(model, data, args.kevals, sampler, sched, cfg.scale_factor, cfg.eval_batch_size)
    _emit(args, f"gamma sweep (timed region: {TIMED_REGION})", gam, {**_meta(cfg), "gamma": gam, "k_eval": kev})
    print("# K_eval sweep")
    print(format_table(kev))


def cmd_ablate(args) -> None:
    if not args.accept_compute_budget:
        n = len(ABLATION_GRIDS[args.axis])
        raise DiffNERError(f"ablation trains {n} models; pass --accept-compute-budget to proceed")
    cfg = _resolve_config(args)
    train_data = load_dataset(args.train, format=args.format)
    dev = load_dataset(args.dev, format=args.format, labels=train_data.labels)
    rows = ablate(cfg, train_data, dev, args.axis, args.out)
    _emit(args, f"ablation over {args.axis}", rows, {**_meta(cfg), "axis": args.axis, "rows": rows})


def cmd_make_synthetic(args) -> None:
    cfg = _resolve_config(args)
    spec = SyntheticSpec(n_sentences=args.n, nesting_rate=args.nesting_rate, seed=cfg.seed, id_prefix=args.id_prefix)
    data: Dataset = make_synthetic_corpus(spec)
    write_span_json(args.out, data)
    counts = [ex.N for ex in data]
    row = {"sentences": len(data), "entities": int(np.sum(counts)), "mean_length": float(np.mean([ex.sentence.M for ex in data]))}
    _emit(args, "synthetic corpus", [row], {**_meta(cfg), "output": str(args.out), **row})


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "predict": cmd_predict,
    "benchmark": cmd_benchmark,
    "ablate": cmd_ablate,
    "make-synthetic": cmd_make_synthetic,
}


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        COMMANDS[args.verb](args)
    except (DiffNERError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001 - surfaced to the shell as a runtime failure
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
