"""Exact-match scoring and the analysis harnesses (gamma / K_eval sweeps, ablations)."""

from __future__ import annotations

import time
from collections import Counter
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

from .corpus import Dataset
from .errors import ValidationError
from .sampler import SamplerConfig, predict
from .schedule import VarianceSchedule

TIMED_REGION = "sampling + post-processing (model loading and dataset parsing excluded)"


@dataclass
class EvalReport:
    precision: float
    recall: float
    f1: float
    gold: int
    predicted: int
    correct: int
    per_type: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _prf(correct: int, predicted: int, gold: int) -> tuple[float, float, float]:
    p = correct / predicted if predicted else 0.0
    r = correct / gold if gold else 0.0
    f = 2 * p * r / (p + r) if p + r > 0 else 0.0
    return p, r, f


def compute_prf(pred, gold, labels: Sequence[str] | None = None) -> EvalReport:
    """Exact ``(l, r, type)`` match scored as a multiset per sentence.

    ``pred`` and ``gold`` are either aligned sequences of entity collections or mappings
    from sentence id to entity collection (which must share the same keys).
    """
    if isinstance(pred, dict) or isinstance(gold, dict):
        if not (isinstance(pred, dict) and isinstance(gold, dict)):
            raise ValidationError("pred and gold must both be mappings or both be sequences")
        if set(pred) != set(gold):
            missing = sorted(set(gold) ^ set(pred))[:5]
            raise ValidationError(f"sentence ids differ between predictions and gold: {missing}")
        keys = sorted(gold)
        pred, gold = [pred[k] for k in keys], [gold[k] for k in keys]
    if len(pred) != len(gold):
        raise ValidationError(f"{len(pred)} predicted sentences vs {len(gold)} gold sentences")

    tally = Counter()
    for p_ents, g_ents in zip(pred, gold):
        pc = Counter(_key(e) for e in p_ents)
        gc = Counter(_key(e) for e in g_ents)
        hit = pc & gc
        for (_, _, t), n in pc.items():
            tally["pred", t] += n
        for (_, _, t), n in gc.items():
            tally["gold", t] += n
        for (_, _, t), n in hit.items():
            tally["correct", t] += n
    types = sorted({t for (_, t) in tally})
    per_type = {}
    for t in types:
        name = labels[t] if labels is not None and isinstance(t, int) and t < len(labels) else str(t)
        c, pr, g = tally["correct", t], tally["pred", t], tally["gold", t]
        p, r, f = _prf(c, pr, g)
        per_type[name] = {"precision": p, "recall": r, "f1": f, "gold": g, "predicted": pr, "correct": c}
    C = sum(v for (k, _), v in tally.items() if k == "correct")
    P = sum(v for (k, _), v in tally.items() if k == "pred")
    G = sum(v for (k, _), v in tally.items() if k == "gold")
    p, r, f = _prf(C, P, G)
    return EvalReport(p, r, f, gold=G, predicted=P, correct=C, per_type=per_type)


def _key(e) -> tuple[int, int, int]:
    return (int(e.l), int(e.r), int(e.type))


def evaluate(model, dataset: Dataset, cfg: SamplerConfig, sched: VarianceSchedule, scale: float,
             batch_size: int = 64):
    """Predict every sentence and score against gold. Returns ``(report, predictions)``."""
    sentences = [ex.sentence for ex in dataset]
    preds = predict(model, sentences, cfg, sched, scale, batch_size=batch_size)
    report = compute_prf([[c.entity for c in p] for p in preds], [ex.entities for ex in dataset],
                         labels=dataset.labels)
    return report, preds


def timed_evaluate(model, dataset: Dataset, cfg: SamplerConfig, sched: VarianceSchedule, scale: float,
                   batch_size: int = 64):
    """``evaluate`` plus wall-clock seconds for the sampling and post-processing region."""
    start = time.perf_counter()
    report, _ = evaluate(model, dataset, cfg, sched, scale, batch_size=batch_size)
    return report, time.perf_counter() - start


def sweep_gamma(model, dataset: Dataset, gammas: Sequence[int], cfg: SamplerConfig, sched: VarianceSchedule,
                scale: float, batch_size: int = 64, repeats: int = 1) -> list[dict]:
    """F1 and throughput per number of denoising iterations, measured serially.

    With ``repeats > 1`` the fastest timing is kept.
    """
    rows = []
    for gamma in gammas:
        run_cfg = replace(cfg, gamma=int(gamma))
        best = float("inf")
        for _ in range(max(1, repeats)):
            report, seconds = timed_evaluate(model, dataset, run_cfg, sched, scale, batch_size)
            best = min(best, seconds)
        rows.append({
            "gamma": int(gamma),
            "f1": report.f1,
            "seconds": best,
            "sents_per_s": len(dataset) / best if best > 0 else float("inf"),
            "timed_region": TIMED_REGION,
        })
    return rows


def sweep_keval(model, dataset: Dataset, kevals: Sequence[int], cfg: SamplerConfig, sched: VarianceSchedule,
                scale: float, batch_size: int = 64) -> list[dict]:
    """Precision / recall / F1 per number of sampled spans, without retraining."""
    rows = []
    for k in kevals:
        report, _ = evaluate(model, dataset, replace(cfg, k_eval=int(k)), sched, scale, batch_size)
        rows.append({"k_eval": int(k), "precision": report.precision, "recall": report.recall, "f1": report.f1})
    return rows


ABLATION_GRIDS = {
    "scheduler": [{"scheduler": s, "timesteps": T} for s in ("linear", "cosine") for T in (1000, 1500, 2000)],
    "expansion": [{"expansion": e, "num_spans": K} for e in ("repetition", "random") for K in (60, 120, 150)],
}


def ablate(cfg, train_data: Dataset, dev_data: Dataset, axis: str, out_dir, variants: list[dict] | None = None) -> list[dict]:
    """Train one model per variant of ``axis`` and tabulate its best dev F1."""
    from .trainer import train

    if axis not in ABLATION_GRIDS:
        raise ValidationError(f"unknown ablation axis {axis!r}; expected one of {sorted(ABLATION_GRIDS)}")
    rows = []
    for variant in variants if variants is not None else ABLATION_GRIDS[axis]:
        run_cfg = cfg.replace(**variant)
        name = "-".join(f"{k}={v}" for k, v in variant.items())
        result = train(run_cfg, train_data, Path(out_dir) / name, dev=dev_data)
        rows.append({**variant, "dev_f1": result.best_f1, "seed": run_cfg.seed})
    return rows


def format_table(rows: list[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "(empty)"
    columns = list(columns or [c for c in rows[0] if c != "timed_region"])
    cells = [[_fmt(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.rjust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    lines += ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def _fmt(v) -> str:
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)
