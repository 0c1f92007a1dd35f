"""Training loop: noise gold boundaries at a random step, denoise, match, optimise."""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .config import TrainConfig
from .corpus import Dataset, Example, SpanCodec, expand_entities
from .denoiser import BoundaryDenoiser, ModelConfig
from .errors import ValidationError
from .matching import batch_loss, hungarian_match
from .schedule import VarianceSchedule, forward_diffuse, make_schedule

logger = logging.getLogger(__name__)


def model_config(cfg: TrainConfig, vocab: Sequence[str], num_types: int) -> ModelConfig:
    return ModelConfig(
        hidden_size=cfg.hidden_size,
        num_types=num_types,
        encoder_width=cfg.encoder_width,
        encoder_layers=cfg.encoder_layers,
        encoder_ffn=cfg.encoder_ffn,
        decoder_ffn=cfg.decoder_ffn,
        heads=cfg.heads,
        dropout=cfg.dropout,
        pointer_activation=cfg.pointer_activation,
        vocab=list(vocab),
    )


def build_model(cfg: TrainConfig, dataset: Dataset) -> BoundaryDenoiser:
    """Fresh model whose toy vocabulary is every token type of ``dataset`` (sorted)."""
    vocab = sorted({w for ex in dataset for w in ex.sentence.tokens})
    torch.manual_seed(cfg.seed)
    return BoundaryDenoiser(model_config(cfg, vocab, len(dataset.labels)))


def warmup_linear(step: int, total: int, warmup: float) -> float:
    """Learning-rate multiplier: 0 at step 0, 1 at ``warmup * total``, 0 at ``total``."""
    peak = int(warmup * total)
    if step < peak:
        return step / peak
    if total <= peak:
        return 0.0
    return max(0.0, (total - step) / (total - peak))


def noisy_batch(batch: Sequence[Example], sched: VarianceSchedule, cfg: TrainConfig, rng: np.random.Generator):
    """Expand, encode and noise the gold boundaries of each sentence.

    Returns ``(x_t, t)`` with one timestep per sentence.
    """
    x0 = np.stack([
        expand_entities(ex.entities, cfg.num_spans, cfg.expansion, SpanCodec(ex.sentence.M, cfg.scale_factor), rng).B
        for ex in batch
    ])
    t = rng.integers(1, sched.T + 1, size=len(batch))
    eps = rng.standard_normal(x0.shape)
    x_t = np.stack([forward_diffuse(x0[b], int(t[b]), eps[b], sched) for b in range(len(batch))])
    return x_t, t


def train_step(
    batch: Sequence[Example],
    model: BoundaryDenoiser,
    optimizer: torch.optim.Optimizer,
    sched: VarianceSchedule,
    cfg: TrainConfig,
    rng: np.random.Generator,
    lr_scheduler=None,
) -> float:
    """One optimiser update on ``batch``; returns the batch-mean loss before the update."""
    oversized = [ex for ex in batch if ex.N > cfg.num_spans]
    if oversized:
        ex = oversized[0]
        if cfg.on_overflow == "error":
            raise ValidationError(
                f"sentence {ex.sentence.id!r} has {ex.N} entities, more than K={cfg.num_spans}"
            )
        logger.warning("skipping %d sentence(s) with more than K=%d entities", len(oversized), cfg.num_spans)
        batch = [ex for ex in batch if ex.N <= cfg.num_spans]
        if not batch:
            return float("nan")
    model.train()
    x_t, t = noisy_batch(batch, sched, cfg, rng)
    enc = model.encode([ex.sentence for ex in batch])
    out = model(x_t, enc, t, cfg.scale_factor)
    golds = [ex.entities for ex in batch]
    matches = [hungarian_match(out.item(b), golds[b]) for b in range(len(batch))]
    loss = batch_loss(out.p_left, out.p_right, out.p_type, out.lengths, golds, matches,
                      boundary_loss=cfg.boundary_loss, no_entity_weight=cfg.no_entity_weight).mean()
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), cfg.grad_clip)
    optimizer.step()
    if lr_scheduler is not None:
        lr_scheduler.step()
    return float(loss.detach())


def set_encoder_frozen(model: BoundaryDenoiser, frozen: bool) -> None:
    for p in model.encoder.parameters():
        p.requires_grad_(not frozen)


@dataclass
class TrainResult:
    checkpoint: Path
    best_f1: float
    history: list = field(default_factory=list)
    model: BoundaryDenoiser | None = None


def train(
    cfg: TrainConfig,
    dataset: Dataset,
    out_dir,
    dev: Dataset | None = None,
    model: BoundaryDenoiser | None = None,
) -> TrainResult:
    """Full training run; writes ``last.pt``, ``best.pt`` and ``train_log.jsonl`` under ``out_dir``.

    The best checkpoint is chosen by dev exact-match F1 (the last epoch when no dev
    set is given).
    """
    from .evaluation import evaluate

    cfg.validate()
    if len(dataset) == 0:
        raise ValidationError("training dataset is empty")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if cfg.concat_dev and dev is not None:
        dataset = Dataset(examples=list(dataset.examples) + list(dev.examples), labels=dataset.labels)

    rng = np.random.default_rng(cfg.seed)
    if model is None:
        model = build_model(cfg, dataset)
    torch.manual_seed(cfg.seed)
    sched = make_schedule(cfg.scheduler, cfg.timesteps)
    optimizer = torch.optim.AdamW(model.parameters(), lr=cfg.learning_rate, weight_decay=cfg.weight_decay)
    steps_per_epoch = math.ceil(len(dataset) / cfg.batch_size)
    total = steps_per_epoch * cfg.epochs
    lr_scheduler = torch.optim.lr_scheduler.LambdaLR(optimizer, lambda s: warmup_linear(s, total, cfg.lr_warmup))

    meta = {"seed": cfg.seed, "config_hash": cfg.digest()}
    best_path, last_path = out_dir / "best.pt", out_dir / "last.pt"
    log_path = out_dir / "train_log.jsonl"
    log_path.write_text("")
    history = []
    best_f1 = -1.0
    step = 0

    if cfg.epochs == 0:
        save_checkpoint(last_path, model, cfg.to_dict(), dataset.labels, meta)
        save_checkpoint(best_path, model, cfg.to_dict(), dataset.labels, meta)
        return TrainResult(best_path, float("nan"), history, model)

    for epoch in range(cfg.epochs):
        set_encoder_frozen(model, epoch < cfg.freeze_epochs)
        order = rng.permutation(len(dataset))
        losses = []
        start = time.perf_counter()
        for i in range(0, len(order), cfg.batch_size):
            batch = [dataset[j] for j in order[i : i + cfg.batch_size]]
            losses.append(train_step(batch, model, optimizer, sched, cfg, rng, lr_scheduler))
            step += 1
        record = {
            "epoch": epoch + 1,
            "step": step,
            "loss": float(np.nanmean(losses)),
            "lr": optimizer.param_groups[0]["lr"],
            "dev_f1": None,
            "seconds": round(time.perf_counter() - start, 3),
        }
        if dev is not None and len(dev):
            report = evaluate(model, dev, cfg.sampler_config(), sched, cfg.scale_factor,
                              batch_size=cfg.eval_batch_size)[0]
            record["dev_f1"] = report.f1
        history.append(record)
        with open(log_path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(record) + "\n")
        logger.info("epoch %(epoch)d step %(step)d loss %(loss).4f lr %(lr).2e dev_f1 %(dev_f1)s", record)

        save_checkpoint(last_path, model, cfg.to_dict(), dataset.labels, {**meta, "epoch": epoch + 1})
        score = record["dev_f1"] if record["dev_f1"] is not None else 0.0
        if dev is None or score > best_f1:
            best_f1 = score
            save_checkpoint(best_path, model, cfg.to_dict(), dataset.labels, {**meta, "epoch": epoch + 1})
    set_encoder_frozen(model, False)
    return TrainResult(best_path, best_f1, history, model)
