"""Parallel entity generation from Gaussian noisy spans."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .corpus import Dataset, Entity, Sentence
from .errors import ValidationError
from .schedule import VarianceSchedule, ddim_step, make_tau

MAX_BATCH_SPANS = 1 << 15  # bounds decoder attention memory when K_eval is large


@dataclass(frozen=True)
class SamplerConfig:
    k_eval: int = 60
    gamma: int = 5
    phi: float = 2.5
    seed: int = 0

    def __post_init__(self):
        if self.k_eval < 1:
            raise ValidationError(f"k_eval must be at least 1, got {self.k_eval}")
        if self.gamma < 1:
            raise ValidationError(f"gamma must be at least 1, got {self.gamma}")
        if not 0.0 <= self.phi <= 3.0:
            raise ValidationError(f"phi must lie in [0, 3], got {self.phi}")


@dataclass(frozen=True)
class CandidateEntity:
    l: int
    r: int
    type: int
    score: float  # P_l[l] + P_r[r] + P_c[type]
    type_prob: float
    no_entity: bool = False  # the no-entity class wins the argmax over all C + 1 classes

    @property
    def entity(self) -> Entity:
        return Entity(self.l, self.r, self.type)


def _to_numpy(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        return x.detach().cpu().numpy()
    return np.asarray(x)


def decode_candidates(output, num_types: int) -> list[list[CandidateEntity]]:
    """Decode every span of a batched denoiser output.

    Boundaries are the argmax words (lowest index on ties); a left boundary past the
    right one is swapped. The type is the argmax over real types only.
    """
    p_left = _to_numpy(output.p_left)
    p_right = _to_numpy(output.p_right)
    p_type = _to_numpy(output.p_type)
    left, right = np.asarray(output.left_idx), np.asarray(output.right_idx)
    B, K = left.shape
    rows = np.arange(K)
    result = []
    for b in range(B):
        types = np.argmax(p_type[b, :, :num_types], axis=-1)
        null = np.argmax(p_type[b], axis=-1) == num_types
        pl = p_left[b, rows, left[b]]
        pr = p_right[b, rows, right[b]]
        pt = p_type[b, rows, types]
        score = pl.astype(np.float64) + pr + pt
        lo, hi = np.minimum(left[b], right[b]), np.maximum(left[b], right[b])
        result.append([
            CandidateEntity(int(lo[k]), int(hi[k]), int(types[k]), float(score[k]), float(pt[k]), bool(null[k]))
            for k in range(K)
        ])
    return result


def sample_batch(
    model,
    sentences: Sequence[Sentence],
    cfg: SamplerConfig,
    sched: VarianceSchedule,
    scale: float,
    rng: np.random.Generator | None = None,
    noise: np.ndarray | None = None,
) -> list[list[CandidateEntity]]:
    """Run the reverse process for a batch of sentences.

    The sentence encoding is computed once and shared by all ``gamma`` denoising
    passes. ``x_T`` is ``noise`` when given, otherwise drawn from ``rng`` one sentence
    at a time so that batching does not change the random stream.
    """
    if not sentences:
        return []
    plan = make_tau(sched.T, cfg.gamma)
    if noise is None:
        if rng is None:
            raise ValidationError("sample_batch needs either rng or noise")
        noise = np.stack([rng.standard_normal((cfg.k_eval, 2)) for _ in sentences])
    x = np.asarray(noise, dtype=np.float64)
    if x.shape != (len(sentences), cfg.k_eval, 2):
        raise ValidationError(f"noise shape {x.shape} does not match ({len(sentences)}, {cfg.k_eval}, 2)")
    was_training = getattr(model, "training", False)
    if hasattr(model, "eval"):
        model.eval()
    try:
        with torch.no_grad():
            enc = model.encode(sentences)
            tau = plan.tau
            for i in range(len(tau) - 1, -1, -1):
                out = model.denoise(x, enc, tau[i], scale)
                if i > 0:
                    x = ddim_step(x, out.x0_hat, tau[i], tau[i - 1], sched)
    finally:
        if was_training:
            model.train()
    return decode_candidates(out, model.num_types)


def sample_entities(model, sentence: Sentence, cfg: SamplerConfig, sched: VarianceSchedule, scale: float,
                    rng: np.random.Generator) -> list[CandidateEntity]:
    return sample_batch(model, [sentence], cfg, sched, scale, rng)[0]


def postprocess(candidates: Sequence[CandidateEntity], phi: float) -> list[CandidateEntity]:
    """Drop no-entity spans, keep the most probable type per boundary pair, then threshold."""
    best: dict[tuple[int, int], CandidateEntity] = {}
    for cand in candidates:
        if cand.no_entity:
            continue
        key = (cand.l, cand.r)
        if key not in best or cand.type_prob > best[key].type_prob:
            best[key] = cand
    kept = [c for c in best.values() if c.score >= phi]
    return sorted(kept, key=lambda c: (c.l, c.r, c.type))


def predict(model, sentences: Sequence[Sentence], cfg: SamplerConfig, sched: VarianceSchedule, scale: float,
            batch_size: int = 64, rng: np.random.Generator | None = None) -> list[list[CandidateEntity]]:
    """Sample and post-process every sentence; one RNG stream seeded by ``cfg.seed``.

    Noise is drawn for all sentences in input order, then sentences are batched by
    length to limit padding. A batch holds at most ``batch_size`` sentences and
    ``MAX_BATCH_SPANS`` noisy spans. Output order follows the input.
    """
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    noise = [rng.standard_normal((cfg.k_eval, 2)) for _ in sentences]
    order = sorted(range(len(sentences)), key=lambda i: sentences[i].M)
    results: list[list[CandidateEntity]] = [[] for _ in sentences]
    step = max(1, min(batch_size, MAX_BATCH_SPANS // cfg.k_eval))
    for start in range(0, len(order), step):
        idx = order[start : start + step]
        batch = sample_batch(model, [sentences[i] for i in idx], cfg, sched, scale,
                             noise=np.stack([noise[i] for i in idx]))
        for i, cands in zip(idx, batch):
            results[i] = postprocess(cands, cfg.phi)
    return results


def predict_file(model, dataset: Dataset, cfg: SamplerConfig, sched: VarianceSchedule, scale: float, path,
                 header: dict | None = None, batch_size: int = 64) -> int:
    """Write span_json predictions with scores; returns the number of entities written."""
    sentences = [ex.sentence for ex in dataset]
    preds = predict(model, sentences, cfg, sched, scale, batch_size=batch_size)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {"format": "span_json", "labels": list(dataset.labels), "sampler": asdict(cfg)}
    meta.update(header or {})
    count = 0
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"header": meta}) + "\n")
        for sent, ents in zip(sentences, preds):
            record = {
                "id": sent.id,
                "tokens": list(sent.tokens),
                "entities": [
                    {"start": e.l, "end": e.r, "type": dataset.labels[e.type], "score": e.score} for e in ents
                ],
            }
            count += len(ents)
            fh.write(json.dumps(record) + "\n")
    return count
