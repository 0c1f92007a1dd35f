"""Optimal assignment between predicted spans and gold entities, and the training loss."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from scipy.optimize import linear_sum_assignment

from .corpus import Entity
from .errors import ValidationError

NO_MATCH = -1  # the empty (no-entity) target
PROB_FLOOR = 1e-12
BOUNDARY_LOSSES = ("bernoulli", "target_only")


@dataclass(frozen=True)
class Matching:
    assignment: tuple[int, ...]  # gold index per prediction, NO_MATCH for the empty target
    total_cost: float


def _np(x) -> np.ndarray:
    if isinstance(x, torch.Tensor):
        x = x.detach().cpu().numpy()
    return np.asarray(x, dtype=np.float64)


def matching_cost(output, k: int, gold: Entity | None) -> float:
    """Negative summed probability that span ``k`` predicts ``gold``; 0 for the empty target."""
    if gold is None:
        return 0.0
    return -(
        float(output.p_left[k][gold.l]) + float(output.p_right[k][gold.r]) + float(output.p_type[k][gold.type])
    )


def cost_matrix(p_left, p_right, p_type, gold: Sequence[Entity]) -> np.ndarray:
    """``(K, N)`` matrix of pairwise costs against the real gold entities."""
    p_left, p_right, p_type = _np(p_left), _np(p_right), _np(p_type)
    if not gold:
        return np.zeros((p_left.shape[0], 0))
    l = np.array([e.l for e in gold])
    r = np.array([e.r for e in gold])
    c = np.array([e.type for e in gold])
    return -(p_left[:, l] + p_right[:, r] + p_type[:, c])


def assignment_cost(cost: np.ndarray, assignment: Sequence[int]) -> float:
    total = 0.0
    for k, j in enumerate(assignment):
        if j != NO_MATCH:
            total += cost[k, j]
    return total


def _subproblem_cost(cost: np.ndarray, rows: list[int], cols: list[int]) -> float:
    if not cols:
        return 0.0
    sub = cost[np.ix_(rows, cols)]
    ri, ci = linear_sum_assignment(sub)
    return float(sub[ri, ci].sum())


def solve_assignment(cost: np.ndarray, canonical: bool = True) -> tuple[int, ...]:
    """Minimum-cost assignment of ``N`` columns to ``K >= N`` rows.

    With ``canonical`` the lexicographically smallest optimal assignment vector is
    returned, ordering the empty target after every gold index.
    """
    K, N = cost.shape
    if K < N:
        raise ValidationError(f"cannot match {N} gold entities with only K={K} predictions")
    assignment = [NO_MATCH] * K
    if N == 0:
        return tuple(assignment)
    rows, cols = linear_sum_assignment(cost)
    for k, j in zip(rows, cols):
        assignment[k] = int(j)
    if not canonical:
        return tuple(assignment)

    best = assignment_cost(cost, assignment)
    tol = 1e-12 * max(1.0, abs(best))
    # suffix[k, j] = min(cost[k:, j]); its column sums bound any completion from below
    suffix = np.vstack([np.minimum.accumulate(cost[::-1], axis=0)[::-1], np.full((1, N), np.inf)])
    fixed = 0.0
    free = list(range(N))
    result = []
    for k in range(K):
        if not free:
            result.extend([NO_MATCH] * (K - k))
            break
        rest = K - k - 1
        chosen = NO_MATCH
        for j in free:
            remaining = [c for c in free if c != j]
            if len(remaining) > rest:
                continue
            here = fixed + cost[k, j]
            if here + suffix[k + 1, remaining].sum() > best + tol:
                continue
            if here + _subproblem_cost(cost, list(range(k + 1, K)), remaining) <= best + tol:
                chosen = j
                break
        if chosen == NO_MATCH:
            # some optimum extends the prefix; if no gold fits here, that optimum leaves row k empty
            if len(free) > rest:
                return tuple(assignment)  # numerical corner: keep the solver's optimum
        else:
            fixed += cost[k, chosen]
            free.remove(chosen)
        result.append(chosen)
    return tuple(result)


def hungarian_match(output, gold: Sequence[Entity], canonical: bool = True) -> Matching:
    """Optimal matching of one sentence's ``K`` predictions against its gold entities."""
    K = _np(output.p_left).shape[0]
    if K < len(gold):
        raise ValidationError(f"cannot match {len(gold)} gold entities with only K={K} predictions")
    cost = cost_matrix(output.p_left, output.p_right, output.p_type, gold)
    assignment = solve_assignment(cost, canonical=canonical)
    return Matching(assignment=assignment, total_cost=assignment_cost(cost, assignment))


def _targets(golds: Sequence[Sequence[Entity]], matches: Sequence[Matching], K: int, num_types: int):
    B = len(golds)
    matched = np.zeros((B, K), dtype=bool)
    left = np.zeros((B, K), dtype=np.int64)
    right = np.zeros((B, K), dtype=np.int64)
    cls = np.full((B, K), num_types, dtype=np.int64)
    for b, (gold, match) in enumerate(zip(golds, matches)):
        if len(match.assignment) != K:
            raise ValidationError(f"matching covers {len(match.assignment)} spans, expected {K}")
        for k, j in enumerate(match.assignment):
            if j == NO_MATCH:
                continue
            if not 0 <= j < len(gold):
                raise ValidationError(f"matching refers to gold entity {j} of {len(gold)}")
            e = gold[j]
            matched[b, k] = True
            left[b, k], right[b, k], cls[b, k] = e.l, e.r, e.type
    return matched, left, right, cls


def batch_loss(
    p_left: torch.Tensor,
    p_right: torch.Tensor,
    p_type: torch.Tensor,
    lengths,
    golds: Sequence[Sequence[Entity]],
    matches: Sequence[Matching],
    boundary_loss: str = "bernoulli",
    no_entity_weight: float = 1.0,
) -> torch.Tensor:
    """Per-sentence negative log-likelihood, shape ``(B,)``.

    Every span pays ``-log P_c[target]`` (the target is the no-entity class when
    unmatched, weighted by ``no_entity_weight``). Matched spans also pay the boundary
    terms: ``bernoulli`` scores the one-hot boundary target under all the independent
    word sigmoids of the sentence, ``target_only`` keeps only ``-log P[target word]``.
    """
    if boundary_loss not in BOUNDARY_LOSSES:
        raise ValidationError(f"unknown boundary loss {boundary_loss!r}")
    B, K, M = p_left.shape
    C = p_type.shape[-1] - 1
    matched, left, right, cls = _targets(golds, matches, K, C)
    matched_t = torch.as_tensor(matched, dtype=p_type.dtype)

    log_pc = torch.log(p_type.clamp_min(PROB_FLOOR))
    cls_t = torch.as_tensor(cls)
    type_nll = -log_pc.gather(-1, cls_t[..., None])[..., 0]
    weight = torch.where(cls_t == C, torch.full_like(type_nll, no_entity_weight), torch.ones_like(type_nll))
    loss = (weight * type_nll).sum(-1)

    valid = torch.as_tensor(np.arange(M)[None, :] < np.asarray(lengths)[:, None])[:, None, :]
    for probs, target in ((p_left, left), (p_right, right)):
        onehot = torch.zeros(B, K, M, dtype=torch.bool)
        onehot.scatter_(-1, torch.as_tensor(target)[..., None], True)
        log_p = torch.log(probs.clamp_min(PROB_FLOOR))
        if boundary_loss == "bernoulli":
            log_q = torch.log((1.0 - probs).clamp_min(PROB_FLOOR))
            ll = torch.where(onehot, log_p, torch.where(valid, log_q, torch.zeros_like(log_q))).sum(-1)
        else:
            ll = log_p.gather(-1, torch.as_tensor(target)[..., None])[..., 0]
        loss = loss - (matched_t * ll).sum(-1)
    return loss


def diffusion_loss(output, gold: Sequence[Entity], match: Matching, boundary_loss: str = "bernoulli",
                   no_entity_weight: float = 1.0) -> torch.Tensor:
    """Loss of a single sentence; ``output`` holds unbatched ``(K, M)`` probabilities."""
    p_left, p_right, p_type = (torch.as_tensor(p) for p in (output.p_left, output.p_right, output.p_type))
    M = p_left.shape[-1]
    return batch_loss(
        p_left[None], p_right[None], p_type[None], [M], [gold], [match],
        boundary_loss=boundary_loss, no_entity_weight=no_entity_weight,
    )[0]
