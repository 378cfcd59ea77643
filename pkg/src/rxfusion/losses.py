"""Set-to-set matching and the training loss.

Predictions and ground-truth boxes are paired by minimum-cost Hungarian
assignment; the loss is focal classification over all queries plus L1
regression (center, size, angle as a (sin, cos) pair) summed over the
matched pairs, with unit weights on all four terms. When auxiliary
supervision is on, every refinement iteration contributes the same loss
form and the iteration losses are summed.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import List, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment

from . import autodiff as ad
from .autodiff import Tensor
from .fusion import IterationOutput
from .geometry import Box3D

FOCAL_GAMMA = 2.0
FOCAL_ALPHA = 0.25


class MatchError(ValueError):
    """Assignment contract violation (fewer predictions than targets)."""


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]  # (pred_idx, gt_idx)
    unmatched_preds: List[int]


def hungarian(cost: np.ndarray) -> Assignment:
    """Minimum-total-cost one-to-one assignment (Kuhn-Munkres).

    cost: (P, G) with P >= G; every ground-truth column gets exactly one
    prediction row.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise MatchError(f"cost must be 2D, got shape {cost.shape}")
    P, G = cost.shape
    if P < G:
        raise MatchError(f"{P} predictions cannot cover {G} targets; pad upstream")
    if not np.all(np.isfinite(cost)):
        raise MatchError("cost matrix must be finite")
    if G == 0:
        return Assignment(pairs=[], unmatched_preds=list(range(P)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted(zip(rows.tolist(), cols.tolist()))
    matched = {r for r, _ in pairs}
    return Assignment(
        pairs=pairs,
        unmatched_preds=[i for i in range(P) if i not in matched],
    )


def _softmax_np(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_cost_matrix(out: IterationOutput, gts: Sequence[Box3D]) -> np.ndarray:
    """(P, G) matrix: -p(gt class) + L1 center + L1 size + L1 (sin, cos).

    Uses class probabilities rather than log-probabilities, and the same
    unit term weights as the loss. Detached (plain numpy): matching is a
    discrete decision, not a gradient path.
    """
    probs = _softmax_np(out.logits.data)
    centers = out.center.data
    sizes = out.size.data
    sincos = out.sincos.data
    P = centers.shape[0]
    G = len(gts)
    cost = np.zeros((P, G))
    for j, gt in enumerate(gts):
        tgt_sc = np.array([np.sin(gt.yaw), np.cos(gt.yaw)])
        cost[:, j] = (
            -probs[:, gt.class_id]
            + np.abs(centers - gt.center).sum(axis=1)
            + np.abs(sizes - gt.size).sum(axis=1)
            + np.abs(sincos - tgt_sc).sum(axis=1)
        )
    return cost


def match_cost(out: IterationOutput, pred_idx: int, gt: Box3D) -> float:
    """Scalar matching cost of one (prediction, ground truth) pair."""
    return float(match_cost_matrix(out, [gt])[pred_idx, 0])


def focal_loss(
    logits: Tensor,
    target_class: np.ndarray,
    gamma: float = FOCAL_GAMMA,
    alpha_bal: float = FOCAL_ALPHA,
) -> Tensor:
    """Mean over queries of -alpha * (1 - p_t)^gamma * log(p_t).

    p_t is the softmax probability of each query's target class;
    unmatched queries target the background class (last column).
    gamma = 0 and alpha_bal = 1 reduce exactly to cross-entropy.
    """
    if gamma < 0:
        raise ValueError("gamma must be >= 0")
    n = logits.data.shape[0]
    probs = ad.softmax(logits, axis=1)
    p_t = ad.gather_pairs(probs, np.arange(n), np.asarray(target_class, dtype=np.intp))
    loss = ad.log(p_t) * -alpha_bal
    if gamma > 0:
        loss = loss * ad.pow_const(1.0 - p_t, gamma)
    return loss.mean()


def _l1(a: Tensor, target: np.ndarray) -> Tensor:
    return ad.absolute(a - target).sum()


def iteration_loss(
    out: IterationOutput,
    gts: Sequence[Box3D],
    n_classes: int,
    gamma: float = FOCAL_GAMMA,
    alpha_bal: float = FOCAL_ALPHA,
) -> Tuple[Tensor, Assignment]:
    """Loss of one iteration's outputs against the frame's boxes."""
    P = out.logits.data.shape[0]
    background = n_classes
    targets = np.full(P, background, dtype=np.intp)

    if gts:
        assignment = hungarian(match_cost_matrix(out, gts))
        pred_idx = np.array([p for p, _ in assignment.pairs], dtype=np.intp)
        gt_idx = [g for _, g in assignment.pairs]
        for p, g in assignment.pairs:
            targets[p] = gts[g].class_id

        gt_centers = np.stack([gts[g].center for g in gt_idx])
        gt_sizes = np.stack([gts[g].size for g in gt_idx])
        gt_sincos = np.stack(
            [[np.sin(gts[g].yaw), np.cos(gts[g].yaw)] for g in gt_idx]
        )
        loss = focal_loss(out.logits, targets, gamma, alpha_bal)
        loss = loss + _l1(ad.take_rows(out.center, pred_idx), gt_centers)
        loss = loss + _l1(ad.take_rows(out.size, pred_idx), gt_sizes)
        loss = loss + _l1(ad.take_rows(out.sincos, pred_idx), gt_sincos)
    else:
        assignment = Assignment(pairs=[], unmatched_preds=list(range(P)))
        loss = focal_loss(out.logits, targets, gamma, alpha_bal)
    return loss, assignment


def total_loss(
    outputs: Sequence[IterationOutput],
    gts: Sequence[Box3D],
    n_classes: int,
    aux_loss: bool = True,
    gamma: float = FOCAL_GAMMA,
    alpha_bal: float = FOCAL_ALPHA,
) -> Tensor:
    """Sum of per-iteration losses (all iterations when aux_loss, else last)."""
    supervised = outputs if aux_loss else outputs[-1:]
    total = None
    for out in supervised:
        loss, _ = iteration_loss(out, gts, n_classes, gamma, alpha_bal)
        total = loss if total is None else total + loss
    return total
