"""Instance set prediction: label padding, pair costs, exact assignment, set losses.

Each prompt yields ``m`` instance predictions. Ground-truth instances are padded
with dummy negatives to ``m`` slots; predictions are matched one-to-one with the
padded labels by minimizing the summed pair cost, and the optimal total cost is
the box-set loss. Matching runs on detached costs; gradients flow only through
the loss terms at the chosen assignment.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import CapacityError, InputError, ShapeError
from .geometry import (
    Box,
    FocalParams,
    focal_loss,
    VoxelMask,
    focal_t,
    giou,
    giou_t,
    l1_box,
    pairwise_giou_t,
    pairwise_l1_t,
)

DEFAULT_SLOTS = 16


@dataclass(frozen=True)
class InstanceLabel:
    box: Box | None
    positive: bool

    @classmethod
    def negative(cls) -> "InstanceLabel":
        return cls(None, False)


@dataclass(frozen=True)
class InstancePrediction:
    box: Box
    presence_prob: float


@dataclass(frozen=True)
class Assignment:
    perm: tuple[int, ...]  # perm[i] = label index matched to prediction i
    total_cost: float


@dataclass(frozen=True)
class LossWeights:
    w_l1: float = 5.0
    w_giou: float = 2.0
    w_disc: float = 1.0

    def __post_init__(self):
        if min(self.w_l1, self.w_giou, self.w_disc) < 0:
            raise ValueError("loss weights must be non-negative")


def pad_labels(labels: Sequence[InstanceLabel], m: int = DEFAULT_SLOTS) -> list[InstanceLabel]:
    if len(labels) > m:
        raise CapacityError(f"{len(labels)} instances exceed the {m} available slots")
    if not all(lab.positive for lab in labels):
        raise ValueError("labels to pad must all be positive")
    return list(labels) + [InstanceLabel.negative() for _ in range(m - len(labels))]


def pair_cost(
    pred: InstancePrediction,
    label: InstanceLabel,
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> float:
    cost = w.w_disc * focal_loss(pred.presence_prob, int(label.positive), fp)
    if label.positive:
        cost += w.w_l1 * l1_box(pred.box, label.box) + w.w_giou * (1.0 - giou(pred.box, label.box))
    return cost


# --- exact assignment ------------------------------------------------------


def _solve_with_duals(cost: np.ndarray) -> tuple[list[int], np.ndarray, np.ndarray]:
    """Shortest-augmenting-path Hungarian method, O(n^3).

    Returns (row -> column assignment, row potentials u, column potentials v)
    with ``cost[i, j] - u[i] - v[j] >= 0`` and equality on the assignment.
    """
    n = cost.shape[0]
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (n + 1)
    row_of = [0] * (n + 1)  # row_of[j]: 1-based row matched to column j; 0 = free
    way = [0] * (n + 1)
    a = cost.tolist()
    for i in range(1, n + 1):
        row_of[0] = i
        j0 = 0
        minv = [inf] * (n + 1)
        used = [False] * (n + 1)
        while True:
            used[j0] = True
            i0 = row_of[j0]
            delta = inf
            j1 = -1
            ai = a[i0 - 1]
            ui = u[i0]
            for j in range(1, n + 1):
                if not used[j]:
                    cur = ai[j - 1] - ui - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[row_of[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if row_of[j0] == 0:
                break
        while True:
            j1 = way[j0]
            row_of[j0] = row_of[j1]
            j0 = j1
            if j0 == 0:
                break
    assign = [0] * n
    for j in range(1, n + 1):
        assign[row_of[j] - 1] = j - 1
    return assign, np.asarray(u[1:]), np.asarray(v[1:])


def _has_perfect_matching(adj: list[list[int]], rows: list[int], cols: set[int]) -> bool:
    match: dict[int, int] = {}

    def augment(r, seen):
        for c in adj[r]:
            if c in cols and c not in seen:
                seen.add(c)
                if c not in match or augment(match[c], seen):
                    match[c] = r
                    return True
        return False

    return all(augment(r, set()) for r in rows)


def hungarian(cost) -> Assignment:
    """Minimum-cost perfect assignment of an ``m x m`` matrix.

    Among co-optimal permutations the lexicographically smallest is returned:
    an assignment is optimal iff it uses only zero-reduced-cost edges under the
    optimal duals, so the tie-break is a greedy lexicographic search for a
    perfect matching inside that tight subgraph.
    """
    c = np.asarray(cost, dtype=np.float64)
    if c.ndim != 2 or c.shape[0] != c.shape[1]:
        raise InputError(f"cost matrix must be square, got shape {c.shape}")
    if not np.isfinite(c).all():
        raise InputError("cost matrix has non-finite entries")
    n = c.shape[0]
    if n == 0:
        return Assignment((), 0.0)
    assign, u, v = _solve_with_duals(c)
    reduced = c - u[:, None] - v[None, :]
    tol = 1e-10 * (1.0 + float(np.abs(c).max()))
    adj = [[j for j in range(n) if reduced[i, j] <= tol] for i in range(n)]
    perm = []
    free = set(range(n))
    for i in range(n):
        for j in adj[i]:
            if j not in free:
                continue
            free.discard(j)
            if _has_perfect_matching(adj, list(range(i + 1, n)), free):
                perm.append(j)
                break
            free.add(j)
        else:  # tolerance too tight to recover a tight matching; keep the solver's own
            perm = assign
            break
    total = 0.0
    for i, j in enumerate(perm):
        total += c[i, j]
    return Assignment(tuple(int(j) for j in perm), float(total))


# --- set losses ------------------------------------------------------------


def box_set_loss(
    preds: Sequence[InstancePrediction],
    labels: Sequence[InstanceLabel],
    m: int | None = None,
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> float:
    m = len(preds) if m is None else m
    if len(preds) != m:
        raise ShapeError(f"expected {m} predictions, got {len(preds)}")
    padded = pad_labels(labels, m)
    cost = [[pair_cost(p, lab, w, fp) for lab in padded] for p in preds]
    return hungarian(cost).total_cost


def box_set_loss_t(
    pred_boxes: Tensor,
    pred_prob: Tensor,
    gt_boxes: Tensor,
    w: LossWeights = LossWeights(),
    fp: FocalParams = FocalParams(),
) -> tuple[Tensor, Assignment]:
    """Differentiable box-set loss.

    ``pred_boxes`` is ``(m, 2k)`` corner form, ``pred_prob`` ``(m,)``, and
    ``gt_boxes`` ``(n, 2k)`` with ``n <= m``; label columns ``n..m-1`` are the
    dummy negatives. Discrimination terms are summed over all ``m`` slots.
    """
    m = pred_boxes.shape[0]
    n = gt_boxes.shape[0]
    if n > m:
        raise CapacityError(f"{n} instances exceed the {m} available slots")
    labels = torch.zeros(m, dtype=pred_prob.dtype)
    labels[:n] = 1
    with torch.no_grad():
        cost = _cost_matrix_t(pred_boxes, pred_prob, gt_boxes, labels, w, fp)
    assignment = hungarian(cost.numpy())
    perm = torch.tensor(assignment.perm, dtype=torch.long)
    matched_labels = labels[perm]
    loss = w.w_disc * focal_t(pred_prob, matched_labels, fp).sum()
    pos = torch.nonzero(perm < n).flatten()
    if len(pos):
        pb = pred_boxes[pos]
        gb = gt_boxes[perm[pos]]
        loss = loss + w.w_l1 * (pb - gb).abs().sum() + w.w_giou * (1 - giou_t(pb, gb)).sum()
    return loss, assignment


def _cost_matrix_t(pred_boxes, pred_prob, gt_boxes, labels, w, fp) -> Tensor:
    m = pred_boxes.shape[0]
    n = gt_boxes.shape[0]
    disc = focal_t(pred_prob[:, None], labels[None, :], fp)  # (m, m)
    cost = w.w_disc * disc
    if n:
        box = w.w_l1 * pairwise_l1_t(pred_boxes, gt_boxes) + w.w_giou * (1 - pairwise_giou_t(pred_boxes, gt_boxes))
        cost = cost + torch.cat([box, torch.zeros(m, m - n, dtype=cost.dtype)], dim=1)
    return cost


def soft_dice_t(prob: Tensor, target: Tensor, smooth: float = 1.0) -> Tensor:
    inter = (prob * target).sum()
    return (2 * inter + smooth) / (prob.sum() + target.sum() + smooth)


def mask_loss(pred_logits: Tensor, target, fp: FocalParams = FocalParams()) -> Tensor:
    """``(1 - soft Dice) + mean voxel focal loss`` with unit weights."""
    if isinstance(target, VoxelMask):
        target = torch.from_numpy(target.data.astype(np.float64))
    target = torch.as_tensor(target)
    if tuple(pred_logits.shape) != tuple(target.shape):
        raise ShapeError(f"mask shape mismatch: {tuple(pred_logits.shape)} vs {tuple(target.shape)}")
    target = target.to(pred_logits.dtype)
    prob = torch.sigmoid(pred_logits)
    return (1 - soft_dice_t(prob, target)) + focal_t(prob, target, fp).mean()
