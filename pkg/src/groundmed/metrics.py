"""Evaluation metrics: unigram BLEU / ROUGE, LCS-based ROUGE-L, box matching."""

from __future__ import annotations

import math
from collections import Counter
from typing import Sequence

from .geometry import Box, giou, iou, l1_box


def bleu1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    """Clipped unigram precision times the brevity penalty."""
    if not candidate:
        return 0.0
    ref = Counter(reference)
    clipped = sum(min(n, ref[w]) for w, n in Counter(candidate).items())
    precision = clipped / len(candidate)
    c, r = len(candidate), len(reference)
    bp = 1.0 if c > r else math.exp(1 - r / c)
    return bp * precision


def _f1(overlap: int, n_cand: int, n_ref: int) -> float:
    if overlap == 0:
        return 0.0
    p, r = overlap / n_cand, overlap / n_ref
    return 2 * p * r / (p + r)


def rouge1(candidate: Sequence[str], reference: Sequence[str]) -> float:
    overlap = sum((Counter(candidate) & Counter(reference)).values())
    return _f1(overlap, len(candidate), len(reference))


def lcs_length(a: Sequence, b: Sequence) -> int:
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate: Sequence[str], reference: Sequence[str]) -> float:
    return _f1(lcs_length(candidate, reference), len(candidate), len(reference))


def greedy_box_match(preds: Sequence[Box], gts: Sequence[Box]) -> list[tuple[int, int, float]]:
    """Pair predictions with ground truth by descending IoU; each box used at most once."""
    pairs = sorted(
        ((iou(p, g), i, j) for i, p in enumerate(preds) for j, g in enumerate(gts)),
        key=lambda t: (-t[0], t[1], t[2]),
    )
    used_p, used_g, out = set(), set(), []
    for v, i, j in pairs:
        if v <= 0 or i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        out.append((i, j, v))
    return out


def box_metrics(preds: Sequence[Box], gts: Sequence[Box], iou_threshold: float = 0.5) -> dict:
    """Detection counts and per-pair regression errors for one prompt.

    ``l1`` is the mean absolute coordinate error of each matched pair.
    """
    matches = greedy_box_match(preds, gts)
    tp = sum(1 for _, _, v in matches if v >= iou_threshold)
    return {
        "tp": tp,
        "n_pred": len(preds),
        "n_gt": len(gts),
        "giou": [giou(preds[i], gts[j]) for i, j, _ in matches],
        "l1": [l1_box(preds[i], gts[j]) / (2 * gts[j].rank) for i, j, _ in matches],
    }
