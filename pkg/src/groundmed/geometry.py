"""Normalized box / voxel-mask primitives and the pointwise losses built on them.

Axis order is (depth, height, width) everywhere. A 2D box has rank 2 and
covers (height, width); it embeds into rank 3 with depth extent [0, 1].

Scalar functions operate on :class:`Box` / :class:`VoxelMask` values. The
``*_t`` variants operate on torch tensors of corner-form boxes with shape
``(..., 2k)`` laid out as ``(min_0, .., min_{k-1}, max_0, .., max_{k-1})``
and are what the training code differentiates through.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from torch import Tensor

from .errors import DegenerateGeometryError, ShapeError

PROB_EPS = 1e-7


@dataclass(frozen=True)
class Box:
    min_corner: tuple[float, ...]
    max_corner: tuple[float, ...]

    def __post_init__(self):
        lo = tuple(float(v) for v in self.min_corner)
        hi = tuple(float(v) for v in self.max_corner)
        if len(lo) != len(hi):
            raise ShapeError("corner vectors differ in length")
        if len(lo) not in (2, 3):
            raise ShapeError(f"box rank must be 2 or 3, got {len(lo)}")
        for a, b in zip(lo, hi):
            if not (0.0 <= a <= b <= 1.0):
                raise ValueError(f"invalid box extent [{a}, {b}]")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @property
    def rank(self) -> int:
        return len(self.min_corner)

    @property
    def volume(self) -> float:
        v = 1.0
        for a, b in zip(self.min_corner, self.max_corner):
            v *= b - a
        return v

    def to_rank3(self) -> "Box":
        """Single-slice embedding of a 2D box (depth extent [0, 1])."""
        if self.rank == 3:
            return self
        return Box((0.0,) + self.min_corner, (1.0,) + self.max_corner)

    def as_list(self) -> list[float]:
        return list(self.min_corner) + list(self.max_corner)

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "Box":
        k = len(values) // 2
        return cls(tuple(values[:k]), tuple(values[k:]))

    @classmethod
    def from_center_size(cls, center: Sequence[float], size: Sequence[float]) -> "Box":
        lo = tuple(min(max(c - s / 2, 0.0), 1.0) for c, s in zip(center, size))
        hi = tuple(min(max(c + s / 2, 0.0), 1.0) for c, s in zip(center, size))
        return cls(lo, hi)


@dataclass(frozen=True)
class VoxelMask:
    shape: tuple[int, ...]
    data: np.ndarray = field(repr=False, compare=False)

    def __post_init__(self):
        shape = tuple(int(s) for s in self.shape)
        arr = np.asarray(self.data)
        if arr.size != math.prod(shape):
            raise ShapeError(f"mask data has {arr.size} voxels, shape {shape} needs {math.prod(shape)}")
        if not np.isin(arr, (0, 1)).all():
            raise ValueError("mask values must be exactly 0 or 1")
        arr = arr.astype(np.uint8).reshape(shape)
        arr.setflags(write=False)
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "data", arr)

    @classmethod
    def from_array(cls, arr) -> "VoxelMask":
        arr = np.asarray(arr)
        return cls(arr.shape, (arr != 0).astype(np.uint8))

    @property
    def count(self) -> int:
        return int(self.data.sum())

    def __eq__(self, other):
        if not isinstance(other, VoxelMask):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.data, other.data)

    def __hash__(self):
        return hash((self.shape, self.data.tobytes()))

    def bounding_box(self) -> Box | None:
        """Tight normalized box around the occupied voxels, in the mask's own rank."""
        idx = np.argwhere(self.data)
        if len(idx) == 0:
            return None
        lo = idx.min(0)
        hi = idx.max(0) + 1
        n = np.asarray(self.shape)
        return Box(tuple((lo / n).tolist()), tuple((hi / n).tolist()))


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.25

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")


def _check_rank(a: Box, b: Box):
    if a.rank != b.rank:
        raise ShapeError(f"box rank mismatch: {a.rank} vs {b.rank}")


def _intersection(a: Box, b: Box) -> float:
    v = 1.0
    for alo, ahi, blo, bhi in zip(a.min_corner, a.max_corner, b.min_corner, b.max_corner):
        v *= max(0.0, min(ahi, bhi) - max(alo, blo))
    return v


def _hull(a: Box, b: Box) -> float:
    v = 1.0
    for alo, ahi, blo, bhi in zip(a.min_corner, a.max_corner, b.min_corner, b.max_corner):
        v *= max(ahi, bhi) - min(alo, blo)
    return v


def iou(a: Box, b: Box) -> float:
    _check_rank(a, b)
    if a.volume == 0.0 and b.volume == 0.0:
        raise DegenerateGeometryError("both boxes have zero volume")
    inter = _intersection(a, b)
    return inter / (a.volume + b.volume - inter)


def giou(a: Box, b: Box) -> float:
    """Generalized IoU: IoU minus the fraction of the enclosing hull not covered by the union."""
    _check_rank(a, b)
    if a.volume == 0.0 and b.volume == 0.0:
        raise DegenerateGeometryError("both boxes have zero volume")
    inter = _intersection(a, b)
    union = a.volume + b.volume - inter
    hull = _hull(a, b)
    return inter / union - (hull - union) / hull


def l1_box(a: Box, b: Box) -> float:
    _check_rank(a, b)
    return sum(abs(x - y) for x, y in zip(a.as_list(), b.as_list()))


def dice(a: VoxelMask, b: VoxelMask) -> float:
    if a.shape != b.shape:
        raise ShapeError(f"mask shape mismatch: {a.shape} vs {b.shape}")
    total = a.count + b.count
    if total == 0:
        return 1.0
    inter = int(np.logical_and(a.data, b.data).sum())
    return 2.0 * inter / total


def focal_loss(prob: float, label: int, params: FocalParams = FocalParams()) -> float:
    p = min(max(float(prob), PROB_EPS), 1.0 - PROB_EPS)
    if label == 1:
        return -params.alpha * (1.0 - p) ** params.gamma * math.log(p)
    if label == 0:
        return -(1.0 - params.alpha) * p**params.gamma * math.log(1.0 - p)
    raise ValueError(f"label must be 0 or 1, got {label}")


# --- tensor variants -------------------------------------------------------


def center_size_to_corners_t(cs: Tensor) -> Tensor:
    """``(c_0..c_{k-1}, s_0..s_{k-1})`` in [0,1] to clamped corner form."""
    k = cs.shape[-1] // 2
    c, s = cs[..., :k], cs[..., k:]
    return torch.cat([(c - s / 2).clamp(0.0, 1.0), (c + s / 2).clamp(0.0, 1.0)], dim=-1)


def _split(boxes: Tensor) -> tuple[Tensor, Tensor]:
    k = boxes.shape[-1] // 2
    return boxes[..., :k], boxes[..., k:]


def giou_t(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise GIoU of corner-form boxes broadcast over leading dims."""
    alo, ahi = _split(a)
    blo, bhi = _split(b)
    vol_a = (ahi - alo).prod(-1)
    vol_b = (bhi - blo).prod(-1)
    inter = (torch.minimum(ahi, bhi) - torch.maximum(alo, blo)).clamp(min=0).prod(-1)
    union = vol_a + vol_b - inter
    hull = (torch.maximum(ahi, bhi) - torch.minimum(alo, blo)).prod(-1)
    return inter / union - (hull - union) / hull


def pairwise_giou_t(a: Tensor, b: Tensor) -> Tensor:
    """``(n, 2k) x (j, 2k) -> (n, j)``."""
    return giou_t(a[:, None, :], b[None, :, :])


def pairwise_l1_t(a: Tensor, b: Tensor) -> Tensor:
    return (a[:, None, :] - b[None, :, :]).abs().sum(-1)


def focal_t(prob: Tensor, label: Tensor, params: FocalParams = FocalParams()) -> Tensor:
    """Elementwise focal loss; ``label`` is a 0/1 tensor broadcastable to ``prob``."""
    p = prob.clamp(PROB_EPS, 1.0 - PROB_EPS)
    label = label.to(p.dtype)
    pos = -params.alpha * (1 - p) ** params.gamma * torch.log(p)
    neg = -(1 - params.alpha) * p**params.gamma * torch.log(1 - p)
    return label * pos + (1 - label) * neg


def boxes_to_tensor(boxes: Sequence[Box], dtype=torch.float64) -> Tensor:
    if not boxes:
        return torch.zeros((0, 0), dtype=dtype)
    return torch.tensor([b.as_list() for b in boxes], dtype=dtype)
