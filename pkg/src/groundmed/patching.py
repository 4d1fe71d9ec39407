"""Depth-adaptive patch embedding and depth-aware transposed-conv upsampling.

Volumes are ``(channels, depth, height, width)`` tensors. The depth patch
extent adapts to the slice count so the number of depth tokens stays near a
configured maximum; the base kernel is sum-pooled down to that extent, which
keeps token magnitudes comparable across patch sizes. On the way back up, a
scale-2 transposed conv stops growing the depth axis once it reaches the input
depth by mean-pooling its two depth taps into one.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor

from .errors import ConfigError, ShapeError


def _is_pow2(n: int) -> bool:
    return n >= 1 and (n & (n - 1)) == 0


def round_half_up(x: float) -> int:
    return math.floor(x + 0.5)


def effective_patch_size(depth: int, max_depth_tokens: int, base_patch: int) -> int:
    if not _is_pow2(base_patch):
        raise ConfigError(f"base patch {base_patch} is not a power of two")
    if depth < 1 or max_depth_tokens < 1:
        raise ConfigError("depth and max_depth_tokens must be >= 1")
    if depth <= max_depth_tokens:
        return 1
    if depth > max_depth_tokens * base_patch:
        return base_patch
    return 2 ** round_half_up(math.log2(depth / max_depth_tokens))


def sample_patch_size(depth: int, max_depth_tokens: int, base_patch: int, rng: np.random.Generator) -> int:
    """Train-time augmentation: log2 of the patch size ~ N(log2(D / t_d), variance 0.25)."""
    if not _is_pow2(base_patch):
        raise ConfigError(f"base patch {base_patch} is not a power of two")
    x = rng.normal(math.log2(depth / max_depth_tokens), 0.5)
    e = min(max(round_half_up(x), 0), int(math.log2(base_patch)))
    return 2**e


@dataclass(frozen=True)
class PatchSpec:
    depth: int
    max_depth_tokens: int
    base_patch: int
    effective_patch: int

    def __post_init__(self):
        if self.depth < 1 or self.max_depth_tokens < 1:
            raise ConfigError("depth and max_depth_tokens must be >= 1")
        if not (_is_pow2(self.base_patch) and _is_pow2(self.effective_patch)):
            raise ConfigError("patch sizes must be powers of two")
        if self.effective_patch > self.base_patch:
            raise ConfigError("effective patch exceeds base patch")

    @classmethod
    def for_depth(cls, depth: int, max_depth_tokens: int, base_patch: int) -> "PatchSpec":
        return cls(depth, max_depth_tokens, base_patch, effective_patch_size(depth, max_depth_tokens, base_patch))

    @property
    def depth_tokens(self) -> int:
        return -(-self.depth // self.effective_patch)


def reduce_patch_kernel(kernel: Tensor, effective_patch: int) -> Tensor:
    """Sum-pool the depth axis (dim 2) of ``(out, in, P_d, P_h, P_w)`` in windows of ``P_d / P'_d``.

    Window members are added in ascending index order.
    """
    base = kernel.shape[2]
    if effective_patch < 1 or base % effective_patch:
        raise ShapeError(f"effective patch {effective_patch} does not divide kernel depth {base}")
    window = base // effective_patch
    if window == 1:
        return kernel
    out = kernel[:, :, 0::window]
    for t in range(1, window):
        out = out + kernel[:, :, t::window]
    return out


def patch_embed(image: Tensor, kernel: Tensor, spec: PatchSpec, bias: Tensor | None = None) -> Tensor:
    """``(C, D, H, W)`` volume to an ``(E, ceil(D/P'_d), H/P_h, W/P_w)`` token grid."""
    if image.dim() != 4:
        raise ShapeError(f"expected (C, D, H, W) image, got shape {tuple(image.shape)}")
    _, d, h, w = image.shape
    ph, pw = kernel.shape[3], kernel.shape[4]
    if d != spec.depth:
        raise ShapeError(f"image depth {d} != spec depth {spec.depth}")
    if kernel.shape[2] != spec.base_patch:
        raise ShapeError(f"kernel depth {kernel.shape[2]} != base patch {spec.base_patch}")
    if h % ph or w % pw:
        raise ShapeError(f"height/width {h}x{w} not divisible by patch {ph}x{pw}")
    pd = spec.effective_patch
    k = reduce_patch_kernel(kernel, pd)
    pad = (-d) % pd
    if pad:
        image = F.pad(image, (0, 0, 0, 0, 0, pad))
    return F.conv3d(image[None], k, bias, stride=(pd, ph, pw))[0]


def embed_2d(image: Tensor, kernel: Tensor, bias: Tensor | None = None) -> Tensor:
    """Pure 2D path for ``(C, H, W)`` images: kernel depth summed out, output ``(E, 1, H', W')``."""
    k2 = reduce_patch_kernel(kernel, 1)[:, :, 0]
    out = F.conv2d(image[None], k2, bias, stride=(kernel.shape[3], kernel.shape[4]))[0]
    return out[:, None]


def reduce_transposed_kernel(kernel: Tensor, target_scale: int) -> Tensor:
    """``(in, out, 2, k_h, k_w)`` transposed-conv kernel; scale 1 averages the two depth taps."""
    if kernel.shape[2] != 2:
        raise ShapeError(f"transposed kernel depth extent must be 2, got {kernel.shape[2]}")
    if target_scale == 2:
        return kernel
    if target_scale == 1:
        return (kernel[:, :, 0:1] + kernel[:, :, 1:2]) / 2
    raise ShapeError(f"unsupported depth scale {target_scale}")


def upsample_step(x: Tensor, weight: Tensor, bias: Tensor | None, target_depth: int) -> Tensor:
    """One scale-2 transposed conv on ``(C, d, h, w)``; depth doubles only while below ``target_depth``."""
    d = x.shape[1]
    if d > target_depth:
        raise ShapeError(f"feature depth {d} exceeds target depth {target_depth}")
    if 2 * d <= target_depth:
        return F.conv_transpose3d(x[None], weight, bias, stride=(2, 2, 2))[0]
    k = reduce_transposed_kernel(weight, 1)
    return F.conv_transpose3d(x[None], k, bias, stride=(1, 2, 2))[0]


def adaptive_upsample(features: Tensor, depth: int, weights, biases=None, activation=None) -> Tensor:
    """Apply a stack of scale-2 transposed convs, freezing depth at ``depth``.

    ``activation`` (if given) runs between layers, not after the last one.
    """
    if features.shape[1] > depth:
        raise ShapeError(f"feature depth {features.shape[1]} exceeds image depth {depth}")
    biases = biases if biases is not None else [None] * len(weights)
    x = features
    for i, (w, b) in enumerate(zip(weights, biases)):
        x = upsample_step(x, w, b, depth)
        if activation is not None and i < len(weights) - 1:
            x = activation(x)
    if x.shape[1] != depth:
        raise ShapeError(f"upsampled depth {x.shape[1]} cannot land on image depth {depth}")
    return x


def upsampled_depth(feature_depth: int, depth: int, steps: int) -> int:
    """Shape-only simulation of :func:`adaptive_upsample` along depth."""
    d = feature_depth
    for _ in range(steps):
        if 2 * d <= depth:
            d *= 2
    return d
