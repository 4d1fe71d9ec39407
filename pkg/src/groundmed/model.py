"""Desk-scale grounding VLM.

Pieces:

* :class:`VisionEncoder` - depth-adaptive patch embedding, ViT blocks, max pooling.
* :class:`GatedAdapter` - SwiGLU projection of image features into the language space.
* :class:`VisualExpertLayer` - causal transformer layer with separate text / image
  parameter sets, routed by token origin.
* :class:`LoRALinear` - linear layer with an optional rank-stabilized low-rank adapter.
* :class:`LocalizationDecoder` - two-way attention decoder prompted by a phrase
  embedding, with a mask branch and an ``m``-slot instance branch.

Shapes follow a ``(channels, depth, height, width)`` convention for volumes and
``(batch, length, dim)`` for token sequences.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import CapacityError, ConfigError, ShapeError
from .geometry import Box, center_size_to_corners_t
from .matching import InstancePrediction
from .patching import (
    PatchSpec,
    effective_patch_size,
    embed_2d,
    patch_embed,
    upsample_step,
    upsampled_depth,
)


@dataclass
class ModelConfig:
    embed_dim: int = 64
    encoder_layers: int = 2
    num_layers: int = 2
    decoder_layers: int = 2
    num_heads: int = 4
    vocab_size: int = 300
    m: int = 8
    t_d: int = 8
    P_d: int = 4
    patch_hw: int = 4
    in_channels: int = 1
    lora_rank: int = 4
    lora_alpha: float = 2.0
    use_lora: bool = False
    freeze_base: bool = False
    feature_pool_factor: int = 2
    max_seq_len: int = 256
    pos_table_depth: int = 8  # learned positional table lengths, resampled per grid
    pos_table_hw: int = 8
    init_std: float = 0.02

    def __post_init__(self):
        if self.embed_dim % self.num_heads:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.m < 1 or self.lora_rank < 1:
            raise ConfigError("m and lora_rank must be >= 1")
        steps = math.log2(self.patch_hw)
        if steps != int(steps) or self.feature_pool_factor < 1:
            raise ConfigError("patch_hw must be a power of two and feature_pool_factor >= 1")
        if self.embed_dim % (2 ** int(steps)):
            raise ConfigError("embed_dim must be divisible by 2**upsample_steps")

    @property
    def upsample_steps(self) -> int:
        """Scale-2 steps from the (unpooled) token grid back to pixel resolution."""
        return int(math.log2(self.patch_hw))

    @property
    def lora_scale(self) -> float:
        return self.lora_alpha / math.sqrt(self.lora_rank)

    def to_dict(self) -> dict:
        return asdict(self)


# --- building blocks -------------------------------------------------------


def apply_lora(base_weight: Tensor, down: Tensor, up: Tensor, scale: float, x: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x W^T + b + scale * (x A^T) B^T`` with ``A = down (r, in)``, ``B = up (out, r)``."""
    return F.linear(x, base_weight, bias) + scale * F.linear(F.linear(x, down), up)


class LoRALinear(nn.Module):
    def __init__(self, d_in: int, d_out: int, cfg: ModelConfig, bias: bool = True):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.scale = cfg.lora_scale
        if cfg.use_lora:
            self.lora_down = nn.Parameter(torch.empty(cfg.lora_rank, d_in))
            self.lora_up = nn.Parameter(torch.zeros(d_out, cfg.lora_rank))
            nn.init.kaiming_uniform_(self.lora_down, a=math.sqrt(5))
        else:
            self.lora_down = None
            self.lora_up = None

    def forward(self, x: Tensor) -> Tensor:
        if self.lora_down is None:
            return self.base(x)
        return apply_lora(self.base.weight, self.lora_down, self.lora_up, self.scale, x, self.base.bias)


def attention(q: Tensor, k: Tensor, v: Tensor, heads: int, mask: Tensor | None = None) -> Tensor:
    """Multi-head scaled dot-product attention on ``(B, L, E)``; ``mask`` is additive ``(Lq, Lk)``."""
    b, lq, e = q.shape
    lk = k.shape[1]
    dh = e // heads
    q = q.view(b, lq, heads, dh).transpose(1, 2)
    k = k.view(b, lk, heads, dh).transpose(1, 2)
    v = v.view(b, lk, heads, dh).transpose(1, 2)
    scores = q @ k.transpose(-1, -2) / math.sqrt(dh)
    if mask is not None:
        scores = scores + mask
    out = scores.softmax(-1) @ v
    return out.transpose(1, 2).reshape(b, lq, e)


def rotary(x: Tensor, positions: Tensor, heads: int, base: float = 10000.0) -> Tensor:
    """Rotary position embedding on ``(B, L, E)`` with per-head feature pairs ``(i, i + dh/2)``."""
    b, n, e = x.shape
    dh = e // heads
    half = dh // 2
    freqs = base ** (-torch.arange(half, dtype=x.dtype) / half)
    ang = positions.to(x.dtype)[:, None] * freqs[None]  # (L, half)
    cos, sin = ang.cos()[None, :, None], ang.sin()[None, :, None]
    x = x.view(b, n, heads, dh)
    x1, x2 = x[..., :half], x[..., half : 2 * half]
    out = torch.cat([x1 * cos - x2 * sin, x1 * sin + x2 * cos, x[..., 2 * half :]], dim=-1)
    return out.reshape(b, n, e)


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.q = nn.Linear(dim, dim)
        self.k = nn.Linear(dim, dim)
        self.v = nn.Linear(dim, dim)
        self.o = nn.Linear(dim, dim)

    def forward(self, q: Tensor, k: Tensor, v: Tensor, mask: Tensor | None = None) -> Tensor:
        return self.o(attention(self.q(q), self.k(k), self.v(v), self.heads, mask))


class MLP(nn.Module):
    def __init__(self, d_in: int, hidden: int, d_out: int, layers: int = 2):
        super().__init__()
        dims = [d_in] + [hidden] * (layers - 1) + [d_out]
        self.layers = nn.ModuleList(nn.Linear(a, b) for a, b in zip(dims[:-1], dims[1:]))

    def forward(self, x: Tensor) -> Tensor:
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = F.gelu(x)
        return x


class EncoderBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(dim)
        self.attn = CrossAttention(dim, heads)
        self.ln2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim)

    def forward(self, x: Tensor) -> Tensor:
        h = self.ln1(x)
        x = x + self.attn(h, h, h)
        return x + self.mlp(self.ln2(x))


class GatedAdapter(nn.Module):
    """SwiGLU feed-forward: ``W2 (silu(W1 x) * W3 x)``."""

    def __init__(self, d_in: int, hidden: int, d_out: int):
        super().__init__()
        self.w1 = nn.Linear(d_in, hidden)
        self.w3 = nn.Linear(d_in, hidden)
        self.w2 = nn.Linear(hidden, d_out)

    def forward(self, x: Tensor) -> Tensor:
        return self.w2(F.silu(self.w1(x)) * self.w3(x))


# --- vision encoder --------------------------------------------------------


def axis_positions(table: Tensor, n: int) -> Tensor:
    """Resample an ``(L, E)`` positional table to ``n`` cell centers, so an index
    means the same relative location at every grid resolution."""
    if n == table.shape[0]:
        return table
    return F.interpolate(table.T[None], size=n, mode="linear", align_corners=False)[0].T


def grid_positions(pos_d: Tensor, pos_h: Tensor, pos_w: Tensor, d: int, h: int, w: int) -> Tensor:
    """Additive ``(d, h, w, E)`` positional grid."""
    return (
        axis_positions(pos_d, d)[:, None, None, :]
        + axis_positions(pos_h, h)[None, :, None, :]
        + axis_positions(pos_w, w)[None, None, :, :]
    )


class VisionEncoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.patch_weight = nn.Parameter(torch.empty(e, cfg.in_channels, cfg.P_d, cfg.patch_hw, cfg.patch_hw))
        self.patch_bias = nn.Parameter(torch.zeros(e))
        fan_in = cfg.in_channels * cfg.P_d * cfg.patch_hw**2
        nn.init.normal_(self.patch_weight, std=1.0 / math.sqrt(fan_in))
        self.pos_d = nn.Parameter(torch.randn(cfg.pos_table_depth, e))
        self.pos_h = nn.Parameter(torch.randn(cfg.pos_table_hw, e))
        self.pos_w = nn.Parameter(torch.randn(cfg.pos_table_hw, e))
        self.blocks = nn.ModuleList(EncoderBlock(e, cfg.num_heads) for _ in range(cfg.encoder_layers))
        self.ln = nn.LayerNorm(e)

    def patch_spec(self, depth: int, effective_patch: int | None = None) -> PatchSpec:
        cfg = self.cfg
        if effective_patch is None:
            effective_patch = effective_patch_size(depth, cfg.t_d, cfg.P_d)
        return PatchSpec(depth, cfg.t_d, cfg.P_d, effective_patch)

    def tokens(self, image: Tensor, effective_patch: int | None = None) -> Tensor:
        """Patch-embedded grid ``(E, d, h, w)``; a 3-dim ``(C, H, W)`` image takes the pure 2D path."""
        if image.dim() == 3:
            return embed_2d(image, self.patch_weight, self.patch_bias)
        return patch_embed(image, self.patch_weight, self.patch_spec(image.shape[1], effective_patch), self.patch_bias)

    def forward(self, image: Tensor, effective_patch: int | None = None) -> Tensor:
        """Encoded token grid ``(E, d, h, w)`` before pooling."""
        grid = self.tokens(image, effective_patch)
        e, d, h, w = grid.shape
        pos = grid_positions(self.pos_d, self.pos_h, self.pos_w, d, h, w)
        x = grid.permute(1, 2, 3, 0) + pos
        x = x.reshape(1, d * h * w, e)
        for blk in self.blocks:
            x = blk(x)
        x = self.ln(x)
        return x.reshape(d, h, w, e).permute(3, 0, 1, 2)


def pool_features(grid: Tensor, factor: int) -> Tensor:
    """Max-pool every spatial axis whose extent exceeds 1 (ceil mode)."""
    if factor == 1:
        return grid
    k = tuple(factor if s > 1 else 1 for s in grid.shape[1:])
    return F.max_pool3d(grid[None], kernel_size=k, stride=k, ceil_mode=True)[0]


def pooled_extent(n: int, factor: int) -> int:
    return n if n == 1 or factor == 1 else -(-n // factor)


# --- language core with visual experts ----------------------------------


class _Expert(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        e = cfg.embed_dim
        self.ln1 = nn.LayerNorm(e)
        self.q = LoRALinear(e, e, cfg)
        self.k = LoRALinear(e, e, cfg)
        self.v = LoRALinear(e, e, cfg)
        self.o = LoRALinear(e, e, cfg)
        self.ln2 = nn.LayerNorm(e)
        self.ff_gate = LoRALinear(e, 2 * e, cfg)
        self.ff_up = LoRALinear(e, 2 * e, cfg)
        self.ff_down = LoRALinear(2 * e, e, cfg)

    def ffn(self, x: Tensor) -> Tensor:
        return self.ff_down(F.silu(self.ff_gate(x)) * self.ff_up(x))


class VisualExpertLayer(nn.Module):
    """Shared attention geometry; image positions use ``visual`` params, text positions ``text`` params.

    Image tokens form a prefix of length ``n_img``; each parameter set only ever
    sees its own slice of the sequence.
    """

    def __init__(self, cfg: ModelConfig, final: bool = False):
        super().__init__()
        self.heads = cfg.num_heads
        self.final = final
        self.text = _Expert(cfg)
        self.visual = _Expert(cfg)
        if final:
            # nothing reads image positions after the last layer; keep only the keys/values text attends to.
            # built first, then pruned, so parameter init matches the unpruned stack
            for name in ("q", "o", "ln2", "ff_gate", "ff_up", "ff_down"):
                delattr(self.visual, name)

    def _route(self, fn, x: Tensor, n_img: int) -> Tensor:
        parts = []
        if n_img:
            parts.append(fn(self.visual, x[:, :n_img]))
        if x.shape[1] > n_img:
            parts.append(fn(self.text, x[:, n_img:]))
        return torch.cat(parts, dim=1)

    def forward(self, x: Tensor, n_img: int, mask: Tensor, positions: Tensor | None = None) -> Tensor:
        if self.final:
            return self._forward_final(x, n_img, mask, positions)
        h = self._route(lambda ex, t: ex.ln1(t), x, n_img)
        q = self._route(lambda ex, t: ex.q(t), h, n_img)
        k = self._route(lambda ex, t: ex.k(t), h, n_img)
        if positions is not None:
            q = rotary(q, positions, self.heads)
            k = rotary(k, positions, self.heads)
        v = self._route(lambda ex, t: ex.v(t), h, n_img)
        a = attention(q, k, v, self.heads, mask)
        x = x + self._route(lambda ex, t: ex.o(t), a, n_img)
        return x + self._route(lambda ex, t: ex.ffn(ex.ln2(t)), x, n_img)

    def _forward_final(self, x: Tensor, n_img: int, mask: Tensor, positions: Tensor | None) -> Tensor:
        """Text positions only; image positions pass through unchanged."""
        h = self._route(lambda ex, t: ex.ln1(t), x, n_img)
        k = self._route(lambda ex, t: ex.k(t), h, n_img)
        v = self._route(lambda ex, t: ex.v(t), h, n_img)
        q = self.text.q(h[:, n_img:])
        if positions is not None:
            q = rotary(q, positions[n_img:], self.heads)
            k = rotary(k, positions, self.heads)
        a = attention(q, k, v, self.heads, mask[n_img:])
        t = x[:, n_img:] + self.text.o(a)
        t = t + self.text.ffn(self.text.ln2(t))
        return torch.cat([x[:, :n_img], t], dim=1)


def vlm_mask(n_img: int, n_text: int, dtype=torch.float64) -> Tensor:
    """Image tokens see all image tokens; text sees all image tokens and earlier text."""
    n = n_img + n_text
    allowed = torch.zeros(n, n, dtype=torch.bool)
    allowed[:n_img, :n_img] = True
    allowed[n_img:, :n_img] = True
    allowed[n_img:, n_img:] = torch.ones(n_text, n_text, dtype=torch.bool).tril()
    mask = torch.zeros(n, n, dtype=dtype)
    return mask.masked_fill(~allowed, float("-inf"))


# --- localization decoder --------------------------------------------------


class TwoWayBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.self_attn = CrossAttention(dim, heads)
        self.norm1 = nn.LayerNorm(dim)
        self.t2i = CrossAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = MLP(dim, 2 * dim, dim)
        self.norm3 = nn.LayerNorm(dim)
        self.i2t = CrossAttention(dim, heads)
        self.norm4 = nn.LayerNorm(dim)

    def forward(self, tokens: Tensor, image: Tensor, image_pe: Tensor, query_pe: Tensor):
        q = tokens + query_pe
        tokens = self.norm1(tokens + self.self_attn(q, q, tokens))
        q = tokens + query_pe
        tokens = self.norm2(tokens + self.t2i(q, image + image_pe, image))
        tokens = self.norm3(tokens + self.mlp(tokens))
        q = tokens + query_pe
        image = self.norm4(image + self.i2t(image + image_pe, q, tokens))
        return tokens, image


class LocalizationDecoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.prompt_proj = MLP(e, e, e)
        self.mask_token = nn.Parameter(torch.randn(1, e) * cfg.init_std)
        self.instance_queries = nn.Parameter(torch.randn(cfg.m, e) * cfg.init_std)
        self.pos_d = nn.Parameter(torch.randn(cfg.pos_table_depth, e))
        self.pos_h = nn.Parameter(torch.randn(cfg.pos_table_hw, e))
        self.pos_w = nn.Parameter(torch.randn(cfg.pos_table_hw, e))
        self.blocks = nn.ModuleList(TwoWayBlock(e, cfg.num_heads) for _ in range(cfg.decoder_layers))
        self.final_attn = CrossAttention(e, cfg.num_heads)
        self.final_norm = nn.LayerNorm(e)
        chans = [e // 2**i for i in range(cfg.upsample_steps + 1)]
        self.up_weights = nn.ParameterList()
        self.up_biases = nn.ParameterList()
        for c_in, c_out in zip(chans[:-1], chans[1:]):
            w = torch.empty(c_in, c_out, 2, 2, 2)
            nn.init.normal_(w, std=1.0 / math.sqrt(c_in * 2))
            self.up_weights.append(nn.Parameter(w))
            self.up_biases.append(nn.Parameter(torch.zeros(c_out)))
        self.hyper = MLP(e, e, chans[-1])
        self.box_head = MLP(e, e, 6, layers=3)
        self.presence_head = MLP(e, e, 1)

    def forward(self, features: Tensor, prompts: Tensor, depth: int, height: int, width: int, rank: int):
        """``features (E, d, h, w)``, ``prompts (B, E)`` -> mask logits ``(B, D, H, W)``,
        corner boxes ``(B, m, 2*rank)`` and presence probabilities ``(B, m)``."""
        bsz = prompts.shape[0]
        e, d, h, w = features.shape
        pe = grid_positions(self.pos_d, self.pos_h, self.pos_w, d, h, w)
        image = features.permute(1, 2, 3, 0).reshape(1, d * h * w, e).expand(bsz, -1, -1)
        image_pe = pe.reshape(1, d * h * w, e)
        prompt = self.prompt_proj(prompts)[:, None, :]
        queries = torch.cat([self.mask_token, self.instance_queries], dim=0)[None].expand(bsz, -1, -1)
        query_pe = torch.cat([torch.zeros_like(prompt), queries], dim=1)
        tokens = torch.cat([prompt, queries], dim=1)
        for blk in self.blocks:
            tokens, image = blk(tokens, image, image_pe, query_pe)
        q = tokens + query_pe
        tokens = self.final_norm(tokens + self.final_attn(q, image + image_pe, image))

        mask_out = tokens[:, 1]
        inst_out = tokens[:, 2:]
        grid = image.reshape(bsz, d, h, w, e).permute(0, 4, 1, 2, 3)
        masks = []
        for b in range(bsz):
            x = grid[b]
            for i, (wt, bs) in enumerate(zip(self.up_weights, self.up_biases)):
                x = upsample_step(x, wt, bs, depth)
                if i < len(self.up_weights) - 1:
                    x = F.gelu(x)
            if tuple(x.shape[1:]) != (depth, height, width):
                raise ShapeError(f"mask head produced {tuple(x.shape[1:])}, expected {(depth, height, width)}")
            masks.append(torch.einsum("c,cdhw->dhw", self.hyper(mask_out[b]), x))
        mask_logits = torch.stack(masks)

        cs = torch.sigmoid(self.box_head(inst_out))  # (B, m, 6): centers (d, h, w), sizes (d, h, w)
        if rank == 2:
            cs = cs[..., [1, 2, 4, 5]]
        boxes = center_size_to_corners_t(cs)
        probs = torch.sigmoid(self.presence_head(inst_out))[..., 0]
        return mask_logits, boxes, probs


# --- full model ------------------------------------------------------------


class ImageFeatures(NamedTuple):
    grid: Tensor  # (E, d, h, w) encoder output
    pooled: Tensor  # max-pooled grid fed to the language model


class GroundingVLM(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        e = cfg.embed_dim
        self.vision = VisionEncoder(cfg)
        self.adapter = GatedAdapter(e, 2 * e, e)
        self.tok_emb = nn.Parameter(torch.randn(cfg.vocab_size, e))  # unit scale keeps token identity visible in the residual stream
        self.layers = nn.ModuleList(VisualExpertLayer(cfg, final=i == cfg.num_layers - 1) for i in range(cfg.num_layers))
        self.final_ln = nn.LayerNorm(e)
        self.lm_head = nn.Linear(e, cfg.vocab_size, bias=False)
        self.decoder = LocalizationDecoder(cfg)
        if cfg.use_lora and cfg.freeze_base:
            self.freeze_base_weights()

    def freeze_base_weights(self):
        """Freeze everything in the language core except the adapters."""
        for name, p in self.layers.named_parameters():
            p.requires_grad_("lora_" in name)

    def encode_image(self, image: Tensor, effective_patch: int | None = None) -> ImageFeatures:
        grid = self.vision(image, effective_patch)
        return ImageFeatures(grid, pool_features(grid, self.cfg.feature_pool_factor))

    def forward_vlm(self, features: ImageFeatures | Tensor | None, tokens: Sequence[int]) -> tuple[Tensor, Tensor]:
        """Logits ``(T, V)`` and last-layer hidden states ``(T, E)`` for the text positions.

        A bare tensor is taken as an already pooled ``(E, d, h, w)`` grid.
        """
        if isinstance(features, ImageFeatures):
            features = features.pooled
        text = self.tok_emb[torch.as_tensor(list(tokens), dtype=torch.long)]
        n_text = text.shape[0]
        if n_text > self.cfg.max_seq_len:
            raise CapacityError(f"text length {n_text} exceeds max_seq_len {self.cfg.max_seq_len}")
        if features is not None:
            img = self.adapter(features.flatten(1).T)
            x = torch.cat([img, text], dim=0)[None]
            n_img = img.shape[0]
        else:
            x = text[None]
            n_img = 0
        mask = vlm_mask(n_img, n_text, x.dtype)
        # image tokens share position 0; text counts up from 1, so text offsets ignore image size
        positions = torch.cat([torch.zeros(n_img), torch.arange(1, n_text + 1)])
        for layer in self.layers:
            x = layer(x, n_img, mask, positions)
        hidden = self.final_ln(x[0, n_img:])
        return self.lm_head(hidden), hidden

    def decode_localization(self, features: ImageFeatures | Tensor, prompts: Tensor, image_shape: Sequence[int]):
        """``image_shape`` is ``(D, H, W)`` for volumes or ``(H, W)`` for 2D images.

        The decoder reads the unpooled grid; pooling only trims the language model's image tokens.
        """
        if isinstance(features, ImageFeatures):
            features = features.grid
        single = prompts.dim() == 1
        if single:
            prompts = prompts[None]
        if prompts.shape[-1] != self.cfg.embed_dim:
            raise ShapeError(f"prompt dim {prompts.shape[-1]} != embed_dim {self.cfg.embed_dim}")
        if len(image_shape) == 2:
            depth, height, width, rank = 1, image_shape[0], image_shape[1], 2
        else:
            depth, height, width = image_shape
            rank = 2 if depth == 1 else 3
        masks, boxes, probs = self.decoder(features, prompts, depth, height, width, rank)
        if len(image_shape) == 2:
            masks = masks[:, 0]
        if single:
            return masks[0], boxes[0], probs[0]
        return masks, boxes, probs


def to_predictions(boxes: Tensor, probs: Tensor) -> list[InstancePrediction]:
    out = []
    for b, p in zip(boxes.detach().tolist(), probs.detach().tolist()):
        k = len(b) // 2
        lo = [min(max(v, 0.0), 1.0) for v in b[:k]]
        hi = [max(min(max(v, 0.0), 1.0), l) for v, l in zip(b[k:], lo)]
        out.append(InstancePrediction(Box(tuple(lo), tuple(hi)), p))
    return out


def build_model(cfg: ModelConfig, seed: int = 0, dtype=torch.float64) -> GroundingVLM:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        model = GroundingVLM(cfg)
    return model.to(dtype)


def ingest_depth(depth: int, cfg: ModelConfig) -> int:
    """Smallest depth >= ``depth`` on which the patch / upsample chain lands exactly
    back on itself; volumes are zero-padded to it before encoding."""
    if depth < 1:
        raise ShapeError(f"depth must be >= 1, got {depth}")
    d = depth
    while not depth_roundtrips(d, cfg):
        d += 1
    return d


def depth_roundtrips(depth: int, cfg: ModelConfig, effective_patch: int | None = None) -> bool:
    if effective_patch is None:
        effective_patch = effective_patch_size(depth, cfg.t_d, cfg.P_d)
    tokens = -(-depth // effective_patch)
    return upsampled_depth(tokens, depth, cfg.upsample_steps) == depth


def named_parameter_groups(model: nn.Module) -> dict[str, Tensor]:
    return {n: p for n, p in model.named_parameters() if p.requires_grad}
