import math

import pytest
import torch

from groundmed.errors import CapacityError, ConfigError, ShapeError
from groundmed.model import (
    LoRALinear,
    ModelConfig,
    build_model,
    ingest_depth,
    pool_features,
    pooled_extent,
)

SMALL = dict(embed_dim=16, num_heads=2, encoder_layers=1, num_layers=1, decoder_layers=1, m=4, vocab_size=40)


def small(**kw):
    return build_model(ModelConfig(**{**SMALL, **kw}), seed=0)


def rand(*shape, seed=0):
    return torch.randn(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_lora_scale():
    assert ModelConfig(lora_rank=64, lora_alpha=8).lora_scale == 1.0
    assert ModelConfig(lora_rank=4, lora_alpha=8).lora_scale == 4.0


def test_lora_zero_init_is_base_path():
    cfg = ModelConfig(**SMALL, use_lora=True)
    layer = LoRALinear(16, 8, cfg).double()
    x = rand(3, 16)
    assert torch.equal(layer(x), layer.base(x))


def test_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig(embed_dim=10, num_heads=4)
    with pytest.raises(ConfigError):
        ModelConfig(patch_hw=3)


def test_single_slice_encoder_matches_2d():
    model = small()
    img = rand(1, 16, 16)
    a = model.vision(img)
    b = model.vision(img[:, None])
    assert a.shape == b.shape and (a - b).abs().max() <= 1e-12


def test_pooled_extents():
    for d, h, w in [(1, 4, 4), (3, 5, 7), (8, 2, 1), (2, 9, 3)]:
        out = pool_features(rand(4, d, h, w), 2)
        assert tuple(out.shape[1:]) == tuple(pooled_extent(n, 2) for n in (d, h, w))
        assert tuple(out.shape[1:]) == tuple(n if n == 1 else math.ceil(n / 2) for n in (d, h, w))


def test_forward_determinism():
    img = rand(1, 8, 16, 16)
    outs = [small().forward_vlm(small().encode_image(img), [2, 5, 9, 11])[0] for _ in range(2)]
    assert torch.equal(outs[0], outs[1])


def test_routing_isolation():
    model = small()
    feats = model.encode_image(rand(1, 4, 16, 16))
    toks = [2, 5, 9]
    text_only = model.forward_vlm(None, toks)[0]
    with_image = model.forward_vlm(feats, toks)[0]
    with torch.no_grad():
        for layer in model.layers:
            for p in layer.visual.parameters():
                p.zero_()
    assert torch.equal(model.forward_vlm(None, toks)[0], text_only)
    assert not torch.allclose(model.forward_vlm(feats, toks)[0], with_image)
    model.zero_grad()
    model.forward_vlm(None, toks)[0].sum().backward()
    for layer in model.layers:
        assert all(p.grad is None or not p.grad.any() for p in layer.visual.parameters())


def test_sequence_overflow():
    model = small(max_seq_len=4)
    with pytest.raises(CapacityError):
        model.forward_vlm(None, [2] * 5)


def test_decoder_batch_equivariance_and_ranges():
    model = small()
    for shape in [(16, 16), (4, 16, 16), (8, 16, 16)]:
        feats = model.encode_image(rand(1, *shape))
        prompts = rand(2, 16, seed=1)
        masks, boxes, probs = model.decode_localization(feats, prompts, shape)
        for i in range(2):
            m1, b1, p1 = model.decode_localization(feats, prompts[i], shape)
            assert (masks[i] - m1).abs().max() <= 1e-10
            assert (boxes[i] - b1).abs().max() <= 1e-10
            assert (probs[i] - p1).abs().max() <= 1e-10
        assert tuple(masks.shape[1:]) == shape
        assert boxes.shape[-1] == 2 * (2 if len(shape) == 2 else 3)
        assert boxes.min() >= 0 and boxes.max() <= 1
        assert probs.min() > 0 and probs.max() < 1
    with pytest.raises(ShapeError):
        model.decode_localization(feats, rand(2, 8), (8, 16, 16))


@pytest.mark.parametrize("depth", [1, 4, 8])
def test_mask_depth_matches_image(depth):
    model = small()
    feats = model.encode_image(rand(1, depth, 16, 16))
    masks, _, _ = model.decode_localization(feats, rand(16), (depth, 16, 16))
    assert masks.shape == (depth, 16, 16)


def test_ingest_depth():
    cfg = ModelConfig(**SMALL)
    for d in range(1, 40):
        assert ingest_depth(d, cfg) >= d
    assert ingest_depth(8, cfg) == 8
    with pytest.raises(ShapeError):
        ingest_depth(0, cfg)


def test_frozen_base_only_moves_adapters():
    model = small(use_lora=True, freeze_base=True)
    core = {n: p.detach().clone() for n, p in model.layers.named_parameters()}
    opt = torch.optim.SGD([p for p in model.parameters() if p.requires_grad], lr=0.1)
    feats = model.encode_image(rand(1, 4, 16, 16))
    logits, _ = model.forward_vlm(feats, [2, 5, 9, 11])
    logits.logsumexp(-1).sum().backward()
    opt.step()
    for n, p in model.layers.named_parameters():
        if "lora_" in n:
            continue
        assert torch.equal(p, core[n]), n
    assert any(not torch.equal(p, core[n]) for n, p in model.layers.named_parameters() if "lora_up" in n)
