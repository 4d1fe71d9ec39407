import math

import numpy as np
import pytest
import torch

from groundmed.errors import ConfigError, ShapeError
from groundmed.patching import (
    PatchSpec,
    adaptive_upsample,
    effective_patch_size,
    embed_2d,
    patch_embed,
    reduce_patch_kernel,
    reduce_transposed_kernel,
    sample_patch_size,
    upsampled_depth,
)


@pytest.mark.parametrize("depth,expected", [(5, 1), (12, 2), (48, 8), (300, 16)])
def test_effective_patch_examples(depth, expected):
    assert effective_patch_size(depth, 8, 16) == expected


def test_effective_patch_rejects_non_power_of_two():
    with pytest.raises(ConfigError):
        effective_patch_size(10, 8, 12)


@pytest.mark.parametrize("t_d,p_d", [(4, 8), (8, 16), (8, 32)])
def test_effective_patch_monotone_and_token_bound(t_d, p_d):
    prev = 1
    for d in range(1, 4 * t_d * p_d + 1):
        p = effective_patch_size(d, t_d, p_d)
        assert p >= prev
        prev = p
        if t_d < d <= t_d * p_d:
            tokens = math.ceil(d / p)
            assert t_d / math.sqrt(2) - 1 <= tokens <= math.sqrt(2) * t_d + 1


def test_sampled_patch_distribution():
    rng = np.random.default_rng(0)
    draws = [sample_patch_size(8, 8, 16, rng) for _ in range(100_000)]
    assert abs(draws.count(1) / len(draws) - 0.8413447460685429) < 0.01
    assert set(draws) <= {1, 2, 4, 8, 16}
    a = [sample_patch_size(40, 8, 16, np.random.default_rng(5)) for _ in range(3)]
    b = [sample_patch_size(40, 8, 16, np.random.default_rng(5)) for _ in range(3)]
    assert a == b


def test_kernel_reduction():
    k = torch.ones(2, 1, 16, 3, 3, dtype=torch.float64)
    assert torch.all(reduce_patch_kernel(k, 8) == 2)
    assert torch.equal(reduce_patch_kernel(k, 16), k)
    with pytest.raises(ShapeError):
        reduce_patch_kernel(k, 3)


def test_transposed_kernel_reduction():
    k = torch.tensor([0.2, 0.6], dtype=torch.float64).reshape(1, 1, 2, 1, 1)
    assert reduce_transposed_kernel(k, 1).flatten().tolist() == pytest.approx([0.4], abs=1e-15)
    assert torch.equal(reduce_transposed_kernel(k, 2), k)


def test_depth_tokens_example():
    spec = PatchSpec.for_depth(48, 8, 16)
    assert spec.effective_patch == 8 and spec.depth_tokens == 6
    kernel = torch.randn(3, 1, 16, 4, 4, dtype=torch.float64)
    out = patch_embed(torch.randn(1, 48, 8, 8, dtype=torch.float64), kernel, spec)
    assert out.shape == (3, 6, 2, 2)


def test_constant_input_response():
    kernel = torch.tensor(np.random.default_rng(0).integers(-8, 8, (2, 1, 16, 2, 2)) / 8.0)
    for depth in (16, 32, 64, 128):
        spec = PatchSpec.for_depth(depth, 8, 16)
        out = patch_embed(torch.full((1, depth, 4, 4), 0.5, dtype=torch.float64), kernel, spec)
        expected = 0.5 * kernel.sum(dim=(1, 2, 3, 4))
        assert torch.equal(out, expected[:, None, None, None].expand_as(out))


def test_single_slice_matches_2d():
    gen = torch.Generator().manual_seed(0)
    kernel = torch.randn(4, 1, 8, 2, 2, generator=gen, dtype=torch.float64)
    img = torch.randn(1, 8, 8, generator=gen, dtype=torch.float64)
    a = embed_2d(img, kernel)
    b = patch_embed(img[:, None], kernel, PatchSpec.for_depth(1, 8, 8))
    assert (a - b).abs().max() <= 1e-12


def _stack(steps, gen):
    return [torch.randn(2, 2, 2, 2, 2, generator=gen, dtype=torch.float64) for _ in range(steps)]


def test_upsample_examples():
    gen = torch.Generator().manual_seed(0)
    w = _stack(2, gen)
    x = torch.randn(2, 3, 4, 4, generator=gen, dtype=torch.float64)
    assert adaptive_upsample(x, 3, w).shape == (2, 3, 16, 16)
    x1 = torch.randn(2, 1, 4, 4, generator=gen, dtype=torch.float64)
    assert adaptive_upsample(x1, 1, w).shape == (2, 1, 16, 16)
    with pytest.raises(ShapeError):
        adaptive_upsample(x, 2, w)


def test_upsample_depth_lattice():
    gen = torch.Generator().manual_seed(1)
    for steps in (1, 2, 3):
        w = _stack(steps, gen)
        for feat in (1, 2, 3, 4):
            for depth in range(feat, 4 * feat * 2 ** steps):
                target = upsampled_depth(feat, depth, steps)
                if target != depth:
                    with pytest.raises(ShapeError):
                        adaptive_upsample(torch.zeros(2, feat, 1, 1, dtype=torch.float64), depth, w)
                    continue
                out = adaptive_upsample(torch.randn(2, feat, 1, 1, generator=gen, dtype=torch.float64), depth, w)
                assert out.shape[1] == depth
