import itertools

import numpy as np
import pytest
import torch
from hypothesis import given, strategies as st

from groundmed.errors import CapacityError, InputError
from groundmed.geometry import Box, focal_loss
from groundmed.matching import (
    InstanceLabel,
    InstancePrediction,
    LossWeights,
    box_set_loss,
    box_set_loss_t,
    hungarian,
    mask_loss,
    pad_labels,
    pair_cost,
)
from groundmed.verify import brute_force_assignment


def rand_box(rng, rank=3):
    lo = rng.random(rank) * 0.6
    return Box(tuple(lo), tuple(lo + 0.05 + rng.random(rank) * 0.35))


def test_pad_labels():
    assert pad_labels([], 4) == [InstanceLabel.negative()] * 4
    l1 = InstanceLabel(Box((0, 0), (1, 1)), True)
    assert pad_labels([l1], 3) == [l1, InstanceLabel.negative(), InstanceLabel.negative()]
    with pytest.raises(CapacityError):
        pad_labels([l1] * 5, 4)


def test_pair_cost_example():
    label = InstanceLabel(Box((0, 0), (0.5, 0.5)), True)
    pred = InstancePrediction(Box((0, 0), (0.25, 0.25)), 0.9)
    assert pair_cost(pred, label, LossWeights(5, 2, 1)) == pytest.approx(4.0002634012891445, rel=1e-12)


def test_pair_cost_negative_ignores_box():
    rng = np.random.default_rng(1)
    neg = InstanceLabel.negative()
    ref = pair_cost(InstancePrediction(rand_box(rng), 0.4), neg)
    assert ref == focal_loss(0.4, 0)
    for _ in range(20):
        assert pair_cost(InstancePrediction(rand_box(rng), 0.4), neg) == ref


def test_pair_cost_perfect_prediction_vanishes():
    b = Box((0.1, 0.1), (0.4, 0.6))
    costs = [pair_cost(InstancePrediction(b, p), InstanceLabel(b, True)) for p in (0.9, 0.99, 0.9999)]
    assert costs[0] > costs[1] > costs[2] and costs[2] < 1e-8


def test_hungarian_examples():
    assert hungarian([[3.5]]).perm == (0,) and hungarian([[3.5]]).total_cost == 3.5
    a = hungarian([[1, 2], [2, 1]])
    assert a.perm == (0, 1) and a.total_cost == 2
    b = hungarian([[4, 1, 3], [2, 0, 5], [3, 2, 2]])
    assert b.perm == (1, 0, 2) and b.total_cost == 5


def test_hungarian_rejects_bad_input():
    with pytest.raises(InputError):
        hungarian([[1, 2, 3], [4, 5, 6]])
    with pytest.raises(InputError):
        hungarian([[1, float("nan")], [0, 1]])


@given(st.integers(1, 6), st.integers(0, 2**32 - 1))
def test_hungarian_matches_brute_force(m, seed):
    cost = np.random.default_rng(seed).random((m, m))
    a = hungarian(cost)
    assert a.total_cost == brute_force_assignment(cost)
    assert sorted(a.perm) == list(range(m))


def test_set_loss_limits():
    rng = np.random.default_rng(2)
    preds = [InstancePrediction(rand_box(rng), 1e-9) for _ in range(4)]
    assert box_set_loss(preds, [], 4) < 1e-12
    gts = [rand_box(rng) for _ in range(4)]
    perfect = [InstancePrediction(b, 1 - 1e-9) for b in gts]
    assert box_set_loss(perfect, [InstanceLabel(b, True) for b in gts[::-1]], 4) < 1e-12


def test_set_loss_equals_permutation_minimum():
    rng = np.random.default_rng(3)
    preds = [InstancePrediction(rand_box(rng), float(rng.random())) for _ in range(4)]
    labels = pad_labels([InstanceLabel(rand_box(rng), True) for _ in range(2)], 4)
    best = min(sum(pair_cost(preds[i], labels[p[i]]) for i in range(4)) for p in itertools.permutations(range(4)))
    assert box_set_loss(preds, labels[:2], 4) == pytest.approx(best, abs=1e-12)


@given(st.integers(0, 2**32 - 1))
def test_set_loss_permutation_invariance(seed):
    rng = np.random.default_rng(seed)
    preds = [InstancePrediction(rand_box(rng), float(rng.uniform(0.05, 0.95))) for _ in range(6)]
    labels = [InstanceLabel(rand_box(rng), True) for _ in range(3)]
    ref = box_set_loss(preds, labels)
    assert ref >= 0
    assert abs(box_set_loss(preds, labels[::-1]) - ref) <= 1e-9
    shuffled = [preds[i] for i in rng.permutation(6)]
    assert abs(box_set_loss(shuffled, labels) - ref) <= 1e-9


def test_tensor_set_loss_matches_scalar():
    rng = np.random.default_rng(4)
    preds = [InstancePrediction(rand_box(rng), float(rng.uniform(0.05, 0.95))) for _ in range(5)]
    gts = [rand_box(rng) for _ in range(2)]
    pb = torch.tensor([p.box.as_list() for p in preds], dtype=torch.float64)
    pp = torch.tensor([p.presence_prob for p in preds], dtype=torch.float64)
    gb = torch.tensor([b.as_list() for b in gts], dtype=torch.float64)
    loss, assignment = box_set_loss_t(pb, pp, gb)
    ref = box_set_loss(preds, [InstanceLabel(b, True) for b in gts])
    assert float(loss) == pytest.approx(ref, abs=1e-10)
    assert assignment.total_cost == pytest.approx(ref, abs=1e-10)
    with pytest.raises(CapacityError):
        box_set_loss_t(pb[:1], pp[:1], gb)


def test_mask_loss_zero_logits_focal_term():
    n = 64
    loss = float(mask_loss(torch.zeros(4, 4, 4, dtype=torch.float64), torch.zeros(4, 4, 4)))
    dice_term = 1 - 1 / (0.5 * n + 1)
    assert loss - dice_term == pytest.approx(0.12996509635498973, abs=1e-12)


def test_mask_loss_limits_and_trajectory():
    gen = torch.Generator().manual_seed(0)
    target = (torch.rand(4, 8, 8, generator=gen) > 0.6).double()
    perfect = (target * 2 - 1) * 40
    assert float(mask_loss(perfect, target)) < 1e-6
    start = torch.randn(4, 8, 8, generator=gen, dtype=torch.float64)
    losses = [float(mask_loss((1 - t) * start + t * perfect, target)) for t in np.linspace(0, 1, 21)]
    assert all(a >= b for a, b in zip(losses, losses[1:]))
