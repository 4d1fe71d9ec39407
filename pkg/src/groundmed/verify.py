"""Oracle checks run by ``groundmed verify``.

Each check returns a :class:`CheckResult`; the oracles here are deliberately
naive (brute force, branch-by-branch formulas, quadratic DP) so they share no
code path with the implementations they audit.
"""

from __future__ import annotations

import itertools
import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

from .geometry import Box
from .grounding import Tokenizer, parse_response, render_grounded
from .matching import InstanceLabel, InstancePrediction, LossWeights, box_set_loss, hungarian
from .metrics import bleu1, rouge_l
from .model import ModelConfig, build_model, named_parameter_groups
from .patching import effective_patch_size, embed_2d, patch_embed, PatchSpec, reduce_transposed_kernel


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def brute_force_assignment(cost: np.ndarray) -> float:
    n = cost.shape[0]
    return min(sum(float(cost[i, p[i]]) for i in range(n)) for p in itertools.permutations(range(n)))


def check_matching(n_matrices: int = 1000, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    start = time.perf_counter()
    bad = 0
    for _ in range(n_matrices):
        m = int(rng.integers(1, 8))
        cost = rng.random((m, m))
        if hungarian(cost).total_cost != brute_force_assignment(cost):
            bad += 1
    elapsed = time.perf_counter() - start
    return CheckResult("matching", bad == 0 and elapsed < 10.0, f"{bad} mismatches over {n_matrices} matrices, {elapsed:.2f}s")


def _random_box(rng, rank: int) -> Box:
    lo = rng.random(rank) * 0.6
    return Box(tuple(lo), tuple(lo + 0.05 + rng.random(rank) * 0.35))


def check_set_loss_invariance(n_perms: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for m in (4, 8):
        preds = [InstancePrediction(_random_box(rng, 3), float(rng.uniform(0.05, 0.95))) for _ in range(m)]
        labels = [InstanceLabel(_random_box(rng, 3), True) for _ in range(m // 2 + 1)]
        ref = box_set_loss(preds, labels, m)
        for _ in range(n_perms):
            shuffled = [labels[i] for i in rng.permutation(len(labels))]
            worst = max(worst, abs(box_set_loss(preds, shuffled, m) - ref))
    return CheckResult("set-loss invariance", worst <= 1e-9, f"max deviation {worst:.3e}")


def _patch_oracle(d: int, t_d: int, p_d: int) -> int:
    if d <= t_d:
        return 1
    if d > t_d * p_d:
        return p_d
    return 2 ** math.floor(math.log2(d / t_d) + 0.5)


def check_patch_lattice() -> CheckResult:
    bad = []
    for t_d, p_d in ((4, 8), (8, 16), (8, 32)):
        for d in range(1, 4 * t_d * p_d + 1):
            p = effective_patch_size(d, t_d, p_d)
            if p != _patch_oracle(d, t_d, p_d):
                bad.append((d, t_d, p_d))
            if t_d < d <= t_d * p_d and not d / p <= math.sqrt(2) * t_d + 1e-12:
                bad.append(("bound", d, t_d, p_d))
    return CheckResult("patch lattice", not bad, f"{len(bad)} failures" + (f", first {bad[0]}" if bad else ""))


def check_conservation(seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    # dyadic entries keep every partial sum exact in float64
    kernel = torch.tensor(rng.integers(-64, 64, (3, 1, 8, 2, 2)) / 64.0)
    c = 0.375
    worst_patch = 0.0
    for p in (1, 2, 4, 8):
        d = 8 * p
        spec = PatchSpec(d, 8, 8, p)
        out = patch_embed(torch.full((1, d, 4, 4), c, dtype=torch.float64), kernel, spec)
        expected = c * kernel.sum(dim=(1, 2, 3, 4))
        worst_patch = max(worst_patch, float((out - expected[:, None, None, None]).abs().max()))
    t = torch.tensor(rng.normal(size=(3, 2, 2, 2, 2)))
    reduced = reduce_transposed_kernel(t, 1)
    closed = (t[:, :, 0] + t[:, :, 1]) / 2
    worst_t = float((reduced[:, :, 0] - closed).abs().max())
    ok = worst_patch == 0.0 and worst_t <= 1e-12
    return CheckResult("conservation", ok, f"patch max err {worst_patch:.1e}, transposed max err {worst_t:.1e}")


def check_2d_3d(n_images: int = 200, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    kernel = torch.tensor(rng.normal(size=(8, 1, 4, 4, 4)))
    bias = torch.tensor(rng.normal(size=8))
    worst = 0.0
    for _ in range(n_images):
        img = torch.tensor(rng.normal(size=(1, 16, 16)))
        a = embed_2d(img, kernel, bias)
        b = patch_embed(img[:, None], kernel, PatchSpec.for_depth(1, 8, 4), bias)
        worst = max(worst, float((a - b).abs().max()))
    return CheckResult("2d/3d consistency", worst <= 1e-12, f"max diff {worst:.1e} over {n_images} images")


def check_gradients(seed: int = 0) -> CheckResult:
    from .gradcheck import gradient_check
    from .training import build_instances, build_tokenizer, instance_loss, make_corpus

    tok = build_tokenizer()
    cfg = ModelConfig(embed_dim=16, num_heads=2, encoder_layers=1, num_layers=1, decoder_layers=1, m=4,
                      use_lora=True, vocab_size=len(tok))
    model = build_model(cfg, seed)
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():  # move off the zero-initialized adapter point so every group is exercised
        for p in model.parameters():
            p.add_(torch.randn(p.shape, generator=gen, dtype=p.dtype) * 0.05)
    scene = next(s for s in make_corpus(16, seed) if not s.is_2d and s.abnormalities)
    inst = build_instances([scene], 3, tok, seed)[0]
    params = named_parameter_groups(model)

    def loss_fn():
        return instance_loss(model, inst)[0]

    results = gradient_check(loss_fn, params, seed, samples_per_param=1, eps=1e-5)
    worst = max(results, key=lambda r: r.rel_error)
    loss_fn().backward()
    dead = [n for n, p in params.items() if p.grad is None or not torch.any(p.grad != 0)]
    ok = worst.rel_error < 1e-3 and not dead
    return CheckResult("gradients", ok, f"max rel err {worst.rel_error:.2e} at {worst.name}; {len(dead)} groups without gradient")


def check_grounding_roundtrip(n_layouts: int = 500, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    tok = Tokenizer([f"w{i}" for i in range(30)])
    bad = 0
    for _ in range(n_layouts):
        n = int(rng.integers(1, 25))
        words = [int(x) for x in rng.integers(len(tok) - 30, len(tok), n)]
        cuts = sorted(set(int(x) for x in rng.integers(0, n + 1, 2 * int(rng.integers(0, 5)))))
        spans = [(a, b) for a, b in zip(cuts[0::2], cuts[1::2]) if a < b]
        resp = parse_response(render_grounded(words, spans), tok)
        if [s.token_range for s in resp.spans] != [(a + 2 * i + 1, b + 2 * i + 1) for i, (a, b) in enumerate(spans)]:
            bad += 1
        if resp.text != tok.decode(words):
            bad += 1
    return CheckResult("grounding round-trip", bad == 0, f"{bad} failures over {n_layouts} layouts")


def check_stage_invariants(seed: int = 0, n: int = 24) -> CheckResult:
    from .training import build_instances, build_tokenizer, make_corpus, stage_invariant_violations

    tok = build_tokenizer()
    scenes = make_corpus(n, seed)
    problems = []
    for stage in (1, 2, 3):
        insts = build_instances(scenes, stage, tok, seed)
        problems += stage_invariant_violations(insts)
    return CheckResult("stage invariants", not problems, f"{len(problems)} violations")


def _lcs_table(a, b) -> int:
    t = [[0] * (len(b) + 1) for _ in range(len(a) + 1)]
    for i in range(1, len(a) + 1):
        for j in range(1, len(b) + 1):
            t[i][j] = t[i - 1][j - 1] + 1 if a[i - 1] == b[j - 1] else max(t[i - 1][j], t[i][j - 1])
    return t[-1][-1]


def check_text_metrics(n_pairs: int = 100, seed: int = 0) -> CheckResult:
    rng = np.random.default_rng(seed)
    vocab = list("abcdefgh")
    bad = 0
    for _ in range(n_pairs):
        a = [str(x) for x in rng.choice(vocab, int(rng.integers(1, 20)))]
        b = [str(x) for x in rng.choice(vocab, int(rng.integers(1, 20)))]
        lcs = _lcs_table(a, b)
        p, r = lcs / len(a), lcs / len(b)
        expected = 0.0 if lcs == 0 else 2 * p * r / (p + r)
        if abs(rouge_l(a, b) - expected) > 1e-12 or bleu1(a, a) != 1.0:
            bad += 1
    return CheckResult("text metrics", bad == 0, f"{bad} failures over {n_pairs} pairs")


CHECKS: dict[str, Callable[[], CheckResult]] = {
    "matching": check_matching,
    "set-loss": check_set_loss_invariance,
    "patch-lattice": check_patch_lattice,
    "conservation": check_conservation,
    "2d-3d": check_2d_3d,
    "gradients": check_gradients,
    "grounding": check_grounding_roundtrip,
    "stages": check_stage_invariants,
    "text-metrics": check_text_metrics,
}


def run_check(name: str) -> CheckResult:
    """Run one check; an exception counts as a failure rather than aborting the suite."""
    try:
        return CHECKS[name]()
    except Exception as exc:  # noqa: BLE001
        return CheckResult(name, False, f"raised {type(exc).__name__}: {exc}")


def run_all(names=None) -> list[CheckResult]:
    return [run_check(n) for n in (names or CHECKS)]
