import math

import numpy as np
import pytest
import torch

from groundmed.checkpoint import load_checkpoint, save_checkpoint
from groundmed.errors import ConfigError, NumericError
from groundmed.grounding import EOS, UNK, Special, parse_response
from groundmed.model import ModelConfig
from groundmed.training import (
    DEFAULT_RATES,
    EvalReport,
    StageConfig,
    build_instances,
    build_tokenizer,
    evaluate,
    image_tensor,
    instance_loss,
    lr_at,
    make_corpus,
    new_state,
    stage_invariant_violations,
    train_stage,
)

TOK = build_tokenizer()
TINY = dict(embed_dim=16, num_heads=2, encoder_layers=1, num_layers=1, decoder_layers=1, m=4)
SCENES = make_corpus(24, 0)


def tiny_state(seed=0):
    return new_state(ModelConfig(**TINY), seed, TOK)


def test_corpus_determinism_and_2d_fraction():
    a, b = make_corpus(6, 3), make_corpus(6, 3)
    for x, y in zip(a, b):
        assert x.image.tobytes() == y.image.tobytes() and x.findings == y.findings and x.impression == y.impression
    big = make_corpus(1000, 1, frac_2d=0.5)
    assert abs(sum(s.is_2d for s in big) / 1000 - 0.5) <= 0.05


def test_no_unknown_tokens():
    for stage in (1, 2, 3):
        for inst in build_instances(SCENES, stage, TOK, 0, variants=2 if stage < 3 else 1):
            assert UNK not in inst.tokens, inst.turns


def test_stage1_structure():
    insts = build_instances(SCENES, 1, TOK, 0, variants=20)
    assert len(insts) == 20 * len(SCENES)
    assert not stage_invariant_violations(insts)
    saw_absent = False
    for inst in insts:
        resp = parse_response(inst.tokens[inst.loss_mask.index(True):-1], TOK)
        assert len(resp.spans) == len(inst.targets)
        assert [s.phrase for s in resp.spans] == [t.name for t in inst.targets]
        for t in inst.targets:  # every tagged name carries geometry
            assert (t.mask is not None and t.mask.any()) if t.kind == "mask" else t.boxes
        response = inst.turns[0][1]
        for name in inst.turns[0][0].split(":", 1)[1].strip().rstrip(".").split(", "):
            if f"<p> {name} </p> present" not in response:
                assert f"{name} absent" in response
                saw_absent = True
    assert saw_absent


def test_stage2_invariants_and_rates():
    scenes = make_corpus(100, 2)
    insts = build_instances(scenes, 2, TOK, 0, variants=100)
    assert not stage_invariant_violations(insts)
    assert all(int(Special.NGRD) in i.tokens and int(Special.OPEN_P) not in i.tokens for i in insts)
    n = len(insts)
    assert n == 10_000
    assert abs(sum("modality" in i.tasks for i in insts) / n - DEFAULT_RATES["modality"]) <= 0.02
    assert abs(sum("abnormality" in i.tasks for i in insts) / n - DEFAULT_RATES["abnormality"]) <= 0.02
    flat = [i for i in insts if i.image.shape[0] == 1]
    assert abs(sum("plane" in i.tasks for i in flat) / len(flat) - DEFAULT_RATES["plane"]) <= 0.02
    assert all(i.tasks[-2:] == ("caption", "report") for i in insts)


def test_stage3_instances():
    insts = build_instances(SCENES, 3, TOK, 0)
    assert insts and not stage_invariant_violations(insts)
    for inst in insts:
        resp = parse_response(inst.tokens[inst.loss_mask.index(True):-1], TOK)
        assert len(resp.spans) == len(inst.targets)
    normal = [s for s in SCENES if not s.abnormalities]
    assert normal
    by_id = {i.sample_id: i for i in insts}
    for s in normal:
        assert "no" in s.impression.lower()
        inst = by_id[s.scene_id]
        assert any(t.kind == "mask" for t in inst.targets)
        assert all(t.kind == "mask" for t in inst.targets)


def test_lr_schedule():
    cfg = StageConfig(steps=100, warmup_steps=10, peak_lr=1e-3)
    assert lr_at(0, cfg) == pytest.approx(1e-4)
    assert lr_at(9, cfg) == pytest.approx(1e-3)
    assert lr_at(10, cfg) == pytest.approx(1e-3)
    assert lr_at(55, cfg) == pytest.approx(5e-4)
    assert lr_at(99, cfg) < 1e-6


def test_stage_config_validation():
    with pytest.raises(ValueError):
        StageConfig(stage=4)
    with pytest.raises(ValueError):
        StageConfig(rates={"modality": 1.5})


def test_language_loss_additivity():
    state = tiny_state()
    inst = build_instances(SCENES[:1], 3, TOK, 0)[0]
    model = state.model
    total, parts = instance_loss(model, inst, grounding=False)
    logits, _ = model.forward_vlm(model.encode_image(image_tensor(inst.image)), inst.tokens[:-1])
    picked = [i for i in range(len(inst.tokens) - 1) if inst.loss_mask[i + 1]]
    logp = torch.log_softmax(logits, -1)
    reference = -sum(float(logp.detach()[i, inst.tokens[i + 1]]) for i in picked) / len(picked)
    assert abs(total.item() - reference) <= 1e-12
    full, full_parts = instance_loss(model, inst)
    assert abs(full.item() - (full_parts["lm"] + full_parts["mask"] + full_parts["box"])) <= 1e-12
    assert full_parts["lm"] == parts["lm"]


def _short_run(seed, stage=1):
    state = tiny_state(seed)
    insts = build_instances(SCENES[:4], stage, TOK, seed, variants=2 if stage < 3 else 1)
    train_stage(state, StageConfig(stage=stage, steps=8, batch_size=2, warmup_steps=2, seed=seed), insts)
    return state


def test_training_determinism():
    a, b = _short_run(5), _short_run(5)
    assert [r["total"] for r in a.log] == [r["total"] for r in b.log]
    assert abs(a.log[-1]["total"] - b.log[-1]["total"]) <= 1e-9


def test_stage2_leaves_decoder_untouched():
    state = tiny_state()
    before = {n: p.detach().clone() for n, p in state.model.decoder.named_parameters()}
    insts = build_instances(SCENES[:3], 2, TOK, 0)
    state.model.zero_grad()
    instance_loss(state.model, insts[0], grounding=False)[0].backward()
    assert all(p.grad is None or not p.grad.any() for p in state.model.decoder.parameters())
    # AdamW weight decay still shrinks decoder weights, so only the gradient is zero; the loss never reads them
    train_stage(state, StageConfig(stage=2, steps=3, batch_size=2, warmup_steps=1, weight_decay=0.0), insts)
    for n, p in state.model.decoder.named_parameters():
        assert torch.equal(p, before[n]), n


def test_single_sample_overfit():
    state = new_state(ModelConfig(**{**TINY, "embed_dim": 32}), 0, TOK)
    inst = build_instances(make_corpus(4, 0)[:1], 1, TOK, 0)[:1]
    train_stage(state, StageConfig(stage=1, steps=300, batch_size=1, warmup_steps=20, sample_patch=False), inst)
    first, last = state.log[0]["total"], state.log[-1]["total"]
    assert last <= 0.1 * first


def test_non_finite_loss_aborts():
    state = tiny_state()
    with torch.no_grad():
        state.model.lm_head.weight.fill_(float("nan"))
    with pytest.raises(NumericError):
        train_stage(state, StageConfig(stage=2, steps=1), build_instances(SCENES[:1], 2, TOK, 0))


def test_checkpoint_roundtrip(tmp_path):
    state = _short_run(1)
    path = tmp_path / "a.ckpt"
    save_checkpoint(path, state.model, state.tokenizer, state.history)
    model, tok, history = load_checkpoint(path)
    assert tok.itos == state.tokenizer.itos and history == state.history
    for (n, p), (m, q) in zip(state.model.state_dict().items(), model.state_dict().items()):
        assert n == m and torch.equal(p, q)
    save_checkpoint(tmp_path / "b.ckpt", model, tok, history)
    assert path.read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    (tmp_path / "bad.ckpt").write_bytes(b"junk")
    with pytest.raises(Exception):
        load_checkpoint(tmp_path / "bad.ckpt")


def test_evaluate_fields():
    state = _short_run(0)
    text = build_instances(SCENES[:2], 2, TOK, 0)
    report = evaluate(state, SCENES[:4], text, max_new_tokens=8)
    assert isinstance(report, EvalReport)
    d = report.to_dict()
    assert all(isinstance(v, (int, float)) and math.isfinite(v) for v in d.values())
    assert d["n_mask_prompts"] > 0 and d["n_text"] == 2
