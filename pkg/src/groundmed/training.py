"""Synthetic corpora, the three training stages, the combined loss and evaluation.

Stage 1 teaches target detection and localization (grounding on), stage 2
visual instruction following without grounding (VQA, captioning, reports),
stage 3 grounded report generation on reports annotated by the synthesis
pipeline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

from .errors import NumericError
from .geometry import Box, FocalParams, VoxelMask, boxes_to_tensor, dice
from .grounding import (
    BOS,
    EOS,
    Special,
    _TOKEN_RE,
    Tokenizer,
    count_brackets,
    insert_mode_token,
    join_words,
    render_grounded,
    strip_tags,
)
from .matching import LossWeights, box_set_loss_t, mask_loss
from .metrics import bleu1, box_metrics, rouge1, rouge_l
from .model import GroundingVLM, ModelConfig, build_model, depth_roundtrips, to_predictions
from .patching import sample_patch_size
from .pipeline import MockBackend, OracleLocalizer, Report, Taxonomy, process_report
from .synthetic import ABNORMALITY, ANATOMY, NUMBER_WORDS, Scene, _plural, scene_for_index

STAGE1_PROMPT = "Find the following targets:"
STAGE2_QUESTIONS = {
    "modality": "What is the imaging modality?",
    "plane": "What is the viewing plane?",
    "abnormality": "Is there {article} {name}?",
    "caption": "Describe the image.",
    "report": "Write the report.",
}
DEFAULT_RATES = {"modality": 0.5, "plane": 0.2, "abnormality": 0.2}


# --- vocabulary --------------------------------------------------------------


def vocabulary_texts() -> list[str]:
    """Every word the synthetic templates can emit."""
    texts = [STAGE1_PROMPT, "present, absent.", "Findings: Impression:", "yes. no.", "x-ray. ct. frontal. lateral."]
    texts += list(STAGE2_QUESTIONS.values()) + ["a an"]
    names = list(ANATOMY) + list(ABNORMALITY)
    texts += names + [n.capitalize() for n in names] + [_plural(k) for k in ABNORMALITY]
    texts += list(NUMBER_WORDS.values()) + [w.capitalize() for w in NUMBER_WORDS.values()]
    texts += [
        "A An is seen in the left right lung lungs. are Multiple No There",
        "The heart is normal in size. The trachea is midline. The liver is partially imaged.",
        "The aorta is tortuous. The left lung and right lung are clear. No acute abnormality.",
        "A chest x-ray ct with no abnormality one lesion lesions.",
    ]
    return texts


def build_tokenizer() -> Tokenizer:
    return Tokenizer.from_texts(vocabulary_texts())


def make_corpus(n: int, seed: int, frac_2d: float = 0.5) -> list[Scene]:
    if n < 1:
        raise ValueError("corpus size must be >= 1")
    return [scene_for_index(seed, i, frac_2d) for i in range(n)]


# --- training instances --------------------------------------------------


@dataclass
class Target:
    name: str
    kind: str  # "mask" or "boxes"
    mask: np.ndarray | None = None  # (D, H, W) uint8
    boxes: list[Box] = field(default_factory=list)


@dataclass
class TrainingInstance:
    sample_id: str
    stage: int
    image: np.ndarray  # (D, H, W)
    tokens: list[int]
    loss_mask: list[bool]  # token i is predicted from tokens[:i]
    targets: list[Target]  # one per </p>, in order
    turns: list[tuple[str, str]]  # (instruction, tagged response) as text
    tasks: tuple[str, ...] = ()

    @property
    def grounded(self) -> bool:
        return bool(self.tokens) and self.tokens[1] == Special.GRD


class _Response:
    """Accumulates response words and grounded spans."""

    def __init__(self, tokenizer: Tokenizer):
        self.tok = tokenizer
        self.ids: list[int] = []
        self.spans: list[tuple[int, int]] = []
        self.targets: list[Target] = []

    def add(self, text: str, target: Target | None = None):
        ids = self.tok.encode(text)
        if target is not None:
            self.spans.append((len(self.ids), len(self.ids) + len(ids)))
            self.targets.append(target)
        self.ids.extend(ids)

    def render(self) -> list[int]:
        return render_grounded(self.ids, self.spans)


def _assemble(tokenizer, sample_id, stage, image, grounded, turns_ids, targets, turn_texts, tasks=()):
    tokens = [BOS]
    loss_mask = [False]
    for t, (instr, resp) in enumerate(turns_ids):
        if t == 0:
            instr = insert_mode_token(instr, grounded)
        tokens += instr
        loss_mask += [False] * len(instr)
        tokens += resp + [EOS]
        loss_mask += [True] * (len(resp) + 1)
    return TrainingInstance(sample_id, stage, image, tokens, loss_mask, targets, turn_texts, tuple(tasks))


def scene_target(scene: Scene, name: str) -> Target:
    if name in scene.anatomy:
        return Target(name, "mask", mask=scene.anatomy[name].data)
    return Target(name, "boxes", boxes=scene.boxes(name))


def build_stage1(scene: Scene, tokenizer: Tokenizer, rng: np.random.Generator, include: str | None = None) -> TrainingInstance:
    """Query a mix of present and absent targets; present ones are tagged and grounded.

    ``include`` forces one present target into the query.
    """
    anatomy = [n for n in scene.present_targets() if n in scene.anatomy]
    findings = [n for n in scene.present_targets() if n not in scene.anatomy]
    absent = scene.absent_targets()
    # abnormalities are rarer than organs, so each present one is queried with high probability
    picked = [n for n in findings if rng.random() < 0.8]
    k_anat = int(rng.integers(0 if picked else 1, 3))
    picked += list(rng.choice(anatomy, k_anat, replace=False))
    k_neg = int(rng.integers(0, min(2, len(absent)) + 1))
    if rng.random() < 0.25:  # single-target query
        picked = [include or str(rng.choice(anatomy + findings))]
        k_neg = 0
    elif include is not None and include not in picked:
        picked.append(include)
    chosen = [(n, True) for n in picked]
    chosen += [(n, False) for n in (rng.choice(absent, k_neg, replace=False) if k_neg else [])]
    order = rng.permutation(len(chosen))
    chosen = [chosen[i] for i in order]
    names = [str(n) for n, _ in chosen]
    instruction = f"{STAGE1_PROMPT} {', '.join(names)}."
    resp = _Response(tokenizer)
    for i, (name, is_present) in enumerate(chosen):
        name = str(name)
        resp.add(name, scene_target(scene, name) if is_present else None)
        resp.add(("present" if is_present else "absent") + ("," if i < len(chosen) - 1 else "."))
    ids = resp.render()
    return _assemble(
        tokenizer, scene.scene_id, 1, scene.image, True,
        [(tokenizer.encode(instruction), ids)], resp.targets, [(instruction, _tagged_text(tokenizer, ids))],
    )


def _tagged_text(tokenizer: Tokenizer, ids: Sequence[int]) -> str:
    return join_words(tokenizer.itos[i] for i in ids)


def report_text(findings: str, impression: str) -> str:
    return f"Findings: {findings} Impression: {impression}"


def build_stage2(scene: Scene, tokenizer: Tokenizer, rng: np.random.Generator, rates: dict | None = None) -> TrainingInstance:
    """Multi-turn VQA + caption + report conversation with grounding disabled."""
    rates = {**DEFAULT_RATES, **(rates or {})}
    turns: list[tuple[str, str]] = []
    tasks = []
    if rng.random() < rates["modality"]:
        turns.append((STAGE2_QUESTIONS["modality"], f"{scene.modality}."))
        tasks.append("modality")
    if scene.is_2d and rng.random() < rates["plane"]:
        turns.append((STAGE2_QUESTIONS["plane"], f"{scene.plane}."))
        tasks.append("plane")
    if rng.random() < rates["abnormality"]:
        name = str(rng.choice(list(ABNORMALITY)))
        article = "an" if name[0] in "aeiou" else "a"
        turns.append((STAGE2_QUESTIONS["abnormality"].format(article=article, name=name),
                      "yes." if name in scene.abnormalities else "no."))
        tasks.append("abnormality")
    turns.append((STAGE2_QUESTIONS["caption"], scene.caption))
    turns.append((STAGE2_QUESTIONS["report"], report_text(scene.findings, scene.impression)))
    tasks += ["caption", "report"]
    turn_ids = [(tokenizer.encode(q), tokenizer.encode(a)) for q, a in turns]
    return _assemble(tokenizer, scene.scene_id, 2, scene.image, False, turn_ids, [], turns, tasks)


def _word_offsets(text: str) -> list[tuple[int, int]]:
    return [(m.start(), m.end()) for m in _TOKEN_RE.finditer(text)]


def build_stage3(scene: Scene, tokenizer: Tokenizer, taxonomy: Taxonomy | None = None, backend=None) -> TrainingInstance | None:
    """Grounded report instance from the synthesis pipeline (mock annotator, oracle localizer).

    Only annotations that received geometry are bracketed. Returns ``None``
    when the pipeline drops the report.
    """
    taxonomy = taxonomy or Taxonomy.load()
    backend = backend or MockBackend(taxonomy)
    source = "mimic-cxr" if scene.is_2d else "ct-rate"
    result = process_report(
        Report(scene.scene_id, scene.findings, scene.impression, source), taxonomy, backend,
        OracleLocalizer({scene.scene_id: scene}),
    )
    if result.sample is None:
        return None
    resp = _Response(tokenizer)
    resp.add("Findings:")
    for name in ("findings", "impression"):
        if name == "impression":
            resp.add("Impression:")
        sec = result.sample.sections[name]
        plain = sec.tagged.plain
        offsets = _word_offsets(plain)
        grounded = {ga.annotation.span: ga for ga in sec.annotations if ga.localization is not None}
        i = 0
        while i < len(offsets):
            start = offsets[i][0]
            ga = next((g for span, g in grounded.items() if span[0] == start), None)
            if ga is not None:
                j = i
                while j < len(offsets) and offsets[j][1] <= ga.annotation.span[1]:
                    j += 1
                if offsets[j - 1][1] == ga.annotation.span[1]:
                    resp.add(plain[start : ga.annotation.span[1]], _pipeline_target(scene, ga))
                    i = j
                    continue
            resp.add(plain[offsets[i][0] : offsets[i][1]])
            i += 1
    ids = resp.render()
    instruction = STAGE2_QUESTIONS["report"]
    return _assemble(
        tokenizer, scene.scene_id, 3, scene.image, True,
        [(tokenizer.encode(instruction), ids)], resp.targets, [(instruction, _tagged_text(tokenizer, ids))],
    )


def _pipeline_target(scene: Scene, ga) -> Target:
    loc = ga.localization
    if loc.kind == "mask":
        return Target(ga.annotation.target, "mask", mask=loc.mask.data)
    boxes = list(loc.boxes)
    if scene.is_2d:
        boxes = [Box(b.min_corner[1:], b.max_corner[1:]) for b in boxes]
    return Target(ga.annotation.target, "boxes", boxes=boxes)


def build_instances(scenes: Sequence[Scene], stage: int, tokenizer: Tokenizer, seed: int, rates: dict | None = None,
                    variants: int = 1):
    """Training instances for ``stage``; stages 1 and 2 draw ``variants`` independent queries per scene."""
    out = []
    taxonomy = Taxonomy.load() if stage == 3 else None
    backend = MockBackend(taxonomy) if stage == 3 else None
    for i, scene in enumerate(scenes):
        rng = np.random.default_rng([seed, stage, i])
        if stage == 1:
            present = scene.present_targets()  # cycle so every present target is queried at least once
            out += [build_stage1(scene, tokenizer, rng, present[v % len(present)]) for v in range(variants)]
        elif stage == 2:
            out += [build_stage2(scene, tokenizer, rng, rates) for _ in range(variants)]
        elif stage == 3:
            inst = build_stage3(scene, tokenizer, taxonomy, backend)
            if inst is not None:
                out.append(inst)
        else:
            raise ValueError(f"unknown stage {stage}")
    return out


# --- loss ------------------------------------------------------------------


@dataclass
class LossConfig:
    lm_weight: float = 1.0
    grounding_weight: float = 1.0
    box_weights: LossWeights = field(default_factory=LossWeights)
    focal: FocalParams = field(default_factory=FocalParams)


def image_tensor(image: np.ndarray, dtype=torch.float64) -> torch.Tensor:
    return torch.as_tensor(image, dtype=dtype)[None]


def instance_loss(model: GroundingVLM, inst: TrainingInstance, loss_cfg: LossConfig = LossConfig(),
                  effective_patch: int | None = None, grounding: bool = True) -> tuple[torch.Tensor, dict]:
    """Language cross-entropy over response tokens plus mask / box-set losses per grounded phrase."""
    dtype = next(model.parameters()).dtype
    features = model.encode_image(image_tensor(inst.image, dtype), effective_patch)
    logits, hidden = model.forward_vlm(features, inst.tokens[:-1])
    targets = torch.as_tensor(inst.tokens[1:], dtype=torch.long)
    sel = torch.as_tensor(inst.loss_mask[1:], dtype=torch.bool)
    lm = torch.nn.functional.cross_entropy(logits[sel], targets[sel])
    parts = {"lm": lm.item(), "mask": 0.0, "box": 0.0}
    total = loss_cfg.lm_weight * lm
    if grounding and inst.targets:
        close = [i for i, t in enumerate(inst.tokens[:-1]) if t == Special.CLOSE_P]
        if len(close) != len(inst.targets):
            raise ValueError(f"{inst.sample_id}: {len(close)} </p> tokens for {len(inst.targets)} targets")
        prompts = hidden[close]
        masks, boxes, probs = model.decode_localization(features, prompts, inst.image.shape)
        g_mask = torch.zeros((), dtype=dtype)
        g_box = torch.zeros((), dtype=dtype)
        for b, tgt in enumerate(inst.targets):
            if tgt.kind == "mask":
                g_mask = g_mask + mask_loss(masks[b], torch.tensor(tgt.mask), loss_cfg.focal)
            else:
                gt = boxes_to_tensor(tgt.boxes, dtype) if tgt.boxes else torch.zeros((0, boxes.shape[-1]), dtype=dtype)
                loss, _ = box_set_loss_t(boxes[b], probs[b], gt, loss_cfg.box_weights, loss_cfg.focal)
                g_box = g_box + loss
        parts["mask"] = g_mask.item()
        parts["box"] = g_box.item()
        total = total + loss_cfg.grounding_weight * (g_mask + g_box)
    parts["total"] = total.item()
    return total, parts


# --- trainer -----------------------------------------------------------------


@dataclass
class StageConfig:
    stage: int = 1
    steps: int = 300
    batch_size: int = 4
    peak_lr: float = 1e-3
    warmup_steps: int = 20
    schedule: str = "cosine"
    seed: int = 0
    rates: dict = field(default_factory=lambda: dict(DEFAULT_RATES))
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 5e-2
    clip_norm: float = 1.0
    sample_patch: bool = True
    lm_weight: float = 1.0
    grounding_weight: float = 1.0
    # (l1, giou, discrimination); a unit discrimination weight leaves presence uncalibrated at desk scale
    box_weights: tuple[float, float, float] = (5.0, 2.0, 4.0)

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError(f"stage must be 1, 2 or 3, got {self.stage}")
        for k, v in self.rates.items():
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"rate {k}={v} outside [0, 1]")


@dataclass
class TrainState:
    model: GroundingVLM
    tokenizer: Tokenizer
    history: list[dict] = field(default_factory=list)  # one record per completed stage
    log: list[dict] = field(default_factory=list)

    @property
    def config(self) -> ModelConfig:
        return self.model.cfg


def new_state(model_cfg: ModelConfig | None = None, seed: int = 0, tokenizer: Tokenizer | None = None) -> TrainState:
    tokenizer = tokenizer or build_tokenizer()
    cfg = model_cfg or ModelConfig()
    cfg.vocab_size = len(tokenizer)
    return TrainState(build_model(cfg, seed), tokenizer)


def lr_at(step: int, cfg: StageConfig) -> float:
    """Linear warmup then cosine decay to zero; ``step`` counts from 0."""
    if step < cfg.warmup_steps:
        return cfg.peak_lr * (step + 1) / cfg.warmup_steps
    if cfg.schedule == "constant":
        return cfg.peak_lr
    span = max(cfg.steps - cfg.warmup_steps, 1)
    progress = (step - cfg.warmup_steps) / span
    return 0.5 * cfg.peak_lr * (1 + math.cos(math.pi * progress))


def train_stage(state: TrainState, cfg: StageConfig, instances: Sequence[TrainingInstance],
                on_step: Callable[[dict], None] | None = None) -> TrainState:
    model = state.model
    model.train()
    params = [p for p in model.parameters() if p.requires_grad]
    opt = torch.optim.AdamW(params, lr=cfg.peak_lr, betas=cfg.betas, eps=cfg.eps, weight_decay=cfg.weight_decay)
    rng = np.random.default_rng([cfg.seed, cfg.stage])
    loss_cfg = LossConfig(cfg.lm_weight, cfg.grounding_weight, LossWeights(*cfg.box_weights))
    grounding = cfg.stage in (1, 3)
    n = len(instances)
    for step in range(cfg.steps):
        lr = lr_at(step, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = rng.choice(n, size=min(cfg.batch_size, n), replace=False)
        opt.zero_grad()
        totals = {"lm": 0.0, "mask": 0.0, "box": 0.0, "total": 0.0}
        for idx in batch:
            inst = instances[int(idx)]
            patch = None
            if cfg.sample_patch:
                depth = inst.image.shape[0]
                cand = sample_patch_size(depth, model.cfg.t_d, model.cfg.P_d, rng)
                patch = cand if depth_roundtrips(depth, model.cfg, cand) else None
            loss, parts = instance_loss(model, inst, loss_cfg, patch, grounding)
            if not torch.isfinite(loss):
                raise NumericError(f"non-finite loss at step {step} on {inst.sample_id}: {parts}")
            (loss / len(batch)).backward()
            for k in totals:
                totals[k] += parts[k] / len(batch)
        torch.nn.utils.clip_grad_norm_(params, cfg.clip_norm)
        opt.step()
        record = {"stage": cfg.stage, "step": step, "lr": lr, **totals}
        state.log.append(record)
        if on_step is not None:
            on_step(record)
    # lists rather than tuples so the record survives a JSON checkpoint round trip unchanged
    state.history.append({k: list(v) if isinstance(v, tuple) else v for k, v in asdict(cfg).items()})
    model.eval()
    return state


# --- evaluation ------------------------------------------------------------


@dataclass
class EvalReport:
    dice_mean: float
    l1_mean: float
    giou_mean: float
    presence_precision: float
    presence_recall: float
    presence_f1: float
    bleu1: float
    rouge1: float
    rouge_l: float
    n_mask_prompts: int = 0
    n_box_prompts: int = 0
    n_text: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def localization_prompt(tokenizer: Tokenizer, names: Sequence[str]) -> list[int]:
    """``<bos> <grd> Find the following targets: a, b. <p> a </p> present, <p> b </p> present.``

    The response is forced, so every ``</p>`` hidden state is a prompt for the
    corresponding name.
    """
    if isinstance(names, str):
        names = [names]
    instr = insert_mode_token(tokenizer.encode(f"{STAGE1_PROMPT} {', '.join(names)}."), True)
    resp = _Response(tokenizer)
    for i, name in enumerate(names):
        resp.add(name, Target(name, "mask"))
        resp.add("present" + ("," if i < len(names) - 1 else "."))
    return [BOS] + instr + resp.render()


@torch.no_grad()
def localize(model: GroundingVLM, tokenizer: Tokenizer, image: np.ndarray, names: Sequence[str], joint: bool = True):
    """Prompt the decoder with target names in grounding format.

    ``joint`` lists all names in one query; otherwise each name gets its own.
    """
    if not names:
        return None
    dtype = next(model.parameters()).dtype
    features = model.encode_image(image_tensor(image, dtype))
    groups = [list(names)] if joint else [[n] for n in names]
    prompts = []
    for group in groups:
        tokens = localization_prompt(tokenizer, group)
        _, hidden = model.forward_vlm(features, tokens)
        prompts += [hidden[i] for i, t in enumerate(tokens) if t == Special.CLOSE_P]
    return model.decode_localization(features, torch.stack(prompts), image.shape)


@torch.no_grad()
def generate(model: GroundingVLM, features, prefix: Sequence[int], max_new_tokens: int = 64) -> tuple[list[int], torch.Tensor]:
    """Greedy decoding; returns generated ids (without EOS) and hidden states of the full sequence."""
    tokens = list(prefix)
    out: list[int] = []
    hidden = None
    for _ in range(max_new_tokens):
        if len(tokens) >= model.cfg.max_seq_len:
            break
        logits, hidden = model.forward_vlm(features, tokens)
        nxt = int(logits[-1].argmax())
        if nxt == EOS:
            break
        tokens.append(nxt)
        out.append(nxt)
    _, hidden = model.forward_vlm(features, tokens)
    return out, hidden


def evaluate(state: TrainState, scenes: Sequence[Scene], instances: Sequence[TrainingInstance] = (),
             presence_threshold: float = 0.5, iou_threshold: float = 0.5, max_new_tokens: int = 64,
             joint_queries: bool = True) -> EvalReport:
    model, tok = state.model, state.tokenizer
    model.eval()
    dices, l1s, gious = [], [], []
    tp = n_pred = n_gt = 0
    n_box_prompts = 0
    for scene in scenes:
        names = scene.present_targets()
        res = localize(model, tok, scene.image, names, joint_queries)
        if res is None:
            continue
        masks, boxes, probs = res
        for b, name in enumerate(names):
            if name in scene.anatomy:
                pred = VoxelMask.from_array((masks[b] > 0).numpy())
                dices.append(dice(pred, scene.anatomy[name]))
            else:
                n_box_prompts += 1
                preds = [p.box for p in to_predictions(boxes[b], probs[b]) if p.presence_prob > presence_threshold]
                bm = box_metrics(preds, scene.boxes(name), iou_threshold)
                tp += bm["tp"]
                n_pred += bm["n_pred"]
                n_gt += bm["n_gt"]
                l1s += bm["l1"]
                gious += bm["giou"]
    precision = tp / n_pred if n_pred else 0.0
    recall = tp / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0

    bleus, r1s, rls = [], [], []
    dtype = next(model.parameters()).dtype
    for inst in instances:
        first_eos = inst.loss_mask.index(True)
        prefix = inst.tokens[:first_eos]
        ref_end = inst.tokens.index(EOS, first_eos)
        reference = [tok.itos[t] for t in strip_tags(inst.tokens[first_eos:ref_end])]
        features = model.encode_image(image_tensor(inst.image, dtype))
        gen, _ = generate(model, features, prefix, max_new_tokens)
        candidate = [tok.itos[t] for t in strip_tags(gen)]
        bleus.append(bleu1(candidate, reference))
        r1s.append(rouge1(candidate, reference))
        rls.append(rouge_l(candidate, reference))

    def mean(xs):
        return float(np.mean(xs)) if xs else 0.0

    return EvalReport(
        mean(dices), mean(l1s), mean(gious), precision, recall, f1, mean(bleus), mean(r1s), mean(rls),
        len(dices), n_box_prompts, len(bleus),
    )


def stage_invariant_violations(instances: Sequence[TrainingInstance]) -> list[str]:
    """Structural audit: stage 2 carries no brackets; stages 1/3 map each phrase to one target."""
    problems = []
    for inst in instances:
        n_brackets = count_brackets(inst.tokens)
        if inst.stage == 2:
            if n_brackets or Special.NGRD not in inst.tokens:
                problems.append(f"{inst.sample_id}: stage-2 instance has brackets or lacks <ngrd>")
        else:
            n_close = sum(1 for t in inst.tokens if t == Special.CLOSE_P)
            if n_close != len(inst.targets) or n_brackets != 2 * n_close:
                problems.append(f"{inst.sample_id}: {n_close} phrases vs {len(inst.targets)} targets")
    return problems
