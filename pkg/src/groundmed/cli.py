"""Command-line entry point: ``groundmed {verify,train,eval,synthesize,demo}``."""

from __future__ import annotations

import argparse
import copy
import dataclasses
import json
import logging
import sys
import time
import zipfile
import zlib
from pathlib import Path

import numpy as np
import torch

from .checkpoint import load_checkpoint, save_checkpoint
from .errors import BackendError, ConfigError, MalformedResponseError
from .grounding import BOS, extract_prompt_embeddings, insert_mode_token, parse_response
from .model import ModelConfig, to_predictions
from .pipeline import HttpBackend, MockBackend, OracleLocalizer, Taxonomy, pipeline_stats, run_pipeline
from .pipeline.io import dumps, read_reports, rle_encode, sample_record, write_stats
from .synthetic import SceneBank, scene_for_index
from .geometry import VoxelMask
from .training import (
    STAGE2_QUESTIONS,
    StageConfig,
    TrainState,
    build_instances,
    build_tokenizer,
    evaluate,
    generate,
    image_tensor,
    make_corpus,
    new_state,
    train_stage,
)

log = logging.getLogger("groundmed")


class CorpusError(OSError):
    """Unreadable input corpus; reported with the I/O exit code."""

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG, EXIT_IO, EXIT_BACKEND = 0, 1, 2, 3, 4
CONFIG_VERSION = 1
DEFAULT_SEED = 0

DEFAULT_CONFIG = {
    "version": CONFIG_VERSION,
    "seed": DEFAULT_SEED,
    "model": {},
    "corpus": {"size": 32, "frac_2d": 0.5, "variants": 8},
    "train": {},
    "eval": {"text_samples": 4, "joint_queries": True},
    "synthesize": {"jobs": 1, "scene_seed": 0},
}

# per-stage defaults layered under the config's "train" section
STAGE_DEFAULTS = {
    1: {"steps": 3000, "warmup_steps": 200, "lm_weight": 0.05},
    2: {"steps": 400, "warmup_steps": 40},
    3: {"steps": 400, "warmup_steps": 40},
}


def substream_seed(seed: int, name: str) -> int:
    """Independent, stable seed for a named component (corpus, init, sampling, ...)."""
    return int(np.random.SeedSequence([seed, zlib.crc32(name.encode())]).generate_state(1)[0])


# --- config ------------------------------------------------------------------


def load_config(path: str | None) -> dict:
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is None:
        return cfg
    text = Path(path).read_text()
    try:
        if path.endswith((".yaml", ".yml")):
            import yaml

            user = yaml.safe_load(text) or {}
        else:
            user = json.loads(text)
    except Exception as exc:
        raise ConfigError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(user, dict):
        raise ConfigError("config root must be a mapping")
    if user.get("version") != CONFIG_VERSION:
        raise ConfigError(f"config version must be {CONFIG_VERSION}, got {user.get('version')!r}")
    for key, value in user.items():
        if key not in cfg:
            raise ConfigError(f"unknown config section {key!r}")
        if isinstance(cfg[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"section {key!r} must be a mapping")
            cfg[key].update(value)
        else:
            cfg[key] = value
    return cfg


def _build(cls, fields: dict, what: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(fields) - names
    if unknown:
        raise ConfigError(f"unknown {what} keys: {sorted(unknown)}")
    try:
        return cls(**fields)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {what}: {exc}") from exc


def model_config(cfg: dict, vocab_size: int) -> ModelConfig:
    return _build(ModelConfig, {**cfg["model"], "vocab_size": vocab_size}, "model")


def stage_config(cfg: dict, stage: int) -> StageConfig:
    if stage not in STAGE_DEFAULTS:
        raise ConfigError(f"stage must be 1, 2 or 3, got {stage}")
    fields = {**STAGE_DEFAULTS[stage], **cfg["train"], "stage": stage, "seed": substream_seed(cfg["seed"], "sampling")}
    if "box_weights" in fields:
        fields["box_weights"] = tuple(fields["box_weights"])
    if "betas" in fields:
        fields["betas"] = tuple(fields["betas"])
    return _build(StageConfig, fields, "train")


def corpus(cfg: dict):
    c = cfg["corpus"]
    try:
        return make_corpus(int(c["size"]), substream_seed(cfg["seed"], "corpus"), float(c["frac_2d"]))
    except (KeyError, ValueError) as exc:
        raise ConfigError(f"invalid corpus section: {exc}") from exc


# --- commands ------------------------------------------------------------------


def cmd_verify(args, cfg) -> int:
    from .verify import CHECKS, run_check

    names = args.only or list(CHECKS)
    bad = [n for n in names if n not in CHECKS]
    if bad:
        raise ConfigError(f"unknown checks {bad}; available: {list(CHECKS)}")
    failed = 0
    for name in names:
        res = run_check(name)
        print(f"{'PASS' if res.passed else 'FAIL'} {res.name}: {res.detail}")
        failed += not res.passed
    print(f"{len(names) - failed}/{len(names)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


def _load_state(path) -> TrainState:
    model, tok, history = load_checkpoint(path)
    return TrainState(model, tok, history)


def cmd_train(args, cfg) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stage_cfg = stage_config(cfg, args.stage)
    if args.init:
        state = _load_state(args.init)
    else:
        tok = build_tokenizer()
        state = new_state(model_config(cfg, len(tok)), substream_seed(cfg["seed"], "init"), tok)
    scenes = corpus(cfg)
    instances = build_instances(
        scenes, args.stage, state.tokenizer, substream_seed(cfg["seed"], "sampling"),
        stage_cfg.rates, int(cfg["corpus"].get("variants", 1)),
    )
    metrics_path = out / f"metrics-stage{args.stage}.jsonl"
    with open(metrics_path, "w") as f:
        f.write(json.dumps({"started": time.strftime("%Y-%m-%dT%H:%M:%S"), "stage": args.stage}) + "\n")
        train_stage(state, stage_cfg, instances, lambda rec: f.write(dumps(rec) + "\n"))
    save_checkpoint(out / f"stage{args.stage}.ckpt", state.model, state.tokenizer, state.history)
    (out / "config.json").write_text(json.dumps(cfg, sort_keys=True, indent=2) + "\n")
    last = state.log[-1] if state.log else {}
    print(f"stage {args.stage}: {len(instances)} instances, {stage_cfg.steps} steps, final loss {last.get('total', float('nan')):.4f}")
    return EXIT_OK


def cmd_eval(args, cfg) -> int:
    if not args.checkpoint:
        raise ConfigError("eval needs --checkpoint")
    state = _load_state(args.checkpoint)
    scenes = corpus(cfg)
    n_text = int(cfg["eval"].get("text_samples", 0))
    text_instances = build_instances(scenes[:n_text], 2, state.tokenizer, substream_seed(cfg["seed"], "sampling"))
    report = evaluate(state, scenes, text_instances, joint_queries=bool(cfg["eval"].get("joint_queries", True)))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n")
    for k, v in report.to_dict().items():
        print(f"{k}: {v:.4f}" if isinstance(v, float) else f"{k}: {v}")
    return EXIT_OK


class _PromptLogger:
    def __init__(self, backend):
        self.backend = backend

    def complete(self, system, user, examples=()):
        log.info("prompt system=%r user=%r examples=%d", system[:200], user, len(examples))
        out = self.backend.complete(system, user, examples)
        log.info("completion %r", out)
        return out


def cmd_synthesize(args, cfg) -> int:
    if not args.input:
        raise ConfigError("synthesize needs --input")
    taxonomy = Taxonomy.load()
    backend = MockBackend(taxonomy) if args.backend == "mock" else HttpBackend()
    if args.debug_prompts:
        backend = _PromptLogger(backend)
    try:
        reports = read_reports(args.input)
    except (KeyError, ValueError) as exc:
        raise CorpusError(f"bad report record in {args.input}: {exc}") from exc
    localizer = OracleLocalizer(SceneBank(int(cfg["synthesize"].get("scene_seed", 0))))
    jobs = args.jobs if args.jobs is not None else int(cfg["synthesize"].get("jobs", 1))
    results = run_pipeline(reports, taxonomy, backend, localizer, jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "samples.jsonl", "w") as f:
        for r in results:
            if r.sample is not None:
                f.write(dumps(sample_record(r.sample)) + "\n")
    with open(out / "drops.jsonl", "w") as f:
        for r in results:
            if r.sample is None:
                f.write(dumps({"image_ref": r.image_ref, "reason": r.drop_reason}) + "\n")
    stats = pipeline_stats(results)
    write_stats(stats, out / "stats.json")
    print(json.dumps(stats.as_dict(), sort_keys=True))
    return EXIT_OK


def cmd_demo(args, cfg) -> int:
    if args.checkpoint:
        state = _load_state(args.checkpoint)
    else:
        tok = build_tokenizer()
        state = new_state(model_config(cfg, len(tok)), substream_seed(cfg["seed"], "init"), tok)
    model, tok = state.model, state.tokenizer
    scene = scene_for_index(substream_seed(cfg["seed"], "demo"), 0)
    prefix = [BOS] + insert_mode_token(tok.encode(STAGE2_QUESTIONS["report"]), True)
    with torch.no_grad():
        features = model.encode_image(image_tensor(scene.image, next(model.parameters()).dtype))
        gen, hidden = generate(model, features, prefix, max_new_tokens=96)
        record = {"scene_id": scene.scene_id, "image_shape": list(scene.image.shape), "phrases": []}
        try:
            resp = parse_response(gen, tok)
        except MalformedResponseError as exc:
            record.update(text=exc.plain_text, error=str(exc))
            resp = None
        if resp is not None:
            record["text"] = resp.text
            prompts = extract_prompt_embeddings(hidden, resp, offset=len(prefix))
            if prompts:
                masks, boxes, probs = model.decode_localization(features, torch.stack(prompts), scene.image.shape)
                for i, span in enumerate(resp.spans):
                    keep = [p for p in to_predictions(boxes[i], probs[i]) if p.presence_prob > 0.5]
                    record["phrases"].append({
                        "phrase": span.phrase,
                        "mask": rle_encode(VoxelMask.from_array((masks[i] > 0).numpy().reshape(scene.image.shape))),
                        "boxes": [{"box": p.box.as_list(), "presence": round(p.presence_prob, 6)} for p in keep],
                    })
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "demo.json").write_text(json.dumps(record, sort_keys=True, indent=1) + "\n")
    print(record["text"])
    return EXIT_OK


COMMANDS = {"verify": cmd_verify, "train": cmd_train, "eval": cmd_eval, "synthesize": cmd_synthesize, "demo": cmd_demo}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON or YAML run config (version 1)")
    common.add_argument("--seed", type=int, help=f"overrides the config seed (default {DEFAULT_SEED})")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="groundmed", description="Grounded medical VLM toolkit.")
    sub = p.add_subparsers(dest="verb", required=True)
    v = sub.add_parser("verify", parents=[common], help="run the oracle suites")
    v.add_argument("--only", nargs="+", help="subset of checks")
    t = sub.add_parser("train", parents=[common], help="run one training stage")
    t.add_argument("--stage", type=int, required=True, choices=(1, 2, 3))
    t.add_argument("--init", help="checkpoint to continue from")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint")
    e.add_argument("--checkpoint")
    s = sub.add_parser("synthesize", parents=[common], help="run the grounded-report pipeline")
    s.add_argument("--backend", choices=("mock", "http"), default="mock")
    s.add_argument("--input", help="JSONL report corpus")
    s.add_argument("--jobs", type=int)
    s.add_argument("--debug-prompts", action="store_true", help="log every prompt and completion")
    d = sub.add_parser("demo", parents=[common], help="one grounded report on a synthetic image")
    d.add_argument("--checkpoint")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose or getattr(args, "debug_prompts", False) else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr,
    )
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        return COMMANDS[args.verb](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (OSError, zipfile.BadZipFile) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
