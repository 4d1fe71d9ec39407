"""Self-describing checkpoints.

A checkpoint is a zip archive with a ``meta.json`` record (format version,
model config, vocabulary, special-token ids, stage history) and one ``.npy``
entry per named parameter, stored little-endian. Entry order and timestamps
are fixed so that identical states produce identical bytes.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

from .errors import ConfigError
from .grounding import Tokenizer
from .model import GroundingVLM, ModelConfig

FORMAT = "groundmed-checkpoint"
VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(zf: zipfile.ZipFile, name: str, data: bytes) -> None:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    zf.writestr(info, data)


def save_checkpoint(path: str | Path, model: GroundingVLM, tokenizer: Tokenizer, history: list | None = None) -> None:
    state = model.state_dict()
    meta = {
        "format": FORMAT,
        "version": VERSION,
        "model_config": model.cfg.to_dict(),
        "vocab": tokenizer.itos,
        "special_tokens": tokenizer.special_ids,
        "history": history or [],
        "parameters": sorted(state),
    }
    with zipfile.ZipFile(path, "w") as zf:
        _entry(zf, "meta.json", json.dumps(meta, sort_keys=True, indent=1).encode())
        for name in sorted(state):
            arr = state[name].detach().cpu().numpy()
            arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
            buf = io.BytesIO()
            np.lib.format.write_array(buf, np.ascontiguousarray(arr), allow_pickle=False)
            _entry(zf, f"params/{name}.npy", buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[GroundingVLM, Tokenizer, list]:
    with zipfile.ZipFile(path) as zf:
        try:
            meta = json.loads(zf.read("meta.json"))
        except KeyError as exc:
            raise ConfigError(f"{path} has no meta.json") from exc
        if meta.get("format") != FORMAT:
            raise ConfigError(f"{path} is not a {FORMAT} file")
        if meta.get("version") != VERSION:
            raise ConfigError(f"unsupported checkpoint version {meta.get('version')}")
        cfg = ModelConfig(**meta["model_config"])
        state = {
            name: torch.from_numpy(np.lib.format.read_array(io.BytesIO(zf.read(f"params/{name}.npy")), allow_pickle=False).copy())
            for name in meta["parameters"]
        }
    tokenizer = Tokenizer(meta["vocab"])
    if tokenizer.itos != meta["vocab"] or tokenizer.special_ids != meta["special_tokens"]:
        raise ConfigError("checkpoint vocabulary does not match the tokenizer layout")
    model = GroundingVLM(cfg)
    dtype = next(iter(state.values())).dtype if state else torch.float64
    model = model.to(dtype)
    model.load_state_dict(state)
    model.eval()
    return model, tokenizer, meta["history"]
