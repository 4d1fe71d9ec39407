"""Line-delimited corpus input and grounded-sample output."""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterable

import numpy as np

from ..geometry import Box, VoxelMask
from .core import GroundedAnnotation, GroundedSample, PipelineStats, Report, ReportResult


def rle_encode(mask: VoxelMask) -> dict:
    """C-order run lengths, starting with a (possibly empty) run of zeros."""
    flat = mask.data.ravel()
    counts = []
    current = 0
    run = 0
    for v in flat.tolist():
        if v == current:
            run += 1
        else:
            counts.append(run)
            current = v
            run = 1
    counts.append(run)
    return {"shape": list(mask.shape), "counts": counts}


def rle_decode(rle: dict) -> VoxelMask:
    values = []
    v = 0
    for n in rle["counts"]:
        values.extend([v] * n)
        v = 1 - v
    return VoxelMask(tuple(rle["shape"]), np.asarray(values, dtype=np.uint8))


def read_reports(path: str | Path) -> list[Report]:
    reports = []
    with open(path) as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            reports.append(Report(rec["image_ref"], rec["findings"], rec["impression"], rec.get("source", "mimic-cxr")))
    return reports


def annotation_record(ga: GroundedAnnotation) -> dict:
    a = ga.annotation
    rec = {"phrase": a.phrase, "target": a.target, "kind": ga.kind, "span": list(a.span), "geometry": None}
    loc = ga.localization
    if loc is not None and loc.kind == "mask":
        rec["geometry"] = {"type": "mask", "rle": rle_encode(loc.mask)}
    elif loc is not None:
        rec["geometry"] = {"type": "boxes", "boxes": [b.as_list() for b in loc.boxes]}
    return rec


def sample_record(sample: GroundedSample) -> dict:
    return {
        "image_ref": sample.image_ref,
        "image_shape": list(sample.image_shape),
        "sections": {
            name: {
                "text": sec.tagged.text,
                "plain": sec.tagged.plain,
                "annotations": [annotation_record(ga) for ga in sec.annotations],
            }
            for name, sec in sample.sections.items()
        },
    }


def dumps(rec) -> str:
    return json.dumps(rec, sort_keys=True, separators=(",", ":"))


def write_samples(results: Iterable[ReportResult], path: str | Path) -> None:
    with open(path, "w") as f:
        for r in results:
            if r.sample is not None:
                f.write(dumps(sample_record(r.sample)) + "\n")


def write_stats(stats: PipelineStats, path: str | Path) -> None:
    Path(path).write_text(json.dumps(stats.as_dict(), sort_keys=True, indent=2) + "\n")


def read_boxes(geometry: dict) -> list[Box]:
    return [Box.from_list(b) for b in geometry["boxes"]]
