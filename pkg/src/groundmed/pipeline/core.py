"""Grounded-report construction: clean -> tag -> filter positives -> localize."""

from __future__ import annotations

import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

from ..errors import CleaningError
from ..geometry import Box, VoxelMask
from .backends import (
    AnnotatorBackend,
    load_fewshot,
    load_template,
    render_clean_prompt,
    render_tag_prompt,
)
from .markup import Annotation, MarkupError, TaggedReport, parse_markup
from .taxonomy import Taxonomy

SECTIONS = ("findings", "impression")
CT_TRIGGERS = ("prior", "previous", "new", "stable", "patient", "history")
_TRIGGER_RE = re.compile(r"\b(?:" + "|".join(CT_TRIGGERS) + r")\b", re.IGNORECASE)
MAX_REPROMPTS = 2


@dataclass(frozen=True)
class Report:
    image_ref: str
    findings: str
    impression: str
    source: str = "mimic-cxr"  # or "ct-rate"; selects the cleaning recipe

    def __post_init__(self):
        if not self.findings.strip() or not self.impression.strip():
            raise ValueError(f"report {self.image_ref} lacks a Findings or Impression section")

    def section(self, name: str) -> str:
        return getattr(self, name)


@dataclass(frozen=True)
class Localization:
    kind: str  # "mask" or "boxes"
    mask: VoxelMask | None = None
    boxes: tuple[Box, ...] = ()


@dataclass(frozen=True)
class GroundedAnnotation:
    annotation: Annotation
    kind: str
    localization: Localization | None


@dataclass(frozen=True)
class GroundedSection:
    tagged: TaggedReport
    annotations: tuple[GroundedAnnotation, ...]


@dataclass(frozen=True)
class GroundedSample:
    image_ref: str
    image_shape: tuple[int, ...]
    sections: dict[str, GroundedSection]


@dataclass
class ReportResult:
    image_ref: str
    sample: GroundedSample | None
    drop_reason: str | None = None
    retries: int = 0
    backend_calls: int = 0


class Localizer(Protocol):
    def image_shape(self, image_ref: str) -> tuple[int, ...]: ...

    def segment(self, image_ref: str, target: str) -> VoxelMask | None: ...

    def detect(self, image_ref: str, target: str) -> list[Box] | None: ...


class SampleDropped(Exception):
    def __init__(self, reason: str):
        super().__init__(reason)
        self.reason = reason


class _CountingBackend:
    def __init__(self, backend: AnnotatorBackend):
        self.backend = backend
        self.calls = 0
        self.retries = 0

    def complete(self, system, user, examples=()):
        self.calls += 1
        return self.backend.complete(system, user, examples)


# --- steps -----------------------------------------------------------------


def clean_report(report: Report, backend: AnnotatorBackend) -> Report:
    """Remove references to information outside the current image.

    ``mimic-cxr`` reports go through the two sequential prompts; ``ct-rate``
    reports use the single prompt and only sections mentioning a trigger
    keyword are sent to the backend.
    """
    cleaned = {}
    for name in SECTIONS:
        text = report.section(name)
        if report.source == "ct-rate":
            if _TRIGGER_RE.search(text):
                text = _clean_call(backend, "clean_ct", text)
        else:
            text = _clean_call(backend, "clean_mimic_step1", text)
            text = _clean_call(backend, "clean_mimic_step2", text)
        cleaned[name] = text
    try:
        return Report(report.image_ref, cleaned["findings"], cleaned["impression"], report.source)
    except ValueError as exc:
        raise CleaningError(str(exc)) from exc


def _clean_call(backend, template: str, text: str) -> str:
    out = backend.complete("", render_clean_prompt(template, text)).strip()
    if not out:
        raise CleaningError(f"empty completion from cleaning step {template}")
    return out


def _with_retries(backend, attempt, validate, what: str):
    last = None
    for i in range(MAX_REPROMPTS + 1):
        if i and isinstance(backend, _CountingBackend):
            backend.retries += 1
        try:
            out = validate(attempt())
            return out
        except (MarkupError, ValueError) as exc:
            last = exc
    raise SampleDropped(f"{what} failed validation: {last}")


def tag_key_phrases(text: str, taxonomy: Taxonomy, backend: AnnotatorBackend) -> TaggedReport:
    """Tag taxonomy targets in one report section.

    The completion must reproduce ``text`` exactly once annotations are
    stripped, and every target must be canonical.
    """
    system = render_tag_prompt(taxonomy)
    examples = load_fewshot("tag")

    def validate(completion: str) -> TaggedReport:
        tagged = parse_markup(completion.strip())
        if tagged.plain != text:
            raise ValueError("tagging altered the report text")
        for a in tagged.annotations:
            if a.target not in taxonomy:
                raise ValueError(f"non-canonical target {a.target!r}")
        return tagged

    return _with_retries(backend, lambda: backend.complete(system, text, examples), validate, "tagging")


def filter_positive(tagged: TaggedReport, backend: AnnotatorBackend) -> TaggedReport:
    """Remove tags on targets described as absent; nothing else may change."""
    system = load_template("filter")
    examples = load_fewshot("filter")
    allowed = set(tagged.annotations)

    def validate(completion: str) -> TaggedReport:
        out = parse_markup(completion.strip())
        if out.plain != tagged.plain:
            raise ValueError("filtering altered the report text")
        if not set(out.annotations) <= allowed:
            raise ValueError("filtering introduced new annotations")
        return out

    return _with_retries(backend, lambda: backend.complete(system, tagged.text, examples), validate, "filtering")


def localize_annotations(tagged: TaggedReport, image_ref: str, localizer: Localizer, taxonomy: Taxonomy) -> GroundedSection:
    """Anatomy -> mask, abnormality -> boxes; unsupported targets stay tag-only."""
    out = []
    for a in tagged.annotations:
        kind = taxonomy.kind(a.target)
        loc = None
        try:
            if kind == "anatomy":
                mask = localizer.segment(image_ref, a.target)
                if mask is not None:
                    loc = Localization("mask", mask=mask)
            else:
                boxes = localizer.detect(image_ref, a.target)
                if boxes:
                    loc = Localization("boxes", boxes=tuple(boxes))
        except Exception:  # a failing localizer marks the target unsupported
            loc = None
        out.append(GroundedAnnotation(a, kind, loc))
    return GroundedSection(tagged, tuple(out))


def process_report(report: Report, taxonomy: Taxonomy, backend: AnnotatorBackend, localizer: Localizer) -> ReportResult:
    counting = _CountingBackend(backend)
    try:
        cleaned = clean_report(report, counting)
        sections = {}
        for name in SECTIONS:
            tagged = tag_key_phrases(cleaned.section(name), taxonomy, counting)
            positive = filter_positive(tagged, counting)
            sections[name] = localize_annotations(positive, report.image_ref, localizer, taxonomy)
        sample = GroundedSample(report.image_ref, tuple(localizer.image_shape(report.image_ref)), sections)
        return ReportResult(report.image_ref, sample, None, counting.retries, counting.calls)
    except SampleDropped as exc:
        return ReportResult(report.image_ref, None, exc.reason, counting.retries, counting.calls)
    except CleaningError as exc:
        return ReportResult(report.image_ref, None, f"cleaning: {exc}", counting.retries, counting.calls)


def run_pipeline(reports: Sequence[Report], taxonomy: Taxonomy, backend: AnnotatorBackend, localizer: Localizer,
                 jobs: int = 1) -> list[ReportResult]:
    """Process reports independently; results keep input order regardless of ``jobs``."""
    if jobs <= 1:
        return [process_report(r, taxonomy, backend, localizer) for r in reports]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(lambda r: process_report(r, taxonomy, backend, localizer), reports))


@dataclass
class PipelineStats:
    reports: int = 0
    samples: int = 0
    dropped: int = 0
    tags: int = 0
    masks: int = 0
    boxes: int = 0  # annotations grounded by a box set
    box_instances: int = 0
    backend_calls: int = 0
    retries: int = 0

    def as_dict(self) -> dict:
        return dict(self.__dict__)


def pipeline_stats(results: Iterable[ReportResult]) -> PipelineStats:
    st = PipelineStats()
    for r in results:
        st.reports += 1
        st.backend_calls += r.backend_calls
        st.retries += r.retries
        if r.sample is None:
            st.dropped += 1
            continue
        st.samples += 1
        for sec in r.sample.sections.values():
            for ga in sec.annotations:
                st.tags += 1
                if ga.localization is None:
                    continue
                if ga.localization.kind == "mask":
                    st.masks += 1
                else:
                    st.boxes += 1
                    st.box_instances += len(ga.localization.boxes)
    return st


class OracleLocalizer:
    """Returns the synthetic generator's exact ground truth."""

    def __init__(self, bank):
        self.bank = bank

    def image_shape(self, image_ref):
        return self.bank[image_ref].image.shape

    def segment(self, image_ref, target):
        return self.bank[image_ref].anatomy.get(target)

    def detect(self, image_ref, target):
        scene = self.bank[image_ref]
        if target not in scene.abnormalities:
            return None
        return [b.to_rank3() for b in scene.boxes(target)]
