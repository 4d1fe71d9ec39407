from .backends import AnnotatorBackend, HttpBackend, MockBackend
from .core import (
    GroundedSample,
    Localizer,
    OracleLocalizer,
    PipelineStats,
    Report,
    ReportResult,
    clean_report,
    filter_positive,
    localize_annotations,
    pipeline_stats,
    process_report,
    run_pipeline,
    tag_key_phrases,
)
from .markup import Annotation, TaggedReport, parse_markup, strip_markup
from .taxonomy import Taxonomy

__all__ = [
    "AnnotatorBackend",
    "Annotation",
    "GroundedSample",
    "HttpBackend",
    "Localizer",
    "MockBackend",
    "OracleLocalizer",
    "PipelineStats",
    "Report",
    "ReportResult",
    "TaggedReport",
    "Taxonomy",
    "clean_report",
    "filter_positive",
    "localize_annotations",
    "parse_markup",
    "pipeline_stats",
    "process_report",
    "run_pipeline",
    "strip_markup",
    "tag_key_phrases",
]
