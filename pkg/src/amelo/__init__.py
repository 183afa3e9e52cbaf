"""Case-based retrieval engine for ameloblastoma case reports."""

from .cases import (
    CaseRecord,
    DiagnosisLabel,
    Gender,
    ImageRecord,
    LabelCodec,
    Modality,
    VariantLabel,
    build_codec,
    normalize_diagnosis,
    normalize_variant,
    validate_case,
)
from .engine import (
    Query,
    QueryMode,
    RankedResult,
    RetrievalState,
    build_case_text,
    index_repository,
    query,
)
from .extraction import (
    ExtractionResult,
    RulePack,
    default_rules,
    extract_cascade,
    extract_fields,
    normalize_dimensions,
    segment_sentences,
)
from .vectorize import DenseStore, SparseVector, TfidfModel, embed_tfidf, fit_tfidf, preprocess_text

__version__ = "0.1.0"

__all__ = [
    "CaseRecord",
    "DiagnosisLabel",
    "Gender",
    "ImageRecord",
    "LabelCodec",
    "Modality",
    "VariantLabel",
    "build_codec",
    "normalize_diagnosis",
    "normalize_variant",
    "validate_case",
    "Query",
    "QueryMode",
    "RankedResult",
    "RetrievalState",
    "build_case_text",
    "index_repository",
    "query",
    "ExtractionResult",
    "RulePack",
    "default_rules",
    "extract_cascade",
    "extract_fields",
    "normalize_dimensions",
    "segment_sentences",
    "DenseStore",
    "SparseVector",
    "TfidfModel",
    "embed_tfidf",
    "fit_tfidf",
    "preprocess_text",
]
