"""End-to-end retrieval: canonical case text, indexing, routing, ranked results.

A repository snapshot is immutable once built; queries never observe a
half-built index. Retrieval cascades dense -> sparse -> keyword, with the
dense path available only when externally produced embeddings were
ingested (the engine never runs an encoder).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

import numpy as np

from .cases import CaseRecord, DiagnosisLabel, Gender, VariantLabel
from .index import (
    ClusteredIndex,
    FlatIndex,
    build_clustered,
    build_flat,
    elbow_select_k,
    knn_sparse,
    search_clustered,
    search_flat,
)
from .vectorize import (
    DenseStore,
    SparseVector,
    TfidfModel,
    embed_tfidf,
    fit_tfidf,
    l2_normalize,
    preprocess_text,
)

K_DEFAULT = 5
SHORT_QUERY_TOKENS = 5
UNDERPERFORM_THRESHOLD = 0.3


class EmptyQuery(ValueError):
    pass


class EmptyRepository(ValueError):
    pass


class OutOfRangeDistance(ValueError):
    pass


class QueryMode(str, Enum):
    free_text = "free_text"
    structured_form = "structured_form"


class RouteMethod(str, Enum):
    dense = "dense"
    sparse = "sparse"
    keyword = "keyword"


# the ten template slots, in fixed order: (display label, span key)
CASE_TEMPLATE = (
    ("Presenting complaint", "presenting_complaint"),
    ("Clinical features", "clinical_features"),
    ("Radiological features", "radiological_features"),
    ("Histopathological features", "histopathological_features"),
    ("Tumor location", "tumor_location"),
    ("Diagnosis", "diagnosis"),
    ("Tumor size", "tumor_size"),
    ("Tumor variant", "tumor_variant"),
    ("Patient age", "patient_age"),
    ("Patient gender", "patient_gender"),
)


@dataclass(frozen=True)
class CaseText:
    """Canonical text rendering of a case plus byte spans per template slot."""

    pmcid: str
    text: str
    spans: dict[str, tuple[int, int]]


def _fmt_mm(value: float) -> str:
    return f"{value:g}"


def render_tumor_size(sizes: Sequence[float]) -> str:
    if not sizes:
        return ""
    return " x ".join(f"{_fmt_mm(v)} mm" for v in sizes)


def _template_values(record: CaseRecord) -> dict[str, str]:
    diagnosis = record.diagnosis_raw or (
        record.diagnosis_label.value if record.diagnosis_label is not DiagnosisLabel.Unknown else ""
    )
    variant = record.variant_raw or (
        record.variant_label.value if record.variant_label is not VariantLabel.Unknown else ""
    )
    gender = record.patient_gender.value if record.patient_gender is not Gender.unknown else ""
    return {
        "presenting_complaint": record.presenting_complaint,
        "clinical_features": record.clinical_features,
        "radiological_features": record.radiological_features,
        "histopathological_features": record.histopathological_features,
        "tumor_location": record.tumor_location,
        "diagnosis": diagnosis,
        "tumor_size": render_tumor_size(record.tumor_size_mm),
        "tumor_variant": variant,
        "patient_age": str(record.patient_age) if record.patient_age is not None else "",
        "patient_gender": gender,
    }


def build_case_text(record: CaseRecord) -> CaseText:
    """Render the fixed ten-slot template; empty slots read "unknown"."""
    values = _template_values(record)
    chunks: list[str] = []
    spans: dict[str, tuple[int, int]] = {}
    offset = 0
    for i, (label, key) in enumerate(CASE_TEMPLATE):
        value = values[key].strip() or "unknown"
        chunk = f"{label}: {value}."
        if i < len(CASE_TEMPLATE) - 1:
            chunk += " "
        size = len(chunk.encode("utf-8"))
        spans[key] = (offset, offset + size)
        offset += size
        chunks.append(chunk)
    return CaseText(pmcid=record.pmcid, text="".join(chunks), spans=spans)


@dataclass(frozen=True)
class Query:
    mode: QueryMode
    text: str = ""
    form: Optional[CaseRecord] = None
    k: int = K_DEFAULT
    vector: Optional[tuple[float, ...]] = None  # externally produced embedding

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.mode is QueryMode.free_text and self.form is not None:
            raise ValueError("free_text queries carry text only")
        if self.mode is QueryMode.structured_form and self.form is None:
            raise ValueError("structured_form queries need a partial record")


@dataclass(frozen=True)
class CaseSummary:
    diagnosis: str
    treatment: str
    tumor_size_mm: tuple[float, ...]
    patient_age: Optional[int]
    patient_gender: str
    reference_id: str

    def to_dict(self) -> dict:
        return {
            "diagnosis": self.diagnosis,
            "treatment": self.treatment,
            "tumor_size_mm": list(self.tumor_size_mm),
            "patient_age": self.patient_age,
            "patient_gender": self.patient_gender,
            "reference_id": self.reference_id,
        }


@dataclass(frozen=True)
class RankedResult:
    pmcid: str
    similarity: float
    distance: float
    rank: int
    method: RouteMethod
    summary: CaseSummary

    def to_dict(self) -> dict:
        return {
            "pmcid": self.pmcid,
            "similarity": round(self.similarity, 6),
            "distance": round(self.distance, 6),
            "rank": self.rank,
            "method": self.method.value,
            "summary": self.summary.to_dict(),
        }


@dataclass(frozen=True)
class EngineConfig:
    k_default: int = K_DEFAULT
    short_query_tokens: int = SHORT_QUERY_TOKENS
    underperform_threshold: float = UNDERPERFORM_THRESHOLD
    probes: int = 1
    max_features: int = 500
    kmeans_k: Optional[int] = None  # None: elbow-selected
    kmeans_seed: int = 0


@dataclass(frozen=True)
class RetrievalState:
    """Immutable snapshot of one indexed repository.

    ``flat`` holds the ingested dense embeddings (absent when none were
    ingested); ``clustered`` partitions the densified TF-IDF matrix and
    backs the k-means comparison method, not the default cascade.
    """

    cases: dict[str, CaseRecord]
    case_texts: dict[str, CaseText]
    tfidf: TfidfModel
    sparse: dict[str, SparseVector]
    tokens: dict[str, frozenset[str]]
    flat: Optional[FlatIndex]
    clustered: Optional[ClusteredIndex]
    config: EngineConfig = field(default_factory=EngineConfig)

    @property
    def count(self) -> int:
        return len(self.cases)


def densify(vec: SparseVector) -> np.ndarray:
    arr = np.zeros(vec.dimension, dtype=np.float32)
    for col, weight in zip(vec.indices, vec.weights):
        arr[col] = weight
    return arr


def index_repository(
    cases: Iterable[CaseRecord],
    dense_store: Optional[DenseStore] = None,
    config: EngineConfig = EngineConfig(),
) -> RetrievalState:
    """Build a fresh snapshot: case texts, TF-IDF matrix, dense flat index.

    Cases lacking an ingested dense vector are served by the sparse and
    keyword paths only.
    """
    case_map = {record.pmcid: record for record in cases}
    case_texts = {pmcid: build_case_text(rec) for pmcid, rec in case_map.items()}
    token_lists = {pmcid: preprocess_text(ct.text) for pmcid, ct in case_texts.items()}

    ordered = sorted(case_map)
    tfidf = fit_tfidf([token_lists[p] for p in ordered], max_features=config.max_features)
    sparse = {p: embed_tfidf(tfidf, token_lists[p]) for p in ordered}
    tokens = {p: frozenset(token_lists[p]) for p in ordered}

    flat = None
    if dense_store is not None and len(dense_store):
        unit_vectors = {}
        for pmcid, vec in dense_store.items():
            if pmcid in case_map and float(np.linalg.norm(vec)) > 0.0:
                unit_vectors[pmcid] = l2_normalize(vec)
        if unit_vectors:
            flat = build_flat(unit_vectors)

    clustered = None
    if len(ordered) >= 2 and tfidf.dimension > 0:
        tfidf_rows = {p: densify(sparse[p]) for p in ordered}
        k = config.kmeans_k
        if k is None:
            k_max = min(8, len(ordered))
            k = elbow_select_k(
                np.stack([tfidf_rows[p] for p in ordered]).astype(np.float64),
                k_min=2, k_max=max(2, k_max), seed=config.kmeans_seed,
            )
        k = max(1, min(k, len(ordered)))
        clustered = build_clustered(tfidf_rows, k=k, seed=config.kmeans_seed)

    return RetrievalState(
        cases=case_map,
        case_texts=case_texts,
        tfidf=tfidf,
        sparse=sparse,
        tokens=tokens,
        flat=flat,
        clustered=clustered,
        config=config,
    )


def distance_to_similarity(d: float) -> float:
    """Map an L2 distance between unit vectors onto [0, 1] alignment."""
    if d < -1e-9 or d > 2.0 + 1e-9:
        raise OutOfRangeDistance(f"unit-vector distance must lie in [0, 2], got {d}")
    d = min(max(d, 0.0), 2.0)
    cos = 1.0 - (d * d) / 2.0
    return min(1.0, max(0.0, cos))


def _summary(record: CaseRecord) -> CaseSummary:
    diagnosis = record.diagnosis_raw or (
        record.diagnosis_label.value if record.diagnosis_label is not DiagnosisLabel.Unknown else ""
    )
    return CaseSummary(
        diagnosis=diagnosis,
        treatment=record.treatment,
        tumor_size_mm=record.tumor_size_mm,
        patient_age=record.patient_age,
        patient_gender=record.patient_gender.value,
        reference_id=record.pmcid,
    )


@dataclass(frozen=True)
class PreparedQuery:
    text: str
    tokens: tuple[str, ...]
    sparse_vec: SparseVector
    dense_vec: Optional[np.ndarray]


def prepare_query(state: RetrievalState, q: Query) -> PreparedQuery:
    """Apply the identical preprocessing used at index time."""
    if q.mode is QueryMode.structured_form:
        text = build_case_text(q.form).text
    else:
        text = q.text
    if not text.strip():
        raise EmptyQuery("query carries no text")
    tokens = preprocess_text(text)
    sparse_vec = embed_tfidf(state.tfidf, tokens)
    dense_vec = None
    if q.vector is not None:
        arr = np.asarray(q.vector, dtype=np.float32)
        if float(np.linalg.norm(arr)) > 0.0:
            dense_vec = l2_normalize(arr)
    return PreparedQuery(text=text, tokens=tuple(tokens), sparse_vec=sparse_vec, dense_vec=dense_vec)


def _dense_results(state: RetrievalState, prepared: PreparedQuery, k: int) -> list[RankedResult]:
    hits = search_flat(state.flat, prepared.dense_vec, k)
    results = []
    for rank, hit in enumerate(hits, start=1):
        results.append(
            RankedResult(
                pmcid=hit.pmcid,
                similarity=distance_to_similarity(min(hit.distance, 2.0)),
                distance=hit.distance,
                rank=rank,
                method=RouteMethod.dense,
                summary=_summary(state.cases[hit.pmcid]),
            )
        )
    return results


def _sparse_results(state: RetrievalState, prepared: PreparedQuery, k: int) -> list[RankedResult]:
    hits = knn_sparse(state.sparse, prepared.sparse_vec, k)
    results = []
    for rank, hit in enumerate(hits, start=1):
        similarity = min(1.0, max(0.0, 1.0 - hit.distance))
        results.append(
            RankedResult(
                pmcid=hit.pmcid,
                similarity=similarity,
                distance=hit.distance,
                rank=rank,
                method=RouteMethod.sparse,
                summary=_summary(state.cases[hit.pmcid]),
            )
        )
    return results


def clustered_results(state: RetrievalState, prepared: PreparedQuery, k: int,
                      probes: Optional[int] = None) -> list[RankedResult]:
    """K-means comparison method: cluster-restricted scan of the TF-IDF matrix."""
    if state.clustered is None:
        raise EmptyRepository("no clustered index in this snapshot")
    qvec = densify(prepared.sparse_vec).astype(np.float64)
    hits = search_clustered(
        state.clustered, qvec, k,
        probes=probes if probes is not None else state.config.probes,
    )
    results = []
    for rank, hit in enumerate(hits, start=1):
        # rows are unit TF-IDF vectors (or zero), so the unit-distance map applies
        similarity = distance_to_similarity(min(hit.distance, 2.0))
        results.append(
            RankedResult(
                pmcid=hit.pmcid,
                similarity=similarity,
                distance=hit.distance,
                rank=rank,
                method=RouteMethod.sparse,
                summary=_summary(state.cases[hit.pmcid]),
            )
        )
    return results


def keyword_search(state: RetrievalState, query_tokens: Sequence[str], k: int) -> list[RankedResult]:
    """Last-resort scoring: |query terms ∩ case terms| / |query terms|."""
    qset = set(query_tokens)
    if not qset:
        raise EmptyQuery("keyword search needs at least one query term")
    scored: list[tuple[float, str]] = []
    for pmcid in sorted(state.tokens):
        score = len(qset & state.tokens[pmcid]) / len(qset)
        if score > 0.0:
            scored.append((-score, pmcid))
    scored.sort()
    results = []
    for rank, (neg_score, pmcid) in enumerate(scored[:k], start=1):
        score = -neg_score
        results.append(
            RankedResult(
                pmcid=pmcid,
                similarity=score,
                distance=1.0 - score,
                rank=rank,
                method=RouteMethod.keyword,
                summary=_summary(state.cases[pmcid]),
            )
        )
    return results


def _route_and_search(state: RetrievalState, prepared: PreparedQuery,
                      k: int) -> tuple[RouteMethod, list[RankedResult]]:
    config = state.config
    if (
        state.flat is not None
        and prepared.dense_vec is not None
        and len(prepared.tokens) >= config.short_query_tokens
    ):
        dense = _dense_results(state, prepared, k)
        if dense and dense[0].similarity >= config.underperform_threshold:
            return RouteMethod.dense, dense
    if not prepared.sparse_vec.is_zero():
        sparse = _sparse_results(state, prepared, k)
        if sparse and sparse[0].similarity > 0.0:
            return RouteMethod.sparse, sparse
    if prepared.tokens:
        return RouteMethod.keyword, keyword_search(state, prepared.tokens, k)
    return RouteMethod.keyword, []


def cascade_route(state: RetrievalState, prepared: PreparedQuery) -> RouteMethod:
    """Which retrieval method the fallback ladder selects for this query."""
    method, _ = _route_and_search(state, prepared, k=1)
    return method


def query(state: RetrievalState, q: Query) -> list[RankedResult]:
    """Run one query through the cascade; results ranked by similarity."""
    if state.count == 0:
        raise EmptyRepository("no cases indexed")
    prepared = prepare_query(state, q)
    _, results = _route_and_search(state, prepared, q.k)
    return results
