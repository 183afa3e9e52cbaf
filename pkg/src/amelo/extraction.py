"""Rule-based structuring of free clinical text into case fields.

Pipeline: sentence segmentation (abbreviation-guarded), then per sentence
either centroid-similarity categorization against category keyword
centroids (word-vector lexicon supplied as data, never computed) or
keyword/regex matching as the fallback. Tumor measurements are normalized
to millimeters separately.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .cases import CaseRecord
from .vectorize import DimensionMismatch, centroid as vector_centroid, tokenize

CENTROID_THRESHOLD = 0.65

DEFAULT_ABBREVIATIONS = (
    "cm.", "mm.", "dr.", "e.g.", "i.e.", "fig.", "etc.", "vs.", "no.", "approx.",
)


class InvalidRulePack(ValueError):
    pass


class Method(str, Enum):
    keyword = "keyword"
    regex = "regex"
    centroid = "centroid"
    llm = "llm"
    none = "none"


@dataclass(frozen=True)
class RulePack:
    """Keyword triggers, regex patterns, and segmentation guards."""

    keywords: dict[str, tuple[str, ...]]  # field -> trigger terms
    patterns: tuple[tuple[str, str], ...] = ()  # (regex, target field)
    abbreviations: tuple[str, ...] = DEFAULT_ABBREVIATIONS

    def validate(self) -> None:
        for field in self.keywords:
            if field not in CaseRecord.TEXT_FIELDS:
                raise InvalidRulePack(f"unknown target field: {field}")
        for pattern, field in self.patterns:
            if field not in CaseRecord.TEXT_FIELDS:
                raise InvalidRulePack(f"unknown target field: {field}")
            try:
                re.compile(pattern)
            except re.error as exc:
                raise InvalidRulePack(f"pattern {pattern!r} does not compile: {exc}") from exc

    @property
    def fields(self) -> tuple[str, ...]:
        seen = dict.fromkeys(self.keywords)
        for _, field in self.patterns:
            seen.setdefault(field)
        return tuple(seen)

    @classmethod
    def from_dict(cls, data: dict) -> "RulePack":
        # file layout: field keyword lists at top level, next to the two
        # reserved keys "patterns" and "abbreviations"
        keywords = {
            key: tuple(terms)
            for key, terms in data.items()
            if key not in ("patterns", "abbreviations")
        }
        patterns = tuple((p["regex"], p["field"]) for p in data.get("patterns", ()))
        abbreviations = tuple(data.get("abbreviations", DEFAULT_ABBREVIATIONS))
        pack = cls(keywords=keywords, patterns=patterns, abbreviations=abbreviations)
        pack.validate()
        return pack

    def to_dict(self) -> dict:
        out: dict = {field: list(terms) for field, terms in self.keywords.items()}
        out["patterns"] = [{"regex": r, "field": f} for r, f in self.patterns]
        out["abbreviations"] = list(self.abbreviations)
        return out

    @classmethod
    def from_file(cls, path: str | Path) -> "RulePack":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def default_rules() -> RulePack:
    raw = resources.files("amelo.data").joinpath("default_rules.json").read_text("utf-8")
    return RulePack.from_dict(json.loads(raw))


@dataclass(frozen=True)
class FieldExtraction:
    texts: tuple[str, ...]
    method: Method
    confidence: float

    @property
    def text(self) -> str:
        return " ".join(self.texts)

    def to_dict(self) -> dict:
        return {
            "text": self.text,
            "spans": list(self.texts),
            "method": self.method.value,
            "confidence": round(self.confidence, 6),
        }


EMPTY_FIELD = FieldExtraction(texts=(), method=Method.none, confidence=0.0)


@dataclass(frozen=True)
class ExtractionResult:
    pmcid: str
    fields: dict[str, FieldExtraction]

    def to_dict(self) -> dict:
        return {
            "pmcid": self.pmcid,
            "fields": {name: fx.to_dict() for name, fx in sorted(self.fields.items())},
        }


@dataclass(frozen=True)
class CategoryCentroids:
    """Per-category mean word vector, all sharing one dimension."""

    centroids: dict[str, np.ndarray]
    dimension: int

    def __post_init__(self):
        for name, vec in self.centroids.items():
            if vec.shape != (self.dimension,):
                raise DimensionMismatch(f"centroid {name!r} has dim {vec.shape}")
            if not np.all(np.isfinite(vec)):
                raise ValueError(f"centroid {name!r} has non-finite entries")


def build_centroids(keywords: dict[str, Sequence[str]],
                    lexicon: dict[str, np.ndarray]) -> CategoryCentroids:
    """Average the word vectors of each category's keyword list.

    Categories whose keywords are all out-of-lexicon are dropped.
    """
    dims = {v.shape[0] for v in lexicon.values()}
    if len(dims) > 1:
        raise DimensionMismatch(f"lexicon mixes dimensions: {sorted(dims)}")
    centroids: dict[str, np.ndarray] = {}
    for category in sorted(keywords):
        vectors = []
        for term in keywords[category]:
            for token in tokenize(term):
                vec = lexicon.get(token)
                if vec is not None:
                    vectors.append(vec)
        if vectors:
            centroids[category] = vector_centroid(vectors)
    dimension = next(iter(dims)) if dims else 0
    return CategoryCentroids(centroids=centroids, dimension=dimension)


def load_lexicon(path: str | Path) -> dict[str, np.ndarray]:
    """Read a "token v1 v2 ... vd" per-line word-vector file."""
    lexicon: dict[str, np.ndarray] = {}
    dim: Optional[int] = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            vec = np.asarray([float(v) for v in values], dtype=np.float32)
            if dim is None:
                dim = vec.shape[0]
            elif vec.shape[0] != dim:
                raise DimensionMismatch(f"line {lineno}: dim {vec.shape[0]}, expected {dim}")
            lexicon[token] = vec
    return lexicon


# ---------------------------------------------------------------------------
# Sentence segmentation
# ---------------------------------------------------------------------------

def segment_sentences(text: str, abbreviations: Sequence[str] = DEFAULT_ABBREVIATIONS) -> list[str]:
    """Split after [.!?] followed by whitespace and an uppercase/digit.

    Abbreviation guards (compared case-insensitively, trailing dot included)
    suppress false splits; no non-whitespace character is ever lost.
    """
    guards = {a.casefold() for a in abbreviations}
    sentences: list[str] = []
    start = 0
    i = 0
    n = len(text)
    while i < n:
        ch = text[i]
        if ch in ".!?":
            # collapse runs like "?!" into one terminator
            j = i
            while j + 1 < n and text[j + 1] in ".!?":
                j += 1
            k = j + 1
            while k < n and text[k].isspace():
                k += 1
            follows = k < n and (text[k].isupper() or text[k].isdigit())
            had_gap = k > j + 1
            if follows and had_gap and not _guarded(text, j, guards):
                sentence = text[start: j + 1].strip()
                if sentence:
                    sentences.append(sentence)
                start = k
                i = k
                continue
            i = j + 1
        else:
            i += 1
    tail = text[start:].strip()
    if tail:
        sentences.append(tail)
    return sentences


def _guarded(text: str, dot_pos: int, guards: set[str]) -> bool:
    if text[dot_pos] != ".":
        return False
    w = dot_pos
    while w > 0 and not text[w - 1].isspace():
        w -= 1
    token = text[w: dot_pos + 1].casefold().lstrip("([{'\"")
    return token in guards


# ---------------------------------------------------------------------------
# Measurement normalization
# ---------------------------------------------------------------------------

_MEAS_ITEM = r"\d+(?:\.\d+)?(?:\s*(?:mm|cm)\b)?"
_MEAS_GROUP = re.compile(
    rf"(?<![\w.]){_MEAS_ITEM}(?:\s*(?:x|×|\*|by)\s*{_MEAS_ITEM})*",
    re.IGNORECASE,
)
_MEAS_PART = re.compile(r"(\d+(?:\.\d+)?)(?:\s*(mm|cm)\b)?", re.IGNORECASE)


def normalize_dimensions(text: str) -> list[float]:
    """Extract size measurements and convert them to millimeters.

    Magnitudes chained by x/×/*/"by" share the nearest following unit
    ("4.5 × 3.2 cm" reads both as cm); groups with no unit at all are not
    measurements and are skipped. Output preserves appearance order.
    """
    values: list[float] = []
    for group in _MEAS_GROUP.finditer(text):
        parts = [(m.group(1), m.group(2)) for m in _MEAS_PART.finditer(group.group(0))]
        units = [unit.lower() if unit else None for _, unit in parts]
        if not any(units):
            continue
        for idx, (magnitude, _) in enumerate(parts):
            unit = units[idx]
            if unit is None:  # inherit nearest following unit, else preceding
                following = next((u for u in units[idx + 1:] if u), None)
                preceding = next((u for u in reversed(units[:idx]) if u), None)
                unit = following or preceding
            value = float(magnitude) * (10.0 if unit == "cm" else 1.0)
            if value > 0:
                values.append(value)
    return values


# ---------------------------------------------------------------------------
# Field extraction
# ---------------------------------------------------------------------------

def _keyword_regexes(rules: RulePack) -> dict[str, list[re.Pattern]]:
    return {
        field: [re.compile(rf"\b{re.escape(term)}\b", re.IGNORECASE) for term in terms]
        for field, terms in rules.keywords.items()
    }


def _match_sentence_fields(sentence: str, triggers: dict[str, list[re.Pattern]]) -> list[str]:
    return [field for field, pats in triggers.items() if any(p.search(sentence) for p in pats)]


def extract_fields(text: str, rules: RulePack, pmcid: str = "") -> ExtractionResult:
    """Keyword/regex extraction: sentences scanned in document order.

    A sentence containing a field's trigger term is appended to that field;
    one sentence may feed several fields. Regex patterns run over the full
    text so they can capture sub-spans and cross-sentence structures.
    """
    rules.validate()
    triggers = _keyword_regexes(rules)
    spans: dict[str, list[str]] = {field: [] for field in rules.fields}
    methods: dict[str, Method] = {}

    for sentence in segment_sentences(text, rules.abbreviations):
        for field in _match_sentence_fields(sentence, triggers):
            spans[field].append(sentence)
            methods.setdefault(field, Method.keyword)

    for pattern, field in rules.patterns:
        for match in re.finditer(pattern, text):
            span = match.group(1) if match.groups() else match.group(0)
            if span and span not in spans[field]:
                spans[field].append(span)
                methods.setdefault(field, Method.regex)

    fields = {
        field: (
            FieldExtraction(texts=tuple(texts), method=methods[field], confidence=1.0)
            if texts else EMPTY_FIELD
        )
        for field, texts in spans.items()
    }
    return ExtractionResult(pmcid=pmcid, fields=fields)


def sentence_embedding(tokens: Sequence[str],
                       lexicon: dict[str, np.ndarray]) -> Optional[np.ndarray]:
    """Arithmetic mean of in-lexicon token vectors; None when all are OOV."""
    vectors = [lexicon[t] for t in tokens if t in lexicon]
    if not vectors:
        return None
    return vector_centroid(vectors)


def categorize_by_centroid(sentence_vec: np.ndarray, centroids: CategoryCentroids,
                           threshold: float = CENTROID_THRESHOLD) -> Optional[tuple[str, float]]:
    """Return (argmax-cosine category, cosine) iff cosine >= threshold.

    Ties break lexicographically by category name. None means the caller
    should fall back to keyword matching.
    """
    if sentence_vec.shape != (centroids.dimension,):
        raise DimensionMismatch(
            f"sentence vector dim {sentence_vec.shape} vs centroids {centroids.dimension}"
        )
    norm = float(np.linalg.norm(sentence_vec))
    if norm == 0.0:
        return None
    best_name, best_cos = None, -2.0
    for name in sorted(centroids.centroids):
        cvec = centroids.centroids[name]
        cnorm = float(np.linalg.norm(cvec))
        if cnorm == 0.0:
            continue
        cos = float(np.dot(sentence_vec, cvec)) / (norm * cnorm)
        if cos > best_cos:
            best_name, best_cos = name, cos
    if best_name is not None and best_cos >= threshold:
        return best_name, best_cos
    return None


def extract_cascade(text: str, rules: RulePack, centroids: Optional[CategoryCentroids],
                    lexicon: Optional[dict[str, np.ndarray]],
                    threshold: float = CENTROID_THRESHOLD,
                    pmcid: str = "") -> ExtractionResult:
    """Semantic-first ladder: centroid categorization, then keyword/regex.

    A sentence whose embedding clears the threshold is appended to the winning
    category with the cosine as confidence; OOV or low-similarity sentences
    fall back to keyword matching (confidence 1.0). Pure function of inputs.
    """
    rules.validate()
    triggers = _keyword_regexes(rules)
    spans: dict[str, list[str]] = {field: [] for field in rules.fields}
    centroid_cos: dict[str, float] = {}  # per field, max cosine over its centroid hits
    fallback_hit: set[str] = set()

    fallback_sentences: list[str] = []
    for sentence in segment_sentences(text, rules.abbreviations):
        category = None
        if centroids is not None and lexicon is not None and centroids.centroids:
            emb = sentence_embedding(tokenize(sentence), lexicon)
            if emb is not None:
                category = categorize_by_centroid(emb, centroids, threshold)
        if category is not None:
            name, cos = category
            if name in spans:
                spans[name].append(sentence)
                centroid_cos[name] = max(centroid_cos.get(name, 0.0), cos)
                continue
        fallback_sentences.append(sentence)
        for field in _match_sentence_fields(sentence, triggers):
            spans[field].append(sentence)
            fallback_hit.add(field)

    fallback_text = " ".join(fallback_sentences)
    regex_hit: set[str] = set()
    for pattern, field in rules.patterns:
        for match in re.finditer(pattern, fallback_text):
            span = match.group(1) if match.groups() else match.group(0)
            if span and span not in spans[field]:
                spans[field].append(span)
                regex_hit.add(field)

    fields: dict[str, FieldExtraction] = {}
    for field, texts in spans.items():
        if not texts:
            fields[field] = EMPTY_FIELD
        elif field in centroid_cos:  # semantic hits take precedence for the label
            fields[field] = FieldExtraction(
                texts=tuple(texts), method=Method.centroid, confidence=centroid_cos[field]
            )
        else:
            method = Method.keyword if field in fallback_hit else Method.regex
            fields[field] = FieldExtraction(texts=tuple(texts), method=method, confidence=1.0)
    return ExtractionResult(pmcid=pmcid, fields=fields)


def record_from_extraction(result: ExtractionResult, text: str = "") -> CaseRecord:
    """Assemble a CaseRecord from extracted field spans plus size normalization."""
    from .cases import normalize_diagnosis, normalize_variant

    get = lambda f: result.fields.get(f, EMPTY_FIELD).text
    diagnosis_raw = get("diagnosis_raw")
    variant_raw = get("variant_raw")
    sizes = tuple(normalize_dimensions(text or " ".join(
        fx.text for fx in result.fields.values()
    )))
    return CaseRecord(
        pmcid=result.pmcid or "PMC0",
        presenting_complaint=get("presenting_complaint"),
        clinical_features=get("clinical_features"),
        radiological_features=get("radiological_features"),
        histopathological_features=get("histopathological_features"),
        tumor_location=get("tumor_location"),
        diagnosis_raw=diagnosis_raw,
        diagnosis_label=normalize_diagnosis(diagnosis_raw),
        variant_raw=variant_raw,
        variant_label=normalize_variant(variant_raw),
        tumor_size_mm=tuple(s for s in sizes if 0 < s < 1000),
        treatment=get("treatment"),
        outcome=get("outcome") or None,
    )
