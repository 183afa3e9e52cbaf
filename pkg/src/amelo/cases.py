"""Canonical case schema: records, label taxonomies, validation, encoding.

The unit of retrieval is one structured case report keyed by its PMCID.
Tumor variant and histological diagnosis labels are closed taxonomies;
free-text strings are mapped onto them via a synonym table plus fuzzy
matching, with ``Other`` as the bucket for anything unmapped and
``Unknown`` reserved for absent input.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, replace
from enum import Enum
from importlib import resources
from typing import Iterable, Optional

PMCID_RE = re.compile(r"^PMC[0-9]+$")

AGE_MIN, AGE_MAX = 0, 130
SIZE_MAX_MM = 1000.0

FUZZY_ACCEPT = 0.85


class Gender(str, Enum):
    male = "male"
    female = "female"
    other = "other"
    unknown = "unknown"


class VariantLabel(str, Enum):
    """WHO tumor variant categories plus the two mandated buckets."""

    SolidMulticystic = "SolidMulticystic"
    Unicystic = "Unicystic"
    Peripheral = "Peripheral"
    Desmoplastic = "Desmoplastic"
    Other = "Other"
    Unknown = "Unknown"


class DiagnosisLabel(str, Enum):
    """Histological pattern categories plus the two mandated buckets."""

    Follicular = "Follicular"
    Plexiform = "Plexiform"
    Acanthomatous = "Acanthomatous"
    GranularCell = "GranularCell"
    BasalCell = "BasalCell"
    Adenoid = "Adenoid"
    Other = "Other"
    Unknown = "Unknown"


class Modality(str, Enum):
    radiology = "radiology"
    pathology = "pathology"
    medical_photograph = "medical_photograph"
    chart = "chart"


@dataclass(frozen=True)
class CaseRecord:
    """One structured case report. Immutable after construction."""

    pmcid: str
    patient_age: Optional[int] = None
    patient_gender: Gender = Gender.unknown
    presenting_complaint: str = ""
    clinical_features: str = ""
    radiological_features: str = ""
    histopathological_features: str = ""
    tumor_location: str = ""
    diagnosis_raw: str = ""
    diagnosis_label: DiagnosisLabel = DiagnosisLabel.Unknown
    variant_raw: str = ""
    variant_label: VariantLabel = VariantLabel.Unknown
    tumor_size_mm: tuple[float, ...] = ()
    treatment: str = ""
    outcome: Optional[str] = None

    # names of the free-text fields, in template order
    TEXT_FIELDS = (
        "presenting_complaint",
        "clinical_features",
        "radiological_features",
        "histopathological_features",
        "tumor_location",
        "diagnosis_raw",
        "variant_raw",
        "treatment",
        "outcome",
    )

    def to_dict(self) -> dict:
        return {
            "pmcid": self.pmcid,
            "patient_age": self.patient_age,
            "patient_gender": self.patient_gender.value,
            "presenting_complaint": self.presenting_complaint,
            "clinical_features": self.clinical_features,
            "radiological_features": self.radiological_features,
            "histopathological_features": self.histopathological_features,
            "tumor_location": self.tumor_location,
            "diagnosis_raw": self.diagnosis_raw,
            "diagnosis_label": self.diagnosis_label.value,
            "variant_raw": self.variant_raw,
            "variant_label": self.variant_label.value,
            "tumor_size_mm": list(self.tumor_size_mm),
            "treatment": self.treatment,
            "outcome": self.outcome,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "CaseRecord":
        age = data.get("patient_age")
        return cls(
            pmcid=data["pmcid"],
            patient_age=int(age) if age is not None else None,
            patient_gender=Gender(data.get("patient_gender") or "unknown"),
            presenting_complaint=data.get("presenting_complaint") or "",
            clinical_features=data.get("clinical_features") or "",
            radiological_features=data.get("radiological_features") or "",
            histopathological_features=data.get("histopathological_features") or "",
            tumor_location=data.get("tumor_location") or "",
            diagnosis_raw=data.get("diagnosis_raw") or "",
            diagnosis_label=DiagnosisLabel(data.get("diagnosis_label") or "Unknown"),
            variant_raw=data.get("variant_raw") or "",
            variant_label=VariantLabel(data.get("variant_label") or "Unknown"),
            tumor_size_mm=tuple(float(v) for v in data.get("tumor_size_mm") or ()),
            treatment=data.get("treatment") or "",
            outcome=data.get("outcome"),
        )

    def with_fields(self, **kwargs) -> "CaseRecord":
        return replace(self, **kwargs)


@dataclass(frozen=True)
class ImageRecord:
    """Metadata for one figure, anchored to its source case. No pixels."""

    image_id: str
    pmcid: str
    modality: Modality
    sub_labels: frozenset[str] = frozenset()
    caption: str = ""
    split_lineage: Optional[str] = None
    file_path: str = ""

    def to_dict(self) -> dict:
        return {
            "image_id": self.image_id,
            "pmcid": self.pmcid,
            "modality": self.modality.value,
            "sub_labels": sorted(self.sub_labels),
            "caption": self.caption,
            "split_lineage": self.split_lineage,
            "file_path": self.file_path,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ImageRecord":
        return cls(
            image_id=data["image_id"],
            pmcid=data["pmcid"],
            modality=Modality(data["modality"]),
            sub_labels=frozenset(data.get("sub_labels") or ()),
            caption=data.get("caption") or "",
            split_lineage=data.get("split_lineage"),
            file_path=data.get("file_path") or "",
        )


class EmptyLabelSet(ValueError):
    pass


@dataclass(frozen=True)
class LabelCodec:
    """Bijective label<->integer codes, stable under input permutation."""

    classes: tuple[str, ...]
    code_of: dict[str, int] = field(compare=False, default_factory=dict)

    def encode(self, label: str) -> int:
        return self.code_of[label]

    def decode(self, code: int) -> str:
        return self.classes[code]


def build_codec(labels: Iterable[str]) -> LabelCodec:
    """Assign codes 0..n-1 in lexicographic class order, duplicates collapsed."""
    classes = tuple(sorted(set(labels)))
    if not classes:
        raise EmptyLabelSet("cannot build a codec from an empty label set")
    return LabelCodec(classes=classes, code_of={c: i for i, c in enumerate(classes)})


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------

def validate_case(record: CaseRecord) -> list[str]:
    """Return every invariant violation as "field: message"; empty = valid."""
    violations: list[str] = []

    if not record.pmcid.startswith("PMC"):
        violations.append("pmcid: missing PMC prefix")
    elif not PMCID_RE.match(record.pmcid):
        violations.append("pmcid: malformed identifier")

    if record.patient_age is not None and not (AGE_MIN <= record.patient_age <= AGE_MAX):
        violations.append(f"patient_age: {record.patient_age} outside [{AGE_MIN}, {AGE_MAX}]")

    for i, size in enumerate(record.tumor_size_mm):
        if size <= 0:
            violations.append(f"tumor_size_mm[{i}]: non-positive")
        elif size >= SIZE_MAX_MM:
            violations.append(f"tumor_size_mm[{i}]: exceeds {SIZE_MAX_MM:g} mm bound")

    if not isinstance(record.diagnosis_label, DiagnosisLabel):
        violations.append("diagnosis_label: not a DiagnosisLabel")
    if not isinstance(record.variant_label, VariantLabel):
        violations.append("variant_label: not a VariantLabel")
    if not isinstance(record.patient_gender, Gender):
        violations.append("patient_gender: not a Gender")

    return violations


def validate_image(image: ImageRecord, known_pmcids: Optional[set[str]] = None) -> list[str]:
    violations: list[str] = []
    if not image.image_id:
        violations.append("image_id: empty")
    if not PMCID_RE.match(image.pmcid):
        violations.append("pmcid: malformed identifier")
    elif known_pmcids is not None and image.pmcid not in known_pmcids:
        violations.append(f"pmcid: no case {image.pmcid} on record")
    if not isinstance(image.modality, Modality):
        violations.append("modality: not a Modality")
    return violations


# ---------------------------------------------------------------------------
# Label normalization: synonym table first, then fuzzy matching
# ---------------------------------------------------------------------------

def _load_synonyms(resource: str) -> dict[str, list[str]]:
    raw = resources.files("amelo.data").joinpath(resource).read_text("utf-8")
    return json.loads(raw)


_VARIANT_SYNONYMS = _load_synonyms("variant_synonyms.json")
_DIAGNOSIS_SYNONYMS = _load_synonyms("diagnosis_synonyms.json")


def levenshtein(a: str, b: str) -> int:
    if a == b:
        return 0
    if not a:
        return len(b)
    if not b:
        return len(a)
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def similarity_ratio(a: str, b: str) -> float:
    """Normalized Levenshtein similarity in [0, 1]."""
    if not a and not b:
        return 1.0
    longest = max(len(a), len(b))
    return 1.0 - levenshtein(a, b) / longest


def _clean_label_text(raw: str) -> str:
    text = raw.casefold().strip()
    # the tumor name itself carries no variant/pattern information
    tokens = [t for t in re.split(r"[^a-z0-9/]+", text) if t and t != "ameloblastoma"]
    return " ".join(tokens)


def _match_label(raw: str, synonyms: dict[str, list[str]], label_of) -> object:
    cleaned = _clean_label_text(raw)
    if not cleaned:
        return label_of("Unknown")

    # exact stage: any synonym present as a word-bounded phrase
    for name, terms in synonyms.items():
        for term in terms:
            if re.search(rf"\b{re.escape(term)}\b", cleaned):
                return label_of(name)

    # fuzzy stage: best normalized Levenshtein score over all synonyms
    best_name, best_score = None, 0.0
    for name in sorted(synonyms):
        for term in synonyms[name]:
            score = similarity_ratio(cleaned, term)
            if score > best_score:
                best_name, best_score = name, score
    if best_name is not None and best_score >= FUZZY_ACCEPT:
        return label_of(best_name)
    return label_of("Other")


def normalize_variant(raw: str) -> VariantLabel:
    """Map a free-text variant description onto the closed variant taxonomy."""
    return _match_label(raw, _VARIANT_SYNONYMS, VariantLabel)


def normalize_diagnosis(raw: str) -> DiagnosisLabel:
    """Map a free-text diagnosis description onto the closed diagnosis taxonomy."""
    return _match_label(raw, _DIAGNOSIS_SYNONYMS, DiagnosisLabel)
