"""Text preprocessing, TF-IDF sparse vectors, dense-vector ingestion, vector math.

Dense embeddings are never computed here: they are ingested from JSONL
produced by an external encoder and stored as 32-bit floats. The TF-IDF
path is native and fully deterministic (lexicographic tie-breaks, fixed
stopword list, Porter stemming).
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

STOPWORDS_ID = "english-v1"
DEFAULT_MAX_FEATURES = 500
DEFAULT_DENSE_DIM = 384


class EmptyCorpus(ValueError):
    pass


class DimensionMismatch(ValueError):
    pass


class ZeroVector(ValueError):
    pass


class NonFiniteValue(ValueError):
    pass


class UnknownCase(KeyError):
    pass


class EmptySet(ValueError):
    pass


def _load_stopwords() -> frozenset[str]:
    text = resources.files("amelo.data").joinpath("stopwords_en.txt").read_text("utf-8")
    return frozenset(
        line.strip() for line in text.splitlines()
        if line.strip() and not line.startswith("#")
    )


STOPWORDS = _load_stopwords()


# ---------------------------------------------------------------------------
# Porter stemmer (standard algorithm, steps 1a-5b)
# ---------------------------------------------------------------------------

_VOWELS = "aeiou"


def _is_consonant(word: str, i: int) -> bool:
    ch = word[i]
    if ch in _VOWELS:
        return False
    if ch == "y":
        return i == 0 or not _is_consonant(word, i - 1)
    return True


def _measure(stem: str) -> int:
    """Count VC sequences in the [C](VC)^m[V] decomposition."""
    m = 0
    prev_vowel = False
    for i in range(len(stem)):
        vowel = not _is_consonant(stem, i)
        if prev_vowel and not vowel:
            m += 1
        prev_vowel = vowel
    return m


def _has_vowel(stem: str) -> bool:
    return any(not _is_consonant(stem, i) for i in range(len(stem)))


def _ends_double_consonant(word: str) -> bool:
    return (
        len(word) >= 2
        and word[-1] == word[-2]
        and _is_consonant(word, len(word) - 1)
    )


def _ends_cvc(word: str) -> bool:
    if len(word) < 3:
        return False
    if not (
        _is_consonant(word, len(word) - 3)
        and not _is_consonant(word, len(word) - 2)
        and _is_consonant(word, len(word) - 1)
    ):
        return False
    return word[-1] not in "wxy"


def _replace_suffix(word: str, suffix: str, replacement: str, min_measure: int) -> Optional[str]:
    if not word.endswith(suffix):
        return None
    stem = word[: len(word) - len(suffix)]
    if _measure(stem) > min_measure - 1:
        return stem + replacement
    return word


def porter_stem(word: str) -> str:
    """Porter-stem a lowercase token."""
    if len(word) <= 2:
        return word

    # step 1a
    if word.endswith("sses"):
        word = word[:-2]
    elif word.endswith("ies"):
        word = word[:-2]
    elif not word.endswith("ss") and word.endswith("s"):
        word = word[:-1]

    # step 1b
    if word.endswith("eed"):
        if _measure(word[:-3]) > 0:
            word = word[:-1]
    else:
        stripped = None
        if word.endswith("ed") and _has_vowel(word[:-2]):
            stripped = word[:-2]
        elif word.endswith("ing") and _has_vowel(word[:-3]):
            stripped = word[:-3]
        if stripped is not None:
            word = stripped
            if word.endswith(("at", "bl", "iz")):
                word += "e"
            elif _ends_double_consonant(word) and word[-1] not in "lsz":
                word = word[:-1]
            elif _measure(word) == 1 and _ends_cvc(word):
                word += "e"

    # step 1c
    if word.endswith("y") and _has_vowel(word[:-1]):
        word = word[:-1] + "i"

    # step 2
    for suffix, repl in (
        ("ational", "ate"), ("tional", "tion"), ("enci", "ence"), ("anci", "ance"),
        ("izer", "ize"), ("abli", "able"), ("alli", "al"), ("entli", "ent"),
        ("eli", "e"), ("ousli", "ous"), ("ization", "ize"), ("ation", "ate"),
        ("ator", "ate"), ("alism", "al"), ("iveness", "ive"), ("fulness", "ful"),
        ("ousness", "ous"), ("aliti", "al"), ("iviti", "ive"), ("biliti", "ble"),
        ("logi", "log"),
    ):
        out = _replace_suffix(word, suffix, repl, 1)
        if out is not None:
            word = out
            break

    # step 3
    for suffix, repl in (
        ("icate", "ic"), ("ative", ""), ("alize", "al"), ("iciti", "ic"),
        ("ical", "ic"), ("ful", ""), ("ness", ""),
    ):
        out = _replace_suffix(word, suffix, repl, 1)
        if out is not None:
            word = out
            break

    # step 4
    for suffix in (
        "al", "ance", "ence", "er", "ic", "able", "ible", "ant", "ement",
        "ment", "ent", "ion", "ou", "ism", "ate", "iti", "ous", "ive", "ize",
    ):
        if word.endswith(suffix):
            stem = word[: len(word) - len(suffix)]
            if _measure(stem) > 1:
                if suffix == "ion" and stem[-1:] not in ("s", "t"):
                    break
                word = stem
            break

    # step 5a
    if word.endswith("e"):
        stem = word[:-1]
        m = _measure(stem)
        if m > 1 or (m == 1 and not _ends_cvc(stem)):
            word = stem

    # step 5b
    if _measure(word) > 1 and _ends_double_consonant(word) and word.endswith("l"):
        word = word[:-1]

    return word


def tokenize(raw: str) -> list[str]:
    """Case-fold and split on non-alphanumeric runs."""
    out, current = [], []
    for ch in raw.casefold():
        if ch.isalnum():
            current.append(ch)
        elif current:
            out.append("".join(current))
            current = []
    if current:
        out.append("".join(current))
    return out


def preprocess_text(raw: str) -> list[str]:
    """Case-fold, tokenize, drop stopwords, Porter-stem. Deterministic."""
    return [porter_stem(t) for t in tokenize(raw) if t not in STOPWORDS]


# ---------------------------------------------------------------------------
# TF-IDF
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseVector:
    """Sorted (index, weight) pairs over a |V|-dimensional vocabulary."""

    indices: tuple[int, ...]
    weights: tuple[float, ...]
    dimension: int

    def __post_init__(self):
        if len(self.indices) != len(self.weights):
            raise ValueError("indices/weights length mismatch")
        prev = -1
        for idx in self.indices:
            if idx <= prev or idx >= self.dimension:
                raise ValueError("indices must be strictly increasing and < dimension")
            prev = idx
        if any(not math.isfinite(w) for w in self.weights):
            raise NonFiniteValue("sparse weights must be finite")

    @property
    def norm(self) -> float:
        return math.sqrt(sum(w * w for w in self.weights))

    def is_zero(self) -> bool:
        return all(w == 0.0 for w in self.weights) if self.weights else True


def sparse_dot(a: SparseVector, b: SparseVector) -> float:
    if a.dimension != b.dimension:
        raise DimensionMismatch(f"sparse dims differ: {a.dimension} vs {b.dimension}")
    total, i, j = 0.0, 0, 0
    while i < len(a.indices) and j < len(b.indices):
        if a.indices[i] == b.indices[j]:
            total += a.weights[i] * b.weights[j]
            i += 1
            j += 1
        elif a.indices[i] < b.indices[j]:
            i += 1
        else:
            j += 1
    return total


def sparse_cosine(a: SparseVector, b: SparseVector) -> float:
    na, nb = a.norm, b.norm
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return sparse_dot(a, b) / (na * nb)


@dataclass(frozen=True)
class TfidfModel:
    vocabulary: dict[str, int]  # term -> column index, 0..|V|-1
    idf: tuple[float, ...]  # per column
    max_features: int
    stopwords_id: str = STOPWORDS_ID
    stemming: bool = True

    @property
    def dimension(self) -> int:
        return len(self.vocabulary)


def fit_tfidf(corpus: Sequence[Sequence[str]], max_features: int = DEFAULT_MAX_FEATURES) -> TfidfModel:
    """Fit vocabulary and idf over tokenized documents.

    Vocabulary keeps the top ``max_features`` terms by collection frequency
    (ties broken lexicographically); idf(t) = ln((1+N)/(1+df(t))) + 1.
    """
    if not corpus:
        raise EmptyCorpus("cannot fit TF-IDF on an empty corpus")
    n_docs = len(corpus)

    collection_freq: Counter[str] = Counter()
    doc_freq: Counter[str] = Counter()
    for tokens in corpus:
        collection_freq.update(tokens)
        doc_freq.update(set(tokens))

    kept = sorted(collection_freq, key=lambda t: (-collection_freq[t], t))[:max_features]
    vocabulary = {term: i for i, term in enumerate(sorted(kept))}

    idf = [0.0] * len(vocabulary)
    for term, col in vocabulary.items():
        idf[col] = math.log((1 + n_docs) / (1 + doc_freq[term])) + 1.0

    return TfidfModel(vocabulary=vocabulary, idf=tuple(idf), max_features=max_features)


def embed_tfidf(model: TfidfModel, tokens: Sequence[str]) -> SparseVector:
    """tf(t)*idf(t), L2-normalized. OOV tokens ignored; all-OOV gives the zero vector."""
    counts: Counter[int] = Counter()
    for token in tokens:
        col = model.vocabulary.get(token)
        if col is not None:
            counts[col] += 1
    if not counts:
        return SparseVector(indices=(), weights=(), dimension=model.dimension)

    indices = tuple(sorted(counts))
    raw = [counts[i] * model.idf[i] for i in indices]
    norm = math.sqrt(sum(w * w for w in raw))
    weights = tuple(w / norm for w in raw)
    return SparseVector(indices=indices, weights=weights, dimension=model.dimension)


# ---------------------------------------------------------------------------
# Dense vector math
# ---------------------------------------------------------------------------

def as_dense(values: Iterable[float]) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float32)
    if arr.ndim != 1:
        raise ValueError("dense vector must be one-dimensional")
    return arr


def l2_normalize(v: np.ndarray) -> np.ndarray:
    norm = float(np.linalg.norm(v))
    if norm == 0.0:
        raise ZeroVector("cannot normalize the zero vector")
    return (v / norm).astype(np.float32)


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    if a.shape != b.shape:
        raise DimensionMismatch(f"dense dims differ: {a.shape} vs {b.shape}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ZeroVector("cosine undefined for zero vectors")
    return float(np.dot(a, b)) / (na * nb)


def centroid(vectors: Sequence[np.ndarray]) -> np.ndarray:
    if len(vectors) == 0:
        raise EmptySet("centroid of an empty set is undefined")
    dim = vectors[0].shape
    for v in vectors[1:]:
        if v.shape != dim:
            raise DimensionMismatch("centroid inputs must share a dimension")
    return (np.sum(np.stack(vectors), axis=0) / len(vectors)).astype(np.float32)


# ---------------------------------------------------------------------------
# Dense embedding store (ingestion only)
# ---------------------------------------------------------------------------

class DenseStore:
    """pmcid -> float32 vector; the first ingestion fixes the dimension.

    Many concurrent readers are fine; writes are externally serialized.
    """

    def __init__(self, dimension: Optional[int] = None,
                 known_ids: Optional[set[str]] = None, strict: bool = False):
        self.dimension = dimension
        self._vectors: dict[str, np.ndarray] = {}
        self._known_ids = known_ids
        self._strict = strict

    def __len__(self) -> int:
        return len(self._vectors)

    def __contains__(self, pmcid: str) -> bool:
        return pmcid in self._vectors

    def get(self, pmcid: str) -> Optional[np.ndarray]:
        return self._vectors.get(pmcid)

    def items(self):
        return self._vectors.items()

    def ingest(self, pmcid: str, values: Iterable[float]) -> None:
        arr = as_dense(values)
        if not np.all(np.isfinite(arr)):
            raise NonFiniteValue(f"vector for {pmcid} contains non-finite entries")
        if self._strict and self._known_ids is not None and pmcid not in self._known_ids:
            raise UnknownCase(pmcid)
        if self.dimension is None:
            self.dimension = int(arr.shape[0])
        elif arr.shape[0] != self.dimension:
            raise DimensionMismatch(
                f"vector for {pmcid} has dim {arr.shape[0]}, store has {self.dimension}"
            )
        self._vectors[pmcid] = arr  # overwrite on re-ingest


def ingest_dense(pmcid: str, values: Iterable[float], store: DenseStore) -> None:
    store.ingest(pmcid, values)


def load_dense_jsonl(path: str | Path, store: DenseStore) -> int:
    """Ingest one {"pmcid": ..., "vector": [...]} object per line. Returns count."""
    count = 0
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            store.ingest(row["pmcid"], row["vector"])
            count += 1
    return count
