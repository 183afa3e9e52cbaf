"""Exact flat L2 index, sparse-cosine KNN, k-means clustered search, persistence.

All searches are exhaustive scans (flat) or cluster-restricted exhaustive
scans (clustered); there are no approximation structures. Distance ties
break lexicographically by pmcid everywhere so results are identical
across platforms and runs.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence, Union

import numpy as np

from .vectorize import DimensionMismatch, SparseVector, ZeroVector, sparse_dot

MAGIC = b"AMCI"
FORMAT_VERSION = 1
KIND_FLAT, KIND_KMEANS, KIND_SPARSE = 0, 1, 2

# above this many distance evaluations the assignment step switches to the
# matmul expansion (||x||^2 + ||c||^2 - 2 x.c) to bound memory
_EXACT_ASSIGN_BUDGET = 20_000_000


class EmptyInput(ValueError):
    pass


class EmptyIndex(ValueError):
    pass


class ZeroQuery(ValueError):
    pass


class KTooLarge(ValueError):
    pass


class TooFewRows(ValueError):
    pass


class RangeInvalid(ValueError):
    pass


class FormatVersionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


@dataclass(frozen=True)
class SearchHit:
    pmcid: str
    distance: float
    rank: int  # 1-based, contiguous, ascending distance


@dataclass(frozen=True)
class FlatIndex:
    """Row-major float32 block plus the row -> pmcid table."""

    dimension: int
    matrix: np.ndarray  # (count, dimension) float32
    ids: tuple[str, ...]

    @property
    def count(self) -> int:
        return len(self.ids)


VectorInput = Union[Mapping[str, Iterable[float]], Iterable[tuple[str, Iterable[float]]]]


def _collect_vectors(vectors: VectorInput) -> tuple[np.ndarray, tuple[str, ...]]:
    pairs = vectors.items() if isinstance(vectors, Mapping) else vectors
    by_id: dict[str, np.ndarray] = {}
    for pmcid, values in pairs:  # last write wins on duplicate ids
        by_id[pmcid] = np.asarray(values, dtype=np.float32)
    if not by_id:
        raise EmptyInput("no vectors to index")
    ids = tuple(sorted(by_id))
    dim = int(by_id[ids[0]].shape[0])
    for pmcid in ids:
        if by_id[pmcid].shape != (dim,):
            raise DimensionMismatch(
                f"vector {pmcid} has shape {by_id[pmcid].shape}, expected ({dim},)"
            )
    matrix = np.stack([by_id[pmcid] for pmcid in ids]).astype(np.float32)
    return matrix, ids


def build_flat(vectors: VectorInput) -> FlatIndex:
    """Build an exact L2 index; insertion order is id-sorted for determinism."""
    matrix, ids = _collect_vectors(vectors)
    return FlatIndex(dimension=matrix.shape[1], matrix=matrix, ids=ids)


def _top_k_by_distance(sq_dists: np.ndarray, ids: Sequence[str], k: int) -> list[SearchHit]:
    """Select k smallest squared distances, ties broken by pmcid."""
    n = sq_dists.shape[0]
    if k >= n:
        candidates = np.arange(n)
    else:
        kth = np.partition(sq_dists, k - 1)[k - 1]
        candidates = np.flatnonzero(sq_dists <= kth)
    order = sorted(candidates.tolist(), key=lambda i: (sq_dists[i], ids[i]))[:k]
    return [
        SearchHit(pmcid=ids[i], distance=float(np.sqrt(sq_dists[i])), rank=rank)
        for rank, i in enumerate(order, start=1)
    ]


def search_flat(index: FlatIndex, query: Iterable[float], k: int) -> list[SearchHit]:
    """Exact top-k by L2 distance: identical to a brute-force linear scan."""
    if index.count == 0:
        raise EmptyIndex("flat index holds no vectors")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise DimensionMismatch(f"query shape {q.shape}, index dimension {index.dimension}")
    diffs = index.matrix.astype(np.float64) - q
    sq = np.einsum("ij,ij->i", diffs, diffs)
    return _top_k_by_distance(sq, index.ids, k)


def knn_sparse(matrix: Mapping[str, SparseVector], query: SparseVector, k: int) -> list[SearchHit]:
    """Exact top-k by cosine distance (1 - cosine) over sparse vectors.

    Documents with a zero vector (all-OOV) sit at distance 1.0.
    """
    if not matrix:
        raise EmptyIndex("sparse matrix holds no documents")
    if query.is_zero():
        raise ZeroQuery("query vector is zero")
    qnorm = query.norm
    scored: list[tuple[float, str]] = []
    for pmcid in matrix:
        doc = matrix[pmcid]
        dnorm = doc.norm
        if dnorm == 0.0:
            scored.append((1.0, pmcid))
        else:
            cos = sparse_dot(doc, query) / (dnorm * qnorm)
            scored.append((1.0 - cos, pmcid))
    scored.sort()
    return [
        SearchHit(pmcid=pmcid, distance=dist, rank=rank)
        for rank, (dist, pmcid) in enumerate(scored[:k], start=1)
    ]


# ---------------------------------------------------------------------------
# Feature standardization and k-means
# ---------------------------------------------------------------------------

def standardize(features: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Z-score each column (population stddev). Returns (z, mean, std).

    Constant columns become zeros and their recorded std parameter is 1.
    """
    data = np.asarray(features, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise TooFewRows("standardization needs at least 2 rows")
    mean = data.mean(axis=0)
    std = data.std(axis=0)
    std_safe = np.where(std == 0.0, 1.0, std)
    return (data - mean) / std_safe, mean, std_safe


@dataclass(frozen=True)
class KMeansModel:
    centroids: np.ndarray  # (k, d) float64
    assignment: np.ndarray  # (n,) int32, every row in exactly one cluster
    inertia: float
    iterations_run: int
    feature_mean: Optional[np.ndarray] = None
    feature_std: Optional[np.ndarray] = None
    inertia_history: tuple[float, ...] = field(default=(), compare=False)

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def _assign(data: np.ndarray, centroids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Nearest centroid per row; returns (assignment, squared distance to it)."""
    n, d = data.shape
    k = centroids.shape[0]
    if n * k * d <= _EXACT_ASSIGN_BUDGET:
        sq = ((data[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    else:
        sq = (
            (data ** 2).sum(axis=1)[:, None]
            + (centroids ** 2).sum(axis=1)[None, :]
            - 2.0 * data @ centroids.T
        )
        np.maximum(sq, 0.0, out=sq)
    assignment = np.argmin(sq, axis=1)
    return assignment.astype(np.int32), sq[np.arange(n), assignment]


def _kmeanspp_init(data: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = data.shape[0]
    chosen = [int(rng.integers(n))]
    d2 = ((data - data[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = float(d2.sum())
        if total <= 0.0:  # all remaining points coincide with a centroid
            pick = next(i for i in range(n) if i not in chosen)
        else:
            pick = int(rng.choice(n, p=d2 / total))
        chosen.append(pick)
        d2 = np.minimum(d2, ((data - data[pick]) ** 2).sum(axis=1))
    return data[chosen].copy()


def fit_kmeans(
    vectors: Union[np.ndarray, VectorInput],
    k: int,
    max_iters: int = 100,
    seed: int = 0,
    feature_mean: Optional[np.ndarray] = None,
    feature_std: Optional[np.ndarray] = None,
) -> KMeansModel:
    """Lloyd's algorithm with distance-weighted (k-means++ style) seeding.

    Runs until the assignment reaches a fixpoint or max_iters; the recorded
    inertia history is non-increasing. Deterministic for a fixed seed.
    """
    if isinstance(vectors, np.ndarray):
        data = np.asarray(vectors, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
    else:
        matrix, _ = _collect_vectors(vectors)
        data = matrix.astype(np.float64)
    n = data.shape[0]
    if k < 1 or k > n:
        raise KTooLarge(f"k={k} outside [1, {n}]")

    rng = np.random.default_rng(seed)
    centroids = _kmeanspp_init(data, k, rng)
    assignment = np.full(n, -1, dtype=np.int32)
    history: list[float] = []
    iterations = 0

    for iteration in range(1, max(1, max_iters) + 1):
        new_assignment, sq = _assign(data, centroids)
        # relocate empty clusters onto the current farthest point (inertia
        # strictly drops: that point's contribution goes to zero)
        counts = np.bincount(new_assignment, minlength=k)
        for cluster in np.flatnonzero(counts == 0):
            farthest = int(np.argmax(sq))
            centroids[cluster] = data[farthest]
            new_assignment[farthest] = cluster
            sq[farthest] = 0.0
        diffs = data - centroids[new_assignment]
        history.append(float(np.einsum("ij,ij->", diffs, diffs)))
        iterations = iteration
        converged = np.array_equal(new_assignment, assignment)
        assignment = new_assignment
        if converged or iteration == max(1, max_iters):
            break
        for cluster in range(k):
            members = data[assignment == cluster]
            if members.shape[0]:
                centroids[cluster] = members.mean(axis=0)

    return KMeansModel(
        centroids=centroids,
        assignment=assignment,
        inertia=history[-1],
        iterations_run=iterations,
        feature_mean=feature_mean,
        feature_std=feature_std,
        inertia_history=tuple(history),
    )


def elbow_select_k(
    vectors: Union[np.ndarray, VectorInput],
    k_min: int = 2,
    k_max: int = 8,
    max_iters: int = 100,
    seed: int = 0,
) -> int:
    """Pick k at the knee: the maximum second difference of the inertia curve."""
    if isinstance(vectors, np.ndarray):
        count = vectors.shape[0]
    else:
        count = len(dict(vectors.items() if isinstance(vectors, Mapping) else vectors))
    if k_min < 1 or k_max < k_min or k_max > count:
        raise RangeInvalid(f"need 1 <= k_min <= k_max <= {count}, got [{k_min}, {k_max}]")
    if k_min == k_max:
        return k_min

    lo, hi = max(1, k_min - 1), min(count, k_max + 1)
    inertia = {
        k: fit_kmeans(vectors, k, max_iters=max_iters, seed=seed).inertia
        for k in range(lo, hi + 1)
    }
    best_k, best_knee = None, -np.inf
    for k in range(k_min, k_max + 1):
        if k - 1 not in inertia or k + 1 not in inertia:
            continue
        knee = inertia[k - 1] - 2.0 * inertia[k] + inertia[k + 1]
        if knee > best_knee:  # strict: ties keep the smaller k
            best_k, best_knee = k, knee
    return best_k if best_k is not None else k_min


@dataclass(frozen=True)
class ClusteredIndex:
    """K-means partitioned store: the full vector block plus the fitted model."""

    dimension: int
    matrix: np.ndarray  # (count, dimension) float32
    ids: tuple[str, ...]
    model: KMeansModel

    @property
    def count(self) -> int:
        return len(self.ids)


def build_clustered(vectors: VectorInput, k: int, max_iters: int = 100,
                    seed: int = 0) -> ClusteredIndex:
    matrix, ids = _collect_vectors(vectors)
    model = fit_kmeans(matrix.astype(np.float64), k, max_iters=max_iters, seed=seed)
    return ClusteredIndex(dimension=matrix.shape[1], matrix=matrix, ids=ids, model=model)


def search_clustered(index: ClusteredIndex, query: Iterable[float], k: int,
                     probes: int = 1) -> list[SearchHit]:
    """Exact scan restricted to the members of the `probes` nearest clusters.

    With probes equal to the cluster count this is exactly the flat search;
    with fewer probes boundary cases may differ from the flat result.
    """
    if index.count == 0:
        raise EmptyIndex("clustered index holds no vectors")
    if k < 1:
        raise ValueError("k must be >= 1")
    q = np.asarray(query, dtype=np.float64)
    if q.shape != (index.dimension,):
        raise DimensionMismatch(f"query shape {q.shape}, index dimension {index.dimension}")

    cdiffs = index.model.centroids - q
    csq = np.einsum("ij,ij->i", cdiffs, cdiffs)
    probes = max(1, min(probes, index.model.k))
    nearest = sorted(range(index.model.k), key=lambda c: (csq[c], c))[:probes]

    member_rows = np.flatnonzero(np.isin(index.model.assignment, nearest))
    diffs = index.matrix[member_rows].astype(np.float64) - q
    sq = np.einsum("ij,ij->i", diffs, diffs)
    member_ids = [index.ids[i] for i in member_rows.tolist()]
    return _top_k_by_distance(sq, member_ids, k)


# ---------------------------------------------------------------------------
# Persistence: magic "AMCI", version, kind, dim, count, payload, CRC32
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SparseIndex:
    """TF-IDF document matrix in persistable form."""

    dimension: int
    ids: tuple[str, ...]
    vectors: dict[str, SparseVector]

    @property
    def count(self) -> int:
        return len(self.ids)


def build_sparse(vectors: Mapping[str, SparseVector]) -> SparseIndex:
    if not vectors:
        raise EmptyInput("no sparse vectors to index")
    ids = tuple(sorted(vectors))
    dims = {vectors[i].dimension for i in ids}
    if len(dims) > 1:
        raise DimensionMismatch(f"sparse vectors mix dimensions: {sorted(dims)}")
    return SparseIndex(dimension=dims.pop(), ids=ids, vectors=dict(vectors))


Persistable = Union[FlatIndex, ClusteredIndex, SparseIndex]


def _pack_ids(ids: Sequence[str]) -> bytes:
    parts = []
    for pmcid in ids:
        raw = pmcid.encode("utf-8")
        parts.append(struct.pack("<H", len(raw)) + raw)
    return b"".join(parts)


def _pack_f64_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def persist_index(obj: Persistable, path: str | Path) -> None:
    """Write the bit-exact binary form: header, vector block, ids, extras, CRC32."""
    if isinstance(obj, FlatIndex):
        kind, extras = KIND_FLAT, b""
        block = np.ascontiguousarray(obj.matrix, dtype="<f4").tobytes()
    elif isinstance(obj, ClusteredIndex):
        kind = KIND_KMEANS
        block = np.ascontiguousarray(obj.matrix, dtype="<f4").tobytes()
        m = obj.model
        extras = struct.pack("<I", m.k)
        extras += _pack_f64_array(m.centroids)
        extras += np.ascontiguousarray(m.assignment, dtype="<i4").tobytes()
        extras += struct.pack("<dI", m.inertia, m.iterations_run)
        extras += struct.pack("<I", len(m.inertia_history))
        extras += struct.pack(f"<{len(m.inertia_history)}d", *m.inertia_history)
        for arr in (m.feature_mean, m.feature_std):
            if arr is None:
                extras += struct.pack("<I", 0)
            else:
                extras += struct.pack("<I", len(arr)) + _pack_f64_array(arr)
    elif isinstance(obj, SparseIndex):
        kind = KIND_SPARSE
        rows = []
        for pmcid in obj.ids:
            vec = obj.vectors[pmcid]
            rows.append(struct.pack("<I", len(vec.indices)))
            for col, weight in zip(vec.indices, vec.weights):
                rows.append(struct.pack("<Id", col, weight))
        block, extras = b"".join(rows), b""
    else:
        raise TypeError(f"cannot persist {type(obj).__name__}")

    header = MAGIC + struct.pack("<IBIQ", FORMAT_VERSION, kind, obj.dimension, obj.count)
    body = header + block + _pack_ids(obj.ids) + extras
    payload = body + struct.pack("<I", zlib.crc32(body) & 0xFFFFFFFF)

    out = Path(path)
    tmp = out.with_suffix(out.suffix + ".tmp")
    tmp.write_bytes(payload)
    tmp.replace(out)


class _Reader:
    def __init__(self, data: bytes, offset: int):
        self.data = data
        self.offset = offset

    def take(self, fmt: str):
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise ChecksumMismatch("index file truncated mid-record")
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def take_bytes(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise ChecksumMismatch("index file truncated mid-record")
        out = self.data[self.offset: self.offset + size]
        self.offset += size
        return out


def load_index(path: str | Path) -> Persistable:
    """Read back a persisted index; load(persist(x)) == x bit-exact."""
    data = Path(path).read_bytes()
    if len(data) < len(MAGIC) + 4:
        raise ChecksumMismatch(f"{path}: too short to be an index file")
    if data[:4] != MAGIC:
        raise ChecksumMismatch(f"{path}: bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != FORMAT_VERSION:
        raise FormatVersionMismatch(
            f"{path}: file format version {version}, this build reads version {FORMAT_VERSION}"
        )
    if len(data) < 12:
        raise ChecksumMismatch(f"{path}: truncated header")
    (stored_crc,) = struct.unpack_from("<I", data, len(data) - 4)
    if zlib.crc32(data[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumMismatch(f"{path}: CRC32 check failed")

    reader = _Reader(data[:-4], 8)
    kind, dim, count = reader.take("<BIQ")

    if kind == KIND_SPARSE:
        rows: list[tuple[tuple[int, ...], tuple[float, ...]]] = []
        for _ in range(count):
            (nnz,) = reader.take("<I")
            cols, weights = [], []
            for _ in range(nnz):
                col, weight = reader.take("<Id")
                cols.append(col)
                weights.append(weight)
            rows.append((tuple(cols), tuple(weights)))
    else:
        raw = reader.take_bytes(count * dim * 4)
        matrix = np.frombuffer(raw, dtype="<f4").reshape(count, dim).copy()

    ids = []
    for _ in range(count):
        (length,) = reader.take("<H")
        ids.append(reader.take_bytes(length).decode("utf-8"))
    ids = tuple(ids)

    if kind == KIND_FLAT:
        return FlatIndex(dimension=dim, matrix=matrix, ids=ids)
    if kind == KIND_SPARSE:
        vectors = {
            pmcid: SparseVector(indices=cols, weights=weights, dimension=dim)
            for pmcid, (cols, weights) in zip(ids, rows)
        }
        return SparseIndex(dimension=dim, ids=ids, vectors=vectors)
    if kind == KIND_KMEANS:
        (k,) = reader.take("<I")
        centroids = np.frombuffer(reader.take_bytes(k * dim * 8), dtype="<f8").reshape(k, dim).copy()
        assignment = np.frombuffer(reader.take_bytes(count * 4), dtype="<i4").copy()
        inertia, iterations = reader.take("<dI")
        (hist_len,) = reader.take("<I")
        history = reader.take(f"<{hist_len}d") if hist_len else ()
        optional = []
        for _ in range(2):
            (length,) = reader.take("<I")
            if length:
                optional.append(
                    np.frombuffer(reader.take_bytes(length * 8), dtype="<f8").copy()
                )
            else:
                optional.append(None)
        model = KMeansModel(
            centroids=centroids,
            assignment=assignment,
            inertia=inertia,
            iterations_run=iterations,
            feature_mean=optional[0],
            feature_std=optional[1],
            inertia_history=tuple(history),
        )
        return ClusteredIndex(dimension=dim, matrix=matrix, ids=ids, model=model)
    raise ChecksumMismatch(f"{path}: unknown index kind {kind}")
