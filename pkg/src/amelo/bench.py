"""Measurement harness: per-method timing, model-size accounting, scaling probes.

Timings are medians over repetitions; every method sees the identical query
sequence. A clock can be injected, which freezes resource sampling and the
environment fingerprint so the whole report becomes deterministic.
"""

from __future__ import annotations

import os
import platform
import resource
import statistics
import time
from dataclasses import dataclass
from datetime import datetime, timezone
from typing import Callable, Optional, Sequence

import numpy as np

from .engine import (
    PreparedQuery,
    Query,
    QueryMode,
    RetrievalState,
    clustered_results,
    keyword_search,
    prepare_query,
    query as run_query,
)
from .index import (
    RangeInvalid,
    build_clustered,
    build_flat,
    knn_sparse,
    search_clustered,
    search_flat,
)
from .vectorize import embed_tfidf, fit_tfidf, preprocess_text

BENCH_METHODS = ("clustered", "flat", "keyword", "sparse")

# five clinical scenarios: radiological, histopathological, symptom-based,
# tumor-characteristic, and complex multi-feature
DEFAULT_QUERY_SET = (
    "Multilocular radiolucent lesion in the posterior mandible with cortical expansion",
    "Histopathology shows ameloblastic epithelium with stellate reticulum and peripheral palisading",
    "Painless slowly enlarging swelling of the jaw over several months",
    "Large unicystic lesion measuring 4 cm with root resorption of adjacent teeth",
    "Middle-aged patient with recurrent mandibular ameloblastoma after enucleation requiring "
    "segmental resection and fibular reconstruction",
)

BYTES_PER_FP32_PARAM = 4
MIB = 1024 * 1024


class NoMethods(ValueError):
    pass


class NoQueries(ValueError):
    pass


class EmptyQuerySet(ValueError):
    pass


class NonPositive(ValueError):
    pass


@dataclass(frozen=True)
class EnvFingerprint:
    os_name: str
    cores: int
    timestamp: str

    @classmethod
    def capture(cls) -> "EnvFingerprint":
        return cls(
            os_name=platform.platform(),
            cores=os.cpu_count() or 1,
            timestamp=datetime.now(timezone.utc).isoformat(timespec="seconds"),
        )

    def to_dict(self) -> dict:
        return {"os": self.os_name, "cores": self.cores, "timestamp": self.timestamp}


@dataclass(frozen=True)
class BenchReport:
    method: str
    total_time_s: float
    build_time_s: float
    vectorization_time_s: float
    query_time_s: float
    cpu_percent: Optional[float]
    peak_memory_bytes: Optional[int]
    latencies_s: tuple[float, ...]  # per query, medians across repetitions
    queries: int
    env: EnvFingerprint
    concurrency: int = 1  # >1: queries ran under concurrent load

    def __post_init__(self):
        if self.vectorization_time_s + self.query_time_s > self.total_time_s + 1e-12:
            raise ValueError("sub-timers exceed total")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "total_time_s": self.total_time_s,
            "build_time_s": self.build_time_s,
            "vectorization_time_s": self.vectorization_time_s,
            "query_time_s": self.query_time_s,
            "cpu_percent": self.cpu_percent,
            "peak_memory_bytes": self.peak_memory_bytes,
            "latencies_s": list(self.latencies_s),
            "queries": self.queries,
            "concurrency": self.concurrency,
            "env": self.env.to_dict(),
        }


def model_size_mb(param_count: int) -> float:
    """Analytic FP32 footprint: parameter count x 4 bytes, in MiB to 0.1."""
    if param_count <= 0:
        raise NonPositive("parameter count must be positive")
    return round(param_count * BYTES_PER_FP32_PARAM / MIB, 1)


# ---------------------------------------------------------------------------
# Method runners: (rebuild structures, vectorize queries, run queries)
# ---------------------------------------------------------------------------

def _method_runner(state: RetrievalState, method: str,
                   query_vectors: Optional[Sequence[Sequence[float]]]):
    ordered = sorted(state.cases)
    token_lists = [preprocess_text(state.case_texts[p].text) for p in ordered]

    if method == "sparse":
        def build():
            model = fit_tfidf(token_lists, max_features=state.config.max_features)
            return {p: embed_tfidf(model, toks) for p, toks in zip(ordered, token_lists)}, model

        def vectorize(texts, built):
            _, model = built
            return [embed_tfidf(model, preprocess_text(t)) for t in texts]

        def search(vec, built):
            matrix, _ = built
            if vec.is_zero():
                return []
            return knn_sparse(matrix, vec, 5)

        return build, vectorize, search

    if method == "clustered":
        if state.clustered is None:
            raise ValueError("clustered method unavailable on this snapshot")
        k = state.clustered.model.k

        def build():
            model = fit_tfidf(token_lists, max_features=state.config.max_features)
            sparse = {p: embed_tfidf(model, toks) for p, toks in zip(ordered, token_lists)}
            rows = {}
            for p in ordered:
                row = np.zeros(model.dimension, dtype=np.float32)
                for col, w in zip(sparse[p].indices, sparse[p].weights):
                    row[col] = w
                rows[p] = row
            return build_clustered(rows, k=k, seed=state.config.kmeans_seed), model

        def vectorize(texts, built):
            _, model = built
            out = []
            for t in texts:
                vec = embed_tfidf(model, preprocess_text(t))
                row = np.zeros(model.dimension, dtype=np.float64)
                for col, w in zip(vec.indices, vec.weights):
                    row[col] = w
                out.append(row)
            return out

        def search(vec, built):
            cindex, _ = built
            return search_clustered(cindex, vec, 5, probes=state.config.probes)

        return build, vectorize, search

    if method == "keyword":
        def build():
            return {p: frozenset(toks) for p, toks in zip(ordered, token_lists)}

        def vectorize(texts, built):
            return [tuple(preprocess_text(t)) for t in texts]

        def search(tokens, built):
            if not tokens:
                return []
            return keyword_search(state, tokens, 5)

        return build, vectorize, search

    if method == "flat":
        if state.flat is None:
            raise ValueError("flat method unavailable: no dense vectors ingested")
        if query_vectors is None:
            raise ValueError("flat method needs query_vectors (no native encoder)")
        flat_ids, flat_matrix = state.flat.ids, state.flat.matrix

        def build():
            return build_flat({p: flat_matrix[i] for i, p in enumerate(flat_ids)})

        def vectorize(texts, built):
            return [np.asarray(v, dtype=np.float64) for v in query_vectors]

        def search(vec, built):
            return search_flat(built, vec, 5)

        return build, vectorize, search

    raise ValueError(f"unknown bench method {method!r}; expected one of {BENCH_METHODS}")


def run_bench(
    state: RetrievalState,
    methods: Sequence[str],
    queries: Sequence[str],
    repetitions: int = 3,
    query_vectors: Optional[Sequence[Sequence[float]]] = None,
    concurrency: int = 1,
    clock: Optional[Callable[[], float]] = None,
    env: Optional[EnvFingerprint] = None,
) -> list[BenchReport]:
    """Time each method over the identical query sequence.

    Total = build + vectorization + query, each the median over repetitions.
    Runs single-threaded by default; concurrency > 1 switches the query
    phase to concurrent load and reports it in the BenchReport.
    """
    if not methods:
        raise NoMethods("at least one method required")
    if not queries:
        raise NoQueries("at least one query required")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    if concurrency < 1:
        raise ValueError("concurrency must be >= 1")
    if concurrency > 1 and clock is not None:
        raise ValueError("concurrent load mode measures with the wall clock only")

    deterministic = clock is not None
    tick = clock if clock is not None else time.perf_counter
    fingerprint = env if env is not None else (
        EnvFingerprint(os_name="frozen", cores=1, timestamp="1970-01-01T00:00:00+00:00")
        if deterministic else EnvFingerprint.capture()
    )

    reports = []
    for method in sorted(set(methods)):
        build, vectorize, search = _method_runner(state, method, query_vectors)

        build_times, vec_times, query_times = [], [], []
        per_query: list[list[float]] = [[] for _ in queries]
        wall_start = tick()
        cpu_start = time.process_time()
        for _ in range(repetitions):
            t0 = tick()
            built = build()
            t1 = tick()
            prepared = vectorize(queries, built)
            t2 = tick()
            if concurrency > 1:
                rep_query_time, latencies = _concurrent_query_phase(
                    search, prepared, built, concurrency
                )
                for qi, latency in enumerate(latencies):
                    per_query[qi].append(latency)
            else:
                rep_query_time = 0.0
                for qi, item in enumerate(prepared):
                    q0 = tick()
                    search(item, built)
                    q1 = tick()
                    per_query[qi].append(q1 - q0)
                    rep_query_time += q1 - q0
            build_times.append(t1 - t0)
            vec_times.append(t2 - t1)
            query_times.append(rep_query_time)
        cpu_elapsed = time.process_time() - cpu_start
        wall_elapsed = tick() - wall_start

        build_s = statistics.median(build_times)
        vec_s = statistics.median(vec_times)
        query_s = statistics.median(query_times)
        cpu_percent = None
        peak_memory = None
        if not deterministic:
            if wall_elapsed > 0:
                cpu_percent = round(100.0 * cpu_elapsed / wall_elapsed, 2)
            peak_memory = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024

        reports.append(
            BenchReport(
                method=method,
                total_time_s=build_s + vec_s + query_s,
                build_time_s=build_s,
                vectorization_time_s=vec_s,
                query_time_s=query_s,
                cpu_percent=cpu_percent,
                peak_memory_bytes=peak_memory,
                latencies_s=tuple(statistics.median(times) for times in per_query),
                queries=len(queries),
                env=fingerprint,
                concurrency=concurrency,
            )
        )
    return reports


def _concurrent_query_phase(search, prepared, built, workers: int):
    """Run all queries under concurrent load; wall-clock latencies per query."""
    from concurrent.futures import ThreadPoolExecutor

    def one(item):
        t0 = time.perf_counter()
        search(item, built)
        return time.perf_counter() - t0

    phase_start = time.perf_counter()
    with ThreadPoolExecutor(max_workers=workers) as pool:
        latencies = list(pool.map(one, prepared))
    return time.perf_counter() - phase_start, latencies


TABLE_ROWS = (
    ("Total Time (s)", "total_time_s"),
    ("Build (s)", "build_time_s"),
    ("Vectorization (s)", "vectorization_time_s"),
    ("Query (s)", "query_time_s"),
    ("CPU (%)", "cpu_percent"),
)


def format_table(reports: Sequence[BenchReport]) -> str:
    """Aligned plain-text table with the row labels of the comparison protocol."""
    headers = [""] + [r.method for r in reports]
    rows = []
    for label, attr in TABLE_ROWS:
        cells = [label]
        for report in reports:
            value = getattr(report, attr)
            cells.append("n/a" if value is None else f"{value:.3f}")
        rows.append(cells)
    widths = [max(len(row[i]) for row in [headers] + rows) for i in range(len(headers))]
    lines = ["  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row))
             for row in [headers] + rows]
    return "\n".join(lines)


def format_csv(reports: Sequence[BenchReport]) -> str:
    header = "method,total_time_s,build_time_s,vectorization_time_s,query_time_s,cpu_percent,peak_memory_bytes,queries"
    lines = [header]
    for r in reports:
        cpu = "" if r.cpu_percent is None else f"{r.cpu_percent}"
        mem = "" if r.peak_memory_bytes is None else f"{r.peak_memory_bytes}"
        lines.append(
            f"{r.method},{r.total_time_s:.6f},{r.build_time_s:.6f},"
            f"{r.vectorization_time_s:.6f},{r.query_time_s:.6f},{cpu},{mem},{r.queries}"
        )
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Similarity quality
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SimilarityQualityReport:
    per_query: tuple[tuple[float, ...], ...]  # top-k similarities per query
    average: float
    k: int

    def to_dict(self) -> dict:
        return {
            "per_query": [list(sims) for sims in self.per_query],
            "average": self.average,
            "k": self.k,
        }


def similarity_quality(state: RetrievalState, queries: Sequence[str],
                       k: int = 5) -> SimilarityQualityReport:
    """Average of per-query mean top-k similarity over the query set."""
    if not queries:
        raise EmptyQuerySet("similarity quality needs at least one query")
    per_query = []
    means = []
    for text in queries:
        results = run_query(state, Query(mode=QueryMode.free_text, text=text, k=k))
        sims = tuple(r.similarity for r in results)
        per_query.append(sims)
        means.append(statistics.fmean(sims) if sims else 0.0)
    return SimilarityQualityReport(
        per_query=tuple(per_query),
        average=statistics.fmean(means),
        k=k,
    )


# ---------------------------------------------------------------------------
# Scaling probe
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ScalingReport:
    method: str
    sizes: tuple[int, ...]
    median_query_s: tuple[float, ...]
    ratios: tuple[float, ...]  # t(n_{i+1}) / t(n_i)

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "sizes": list(self.sizes),
            "median_query_s": list(self.median_query_s),
            "ratios": list(self.ratios),
        }


def scaling_probe(
    sizes: Sequence[int],
    dim: int = 384,
    k: int = 10,
    method: str = "flat",
    seed: int = 0,
    n_queries: int = 16,
    repetitions: int = 3,
    clock: Optional[Callable[[], float]] = None,
) -> ScalingReport:
    """Measure median query time over synthesized repositories of each size."""
    if len(sizes) < 2 or any(b < a for a, b in zip(sizes, sizes[1:])):
        raise RangeInvalid("sizes must be a non-decreasing list with >= 2 entries")
    if method not in ("flat", "clustered"):
        raise ValueError("scaling probe supports flat and clustered methods")
    tick = clock if clock is not None else time.perf_counter

    medians = []
    for n in sizes:
        rng = np.random.default_rng(seed)
        data = rng.standard_normal((n, dim)).astype(np.float32)
        ids = [f"PMC{i:07d}" for i in range(n)]
        vectors = dict(zip(ids, data))
        if method == "flat":
            index = build_flat(vectors)
            run = lambda q: search_flat(index, q, k)
        else:
            clusters = max(2, int(np.sqrt(n)))
            cindex = build_clustered(vectors, k=clusters, seed=seed, max_iters=10)
            run = lambda q: search_clustered(cindex, q, k, probes=1)
        queries = rng.standard_normal((n_queries, dim))
        run(queries[0])  # warm caches before measuring
        samples = []
        for _ in range(repetitions):
            for qi in range(n_queries):
                t0 = tick()
                run(queries[qi])
                t1 = tick()
                samples.append(t1 - t0)
        medians.append(statistics.median(samples))

    ratios = tuple(
        medians[i + 1] / medians[i] if medians[i] > 0 else float("inf")
        for i in range(len(medians) - 1)
    )
    return ScalingReport(
        method=method,
        sizes=tuple(sizes),
        median_query_s=tuple(medians),
        ratios=ratios,
    )
