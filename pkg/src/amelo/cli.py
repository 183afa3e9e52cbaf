"""Operator entry points: extract, ingest, build-index, query, bench, serve.

Human-readable tables by default; --json emits stable, schema-versioned
output for scripts and the console. Exit codes: 0 success, 1 operation
error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from pathlib import Path

from . import bench as bench_mod
from .cases import CaseRecord, validate_case
from .engine import EngineConfig, Query, QueryMode, cascade_route, index_repository, prepare_query
from .engine import query as engine_query
from .extraction import (
    RulePack,
    build_centroids,
    default_rules,
    extract_cascade,
    extract_fields,
    load_lexicon,
)
from .gateway import DEFAULT_API_KEY_ENV, GatewayConfig, extract_via_llm
from .index import persist_index
from .service import ServiceConfig, serve
from .store import CaseStore
from .vectorize import DenseStore, load_dense_jsonl

JSON_SCHEMA_VERSION = 1

_PMCID_STEM = re.compile(r"(PMC[0-9]+)")


def _store_arg(parser: argparse.ArgumentParser) -> None:
    default = os.environ.get("AMELO_STORE_DIR")
    parser.add_argument("--store", required=default is None, default=default,
                        help="store directory (default: $AMELO_STORE_DIR)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="amelo", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_extract = sub.add_parser("extract", help="structure case-report text files")
    p_extract.add_argument("inputs", nargs="+", help="case report text files")
    p_extract.add_argument("--rules", help="rule pack JSON (default: shipped pack)")
    p_extract.add_argument("--lexicon", help="word-vector lexicon file enabling the semantic stage")
    p_extract.add_argument("--llm", action="store_true", help="route through the LLM gateway")
    p_extract.add_argument("--endpoint", help="LLM endpoint URL (with --llm)")
    p_extract.add_argument("--model", help="LLM model name (with --llm)")
    p_extract.add_argument("--pmcid", help="override the PMCID (single input only)")
    p_extract.add_argument("--out", help="write JSON here instead of stdout")
    p_extract.add_argument("--json", action="store_true", help="JSON output (always on for extract)")

    p_ingest = sub.add_parser("ingest", help="append cases / embeddings to a store")
    _store_arg(p_ingest)
    p_ingest.add_argument("--cases", help="JSON array of case records")
    p_ingest.add_argument("--embeddings", help="JSONL of {pmcid, vector}")

    p_build = sub.add_parser("build-index", help="build and persist index files")
    _store_arg(p_build)
    p_build.add_argument("--out", help="output directory (default: store dir)")

    p_query = sub.add_parser("query", help="run a similar-case query")
    _store_arg(p_query)
    p_query.add_argument("--text", help="free-text query")
    p_query.add_argument("--form-file", help="partial case record JSON (structured form)")
    p_query.add_argument("--k", type=int, default=5)
    p_query.add_argument("--json", action="store_true")

    p_bench = sub.add_parser("bench", help="run the measurement protocol")
    _store_arg(p_bench)
    p_bench.add_argument("--methods", default="sparse,clustered",
                         help="comma list of sparse,clustered,keyword,flat")
    p_bench.add_argument("--sizes", help="comma list of repo sizes: run the scaling probe instead")
    p_bench.add_argument("--repetitions", type=int, default=3)
    p_bench.add_argument("--concurrency", type=int, default=1,
                         help=">1 runs the query phase under concurrent load")
    p_bench.add_argument("--json", action="store_true")
    p_bench.add_argument("--csv", action="store_true")

    p_serve = sub.add_parser("serve", help="run the HTTP service")
    _store_arg(p_serve)
    p_serve.add_argument("--port", type=int,
                         default=int(os.environ.get("AMELO_PORT", "8040")))
    p_serve.add_argument("--host", default="127.0.0.1")

    return parser


def parse_args(argv) -> argparse.Namespace:
    return build_parser().parse_args(argv)


def _emit(data: dict, out: str | None) -> None:
    text = json.dumps(data, indent=2, sort_keys=True)
    if out:
        Path(out).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)


def _load_state(store_dir: str):
    store = CaseStore(store_dir)
    if not store.cases:
        raise ValueError("EmptyInput: store has no cases")
    dense = DenseStore()
    if store.embeddings_path.exists():
        load_dense_jsonl(store.embeddings_path, dense)
    state = index_repository(store.cases.values(), dense, config=EngineConfig())
    return store, state


def cmd_extract(args) -> int:
    if args.pmcid and len(args.inputs) > 1:
        print("--pmcid only applies to a single input file", file=sys.stderr)
        return 2
    rules = RulePack.from_file(args.rules) if args.rules else default_rules()
    lexicon = load_lexicon(args.lexicon) if args.lexicon else None
    centroids = build_centroids(rules.keywords, lexicon) if lexicon else None

    output: dict[str, dict] = {}
    for path in args.inputs:
        text = Path(path).read_text(encoding="utf-8")
        stem_match = _PMCID_STEM.search(Path(path).stem)
        pmcid = args.pmcid or (stem_match.group(1) if stem_match else "PMC0")
        if args.llm:
            if not args.endpoint or not args.model:
                print("--llm requires --endpoint and --model", file=sys.stderr)
                return 2
            config = GatewayConfig(endpoint=args.endpoint, model=args.model,
                                   api_key_env=DEFAULT_API_KEY_ENV)
            record = extract_via_llm(config, text, pmcid)
            output[pmcid] = record.to_dict()
        elif centroids is not None:
            result = extract_cascade(text, rules, centroids, lexicon, pmcid=pmcid)
            output[pmcid] = result.to_dict()["fields"]
        else:
            result = extract_fields(text, rules, pmcid=pmcid)
            output[pmcid] = result.to_dict()["fields"]

    _emit({"schema_version": JSON_SCHEMA_VERSION, "extractions": output}, args.out)
    return 0


def cmd_ingest(args) -> int:
    store = CaseStore(args.store)
    ingested_cases = 0
    if args.cases:
        payload = json.loads(Path(args.cases).read_text(encoding="utf-8"))
        if not isinstance(payload, list):
            raise ValueError("cases file must hold a JSON array of records")
        records = [CaseRecord.from_dict(item) for item in payload]
        for record in records:
            violations = validate_case(record)
            if violations:
                raise ValueError(f"{record.pmcid}: " + "; ".join(violations))
        for record in records:
            store.put_case(record)
            ingested_cases += 1
    ingested_vectors = 0
    if args.embeddings:
        dense = DenseStore()
        ingested_vectors = load_dense_jsonl(args.embeddings, dense)
        store.append_embeddings(Path(args.embeddings).read_text(encoding="utf-8"))
    print(f"ingested {ingested_cases} cases, {ingested_vectors} embeddings")
    return 0


def cmd_build_index(args) -> int:
    _, state = _load_state(args.store)
    out_dir = Path(args.out or args.store)
    out_dir.mkdir(parents=True, exist_ok=True)

    from .index import build_sparse

    written = []
    sparse_index = build_sparse(state.sparse)
    persist_index(sparse_index, out_dir / "sparse.amci")
    written.append("sparse.amci")
    (out_dir / "tfidf.json").write_text(
        json.dumps(
            {
                "vocabulary": state.tfidf.vocabulary,
                "idf": list(state.tfidf.idf),
                "max_features": state.tfidf.max_features,
                "stopwords_id": state.tfidf.stopwords_id,
            },
            sort_keys=True,
        ),
        encoding="utf-8",
    )
    written.append("tfidf.json")
    if state.flat is not None:
        persist_index(state.flat, out_dir / "flat.amci")
        written.append("flat.amci")
    if state.clustered is not None:
        persist_index(state.clustered, out_dir / "clustered.amci")
        written.append("clustered.amci")
    print("wrote " + ", ".join(written))
    return 0


def cmd_query(args) -> int:
    if bool(args.text) == bool(args.form_file):
        print("exactly one of --text / --form-file is required", file=sys.stderr)
        return 2
    _, state = _load_state(args.store)
    if args.text:
        q = Query(mode=QueryMode.free_text, text=args.text, k=args.k)
    else:
        form_payload = json.loads(Path(args.form_file).read_text(encoding="utf-8"))
        form_payload.setdefault("pmcid", "PMC0")
        q = Query(mode=QueryMode.structured_form, form=CaseRecord.from_dict(form_payload), k=args.k)

    results = engine_query(state, q)
    method = cascade_route(state, prepare_query(state, q))

    if args.json:
        _emit(
            {
                "schema_version": JSON_SCHEMA_VERSION,
                "method": method.value,
                "results": [r.to_dict() for r in results],
            },
            None,
        )
        return 0
    print(f"method: {method.value}")
    if not results:
        print("no matches")
        return 0
    for r in results:
        summary = r.summary
        size = " x ".join(f"{v:g}" for v in summary.tumor_size_mm) or "unknown"
        print(
            f"{r.rank}. {r.pmcid}  similarity={r.similarity:.2f}  "
            f"diagnosis={summary.diagnosis or 'unknown'}  treatment={summary.treatment or 'unknown'}  "
            f"size={size} mm  age={summary.patient_age}  gender={summary.patient_gender}"
        )
    return 0


def cmd_bench(args) -> int:
    if args.sizes:
        sizes = [int(s) for s in args.sizes.split(",") if s]
        report = bench_mod.scaling_probe(sizes)
        if args.json:
            _emit({"schema_version": JSON_SCHEMA_VERSION, "scaling": report.to_dict()}, None)
        else:
            for n, t in zip(report.sizes, report.median_query_s):
                print(f"n={n}: median query {t * 1000:.3f} ms")
            for i, ratio in enumerate(report.ratios):
                print(f"t({report.sizes[i + 1]})/t({report.sizes[i]}) = {ratio:.2f}")
        return 0

    store, state = _load_state(args.store)
    methods = [m.strip() for m in args.methods.split(",") if m.strip()]
    queries = list(bench_mod.DEFAULT_QUERY_SET)
    reports = bench_mod.run_bench(
        state, methods, queries,
        repetitions=args.repetitions, concurrency=args.concurrency,
    )
    quality = bench_mod.similarity_quality(state, queries, k=5)
    payload = {
        "schema_version": JSON_SCHEMA_VERSION,
        "reports": [r.to_dict() for r in reports],
        "similarity_quality": quality.to_dict(),
    }
    store.bench_path.write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    if args.csv:
        print(bench_mod.format_csv(reports))
    elif args.json:
        _emit(payload, None)
    else:
        print(bench_mod.format_table(reports))
        print(f"Average top-5 similarity over the query set: {quality.average:.3f}")
    return 0


def cmd_serve(args) -> int:
    serve(ServiceConfig(store_dir=args.store, port=args.port, host=args.host))
    return 0


_HANDLERS = {
    "extract": cmd_extract,
    "ingest": cmd_ingest,
    "build-index": cmd_build_index,
    "query": cmd_query,
    "bench": cmd_bench,
    "serve": cmd_serve,
}


def run(args: argparse.Namespace) -> int:
    try:
        return _HANDLERS[args.command](args)
    except Exception as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def main(argv=None) -> int:
    args = parse_args(argv if argv is not None else sys.argv[1:])
    return run(args)


if __name__ == "__main__":
    sys.exit(main())
