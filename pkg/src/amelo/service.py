"""HTTP service: case CRUD, image metadata, query, ingestion, rebuild, bench.

Single-node semantics: every mutation is durable in the store log before
the 2xx goes out, reads see their own writes immediately, and queries run
against an immutable snapshot that only an explicit rebuild replaces.
Error bodies are always {code, message, path}.
"""

from __future__ import annotations

import base64
import json
import socket
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from fastapi import FastAPI, Request
from fastapi.responses import JSONResponse

from .cases import CaseRecord, ImageRecord, validate_case, validate_image
from .engine import (
    EmptyQuery,
    EmptyRepository,
    EngineConfig,
    Query,
    QueryMode,
    RetrievalState,
    cascade_route,
    index_repository,
    prepare_query,
    query as engine_query,
)
from .store import CaseStore, DuplicateCase, UnknownImage, UnknownPmcid
from .vectorize import DenseStore, DimensionMismatch, NonFiniteValue, load_dense_jsonl


class PortInUse(OSError):
    pass


class ApiError(Exception):
    def __init__(self, status: int, code: str, message: str, path: str = ""):
        super().__init__(message)
        self.status = status
        self.code = code
        self.message = message
        self.path = path


@dataclass
class ServiceConfig:
    store_dir: str | Path
    port: int = 8040
    host: str = "127.0.0.1"
    blocking_rebuild: bool = False
    engine: EngineConfig = EngineConfig()


def _build_snapshot(store: CaseStore, dense: DenseStore,
                    engine_config: EngineConfig) -> Optional[RetrievalState]:
    if not store.cases:
        return None
    return index_repository(store.cases.values(), dense, config=engine_config)


def create_app(config: ServiceConfig) -> FastAPI:
    store = CaseStore(config.store_dir)  # CorruptLog propagates: refuse to start
    dense = DenseStore()
    if store.embeddings_path.exists():
        load_dense_jsonl(store.embeddings_path, dense)

    app = FastAPI(title="amelo case retrieval service")
    app.state.store = store
    app.state.dense = dense
    app.state.snapshot = _build_snapshot(store, dense, config.engine)
    app.state.rebuilding = False
    app.state.config = config
    rebuild_lock = threading.Lock()

    @app.exception_handler(ApiError)
    async def api_error_handler(_request: Request, exc: ApiError):
        return JSONResponse(
            status_code=exc.status,
            content={"code": exc.code, "message": exc.message, "path": exc.path},
        )

    def parse_case_body(payload: dict) -> CaseRecord:
        if not isinstance(payload, dict):
            raise ApiError(400, "schema_violation", "body must be a JSON object", "$")
        try:
            record = CaseRecord.from_dict(payload)
        except (KeyError, ValueError, TypeError) as exc:
            field = "pmcid" if isinstance(exc, KeyError) else "$"
            raise ApiError(400, "schema_violation", f"malformed case record: {exc}", field)
        violations = validate_case(record)
        if violations:
            path = violations[0].split(":", 1)[0]
            raise ApiError(400, "schema_violation", "; ".join(violations), path)
        return record

    def parse_image_body(payload: dict) -> tuple[ImageRecord, Optional[bytes]]:
        if not isinstance(payload, dict):
            raise ApiError(400, "schema_violation", "body must be a JSON object", "$")
        blob: Optional[bytes] = None
        blob_b64 = payload.pop("blob_base64", None)
        if blob_b64 is not None:
            try:
                blob = base64.b64decode(blob_b64, validate=True)
            except Exception as exc:
                raise ApiError(400, "schema_violation", f"bad blob encoding: {exc}", "blob_base64")
        try:
            image = ImageRecord.from_dict(payload)
        except (KeyError, ValueError, TypeError) as exc:
            raise ApiError(400, "schema_violation", f"malformed image record: {exc}", "$")
        violations = validate_image(image)
        if violations:
            path = violations[0].split(":", 1)[0]
            raise ApiError(400, "schema_violation", "; ".join(violations), path)
        return image, blob

    # -- health and cases ----------------------------------------------------

    @app.get("/health")
    def health():
        return {"status": "ok", "cases": len(store.cases)}

    @app.get("/cases")
    def list_cases(offset: int = 0, limit: Optional[int] = None):
        records = store.list_cases(offset=offset, limit=limit)
        return {"total": len(store.cases), "cases": [r.to_dict() for r in records]}

    @app.post("/cases", status_code=201)
    async def create_case(request: Request):
        record = parse_case_body(await request.json())
        try:
            store.put_case(record, create_only=True)
        except DuplicateCase:
            raise ApiError(409, "duplicate_case", f"{record.pmcid} already exists", "pmcid")
        return record.to_dict()

    @app.get("/cases/{pmcid}")
    def read_case(pmcid: str):
        record = store.get_case(pmcid)
        if record is None:
            raise ApiError(404, "unknown_pmcid", f"no case {pmcid}", "pmcid")
        return record.to_dict()

    @app.put("/cases/{pmcid}")
    async def update_case(pmcid: str, request: Request):
        record = parse_case_body(await request.json())
        if record.pmcid != pmcid:
            raise ApiError(400, "schema_violation", "pmcid in body must match the URL", "pmcid")
        try:
            store.update_case(record)
        except UnknownPmcid:
            raise ApiError(404, "unknown_pmcid", f"no case {pmcid}", "pmcid")
        return record.to_dict()

    @app.delete("/cases/{pmcid}")
    def delete_case(pmcid: str):
        try:
            store.delete_case(pmcid)
        except UnknownPmcid:
            raise ApiError(404, "unknown_pmcid", f"no case {pmcid}", "pmcid")
        return {"deleted": pmcid}

    # -- image metadata --------------------------------------------------------

    @app.get("/cases/{pmcid}/images")
    def case_images(pmcid: str):
        if store.get_case(pmcid) is None:
            raise ApiError(404, "unknown_pmcid", f"no case {pmcid}", "pmcid")
        return {"images": [img.to_dict() for img in store.images_for(pmcid)]}

    @app.post("/images", status_code=201)
    async def create_image(request: Request):
        image, blob = parse_image_body(await request.json())
        if blob is not None:
            image = ImageRecord.from_dict({**image.to_dict(), "file_path": store.store_blob(blob)})
        try:
            store.put_image(image)
        except UnknownPmcid:
            raise ApiError(404, "unknown_pmcid", f"no case {image.pmcid}", "pmcid")
        return image.to_dict()

    @app.put("/images/{image_id}")
    async def update_image(image_id: str, request: Request):
        image, blob = parse_image_body(await request.json())
        if image.image_id != image_id:
            raise ApiError(400, "schema_violation", "image_id in body must match the URL", "image_id")
        if image_id not in store.images:
            raise ApiError(404, "unknown_image", f"no image {image_id}", "image_id")
        if blob is not None:
            image = ImageRecord.from_dict({**image.to_dict(), "file_path": store.store_blob(blob)})
        try:
            store.put_image(image)
        except UnknownPmcid:
            raise ApiError(404, "unknown_pmcid", f"no case {image.pmcid}", "pmcid")
        return image.to_dict()

    @app.delete("/images/{image_id}")
    def delete_image(image_id: str):
        try:
            store.delete_image(image_id)
        except UnknownImage:
            raise ApiError(404, "unknown_image", f"no image {image_id}", "image_id")
        return {"deleted": image_id}

    # -- query, rebuild, ingestion, bench -------------------------------------

    @app.post("/query")
    async def post_query(request: Request):
        if app.state.rebuilding and config.blocking_rebuild:
            raise ApiError(503, "index_rebuilding", "index rebuild in progress", "/query")
        payload = await request.json()
        if not isinstance(payload, dict):
            raise ApiError(400, "schema_violation", "body must be a JSON object", "$")
        try:
            mode = QueryMode(payload.get("mode", "free_text"))
        except ValueError:
            raise ApiError(400, "schema_violation", "mode must be free_text or structured_form", "mode")
        k = payload.get("k", config.engine.k_default)
        if not isinstance(k, int) or k < 1:
            raise ApiError(400, "schema_violation", "k must be a positive integer", "k")
        form = None
        if mode is QueryMode.structured_form:
            form_payload = payload.get("form")
            if not isinstance(form_payload, dict):
                raise ApiError(400, "schema_violation", "structured_form needs a form object", "form")
            form_payload.setdefault("pmcid", "PMC0")
            form = parse_case_body(form_payload)
        vector = payload.get("vector")
        if vector is not None and not isinstance(vector, list):
            raise ApiError(400, "schema_violation", "vector must be a list of floats", "vector")

        snapshot: Optional[RetrievalState] = app.state.snapshot
        if snapshot is None:
            return {"results": [], "method": None}
        q = Query(
            mode=mode,
            text=payload.get("text") or "",
            form=form,
            k=k,
            vector=tuple(vector) if vector else None,
        )
        try:
            prepared = prepare_query(snapshot, q)
            results = engine_query(snapshot, q)
        except EmptyQuery:
            raise ApiError(400, "empty_query", "query carries no text", "text")
        except EmptyRepository:
            return {"results": [], "method": None}
        method = cascade_route(snapshot, prepared)
        return {"results": [r.to_dict() for r in results], "method": method.value}

    @app.post("/index/rebuild")
    def rebuild_index():
        with rebuild_lock:
            app.state.rebuilding = True
            try:
                app.state.snapshot = _build_snapshot(store, dense, config.engine)
            finally:
                app.state.rebuilding = False
        count = app.state.snapshot.count if app.state.snapshot else 0
        return {"indexed": count}

    @app.post("/embeddings/ingest")
    async def ingest_embeddings(request: Request):
        body = (await request.body()).decode("utf-8")
        rows = []
        for lineno, line in enumerate(body.splitlines(), start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
                rows.append((row["pmcid"], row["vector"]))
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ApiError(400, "schema_violation", f"line {lineno}: {exc}", f"line {lineno}")
        # validate the whole batch against the live dimension before applying
        probe = DenseStore(dimension=dense.dimension)
        for pmcid, vector in rows:
            try:
                probe.ingest(pmcid, vector)
            except (DimensionMismatch, NonFiniteValue, ValueError) as exc:
                raise ApiError(400, "schema_violation", f"{pmcid}: {exc}", pmcid)
        for pmcid, vector in rows:
            dense.ingest(pmcid, vector)
        store.append_embeddings(
            "\n".join(json.dumps({"pmcid": p, "vector": list(map(float, v))}) for p, v in rows)
        )
        return {"ingested": len(rows)}

    @app.get("/bench/latest")
    def bench_latest():
        if not store.bench_path.exists():
            raise ApiError(404, "no_bench_report", "no benchmark report recorded", "/bench/latest")
        return json.loads(store.bench_path.read_text("utf-8"))

    return app


def serve(config: ServiceConfig) -> None:
    """Run the service; raises PortInUse before handing off to the server."""
    import uvicorn

    probe = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        probe.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        probe.bind((config.host, config.port))
    except OSError as exc:
        raise PortInUse(f"port {config.port} is not free: {exc}") from exc
    finally:
        probe.close()

    app = create_app(config)
    uvicorn.run(app, host=config.host, port=config.port, log_level="warning")
