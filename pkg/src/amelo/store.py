"""Durable case store: append-only JSONL mutation log with tombstones.

The materialized maps are always the fold of the log, so crash recovery is
a replay. Every mutation is flushed and fsynced before the caller sees
success. A torn final line (the telltale of a crash mid-append) is ignored
on replay; a corrupt line anywhere else refuses to load.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from collections import defaultdict
from pathlib import Path
from typing import Optional

from .cases import CaseRecord, ImageRecord

LOG_NAME = "cases.log"
BLOB_DIR = "blobs"
EMBEDDINGS_NAME = "embeddings.jsonl"
BENCH_NAME = "bench_latest.json"


class CorruptLog(RuntimeError):
    def __init__(self, message: str, line: int):
        super().__init__(message)
        self.line = line


class DuplicateCase(KeyError):
    pass


class UnknownPmcid(KeyError):
    pass


class UnknownImage(KeyError):
    pass


class CaseStore:
    """Single-writer store; mutations are serialized through one lock."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self.log_path = self.root / LOG_NAME
        self.blob_dir = self.root / BLOB_DIR
        self.cases: dict[str, CaseRecord] = {}
        self.images: dict[str, ImageRecord] = {}
        self.images_by_case: dict[str, set[str]] = defaultdict(set)
        self._seq = 0
        self._lock = threading.Lock()
        self._replay()
        self._log = open(self.log_path, "a", encoding="utf-8")

    # -- replay ------------------------------------------------------------

    def _replay(self) -> None:
        if not self.log_path.exists():
            return
        raw = self.log_path.read_bytes()
        if not raw:
            return
        lines = raw.split(b"\n")
        # a crash mid-append leaves unterminated bytes after the last newline
        complete, tail = lines[:-1], lines[-1]
        for lineno, line in enumerate(complete, start=1):
            if not line.strip():
                continue
            try:
                entry = json.loads(line)
                self._apply(entry)
            except (json.JSONDecodeError, KeyError, ValueError) as exc:
                raise CorruptLog(f"log line {lineno} is corrupt: {exc}", line=lineno) from exc
        if tail.strip():
            # torn final line: drop it so the next append starts clean
            with open(self.log_path, "r+b") as fh:
                fh.truncate(len(raw) - len(tail))

    def _apply(self, entry: dict) -> None:
        op = entry["op"]
        data = entry.get("data", {})
        self._seq = max(self._seq, int(entry.get("seq", 0)))
        if op == "put_case":
            record = CaseRecord.from_dict(data)
            self.cases[record.pmcid] = record
        elif op == "delete_case":
            pmcid = data["pmcid"]
            self.cases.pop(pmcid, None)
            for image_id in self.images_by_case.pop(pmcid, set()):
                self.images.pop(image_id, None)
        elif op == "put_image":
            image = ImageRecord.from_dict(data)
            self.images[image.image_id] = image
            self.images_by_case[image.pmcid].add(image.image_id)
        elif op == "delete_image":
            image = self.images.pop(data["image_id"], None)
            if image is not None:
                self.images_by_case[image.pmcid].discard(image.image_id)
        else:
            raise ValueError(f"unknown log op {op!r}")

    # -- durable append ----------------------------------------------------

    def _append(self, op: str, data: dict) -> None:
        self._seq += 1
        entry = {"seq": self._seq, "op": op, "data": data}
        self._log.write(json.dumps(entry, separators=(",", ":"), sort_keys=True) + "\n")
        self._log.flush()
        os.fsync(self._log.fileno())
        self._apply(entry)

    # -- mutations (durable before return) ----------------------------------

    def put_case(self, record: CaseRecord, create_only: bool = False) -> None:
        with self._lock:
            if create_only and record.pmcid in self.cases:
                raise DuplicateCase(record.pmcid)
            self._append("put_case", record.to_dict())

    def update_case(self, record: CaseRecord) -> None:
        with self._lock:
            if record.pmcid not in self.cases:
                raise UnknownPmcid(record.pmcid)
            self._append("put_case", record.to_dict())

    def delete_case(self, pmcid: str) -> None:
        with self._lock:
            if pmcid not in self.cases:
                raise UnknownPmcid(pmcid)
            self._append("delete_case", {"pmcid": pmcid})

    def put_image(self, image: ImageRecord) -> None:
        with self._lock:
            if image.pmcid not in self.cases:
                raise UnknownPmcid(image.pmcid)
            self._append("put_image", image.to_dict())

    def delete_image(self, image_id: str) -> None:
        with self._lock:
            if image_id not in self.images:
                raise UnknownImage(image_id)
            self._append("delete_image", {"image_id": image_id})

    def store_blob(self, payload: bytes) -> str:
        """Content-addressed blob write; returns the relative path."""
        digest = hashlib.sha256(payload).hexdigest()
        self.blob_dir.mkdir(parents=True, exist_ok=True)
        path = self.blob_dir / digest
        if not path.exists():
            tmp = path.with_suffix(".tmp")
            tmp.write_bytes(payload)
            tmp.replace(path)
        return f"{BLOB_DIR}/{digest}"

    # -- reads ---------------------------------------------------------------

    def get_case(self, pmcid: str) -> Optional[CaseRecord]:
        return self.cases.get(pmcid)

    def list_cases(self, offset: int = 0, limit: Optional[int] = None) -> list[CaseRecord]:
        ordered = sorted(self.cases)
        window = ordered[offset: offset + limit if limit is not None else None]
        return [self.cases[p] for p in window]

    def images_for(self, pmcid: str) -> list[ImageRecord]:
        return [self.images[i] for i in sorted(self.images_by_case.get(pmcid, ()))]

    @property
    def embeddings_path(self) -> Path:
        return self.root / EMBEDDINGS_NAME

    @property
    def bench_path(self) -> Path:
        return self.root / BENCH_NAME

    def append_embeddings(self, jsonl_text: str) -> int:
        """Append raw ingestion lines after they parsed cleanly elsewhere."""
        lines = [line for line in jsonl_text.splitlines() if line.strip()]
        with self._lock, open(self.embeddings_path, "a", encoding="utf-8") as fh:
            for line in lines:
                fh.write(line + "\n")
            fh.flush()
            os.fsync(fh.fileno())
        return len(lines)

    def close(self) -> None:
        self._log.close()
