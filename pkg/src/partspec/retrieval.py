"""Knowledge-base ingestion, deterministic embedding, and exact top-k search.

The index is a frozen flat matrix of unit-norm vectors scanned exhaustively,
so every search result can be checked against a brute-force oracle. Build is
single-writer; a built index is immutable and safe for concurrent readers.
"""

from __future__ import annotations

import csv
import json
import logging
import struct
import time
import zlib
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Protocol, runtime_checkable

import numpy as np

logger = logging.getLogger(__name__)

__all__ = [
    "DEFAULT_DIMENSION",
    "DEFAULT_K",
    "DEFAULT_THRESHOLD",
    "EmbedderUnavailable",
    "FormatError",
    "PartRecord",
    "Hit",
    "RetrievedContext",
    "Embedder",
    "HashTrigramEmbedder",
    "HttpEmbedder",
    "FlatIndex",
    "flatten_record",
    "ingest_records",
    "embed_text",
    "search_top_k",
]

DEFAULT_DIMENSION = 384
DEFAULT_K = 5
DEFAULT_THRESHOLD = 0.25

INDEX_MAGIC = b"SFIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, version, count, dim
VECTORS_FILENAME = "vectors.sfix"
MANIFEST_FILENAME = "manifest.json"


class FormatError(ValueError):
    """Malformed knowledge-base input; carries the offending location."""

    def __init__(self, location: str, reason: str) -> None:
        super().__init__(f"{location}: {reason}")
        self.location = location
        self.reason = reason


class EmbedderUnavailable(RuntimeError):
    """A remote embedder kept failing after its retry budget."""


@dataclass(frozen=True)
class PartRecord:
    """One knowledge-base entry: the retrieval corpus unit."""

    record_id: str
    flat_text: str
    source: str
    raw_fields: Mapping[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class Hit:
    record_id: str
    similarity: float
    snippet: str

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id, "similarity": self.similarity, "snippet": self.snippet}


@dataclass(frozen=True)
class RetrievedContext:
    """Top-k retrieval outcome handed to prompt builders and synthesis."""

    hits: tuple[Hit, ...]
    query_text: str
    k_requested: int
    threshold_applied: float

    def to_dict(self) -> dict[str, Any]:
        return {
            "hits": [hit.to_dict() for hit in self.hits],
            "query_text": self.query_text,
            "k_requested": self.k_requested,
            "threshold_applied": self.threshold_applied,
        }

    @classmethod
    def empty(cls, query_text: str, k: int, threshold: float) -> RetrievedContext:
        return cls((), query_text, k, threshold)


def flatten_record(raw_fields: Mapping[str, Any]) -> str:
    """Render a record's fields as one deterministic embedding string.

    Keys are sorted lexicographically after nested maps are expanded to
    dotted paths; entries render as "key: value" joined by " | ".
    """
    return " | ".join(f"{key}: {value}" for key, value in sorted(_flat_items(raw_fields)))


def _flat_items(mapping: Mapping[str, Any], prefix: str = "") -> list[tuple[str, str]]:
    items: list[tuple[str, str]] = []
    for key, value in mapping.items():
        path = f"{prefix}.{key}" if prefix else str(key)
        if isinstance(value, Mapping):
            items.extend(_flat_items(value, path))
        else:
            items.append((path, _render_value(value)))
    return items


def _render_value(value: Any) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_render_value(item) for item in value)
    return str(value)


def ingest_records(path: str | Path, format: str | None = None) -> list[PartRecord]:
    """Load part records from a CSV (header row) or JSON array file.

    Record ids come from an explicit "id" column/key when present, otherwise
    "<filename>:<ordinal>". Malformed rows are skipped and reported through
    the module logger; only file-level problems raise FormatError.
    """
    path = Path(path)
    if format is None:
        suffix = path.suffix.lower()
        if suffix == ".csv":
            format = "csv"
        elif suffix == ".json":
            format = "json"
        else:
            raise FormatError(str(path), f"cannot infer format from suffix {suffix!r}")
    if format not in ("csv", "json"):
        raise FormatError(str(path), f"unsupported format {format!r}")

    if format == "csv":
        rows = _read_csv_rows(path)
    else:
        rows = _read_json_rows(path)

    records: list[PartRecord] = []
    seen_ids: set[str] = set()
    for ordinal, raw_fields in rows:
        location = f"{path.name}:{ordinal}"
        explicit = raw_fields.get("id")
        record_id = str(explicit) if explicit not in (None, "") else location
        if record_id in seen_ids:
            logger.warning("%s", FormatError(location, f"duplicate record id {record_id!r}; skipped"))
            continue
        seen_ids.add(record_id)
        records.append(
            PartRecord(
                record_id=record_id,
                flat_text=flatten_record(raw_fields),
                source=location,
                raw_fields=raw_fields,
            )
        )
    return records


def _read_csv_rows(path: Path) -> list[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(str(path), "CSV file has no header row") from None
        rows: list[tuple[int, dict[str, Any]]] = []
        for ordinal, row in enumerate(reader):
            if len(row) != len(header):
                logger.warning(
                    "%s",
                    FormatError(
                        f"{path.name}:{ordinal}",
                        f"expected {len(header)} columns, found {len(row)}; row skipped",
                    ),
                )
                continue
            rows.append((ordinal, dict(zip(header, row))))
    return rows


def _read_json_rows(path: Path) -> list[tuple[int, dict[str, Any]]]:
    with open(path, encoding="utf-8") as fh:
        try:
            data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(str(path), f"invalid JSON: {exc}") from None
    if not isinstance(data, list):
        raise FormatError(str(path), "top-level JSON value must be an array of objects")
    rows: list[tuple[int, dict[str, Any]]] = []
    for ordinal, element in enumerate(data):
        if not isinstance(element, Mapping):
            logger.warning(
                "%s",
                FormatError(f"{path.name}:{ordinal}", "element is not an object; skipped"),
            )
            continue
        rows.append((ordinal, dict(element)))
    return rows


@runtime_checkable
class Embedder(Protocol):
    """Anything that maps text to a fixed-dimension dense vector."""

    dimension: int

    def embed(self, text: str) -> np.ndarray: ...


@dataclass(frozen=True)
class HashTrigramEmbedder:
    """Deterministic test embedder: hashed character trigrams, L2-normalized.

    Texts are padded with '#' boundary markers before the trigram scan so
    even one-character inputs produce a non-zero vector; empty text maps to
    the first basis vector. No model download, bit-stable across runs.
    """

    dimension: int = DEFAULT_DIMENSION

    def embed(self, text: str) -> np.ndarray:
        counts = np.zeros(self.dimension, dtype=np.float64)
        if not text:
            counts[0] = 1.0
            return counts.astype(np.float32)
        padded = f"##{text}##"
        for i in range(len(padded) - 2):
            bucket = zlib.crc32(padded[i : i + 3].encode("utf-8")) % self.dimension
            counts[bucket] += 1.0
        counts /= np.linalg.norm(counts)
        return counts.astype(np.float32)

    def spec(self) -> dict[str, Any]:
        return {"kind": "hash_trigram", "dimension": self.dimension}


@dataclass(frozen=True)
class HttpEmbedder:
    """Remote embedder speaking the common embeddings POST shape.

    Sends {"model": ..., "input": [text]} and reads data[0].embedding from
    the response. Transient failures are retried with exponential backoff;
    running out of attempts raises EmbedderUnavailable.
    """

    endpoint: str
    dimension: int = DEFAULT_DIMENSION
    model: str = ""
    credentials_env: str | None = None
    timeout: float = 30.0
    max_retries: int = 2

    def embed(self, text: str, sleep=time.sleep, env: Mapping[str, str] | None = None) -> np.ndarray:
        import os

        import requests

        environ = os.environ if env is None else env
        headers = {}
        if self.credentials_env:
            key = environ.get(self.credentials_env)
            if not key:
                raise EmbedderUnavailable(
                    f"credentials variable {self.credentials_env!r} is not set"
                )
            headers["Authorization"] = f"Bearer {key}"
        payload: dict[str, Any] = {"input": [text]}
        if self.model:
            payload["model"] = self.model

        delay = 0.5
        last_error: Exception | None = None
        for attempt in range(self.max_retries + 1):
            if attempt:
                sleep(delay)
                delay *= 2.0
            try:
                response = requests.post(
                    self.endpoint, json=payload, headers=headers, timeout=self.timeout
                )
                response.raise_for_status()
                vector = response.json()["data"][0]["embedding"]
                array = np.asarray(vector, dtype=np.float32)
                if array.shape != (self.dimension,):
                    raise EmbedderUnavailable(
                        f"embedder returned dimension {array.shape}, expected {self.dimension}"
                    )
                return array
            except EmbedderUnavailable:
                raise
            except Exception as exc:  # noqa: BLE001 - every transport error is retryable here
                last_error = exc
        raise EmbedderUnavailable(f"embedder failed after {self.max_retries + 1} attempts: {last_error}")

    def spec(self) -> dict[str, Any]:
        return {
            "kind": "http",
            "endpoint": self.endpoint,
            "dimension": self.dimension,
            "model": self.model,
            "credentials_env": self.credentials_env,
        }


def embed_text(text: str, embedder: Embedder) -> np.ndarray:
    """Embed text into a unit-norm float32 vector of the embedder's dimension."""
    vector = np.asarray(embedder.embed(text), dtype=np.float64)
    if vector.ndim != 1 or vector.shape[0] != embedder.dimension:
        raise ValueError(
            f"embedder produced shape {vector.shape}, expected ({embedder.dimension},)"
        )
    norm = np.linalg.norm(vector)
    if norm == 0.0 or not np.isfinite(norm):
        raise ValueError("embedder produced a zero or non-finite vector")
    return (vector / norm).astype(np.float32)


class FlatIndex:
    """Exact cosine-similarity index: a frozen matrix scanned in full.

    No approximation anywhere, so results are comparable one-to-one with a
    brute-force oracle. Ties on similarity break by record id ascending.
    """

    def __init__(
        self,
        matrix: np.ndarray,
        record_ids: Sequence[str],
        flat_texts: Sequence[str],
        sources: Sequence[str],
        embedder: Embedder,
    ) -> None:
        if matrix.ndim != 2:
            raise ValueError("matrix must be 2-D")
        if not (len(record_ids) == len(flat_texts) == len(sources) == matrix.shape[0]):
            raise ValueError("metadata length does not match matrix rows")
        if len(set(record_ids)) != len(record_ids):
            raise ValueError("record ids must be unique within an index")
        self._matrix = matrix
        self._record_ids = tuple(record_ids)
        self._flat_texts = tuple(flat_texts)
        self._sources = tuple(sources)
        self._embedder = embedder
        self._id_array = np.asarray(self._record_ids, dtype=np.str_) if record_ids else np.empty(0)

    @classmethod
    def build(cls, records: Sequence[PartRecord], embedder: Embedder) -> FlatIndex:
        """Embed every record's flat text and freeze the result."""
        ids = [record.record_id for record in records]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate record ids in corpus")
        if records:
            matrix = np.stack([embed_text(record.flat_text, embedder) for record in records])
        else:
            matrix = np.empty((0, embedder.dimension), dtype=np.float32)
        return cls(
            matrix,
            ids,
            [record.flat_text for record in records],
            [record.source for record in records],
            embedder,
        )

    @property
    def count(self) -> int:
        return self._matrix.shape[0]

    @property
    def dimension(self) -> int:
        return self._matrix.shape[1]

    @property
    def embedder(self) -> Embedder:
        return self._embedder

    def search(self, query_text: str, k: int, threshold: float) -> RetrievedContext:
        """Return the k highest-cosine records at or above the threshold."""
        if k < 0:
            raise ValueError("k must be >= 0")
        if self.count == 0:
            logger.warning("IndexEmpty: search over an empty index returns no hits")
            return RetrievedContext.empty(query_text, k, threshold)
        query = embed_text(query_text, self._embedder)
        similarities = self._matrix @ query
        # Primary key: similarity descending; secondary: record id ascending.
        order = np.lexsort((self._id_array, -similarities))
        hits: list[Hit] = []
        for row in order:
            if len(hits) >= k:
                break
            similarity = float(similarities[row])
            if similarity < threshold:
                break
            hits.append(Hit(self._record_ids[row], similarity, self._flat_texts[row]))
        return RetrievedContext(tuple(hits), query_text, k, threshold)

    def save(self, directory: str | Path) -> None:
        """Persist as a binary vector blob plus a JSON manifest.

        Blob layout: 16-byte header (magic "SFIX", version u32, count u32,
        dim u32, all little-endian) followed by row-major little-endian
        float32 vectors. The round trip is bit-exact.
        """
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        blob = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.count, self.dimension)
        blob += np.ascontiguousarray(self._matrix, dtype="<f4").tobytes()
        (directory / VECTORS_FILENAME).write_bytes(blob)
        manifest = {
            "version": INDEX_VERSION,
            "dimension": self.dimension,
            "embedder": self._embedder.spec() if hasattr(self._embedder, "spec") else None,
            "records": [
                {"record_id": rid, "flat_text": text, "source": source}
                for rid, text, source in zip(self._record_ids, self._flat_texts, self._sources)
            ],
        }
        (directory / MANIFEST_FILENAME).write_text(
            json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, directory: str | Path, embedder: Embedder | None = None) -> FlatIndex:
        """Reload a persisted index; the embedder is rebuilt from the manifest
        unless one is supplied explicitly."""
        directory = Path(directory)
        blob = (directory / VECTORS_FILENAME).read_bytes()
        if len(blob) < _HEADER.size:
            raise ValueError(f"{directory}: vector blob shorter than its header")
        magic, version, count, dim = _HEADER.unpack_from(blob)
        if magic != INDEX_MAGIC:
            raise ValueError(f"{directory}: bad magic {magic!r}")
        if version != INDEX_VERSION:
            raise ValueError(f"{directory}: unsupported index version {version}")
        body = blob[_HEADER.size :]
        expected = count * dim * 4
        if len(body) != expected:
            raise ValueError(f"{directory}: blob payload is {len(body)} bytes, expected {expected}")
        matrix = np.frombuffer(body, dtype="<f4").reshape(count, dim)

        manifest = json.loads((directory / MANIFEST_FILENAME).read_text(encoding="utf-8"))
        records = manifest.get("records", [])
        if len(records) != count:
            raise ValueError(
                f"{directory}: manifest lists {len(records)} records, blob holds {count}"
            )
        if embedder is None:
            embedder = _embedder_from_spec(manifest.get("embedder"), dim)
        return cls(
            matrix,
            [entry["record_id"] for entry in records],
            [entry["flat_text"] for entry in records],
            [entry.get("source", "") for entry in records],
            embedder,
        )


def _embedder_from_spec(spec: Mapping[str, Any] | None, dimension: int) -> Embedder:
    if spec is None:
        return HashTrigramEmbedder(dimension)
    kind = spec.get("kind")
    if kind == "hash_trigram":
        return HashTrigramEmbedder(int(spec.get("dimension", dimension)))
    if kind == "http":
        return HttpEmbedder(
            endpoint=spec["endpoint"],
            dimension=int(spec.get("dimension", dimension)),
            model=spec.get("model", ""),
            credentials_env=spec.get("credentials_env"),
        )
    raise ValueError(f"manifest names unknown embedder kind {kind!r}; pass one explicitly")


def search_top_k(index: FlatIndex, query_text: str, k: int, threshold: float) -> RetrievedContext:
    """Exact top-k cosine search over a frozen index."""
    return index.search(query_text, k, threshold)
