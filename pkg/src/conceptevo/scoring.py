"""Concept-image score matrices with an incremental on-disk column cache.

The matrix has one row per image and one column per concept in library
flattening order (class-major, insertion order). Columns already cached
are returned bit-identically; only newly-added concepts reach the backend,
which is what keeps later loop iterations cheap.

Cache layout per (backbone id, dataset id): a flat binary file of f32
column blocks plus a JSON index sidecar mapping column id to offset and
CRC32. The sidecar is replaced atomically after the data flush, so a
reader never observes a torn column.
"""

from __future__ import annotations

import json
import threading
import time
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol

import httpx
import numpy as np

from ._rng import stable_hash
from .concepts import ConceptLibrary, DatasetManifest
from .errors import CacheCorrupt, IncompatibleVersions, ServiceError, ShapeError

DEFAULT_SCORE_TEMPLATE = "a photo of a {class}. {concept}"
CACHE_MAGIC = "CEVOSC1"


@dataclass(frozen=True)
class ScoreMatrix:
    values: np.ndarray  # (N, |C|) float32
    row_ids: tuple[str, ...]
    col_ids: tuple[str, ...]

    def __post_init__(self):
        if self.values.shape != (len(self.row_ids), len(self.col_ids)):
            raise ShapeError(
                f"matrix {self.values.shape} does not match {len(self.row_ids)} rows "
                f"x {len(self.col_ids)} cols"
            )
        if not np.all(np.isfinite(self.values)):
            raise ShapeError("score matrix contains non-finite entries")


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    nu = float(np.linalg.norm(u))
    nv = float(np.linalg.norm(v))
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


class ScorerBackend(Protocol):
    cache_key: str

    def score_column(
        self, manifest: DatasetManifest, class_label: str, concept_text: str, template: str
    ) -> np.ndarray:
        """Scores of one concept against every manifest image, f32 (N,)."""
        ...


def dataset_id(manifest: DatasetManifest) -> str:
    return f"{stable_hash(*manifest.image_ids()):016x}"


class ScoreCache:
    """Append-only f32 column store, checksummed per column.

    The data file starts with a fixed header (magic, format version, row
    count, dtype code); hits counts individual (image, concept) scores
    served from cache.
    """

    def __init__(self, directory: str | Path, backbone_id: str, ds_id: str, n_rows: int):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        safe = "".join(ch if ch.isalnum() or ch in "-_." else "_" for ch in backbone_id)
        self.data_path = self.dir / f"{safe}__{ds_id}.cols"
        self.index_path = self.dir / f"{safe}__{ds_id}.idx.json"
        self.n_rows = n_rows
        self.hits = 0
        self._lock = threading.Lock()
        self._index: dict[str, dict] = {}
        if self.index_path.exists():
            doc = json.loads(self.index_path.read_text(encoding="utf-8"))
            if doc.get("magic") != CACHE_MAGIC or doc.get("dtype") != "f32":
                raise CacheCorrupt(f"unrecognized cache header in {self.index_path}")
            if doc["n_rows"] != n_rows:
                raise CacheCorrupt(
                    f"cache built for {doc['n_rows']} rows, manifest has {n_rows}"
                )
            self._index = doc["columns"]
            self._check_data_header()
        self._meta = {
            "magic": CACHE_MAGIC,
            "backbone": backbone_id,
            "dataset": ds_id,
            "n_rows": n_rows,
            "dtype": "f32",
        }
        if not self.index_path.exists():
            self._flush_index()

    def _header_bytes(self) -> bytes:
        return CACHE_MAGIC.encode("ascii") + b"\x01" + self.n_rows.to_bytes(8, "little") + b"\x04"

    def _check_data_header(self) -> None:
        if not self.data_path.exists():
            raise CacheCorrupt(f"index {self.index_path} has no data file")
        with open(self.data_path, "rb") as fh:
            if fh.read(len(self._header_bytes())) != self._header_bytes():
                raise CacheCorrupt(f"bad header in {self.data_path}")

    def _flush_index(self) -> None:
        doc = dict(self._meta)
        doc["columns"] = self._index
        tmp = self.index_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(doc, sort_keys=True), encoding="utf-8")
        tmp.replace(self.index_path)

    def __contains__(self, col_id: str) -> bool:
        return col_id in self._index

    def get(self, col_id: str) -> np.ndarray:
        entry = self._index[col_id]
        with open(self.data_path, "rb") as fh:
            fh.seek(entry["offset"])
            raw = fh.read(self.n_rows * 4)
        if len(raw) != self.n_rows * 4 or zlib.crc32(raw) != entry["crc32"]:
            raise CacheCorrupt(f"checksum mismatch for column {col_id}")
        with self._lock:
            self.hits += self.n_rows
        return np.frombuffer(raw, dtype=np.float32).copy()

    def put(self, col_id: str, column: np.ndarray) -> None:
        if column.shape != (self.n_rows,):
            raise ShapeError(f"column has shape {column.shape}, expected ({self.n_rows},)")
        raw = np.ascontiguousarray(column, dtype=np.float32).tobytes()
        with self._lock:
            with open(self.data_path, "ab") as fh:
                if fh.tell() == 0:
                    fh.write(self._header_bytes())
                offset = fh.tell()
                fh.write(raw)
                fh.flush()
            self._index[col_id] = {"offset": offset, "crc32": zlib.crc32(raw)}
            self._flush_index()


class SimulatedScoreBackend:
    """Scores straight out of a synthetic world (see simworld)."""

    def __init__(self, world):
        self.world = world
        self.cache_key = f"sim-{world.fingerprint()}"
        self.calls = 0
        self._lock = threading.Lock()

    def score_column(self, manifest, class_label, concept_text, template):
        from .simworld import simulated_score

        with self._lock:
            self.calls += 1
        col = np.array(
            [simulated_score(self.world, it.image_id, concept_text) for it in manifest.items],
            dtype=np.float32,
        )
        return col


class EmbeddingServiceBackend:
    """Cosine similarity between text and image vectors from an embeddings endpoint.

    Image vectors are fetched once per manifest through the same wire
    protocol, with input_type distinguishing image ids from text.
    """

    def __init__(
        self,
        endpoint: str,
        model: str,
        *,
        batch_size: int = 128,
        timeout: float = 60.0,
        max_retries: int = 3,
        transport: httpx.BaseTransport | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.model = model
        self.batch_size = batch_size
        self.max_retries = max_retries
        self.cache_key = f"emb-{model.replace('/', '-')}"
        self._client = httpx.Client(timeout=timeout, transport=transport)
        self._image_vectors: np.ndarray | None = None
        self._image_lock = threading.Lock()
        self.calls = 0

    def _embed(self, inputs: list[str], input_type: str) -> np.ndarray:
        vectors: list[list[float]] = []
        for start in range(0, len(inputs), self.batch_size):
            batch = inputs[start : start + self.batch_size]
            payload = {"model": self.model, "input": batch, "input_type": input_type}
            url = f"{self.endpoint}/v1/embeddings"
            last_err: Exception | None = None
            for attempt in range(self.max_retries):
                try:
                    resp = self._client.post(url, json=payload)
                    if resp.status_code >= 500:
                        raise ServiceError(f"HTTP {resp.status_code} from {url}")
                    resp.raise_for_status()
                    data = resp.json()["data"]
                    break
                except (httpx.HTTPError, ServiceError, KeyError, ValueError) as err:
                    last_err = err
                    if attempt + 1 == self.max_retries:
                        raise ServiceError(f"embeddings request failed: {last_err}")
                    time.sleep(min(2.0**attempt, 8.0))
            if len(data) != len(batch):
                raise ShapeError(f"asked for {len(batch)} embeddings, got {len(data)}")
            data = sorted(data, key=lambda d: d.get("index", 0))
            vectors.extend(d["embedding"] for d in data)
        return np.asarray(vectors, dtype=np.float64)

    def _images(self, manifest: DatasetManifest) -> np.ndarray:
        with self._image_lock:
            if self._image_vectors is None:
                self._image_vectors = self._embed(manifest.image_ids(), "image_id")
            return self._image_vectors

    def score_column(self, manifest, class_label, concept_text, template):
        images = self._images(manifest)
        text = template.format(**{"class": class_label, "concept": concept_text})
        vec = self._embed([text], "text")[0]
        with self._image_lock:
            self.calls += 1
        norms = np.linalg.norm(images, axis=1) * np.linalg.norm(vec)
        norms[norms == 0.0] = 1.0
        return (images @ vec / norms).astype(np.float32)


class CacheFileBackend:
    """Cache-only backend: every column must already be on disk."""

    def __init__(self, backbone_id: str):
        self.cache_key = backbone_id
        self.calls = 0

    def score_column(self, manifest, class_label, concept_text, template):
        raise ServiceError(
            f"precomputed cache is missing scores for concept {concept_text!r}"
        )


def score(
    backend: ScorerBackend,
    manifest: DatasetManifest,
    lib: ConceptLibrary,
    template: str = DEFAULT_SCORE_TEMPLATE,
    *,
    cache: ScoreCache | None = None,
    max_inflight: int = 8,
) -> ScoreMatrix:
    """Assemble the N x |C| score matrix, hitting the backend only for new columns."""
    flat = lib.flatten()
    col_ids = tuple(lib.column_ids())
    columns: dict[str, np.ndarray] = {}
    missing: list[tuple[str, str, str]] = []
    for (class_idx, concept), cid in zip(flat, col_ids):
        if cache is not None and cid in cache:
            columns[cid] = cache.get(cid)
        else:
            missing.append((cid, lib.labels[class_idx], concept.text))

    if missing:

        def fetch(job: tuple[str, str, str]) -> np.ndarray:
            _, label, text = job
            col = backend.score_column(manifest, label, text, template)
            col = np.asarray(col, dtype=np.float32)
            if col.shape != (manifest.n,):
                raise ShapeError(
                    f"backend returned {col.shape} for concept {text!r}, expected ({manifest.n},)"
                )
            if not np.all(np.isfinite(col)):
                raise ShapeError(f"backend returned non-finite scores for concept {text!r}")
            return col

        with ThreadPoolExecutor(max_workers=max_inflight) as pool:
            fetched = list(pool.map(fetch, missing))
        # Single-writer cache update, in submission order.
        for (cid, _, _), col in zip(missing, fetched):
            if cache is not None:
                cache.put(cid, col)
            columns[cid] = col

    values = np.stack([columns[cid] for cid in col_ids], axis=1)
    return ScoreMatrix(values=values, row_ids=tuple(manifest.image_ids()), col_ids=col_ids)


def incremental_columns(old: ScoreMatrix, lib_new: ConceptLibrary) -> list[str]:
    """Column ids present in the new library but absent from the old matrix."""
    new_ids = lib_new.column_ids()
    new_set = set(new_ids)
    stale = [cid for cid in old.col_ids if cid not in new_set]
    if stale:
        raise IncompatibleVersions(
            f"{len(stale)} old columns are not part of the new library"
        )
    old_set = set(old.col_ids)
    return [cid for cid in new_ids if cid not in old_set]
