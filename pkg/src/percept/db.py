"""Personal concept database: records, embeddings, and on-disk persistence.

The database is a flat collection of :class:`ConceptRecord` rows keyed by
``concept_id`` with case-insensitive name uniqueness.  Persistence is a
directory holding ``manifest.json`` plus one JSON-Lines file ``concepts.jsonl``;
embeddings are stored as plain decimal arrays so ``load(save(db))`` round-trips
every float exactly.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import (
    CorruptRecord,
    DimensionMismatch,
    DuplicateName,
    EncoderMismatch,
    InvalidEmbedding,
    IoFailure,
    SchemaVersionUnsupported,
)

SCHEMA_VERSION = 1
NORM_TOLERANCE = 1e-6

MANIFEST_FILE = "manifest.json"
RECORDS_FILE = "concepts.jsonl"


class Embedding:
    """Unit-norm vector in the shared latent space.

    Values are normalized at construction, so cosine similarity against any
    other Embedding reduces to a plain dot product.
    """

    __slots__ = ("values",)

    def __init__(self, values: Sequence[float] | np.ndarray):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0:
            raise InvalidEmbedding("embedding must be a non-empty 1-D vector")
        if not np.all(np.isfinite(arr)):
            raise InvalidEmbedding("embedding contains non-finite values")
        norm = float(np.linalg.norm(arr))
        if norm == 0.0:
            raise InvalidEmbedding("zero vector cannot be normalized")
        if abs(norm - 1.0) > NORM_TOLERANCE:
            arr = arr / norm
        arr.flags.writeable = False
        self.values = arr

    @classmethod
    def from_stored(cls, values: Sequence[float]) -> "Embedding":
        """Rebuild an embedding from persisted values, rejecting bad norms.

        Stored embeddings were normalized before saving; a norm off by more
        than the tolerance means the record is corrupt, not merely unscaled.
        """
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size == 0 or not np.all(np.isfinite(arr)):
            raise CorruptRecord("stored embedding is not a finite 1-D vector")
        norm = float(np.linalg.norm(arr))
        if abs(norm - 1.0) > NORM_TOLERANCE:
            raise CorruptRecord(f"stored embedding norm {norm!r} is not unit")
        return cls(arr)

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])

    def to_list(self) -> list[float]:
        return [float(x) for x in self.values]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Embedding):
            return NotImplemented
        return self.values.shape == other.values.shape and bool(
            np.array_equal(self.values, other.values)
        )

    def __hash__(self) -> int:
        return hash(self.values.tobytes())

    def __repr__(self) -> str:
        return f"Embedding(dim={self.dim})"


@dataclass(frozen=True)
class ReferenceImage:
    """Content-addressed handle to a concept's reference image."""

    path: str
    sha256: str


@dataclass(frozen=True)
class ConceptRecord:
    """One enrolled concept: identity, fingerprint text, and dual embeddings."""

    concept_id: str
    name: str
    category: str
    description: str
    attributes: tuple[str, ...]
    visual_embedding: Embedding
    textual_embedding: Embedding
    reference_image: ReferenceImage
    enrolled_at: str

    def validate(self) -> None:
        if not self.concept_id:
            raise ValueError("concept_id must be non-empty")
        if not self.name.strip():
            raise ValueError("name must be non-empty")
        if not self.category.strip():
            raise ValueError("category must be non-empty")
        if not self.description.strip():
            raise ValueError("description must be non-empty")
        if not self.attributes or any(not a.strip() for a in self.attributes):
            raise ValueError("attributes must be a non-empty list of non-empty strings")
        if self.visual_embedding.dim != self.textual_embedding.dim:
            raise DimensionMismatch(
                f"visual dim {self.visual_embedding.dim} != textual dim "
                f"{self.textual_embedding.dim} for {self.name!r}"
            )

    def to_json_dict(self) -> dict:
        return {
            "concept_id": self.concept_id,
            "name": self.name,
            "category": self.category,
            "description": self.description,
            "attributes": list(self.attributes),
            "visual_embedding": self.visual_embedding.to_list(),
            "textual_embedding": self.textual_embedding.to_list(),
            "reference_image": {
                "path": self.reference_image.path,
                "sha256": self.reference_image.sha256,
            },
            "enrolled_at": self.enrolled_at,
        }

    @classmethod
    def from_json_dict(cls, obj: dict) -> "ConceptRecord":
        try:
            ref = obj["reference_image"]
            record = cls(
                concept_id=str(obj["concept_id"]),
                name=str(obj["name"]),
                category=str(obj["category"]),
                description=str(obj["description"]),
                attributes=tuple(str(a) for a in obj["attributes"]),
                visual_embedding=Embedding.from_stored(obj["visual_embedding"]),
                textual_embedding=Embedding.from_stored(obj["textual_embedding"]),
                reference_image=ReferenceImage(
                    path=str(ref["path"]), sha256=str(ref["sha256"])
                ),
                enrolled_at=str(obj["enrolled_at"]),
            )
        except CorruptRecord:
            raise
        except (KeyError, TypeError) as exc:
            raise CorruptRecord(f"record missing or malformed field: {exc}") from exc
        try:
            record.validate()
        except (ValueError, DimensionMismatch) as exc:
            raise CorruptRecord(f"record fails invariants: {exc}") from exc
        return record


@dataclass(frozen=True)
class DatabaseManifest:
    schema_version: int
    embedding_dim: Optional[int]
    encoder_id: Optional[str]
    record_count: int

    def to_json_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "embedding_dim": self.embedding_dim,
            "encoder_id": self.encoder_id,
            "record_count": self.record_count,
        }


class ConceptDatabase:
    """In-memory store with snapshot reads and directory persistence.

    Concurrency: many readers, one writer.  All mutation goes through a lock;
    snapshots are tuples of frozen records, so a snapshot taken before a write
    never reflects it.
    """

    def __init__(self, *, embedding_dim: Optional[int] = None,
                 encoder_id: Optional[str] = None):
        self._records: dict[str, ConceptRecord] = {}
        self._lock = threading.RLock()
        self._embedding_dim = embedding_dim
        self._encoder_id = encoder_id
        self.base_dir: Optional[Path] = None  # set by load(); anchors relative image paths

    # --- introspection -------------------------------------------------------

    @property
    def embedding_dim(self) -> Optional[int]:
        return self._embedding_dim

    @property
    def encoder_id(self) -> Optional[str]:
        return self._encoder_id

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def manifest(self) -> DatabaseManifest:
        with self._lock:
            return DatabaseManifest(
                schema_version=SCHEMA_VERSION,
                embedding_dim=self._embedding_dim,
                encoder_id=self._encoder_id,
                record_count=len(self._records),
            )

    def adopt_encoder(self, encoder_id: str) -> None:
        """Record which encoder produced the stored embeddings (set-once)."""
        with self._lock:
            if self._encoder_id is None:
                self._encoder_id = encoder_id
            elif self._encoder_id != encoder_id:
                raise EncoderMismatch(
                    f"database was embedded with {self._encoder_id!r}, "
                    f"got {encoder_id!r}"
                )

    # --- reads ---------------------------------------------------------------

    def get(self, concept_id: str) -> Optional[ConceptRecord]:
        with self._lock:
            return self._records.get(concept_id)

    def get_by_name(self, name: str) -> Optional[ConceptRecord]:
        key = name.strip().casefold()
        with self._lock:
            for record in self._records.values():
                if record.name.casefold() == key:
                    return record
        return None

    def snapshot(self) -> tuple[ConceptRecord, ...]:
        """Immutable view of all records, sorted by concept_id."""
        with self._lock:
            return tuple(
                self._records[cid] for cid in sorted(self._records)
            )

    # --- writes --------------------------------------------------------------

    def upsert(self, record: ConceptRecord) -> ConceptRecord:
        record.validate()
        with self._lock:
            dim = record.visual_embedding.dim
            if self._embedding_dim is None:
                if self._records:
                    raise RuntimeError("records present but no manifest dim")
                self._embedding_dim = dim
            elif dim != self._embedding_dim:
                raise DimensionMismatch(
                    f"embedding dim {dim} does not match database dim "
                    f"{self._embedding_dim}"
                )
            key = record.name.casefold()
            for cid, existing in self._records.items():
                if cid != record.concept_id and existing.name.casefold() == key:
                    raise DuplicateName(
                        f"name {record.name!r} already enrolled as {cid}"
                    )
            self._records[record.concept_id] = record
            return record

    def delete(self, concept_id: str) -> bool:
        with self._lock:
            return self._records.pop(concept_id, None) is not None

    # --- persistence ----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        directory = Path(path)
        try:
            directory.mkdir(parents=True, exist_ok=True)
            with self._lock:
                manifest = self.manifest().to_json_dict()
                records = [self._records[cid] for cid in sorted(self._records)]
            (directory / MANIFEST_FILE).write_text(
                json.dumps(manifest, sort_keys=True, indent=2) + "\n",
                encoding="utf-8",
            )
            lines = [
                json.dumps(r.to_json_dict(), sort_keys=True) for r in records
            ]
            (directory / RECORDS_FILE).write_text(
                "".join(line + "\n" for line in lines), encoding="utf-8"
            )
        except OSError as exc:
            raise IoFailure(f"cannot write database to {directory}: {exc}") from exc

    @classmethod
    def load(cls, path: str | Path) -> "ConceptDatabase":
        directory = Path(path)
        try:
            manifest_raw = (directory / MANIFEST_FILE).read_text(encoding="utf-8")
        except OSError as exc:
            raise IoFailure(f"cannot read manifest in {directory}: {exc}") from exc
        try:
            manifest = json.loads(manifest_raw)
        except json.JSONDecodeError as exc:
            raise CorruptRecord(f"manifest is not valid JSON: {exc}") from exc

        version = manifest.get("schema_version")
        if version != SCHEMA_VERSION:
            raise SchemaVersionUnsupported(
                f"schema_version {version!r} unsupported (expected {SCHEMA_VERSION})"
            )

        db = cls(
            embedding_dim=manifest.get("embedding_dim"),
            encoder_id=manifest.get("encoder_id"),
        )
        db.base_dir = directory

        records_path = directory / RECORDS_FILE
        try:
            raw_lines = records_path.read_text(encoding="utf-8").splitlines()
        except OSError as exc:
            raise IoFailure(f"cannot read records in {directory}: {exc}") from exc

        for lineno, line in enumerate(raw_lines, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorruptRecord(
                    f"{RECORDS_FILE}:{lineno} is not valid JSON: {exc}"
                ) from exc
            record = ConceptRecord.from_json_dict(obj)
            try:
                db.upsert(record)
            except (DuplicateName, DimensionMismatch) as exc:
                raise CorruptRecord(
                    f"{RECORDS_FILE}:{lineno} violates database invariants: {exc}"
                ) from exc

        expected = manifest.get("record_count")
        if expected is not None and expected != len(db):
            raise CorruptRecord(
                f"manifest record_count {expected} != stored records {len(db)}"
            )
        return db


def databases_equal(a: ConceptDatabase, b: ConceptDatabase) -> bool:
    """Field-for-field equality of two databases (order-insensitive)."""
    if len(a) != len(b):
        return False
    if a.embedding_dim != b.embedding_dim or a.encoder_id != b.encoder_id:
        return False
    return a.snapshot() == b.snapshot()
