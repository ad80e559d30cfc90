"""Image/text embedding gateway with a remote HTTP client and an offline mock.

Both backends return unit-norm :class:`~percept.db.Embedding` vectors of the
configured dimension and are deterministic for identical inputs.  The mock
derives a label from the input (text verbatim; images via an embedded
``MOCKIMG:`` header or the byte digest), seeds a PRNG from it, and draws a
Gaussian vector — so image and text inputs with the same label land on the
same point, which is what lets tests script exact cross-modal similarities.
"""

from __future__ import annotations

import base64
import hashlib
import json
import logging
import threading
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import httpx
import numpy as np

from ._http import bearer_headers, post_json_with_retries
from .db import Embedding
from .errors import DimensionMismatch, MalformedResponse

log = logging.getLogger(__name__)

SUPPORTED_MEDIA_TYPES = {"image/png", "image/jpeg", "png", "jpeg"}

# mock images may declare their label in a leading header line
MOCK_IMAGE_MAGIC = b"MOCKIMG:"


def image_label(data: bytes) -> str:
    """Resolve a mock label for image bytes.

    Bytes starting with ``MOCKIMG:<label>\\n`` use the declared label;
    anything else (e.g. a real photo) falls back to its sha256 digest.
    """
    if data.startswith(MOCK_IMAGE_MAGIC):
        head, _, _ = data[len(MOCK_IMAGE_MAGIC):].partition(b"\n")
        return head.decode("utf-8", errors="replace").strip()
    return hashlib.sha256(data).hexdigest()


def mock_image_bytes(label: str, payload: bytes = b"") -> bytes:
    """Build image bytes the mock backends resolve to ``label``."""
    return MOCK_IMAGE_MAGIC + label.encode("utf-8") + b"\n" + payload


def _check_media_type(media_type: str) -> None:
    if media_type not in SUPPORTED_MEDIA_TYPES:
        raise ValueError(f"unsupported media_type {media_type!r} (png/jpeg only)")


@dataclass(frozen=True)
class EncoderBackendConfig:
    kind: str  # "remote" | "mock"
    model_id: str
    embedding_dim: int
    base_url: Optional[str] = None
    api_key_env: Optional[str] = None
    timeout: float = 30.0
    max_retries: int = 3
    seed: int = 0
    fixture_path: Optional[str] = None
    cache_size: int = 4096
    max_inflight: int = 4
    cross_modal: bool = True

    def validate(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ValueError(f"unknown encoder kind {self.kind!r}")
        if self.kind == "remote" and not self.base_url:
            raise ValueError("remote encoder requires base_url")
        if self.embedding_dim < 1:
            raise ValueError("embedding_dim must be >= 1")


class _LruCache:
    """Small thread-safe LRU keyed by input digest."""

    def __init__(self, maxsize: int):
        self._maxsize = maxsize
        self._data: OrderedDict[str, Embedding] = OrderedDict()
        self._lock = threading.Lock()

    def get(self, key: str) -> Optional[Embedding]:
        with self._lock:
            value = self._data.get(key)
            if value is not None:
                self._data.move_to_end(key)
            return value

    def put(self, key: str, value: Embedding) -> None:
        if self._maxsize <= 0:
            return
        with self._lock:
            self._data[key] = value
            self._data.move_to_end(key)
            while len(self._data) > self._maxsize:
                self._data.popitem(last=False)


class EncoderGateway:
    """Common surface: caching, concurrency cap, and input validation."""

    def __init__(self, config: EncoderBackendConfig):
        config.validate()
        self.config = config
        self._cache = _LruCache(config.cache_size)
        self._inflight = threading.BoundedSemaphore(max(1, config.max_inflight))

    @property
    def encoder_id(self) -> str:
        tag = "xmodal" if self.config.cross_modal else "unimodal"
        return f"{self.config.kind}:{self.config.model_id}:d{self.config.embedding_dim}:{tag}"

    def encode_image(self, image_bytes: bytes, media_type: str = "image/png") -> Embedding:
        if not image_bytes:
            raise ValueError("image_bytes must be non-empty")
        _check_media_type(media_type)
        digest = "img:" + hashlib.sha256(image_bytes).hexdigest()
        cached = self._cache.get(digest)
        if cached is not None:
            return cached
        with self._inflight:
            result = self._encode_image(image_bytes, media_type)
        self._check_dim(result)
        self._cache.put(digest, result)
        return result

    def encode_text(self, text: str) -> Embedding:
        if not text.strip():
            raise ValueError("text must be non-empty")
        digest = "txt:" + hashlib.sha256(text.encode("utf-8")).hexdigest()
        cached = self._cache.get(digest)
        if cached is not None:
            return cached
        with self._inflight:
            result = self._encode_text(text)
        self._check_dim(result)
        self._cache.put(digest, result)
        return result

    def encode_text_batch(self, texts: Sequence[str]) -> list[Embedding]:
        for i, text in enumerate(texts):
            if not text.strip():
                raise ValueError(f"text at index {i} is empty")
        return [self.encode_text(t) for t in texts]

    def _check_dim(self, emb: Embedding) -> None:
        if emb.dim != self.config.embedding_dim:
            raise DimensionMismatch(
                f"backend returned dim {emb.dim}, configured "
                f"{self.config.embedding_dim}"
            )

    def _encode_image(self, image_bytes: bytes, media_type: str) -> Embedding:
        raise NotImplementedError

    def _encode_text(self, text: str) -> Embedding:
        raise NotImplementedError


class MockEncoder(EncoderGateway):
    """Deterministic offline encoder for tests and demos.

    A fixture file (JSON map label -> vector) pins exact embeddings; any
    unpinned label gets a seeded Gaussian draw, normalized.  Equal seeds give
    equal vectors across instances and runs.
    """

    def __init__(self, config: EncoderBackendConfig,
                 fixture: Optional[dict[str, Sequence[float]]] = None):
        super().__init__(config)
        pinned: dict[str, Embedding] = {}
        if config.fixture_path:
            raw = json.loads(Path(config.fixture_path).read_text(encoding="utf-8"))
            for label, values in raw.items():
                pinned[label] = self._pin(label, values)
        if fixture:
            for label, values in fixture.items():
                pinned[label] = self._pin(label, values)
        self._pinned = pinned

    def _pin(self, label: str, values: Sequence[float]) -> Embedding:
        emb = Embedding(values)
        if emb.dim != self.config.embedding_dim:
            raise DimensionMismatch(
                f"fixture vector for {label!r} has dim {emb.dim}, "
                f"configured {self.config.embedding_dim}"
            )
        return emb

    def vector_for_label(self, label: str) -> Embedding:
        pinned = self._pinned.get(label)
        if pinned is not None:
            return pinned
        seed_material = f"{self.config.seed}|{self.config.embedding_dim}|{label}"
        seed = int.from_bytes(
            hashlib.sha256(seed_material.encode("utf-8")).digest()[:8], "big"
        )
        rng = np.random.default_rng(seed)
        return Embedding(rng.standard_normal(self.config.embedding_dim))

    def _encode_image(self, image_bytes: bytes, media_type: str) -> Embedding:
        return self.vector_for_label(image_label(image_bytes))

    def _encode_text(self, text: str) -> Embedding:
        return self.vector_for_label(text)


class RemoteEncoder(EncoderGateway):
    """Client for an HTTP embedding service.

    Wire format: POST ``{base_url}/embeddings`` with
    ``{"model": ..., "input": [<string or {"image", "media_type"}>]}``;
    response ``{"data": [{"embedding": [..]}, ...]}`` in input order.
    """

    def __init__(self, config: EncoderBackendConfig,
                 transport: Optional[httpx.BaseTransport] = None):
        super().__init__(config)
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._url = config.base_url.rstrip("/") + "/embeddings"

    def close(self) -> None:
        self._client.close()

    def _post(self, inputs: list) -> list[Embedding]:
        body = {"model": self.config.model_id, "input": inputs}
        response = post_json_with_retries(
            self._client,
            self._url,
            body,
            headers=bearer_headers(self.config.api_key_env),
            max_retries=self.config.max_retries,
        )
        try:
            payload = response.json()
            rows = payload["data"]
            vectors = [row["embedding"] for row in rows]
        except (json.JSONDecodeError, KeyError, TypeError) as exc:
            raise MalformedResponse(f"bad embeddings payload: {exc}") from exc
        if len(vectors) != len(inputs):
            raise MalformedResponse(
                f"expected {len(inputs)} embeddings, got {len(vectors)}"
            )
        return [Embedding(v) for v in vectors]

    def _encode_image(self, image_bytes: bytes, media_type: str) -> Embedding:
        mt = media_type if media_type.startswith("image/") else f"image/{media_type}"
        item = {
            "image": base64.b64encode(image_bytes).decode("ascii"),
            "media_type": mt,
        }
        return self._post([item])[0]

    def _encode_text(self, text: str) -> Embedding:
        return self._post([text])[0]


def build_encoder(config: EncoderBackendConfig,
                  transport: Optional[httpx.BaseTransport] = None) -> EncoderGateway:
    if config.kind == "mock":
        return MockEncoder(config)
    return RemoteEncoder(config, transport=transport)
