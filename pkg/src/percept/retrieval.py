"""Multimodal concept retrieval: cosine scoring, fusion, top-K selection.

Every stored embedding is unit-norm, so cosine similarity is a dot product.
Ranking is an exact scan — at personal-database scale (hundreds of concepts)
brute force beats any index on both correctness and determinism.  Ties break
by ascending concept_id so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Optional, Sequence

import numpy as np

from .db import ConceptRecord, Embedding
from .errors import DimensionMismatch, EmptyDatabase


@dataclass(frozen=True)
class RetrievalMode:
    """How candidates are ranked: fused, single-modality, or two-step rerank."""

    kind: str  # "fused" | "image_only" | "text_only" | "two_step"
    rerank_pool: Optional[int] = None

    def validate(self) -> None:
        if self.kind not in ("fused", "image_only", "text_only", "two_step"):
            raise ValueError(f"unknown retrieval mode {self.kind!r}")
        if self.kind == "two_step":
            if self.rerank_pool is None or self.rerank_pool < 1:
                raise ValueError("two_step mode requires rerank_pool >= 1")
        elif self.rerank_pool is not None:
            raise ValueError("rerank_pool only applies to two_step mode")

    @classmethod
    def two_step(cls, rerank_pool: int) -> "RetrievalMode":
        return cls(kind="two_step", rerank_pool=rerank_pool)


FUSED = RetrievalMode("fused")
IMAGE_ONLY = RetrievalMode("image_only")
TEXT_ONLY = RetrievalMode("text_only")


class CandidateEntry(NamedTuple):
    concept_id: str
    s_vv: float
    s_vt: float
    fused: float


@dataclass(frozen=True)
class CandidateSet:
    """Ordered top-K retrieval result; entries carry all three scores."""

    entries: tuple[CandidateEntry, ...]
    k: int
    mode: RetrievalMode

    def ids(self) -> tuple[str, ...]:
        return tuple(e.concept_id for e in self.entries)

    def __contains__(self, concept_id: str) -> bool:
        return any(e.concept_id == concept_id for e in self.entries)

    def rank_of(self, concept_id: str) -> Optional[int]:
        """1-based rank, or None when absent."""
        for i, entry in enumerate(self.entries):
            if entry.concept_id == concept_id:
                return i + 1
        return None


def cosine(a: Embedding, b: Embedding) -> float:
    """Cosine similarity; a plain dot product for unit-norm inputs."""
    if a.dim != b.dim:
        raise DimensionMismatch(f"dims differ: {a.dim} vs {b.dim}")
    value = float(np.dot(a.values, b.values))
    return min(1.0, max(-1.0, value))


def fuse(s_vv: float, s_vt: float) -> float:
    """Fused retrieval score: the average of the two cosines."""
    if not (-1.0 <= s_vv <= 1.0 and -1.0 <= s_vt <= 1.0):
        raise ValueError("similarities must lie in [-1, 1]")
    return (s_vv + s_vt) / 2.0


def score_all(query: Embedding,
              snapshot: Sequence[ConceptRecord]) -> list[CandidateEntry]:
    """All three scores for every record, in snapshot order."""
    visual = np.stack([r.visual_embedding.values for r in snapshot])
    textual = np.stack([r.textual_embedding.values for r in snapshot])
    if visual.shape[1] != query.dim:
        raise DimensionMismatch(
            f"query dim {query.dim} does not match stored dim {visual.shape[1]}"
        )
    s_vv = np.clip(visual @ query.values, -1.0, 1.0)
    s_vt = np.clip(textual @ query.values, -1.0, 1.0)
    return [
        CandidateEntry(
            concept_id=record.concept_id,
            s_vv=float(s_vv[i]),
            s_vt=float(s_vt[i]),
            fused=fuse(float(s_vv[i]), float(s_vt[i])),
        )
        for i, record in enumerate(snapshot)
    ]


def _take(entries: list[CandidateEntry], key_name: str, k: int) -> list[CandidateEntry]:
    ranked = sorted(entries, key=lambda e: (-getattr(e, key_name), e.concept_id))
    return ranked[:k]


def retrieve(
    query_embedding: Embedding,
    snapshot: Sequence[ConceptRecord],
    k: int,
    mode: RetrievalMode = FUSED,
) -> CandidateSet:
    """Top-K concepts for a query embedding under the given ranking mode.

    fused ranks by the averaged score, image_only/text_only by one cosine,
    and two_step takes ``rerank_pool`` by the visual score then re-ranks that
    pool by the textual score.  k larger than the database clamps.
    """
    mode.validate()
    if k < 1:
        raise ValueError("k must be >= 1")
    if not snapshot:
        raise EmptyDatabase("retrieval over an empty database")
    if mode.kind == "two_step" and mode.rerank_pool < k:
        raise ValueError("two_step rerank_pool must be >= k")

    scored = score_all(query_embedding, snapshot)
    if mode.kind == "fused":
        top = _take(scored, "fused", k)
    elif mode.kind == "image_only":
        top = _take(scored, "s_vv", k)
    elif mode.kind == "text_only":
        top = _take(scored, "s_vt", k)
    else:
        pool = _take(scored, "s_vv", mode.rerank_pool)
        top = _take(pool, "s_vt", k)
    return CandidateSet(entries=tuple(top), k=k, mode=mode)


def hit_at_k(candidate_set: CandidateSet, true_concept_id: str) -> bool:
    """Whether the true concept landed anywhere in the retrieved top-K."""
    return true_concept_id in candidate_set
