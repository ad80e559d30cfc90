"""Query-time pipeline: retrieve, reason, verify, and answer.

The flow mirrors how a careful human would check a guess: retrieval proposes
top-K candidates, a single chat call picks the best match while listing the
attributes it relied on, and those claimed attributes are then scored against
the query image embedding.  When the two selections disagree — the model may
have hallucinated an attribute — the expensive per-candidate image-pair
comparison runs and its argmax wins.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import Executor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

from .db import ConceptDatabase, ConceptRecord, Embedding, ReferenceImage
from .encoders import EncoderGateway
from .errors import (
    AnswerUnparseable,
    EmptyDatabase,
    IoFailure,
    ParseFailure,
    UnknownTargetConcept,
)
from .protocol import (
    JSON_REMINDER,
    CotVerdict,
    parse_cot,
    render_caption_prompt,
    render_cot_prompt,
    render_pairwise_prompt,
    render_vqa_prompt,
)
from .retrieval import FUSED, CandidateSet, RetrievalMode, cosine, retrieve, score_all
from .vlm import ChatRequest, ImagePayload, VlmGateway

log = logging.getLogger(__name__)

VERIFICATION_STRATEGIES = (
    "attribute", "abstention", "logits_based", "pairwise_always", "none",
)
RECOGNITION_MODES = ("pipeline_match", "direct_pairwise")

ABSTENTION_OPTION = "I am not sure"
IDK_OPTION = "I don't know"


@dataclass(frozen=True)
class PipelineConfig:
    """Toggles and parameters for the query pipeline."""

    k: int = 3
    retrieval_mode: RetrievalMode = FUSED
    enable_cot: bool = True
    enable_fingerprints: bool = True
    enable_pairwise: bool = True
    verification: str = "attribute"
    pairwise_threshold: float = 0.5
    recognition_mode: str = "pipeline_match"
    # margin for the logits_based strategy: trigger pairwise when the
    # uncertainty option's log-probability is within this of the answer's
    idk_margin: float = 0.0
    # applied to each attribute before text encoding; "{}" means raw
    attribute_text_template: str = "{}"

    def validate(self) -> None:
        if self.k < 1:
            raise ValueError("k must be >= 1")
        self.retrieval_mode.validate()
        if self.verification not in VERIFICATION_STRATEGIES:
            raise ValueError(f"unknown verification strategy {self.verification!r}")
        if self.recognition_mode not in RECOGNITION_MODES:
            raise ValueError(f"unknown recognition mode {self.recognition_mode!r}")
        if not (0.0 <= self.pairwise_threshold <= 1.0):
            raise ValueError("pairwise_threshold must lie in [0, 1]")
        if self.verification == "pairwise_always" and not self.enable_pairwise:
            raise ValueError("verification=pairwise_always requires enable_pairwise")
        if not self.enable_fingerprints and self.verification not in (
            "none", "pairwise_always",
        ):
            raise ValueError(
                "attribute-based verification needs fingerprints; use "
                "verification=none or pairwise_always"
            )
        if not self.enable_cot and self.verification not in (
            "none", "pairwise_always",
        ):
            raise ValueError(
                "abstention/logits/attribute verification all run inside the "
                "selection call; with enable_cot=false use none or pairwise_always"
            )

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "retrieval_mode": {
                "kind": self.retrieval_mode.kind,
                "rerank_pool": self.retrieval_mode.rerank_pool,
            },
            "enable_cot": self.enable_cot,
            "enable_fingerprints": self.enable_fingerprints,
            "enable_pairwise": self.enable_pairwise,
            "verification": self.verification,
            "pairwise_threshold": self.pairwise_threshold,
            "recognition_mode": self.recognition_mode,
            "idk_margin": self.idk_margin,
            "attribute_text_template": self.attribute_text_template,
        }

    @classmethod
    def from_dict(cls, obj: Mapping) -> "PipelineConfig":
        mode_obj = obj.get("retrieval_mode", {"kind": "fused"})
        if isinstance(mode_obj, str):
            mode_obj = {"kind": mode_obj}
        mode = RetrievalMode(
            kind=mode_obj.get("kind", "fused"),
            rerank_pool=mode_obj.get("rerank_pool"),
        )
        config = cls(
            k=int(obj.get("k", 3)),
            retrieval_mode=mode,
            enable_cot=bool(obj.get("enable_cot", True)),
            enable_fingerprints=bool(obj.get("enable_fingerprints", True)),
            enable_pairwise=bool(obj.get("enable_pairwise", True)),
            verification=str(obj.get("verification", "attribute")),
            pairwise_threshold=float(obj.get("pairwise_threshold", 0.5)),
            recognition_mode=str(obj.get("recognition_mode", "pipeline_match")),
            idk_margin=float(obj.get("idk_margin", 0.0)),
            attribute_text_template=str(obj.get("attribute_text_template", "{}")),
        )
        config.validate()
        return config


def load_reference_bytes(ref: ReferenceImage,
                         base_dir: Optional[Path] = None) -> bytes:
    """Read a reference image, resolving relative paths against ``base_dir``."""
    path = Path(ref.path)
    if not path.is_absolute() and base_dir is not None:
        path = base_dir / path
    try:
        return path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read reference image {path}: {exc}") from exc


@dataclass
class Gateways:
    """Backends plus the reference-image loader used by pairwise matching."""

    vlm: VlmGateway
    encoder: EncoderGateway
    load_reference: Callable[[ReferenceImage], bytes] = None  # type: ignore[assignment]

    def __post_init__(self) -> None:
        if self.load_reference is None:
            self.load_reference = load_reference_bytes


@dataclass(frozen=True)
class InferenceTrace:
    """Everything one query did: scores, selections, and call accounting."""

    candidate_set: CandidateSet
    cot_verdict: Optional[CotVerdict]
    c_tilde: str
    attribute_scores: Optional[dict[str, float]]
    c_tilde_a: Optional[str]
    verification_passed: Optional[bool]
    pairwise_probs: Optional[dict[str, float]]
    final: str
    vlm_calls: int
    flags: tuple[str, ...] = ()

    def to_json_dict(self) -> dict:
        def scores_json(scores: Optional[dict[str, float]]):
            if scores is None:
                return None
            # -inf marks "no shared attributes"; JSON has no infinities
            return {
                cid: (None if math.isinf(v) and v < 0 else v)
                for cid, v in scores.items()
            }

        verdict = None
        if self.cot_verdict is not None:
            verdict = {
                "matched_attributes": {
                    letter: list(attrs)
                    for letter, attrs in self.cot_verdict.matched_attributes.items()
                },
                "reasoning": self.cot_verdict.reasoning,
                "answer": self.cot_verdict.answer,
            }
        return {
            "candidate_set": {
                "k": self.candidate_set.k,
                "mode": {
                    "kind": self.candidate_set.mode.kind,
                    "rerank_pool": self.candidate_set.mode.rerank_pool,
                },
                "entries": [
                    {
                        "concept_id": e.concept_id,
                        "s_vv": e.s_vv,
                        "s_vt": e.s_vt,
                        "fused": e.fused,
                    }
                    for e in self.candidate_set.entries
                ],
            },
            "cot_verdict": verdict,
            "c_tilde": self.c_tilde,
            "attribute_scores": scores_json(self.attribute_scores),
            "c_tilde_a": self.c_tilde_a,
            "verification_passed": self.verification_passed,
            "pairwise_probs": self.pairwise_probs,
            "final": self.final,
            "vlm_calls": self.vlm_calls,
            "flags": list(self.flags),
        }


@dataclass(frozen=True)
class PersonalizedAnswer:
    concept_id: str
    concept_name: str
    text: str
    trace: InferenceTrace


@dataclass(frozen=True)
class QueryTask:
    """What the caller wants: recognition of a named concept, a caption, or VQA."""

    kind: str  # "recognition" | "caption" | "vqa"
    target_name: Optional[str] = None
    question: Optional[str] = None
    choices: tuple[str, ...] = ()

    @classmethod
    def recognition(cls, target_name: str) -> "QueryTask":
        return cls(kind="recognition", target_name=target_name)

    @classmethod
    def caption(cls) -> "QueryTask":
        return cls(kind="caption")

    @classmethod
    def vqa(cls, question: str, choices: Sequence[str] = ()) -> "QueryTask":
        return cls(kind="vqa", question=question, choices=tuple(choices))


@dataclass(frozen=True)
class CotSelection:
    """Outcome of the selection call, including fallbacks."""

    verdict: Optional[CotVerdict]
    letter_map: dict[str, str]
    extra_letter: Optional[str]
    chosen: str
    answer_logits: Optional[dict[str, float]]
    vlm_calls: int
    fell_back: bool
    abstained: bool


def cot_select(
    query_image: bytes,
    candidates: CandidateSet,
    records: Mapping[str, ConceptRecord],
    vlm: VlmGateway,
    *,
    media_type: str = "image/png",
    include_attributes: bool = True,
    extra_option: Optional[str] = None,
    want_logprobs: bool = False,
) -> CotSelection:
    """One chat call selecting the best candidate and its shared attributes.

    An unparseable reply is re-asked once; if that also fails the selection
    falls back to the retrieval rank-1 candidate with empty attribute lists.
    """
    ordered = [records[cid] for cid in candidates.ids()]
    if not ordered:
        raise ValueError("candidate set is empty")
    prompt, letter_map, extra_letter = render_cot_prompt(
        ordered, include_attributes=include_attributes, extra_option=extra_option
    )
    answer_letters = list(letter_map) + ([extra_letter] if extra_letter else [])
    request = ChatRequest(
        prompt_text=prompt,
        images=(ImagePayload(data=query_image, media_type=media_type),),
        want_logprobs=want_logprobs,
        max_tokens=512,
    )

    calls = 0
    verdict: Optional[CotVerdict] = None
    answer_logits: Optional[dict[str, float]] = None
    last_error: Optional[ParseFailure] = None
    for attempt in range(2):
        if attempt == 1:
            request = ChatRequest(
                prompt_text=prompt + "\n\n" + JSON_REMINDER,
                images=request.images,
                want_logprobs=want_logprobs,
                max_tokens=512,
            )
        response = vlm.chat(request)
        calls += 1
        try:
            verdict = parse_cot(
                response.text, list(letter_map), answer_letters=answer_letters
            )
            answer_logits = response.first_token_logits
            break
        except ParseFailure as exc:
            last_error = exc
            continue

    rank1 = candidates.ids()[0]
    if verdict is None:
        log.warning("selection reply unparseable after re-ask: %s", last_error)
        return CotSelection(
            verdict=None,
            letter_map=letter_map,
            extra_letter=extra_letter,
            chosen=rank1,
            answer_logits=None,
            vlm_calls=calls,
            fell_back=True,
            abstained=False,
        )

    abstained = extra_letter is not None and verdict.answer == extra_letter
    chosen = rank1 if abstained else letter_map[verdict.answer]
    return CotSelection(
        verdict=verdict,
        letter_map=letter_map,
        extra_letter=extra_letter,
        chosen=chosen,
        answer_logits=answer_logits,
        vlm_calls=calls,
        fell_back=False,
        abstained=abstained,
    )


def attribute_verify(
    query_embedding: Embedding,
    shared_attributes: Mapping[str, Sequence[str]],
    encoder: EncoderGateway,
    *,
    text_template: str = "{}",
) -> tuple[dict[str, float], Optional[str]]:
    """Cross-modal check of the claimed shared attributes.

    Each candidate scores the mean cosine between the query image embedding
    and its shared attributes' text embeddings.  Candidates with no shared
    attributes score -inf and cannot win; if every candidate is empty the
    check is inconclusive and the winner is None.  Ties break by iteration
    order (retrieval rank).
    """
    if not shared_attributes:
        raise ValueError("at least one candidate required")
    scores: dict[str, float] = {}
    best_id: Optional[str] = None
    best_score = -math.inf
    for concept_id, attributes in shared_attributes.items():
        if not attributes:
            scores[concept_id] = -math.inf
            continue
        texts = [text_template.format(a) for a in attributes]
        embeddings = encoder.encode_text_batch(texts)
        sims = [cosine(query_embedding, emb) for emb in embeddings]
        score = sum(sims) / len(sims)
        scores[concept_id] = score
        if score > best_score:
            best_score = score
            best_id = concept_id
    return scores, best_id


def _reference_media_type(record: ConceptRecord) -> str:
    suffix = Path(record.reference_image.path).suffix.casefold()
    return "image/jpeg" if suffix in (".jpg", ".jpeg") else "image/png"


def pairwise_refine(
    query_image: bytes,
    candidates: CandidateSet,
    records: Mapping[str, ConceptRecord],
    gateways: Gateways,
    *,
    media_type: str = "image/png",
    include_attributes: bool = True,
    executor: Optional[Executor] = None,
) -> tuple[dict[str, float], str, tuple[str, ...]]:
    """Per-candidate image-pair comparison; the probability argmax wins.

    Exactly one chat call per candidate (query image first, reference image
    second).  An unparseable answer folds in as probability 0 with a trace
    flag; ties and the all-no case fall back to retrieval rank order.
    """
    ordered = [records[cid] for cid in candidates.ids()]
    if not ordered:
        raise ValueError("candidate set is empty")

    def compare(record: ConceptRecord) -> tuple[str, float, Optional[str]]:
        reference = gateways.load_reference(record.reference_image)
        prompt = render_pairwise_prompt(record, include_attributes=include_attributes)
        request = ChatRequest(
            prompt_text=prompt,
            images=(
                ImagePayload(data=query_image, media_type=media_type),
                ImagePayload(data=reference, media_type=_reference_media_type(record)),
            ),
            want_logprobs=True,
            max_tokens=256,
        )
        try:
            _, p = gateways.vlm.yes_no_probability(request)
            return record.concept_id, p, None
        except AnswerUnparseable:
            return record.concept_id, 0.0, f"pairwise_unparseable:{record.concept_id}"

    if executor is not None:
        results = list(executor.map(compare, ordered))
    else:
        results = [compare(record) for record in ordered]

    probs: dict[str, float] = {}
    flags: list[str] = []
    chosen: Optional[str] = None
    best = -1.0
    for concept_id, p, flag in results:  # rank order: first strict max wins ties
        probs[concept_id] = p
        if flag:
            flags.append(flag)
        if p > best:
            best = p
            chosen = concept_id
    if all(p < 0.5 for p in probs.values()):
        flags.append("pairwise_all_no")
    return probs, chosen, tuple(flags)


def _letter_logit(logits: Mapping[str, float], letter: str) -> Optional[float]:
    best: Optional[float] = None
    for token, logprob in logits.items():
        stripped = "".join(ch for ch in token if ch.isalpha()).upper()
        if stripped == letter:
            best = logprob if best is None else max(best, logprob)
    return best


def infer_concept(
    query_image: bytes,
    db: ConceptDatabase,
    gateways: Gateways,
    config: PipelineConfig = PipelineConfig(),
    *,
    media_type: str = "image/png",
    executor: Optional[Executor] = None,
) -> InferenceTrace:
    """Full recognition pipeline for one query image.

    Retrieval always runs; the selection call runs unless CoT is disabled;
    the configured verification strategy decides whether the pairwise pass
    fires.  The trace records every intermediate value and the exact number
    of chat calls spent.
    """
    config.validate()
    snapshot = db.snapshot()
    if not snapshot:
        raise EmptyDatabase("cannot infer against an empty database")
    records = {r.concept_id: r for r in snapshot}

    query_embedding = gateways.encoder.encode_image(query_image, media_type)
    candidates = retrieve(query_embedding, snapshot, config.k, config.retrieval_mode)

    flags: list[str] = []
    vlm_calls = 0
    verdict: Optional[CotVerdict] = None
    c_tilde = candidates.ids()[0]
    attribute_scores: Optional[dict[str, float]] = None
    c_tilde_a: Optional[str] = None
    verification_passed: Optional[bool] = None
    selection: Optional[CotSelection] = None

    if config.enable_cot:
        extra_option = None
        want_logprobs = False
        if config.verification == "abstention":
            extra_option = ABSTENTION_OPTION
        elif config.verification == "logits_based":
            extra_option = IDK_OPTION
            want_logprobs = True
        selection = cot_select(
            query_image,
            candidates,
            records,
            gateways.vlm,
            media_type=media_type,
            include_attributes=config.enable_fingerprints,
            extra_option=extra_option,
            want_logprobs=want_logprobs,
        )
        vlm_calls += selection.vlm_calls
        verdict = selection.verdict
        c_tilde = selection.chosen
        if selection.fell_back:
            flags.append("cot_fallback")
        if selection.abstained:
            flags.append("cot_abstained")

    if config.verification == "attribute":
        shared: dict[str, Sequence[str]] = {}
        for cid in candidates.ids():
            shared[cid] = ()
        if verdict is not None and selection is not None:
            for letter, cid in selection.letter_map.items():
                shared[cid] = verdict.matched_attributes.get(letter, ())
        attribute_scores, c_tilde_a = attribute_verify(
            query_embedding,
            shared,
            gateways.encoder,
            text_template=config.attribute_text_template,
        )
        verification_passed = c_tilde_a is not None and c_tilde_a == c_tilde
    elif config.verification == "abstention":
        verification_passed = not (
            selection is not None and (selection.abstained or selection.fell_back)
        )
    elif config.verification == "logits_based":
        verification_passed = True
        if selection is not None:
            if selection.abstained or selection.fell_back:
                verification_passed = False
            elif selection.answer_logits and selection.verdict is not None:
                idk = _letter_logit(selection.answer_logits, selection.extra_letter)
                chosen_lp = _letter_logit(
                    selection.answer_logits, selection.verdict.answer
                )
                if idk is not None and chosen_lp is not None:
                    verification_passed = idk < chosen_lp - config.idk_margin
            # logits unavailable: fall back to the abstention semantics above

    run_pairwise = config.enable_pairwise and (
        config.verification == "pairwise_always"
        or (
            config.verification in ("attribute", "abstention", "logits_based")
            and verification_passed is False
        )
    )

    pairwise_probs: Optional[dict[str, float]] = None
    final = c_tilde
    if run_pairwise:
        pairwise_probs, final, pairwise_flags = pairwise_refine(
            query_image,
            candidates,
            records,
            gateways,
            media_type=media_type,
            include_attributes=config.enable_fingerprints,
            executor=executor,
        )
        vlm_calls += len(candidates.entries)
        flags.extend(pairwise_flags)

    return InferenceTrace(
        candidate_set=candidates,
        cot_verdict=verdict,
        c_tilde=c_tilde,
        attribute_scores=attribute_scores,
        c_tilde_a=c_tilde_a,
        verification_passed=verification_passed,
        pairwise_probs=pairwise_probs,
        final=final,
        vlm_calls=vlm_calls,
        flags=tuple(flags),
    )


def _single_candidate_set(query_embedding: Embedding, record: ConceptRecord,
                          config: PipelineConfig) -> CandidateSet:
    entries = score_all(query_embedding, [record])
    return CandidateSet(entries=tuple(entries), k=1, mode=config.retrieval_mode)


def answer_query(
    query_image: bytes,
    task: QueryTask,
    db: ConceptDatabase,
    gateways: Gateways,
    config: PipelineConfig = PipelineConfig(),
    *,
    media_type: str = "image/png",
    executor: Optional[Executor] = None,
) -> PersonalizedAnswer:
    """Personalized recognition, captioning, or VQA for one query image.

    Recognition compares the resolved concept against the asked-about name
    (or, in direct mode, skips retrieval and pairwise-checks the named
    concept alone).  Caption and VQA resolve the concept first, then make one
    generation call that injects the resolved name and description.
    """
    config.validate()
    if not db.snapshot():
        raise EmptyDatabase("cannot answer against an empty database")

    if task.kind == "recognition":
        if not task.target_name:
            raise ValueError("recognition requires target_name")
        target = db.get_by_name(task.target_name)
        if target is None:
            raise UnknownTargetConcept(f"no concept named {task.target_name!r}")

        if config.recognition_mode == "direct_pairwise":
            query_embedding = gateways.encoder.encode_image(query_image, media_type)
            candidates = _single_candidate_set(query_embedding, target, config)
            probs, _, pairwise_flags = pairwise_refine(
                query_image,
                candidates,
                {target.concept_id: target},
                gateways,
                media_type=media_type,
                include_attributes=config.enable_fingerprints,
                executor=executor,
            )
            p = probs[target.concept_id]
            yes = p >= config.pairwise_threshold
            trace = InferenceTrace(
                candidate_set=candidates,
                cot_verdict=None,
                c_tilde=target.concept_id,
                attribute_scores=None,
                c_tilde_a=None,
                verification_passed=None,
                pairwise_probs=probs,
                final=target.concept_id,
                vlm_calls=1,
                flags=("direct_pairwise",) + pairwise_flags,
            )
            return PersonalizedAnswer(
                concept_id=target.concept_id,
                concept_name=target.name,
                text="yes" if yes else "no",
                trace=trace,
            )

        trace = infer_concept(
            query_image, db, gateways, config,
            media_type=media_type, executor=executor,
        )
        resolved = db.get(trace.final)
        yes = resolved is not None and (
            resolved.name.casefold() == task.target_name.strip().casefold()
        )
        return PersonalizedAnswer(
            concept_id=trace.final,
            concept_name=resolved.name if resolved else trace.final,
            text="yes" if yes else "no",
            trace=trace,
        )

    trace = infer_concept(
        query_image, db, gateways, config,
        media_type=media_type, executor=executor,
    )
    record = db.get(trace.final)
    if record is None:  # cannot happen: final always comes from the snapshot
        raise UnknownTargetConcept(f"resolved concept {trace.final} missing")

    if task.kind == "caption":
        prompt = render_caption_prompt(record)
    elif task.kind == "vqa":
        if not task.question:
            raise ValueError("vqa requires a question")
        prompt = render_vqa_prompt(record, task.question, task.choices)
    else:
        raise ValueError(f"unknown task kind {task.kind!r}")

    response = gateways.vlm.chat(
        ChatRequest(
            prompt_text=prompt,
            images=(ImagePayload(data=query_image, media_type=media_type),),
            max_tokens=512,
        )
    )
    return PersonalizedAnswer(
        concept_id=record.concept_id,
        concept_name=record.name,
        text=response.text,
        trace=trace,
    )
