"""Evaluation harness: recognition/caption/VQA metrics, dataset splits, runs.

Recognition is scored as binary classification (recall on positives,
specificity on negatives, and their uniform average).  Captioning uses hard
recall — does the concept's name literally appear in the caption — and VQA is
exact-match accuracy over closed choices.  The split builder partitions each
concept's images around their mean embedding: the most central image becomes
the enrollment reference and the outliers become queries.
"""

from __future__ import annotations

import json
import logging
import random
import re
from dataclasses import dataclass
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Mapping, Optional, Sequence

import numpy as np

from .db import ConceptDatabase, Embedding
from .errors import NoNegatives, NoPositives, PerceptError, TooFewImages
from .inference import Gateways, PersonalizedAnswer, PipelineConfig, QueryTask, answer_query
from .retrieval import hit_at_k

log = logging.getLogger(__name__)


# --- metrics -------------------------------------------------------------------

@dataclass(frozen=True)
class RecognitionStats:
    tp: int
    fn: int
    tn: int
    fp: int
    pos_acc: float
    neg_acc: float
    wtd: float


def recognition_metrics(
    results: Sequence[tuple[bool, bool]]
) -> RecognitionStats:
    """Recall, specificity, and their uniform average.

    ``results`` holds (is_positive_sample, answered_yes) pairs.  Both classes
    must be present; an absent class makes its rate (and the average)
    undefined, which is reported as an error rather than a silent zero.
    """
    if not results:
        raise ValueError("results must be non-empty")
    tp = sum(1 for pos, yes in results if pos and yes)
    fn = sum(1 for pos, yes in results if pos and not yes)
    tn = sum(1 for pos, yes in results if not pos and not yes)
    fp = sum(1 for pos, yes in results if not pos and yes)
    if tp + fn == 0:
        raise NoPositives("no positive samples; pos_acc undefined")
    if tn + fp == 0:
        raise NoNegatives("no negative samples; neg_acc undefined")
    pos_acc = tp / (tp + fn)
    neg_acc = tn / (tn + fp)
    return RecognitionStats(
        tp=tp, fn=fn, tn=tn, fp=fp,
        pos_acc=pos_acc, neg_acc=neg_acc, wtd=(pos_acc + neg_acc) / 2.0,
    )


_SEPARATORS = re.compile(r"[_\-\s]+")


def _normalize_name_text(text: str) -> str:
    return _SEPARATORS.sub(" ", text.casefold()).strip()


def hard_recall(captions: Sequence[tuple[str, str]]) -> float:
    """Fraction of captions containing the true concept name.

    Matching is case-insensitive with underscores and hyphens treated as
    spaces, so "Sleeping_Shiba" matches "sleeping shiba".
    """
    if not captions:
        raise ValueError("captions must be non-empty")
    hits = sum(
        1
        for caption, name in captions
        if _normalize_name_text(name) in _normalize_name_text(caption)
    )
    return hits / len(captions)


def _normalize_choice(text: str) -> str:
    return re.sub(r"^[^0-9A-Za-z]+|[^0-9A-Za-z]+$", "", text.strip()).casefold()


def vqa_accuracy(results: Sequence[tuple[str, str]]) -> float:
    """Exact-match fraction after trimming, case-folding, and edge punctuation."""
    if not results:
        raise ValueError("results must be non-empty")
    hits = sum(
        1
        for predicted, gold in results
        if _normalize_choice(predicted) == _normalize_choice(gold)
    )
    return hits / len(results)


# --- split builder ----------------------------------------------------------------

@dataclass(frozen=True)
class ConceptSplit:
    reference: str
    queries: tuple[str, ...]


@dataclass(frozen=True)
class SplitSpec:
    concepts: dict[str, ConceptSplit]

    def to_json_dict(self) -> dict:
        return {
            "concepts": {
                name: {"reference": split.reference, "queries": list(split.queries)}
                for name, split in sorted(self.concepts.items())
            }
        }


def build_split(
    images_per_concept: Mapping[str, Sequence[tuple[str, Embedding]]],
    n_query: Optional[int] = None,
) -> SplitSpec:
    """Reference/query split around each concept's mean embedding.

    The image closest to the (renormalized) mean becomes the reference; the
    rest become queries ordered furthest-first.  Ties break by ascending
    image id.  ``n_query=None`` keeps all remaining images as queries.
    """
    concepts: dict[str, ConceptSplit] = {}
    for name, images in images_per_concept.items():
        if len(images) < 2:
            raise TooFewImages(
                f"concept {name!r} has {len(images)} image(s); need at least 2"
            )
        matrix = np.stack([emb.values for _, emb in images])
        anchor = Embedding(matrix.mean(axis=0)).values
        sims = matrix @ anchor

        order = sorted(range(len(images)), key=lambda i: (-sims[i], images[i][0]))
        reference_idx = order[0]
        rest = sorted(
            (i for i in range(len(images)) if i != reference_idx),
            key=lambda i: (sims[i], images[i][0]),
        )
        if n_query is not None:
            rest = rest[:n_query]
        concepts[name] = ConceptSplit(
            reference=images[reference_idx][0],
            queries=tuple(images[i][0] for i in rest),
        )
    return SplitSpec(concepts=concepts)


# --- eval runner ---------------------------------------------------------------------

TASKS = ("recognition", "caption", "vqa")


def validate_manifest(manifest: Mapping) -> None:
    """Structural check of a dataset manifest."""
    if "concepts" not in manifest or "tasks" not in manifest:
        raise ValueError("manifest needs 'concepts' and 'tasks' sections")
    for concept in manifest["concepts"]:
        for key in ("name", "category", "reference_image"):
            if key not in concept:
                raise ValueError(f"concept entry missing {key!r}")
    tasks = manifest["tasks"]
    for entry in tasks.get("recognition", ()):
        for key in ("query_image", "target_name", "label"):
            if key not in entry:
                raise ValueError(f"recognition entry missing {key!r}")
        if entry["label"] not in ("pos", "neg"):
            raise ValueError(f"recognition label must be pos|neg, got {entry['label']!r}")
    for entry in tasks.get("caption", ()):
        for key in ("query_image", "true_name"):
            if key not in entry:
                raise ValueError(f"caption entry missing {key!r}")
    for entry in tasks.get("vqa", ()):
        for key in ("query_image", "question", "choices", "gold"):
            if key not in entry:
                raise ValueError(f"vqa entry missing {key!r}")


def _aggregate(per_seed: Mapping[str, list[float]]) -> dict:
    out = {}
    for metric, values in sorted(per_seed.items()):
        if len(set(values)) == 1:
            # identical per-seed values aggregate exactly (the deterministic
            # backends case); float summation noise must not fake a spread
            mean, std = values[0], 0.0
        else:
            mean = float(np.mean(values))
            std = float(np.std(np.asarray(values, dtype=np.float64)))
        out[metric] = {"mean": mean, "std": std, "per_seed": list(values)}
    return out


@dataclass
class _QueryOutcome:
    query_id: str
    answer: Optional[PersonalizedAnswer]
    error: Optional[PerceptError]
    entry: Mapping


def _run_one(
    entry: Mapping,
    task: str,
    query_id: str,
    db: ConceptDatabase,
    gateways: Gateways,
    config: PipelineConfig,
    image_root: Path,
) -> _QueryOutcome:
    try:
        image_bytes = (image_root / entry["query_image"]).read_bytes()
        if task == "recognition":
            query_task = QueryTask.recognition(entry["target_name"])
        elif task == "caption":
            query_task = QueryTask.caption()
        else:
            query_task = QueryTask.vqa(entry["question"], entry.get("choices", ()))
        answer = answer_query(image_bytes, query_task, db, gateways, config)
        return _QueryOutcome(query_id=query_id, answer=answer, error=None, entry=entry)
    except PerceptError as exc:
        log.warning("query %s failed: %s", query_id, exc)
        return _QueryOutcome(query_id=query_id, answer=None, error=exc, entry=entry)
    except OSError as exc:
        failure = PerceptError(f"cannot read query image: {exc}")
        return _QueryOutcome(query_id=query_id, answer=None, error=failure, entry=entry)


def _seed_metrics(task: str, outcomes: Sequence[_QueryOutcome],
                  db: ConceptDatabase, config: PipelineConfig) -> dict[str, float]:
    ok = [o for o in outcomes if o.answer is not None]
    metrics: dict[str, float] = {}
    if task == "recognition":
        pairs = [
            (o.entry["label"] == "pos", o.answer.text == "yes") for o in ok
        ]
        stats = recognition_metrics(pairs)
        metrics["pos_acc"] = stats.pos_acc
        metrics["neg_acc"] = stats.neg_acc
        metrics["wtd"] = stats.wtd
        if config.recognition_mode == "pipeline_match":
            hits = []
            for o in ok:
                if o.entry["label"] != "pos":
                    continue
                target = db.get_by_name(o.entry["target_name"])
                if target is not None:
                    hits.append(
                        hit_at_k(o.answer.trace.candidate_set, target.concept_id)
                    )
            if hits:
                metrics["hit_at_k"] = sum(hits) / len(hits)
    elif task == "caption":
        metrics["hard_recall"] = hard_recall(
            [(o.answer.text, o.entry["true_name"]) for o in ok]
        )
        hits = []
        for o in ok:
            target = db.get_by_name(o.entry["true_name"])
            if target is not None:
                hits.append(hit_at_k(o.answer.trace.candidate_set, target.concept_id))
        if hits:
            metrics["hit_at_k"] = sum(hits) / len(hits)
    else:
        metrics["vqa_accuracy"] = vqa_accuracy(
            [(o.answer.text, o.entry["gold"]) for o in ok]
        )
    return metrics


def run_eval(
    db: ConceptDatabase,
    manifest: Mapping,
    task: str,
    config: PipelineConfig,
    seeds: Sequence[int],
    gateways: Gateways,
    *,
    image_root: str | Path = ".",
    trace_path: Optional[str | Path] = None,
    report_path: Optional[str | Path] = None,
    clock: Callable[[], datetime] = lambda: datetime.now(timezone.utc),
) -> dict:
    """Run the pipeline over a dataset's task queries for each seed.

    Seeds shuffle execution order (metrics are order-invariant folds over
    query id, so deterministic backends give zero std across seeds).  Query
    failures are recorded and skipped, never aborting the run.  Returns the
    report dict; optionally writes it plus a per-query trace JSONL.
    """
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    if not seeds:
        raise ValueError("at least one seed required")
    validate_manifest(manifest)
    config.validate()

    entries = list(manifest["tasks"].get(task, ()))
    if not entries:
        raise ValueError(f"manifest has no {task!r} queries")
    image_root = Path(image_root)

    per_seed_metrics: dict[str, list[float]] = {}
    error_counts: list[int] = []
    trace_lines: list[str] = []

    for seed in seeds:
        order = list(range(len(entries)))
        random.Random(seed).shuffle(order)
        outcomes: list[_QueryOutcome] = []
        for index in order:
            query_id = f"{task}:{index:04d}"
            outcomes.append(
                _run_one(entries[index], task, query_id, db, gateways, config,
                         image_root)
            )
        outcomes.sort(key=lambda o: o.query_id)
        error_counts.append(sum(1 for o in outcomes if o.error is not None))

        for metric, value in _seed_metrics(task, outcomes, db, config).items():
            per_seed_metrics.setdefault(metric, []).append(value)

        for o in outcomes:
            if o.answer is not None:
                line = {
                    "seed": seed,
                    "query_id": o.query_id,
                    "trace": o.answer.trace.to_json_dict(),
                    "text": o.answer.text,
                    "concept_name": o.answer.concept_name,
                }
            else:
                line = {
                    "seed": seed,
                    "query_id": o.query_id,
                    "error": {"code": o.error.code, "message": str(o.error)},
                }
            trace_lines.append(json.dumps(line, sort_keys=True))

    report = {
        "task": task,
        "seeds": list(seeds),
        "query_count": len(entries),
        "config": config.to_dict(),
        "metrics": _aggregate(per_seed_metrics),
        "error_count": {"per_seed": error_counts, "total": sum(error_counts)},
        "generated_at": clock().isoformat(),
    }

    if trace_path is not None:
        Path(trace_path).write_text(
            "".join(line + "\n" for line in trace_lines), encoding="utf-8"
        )
    if report_path is not None:
        Path(report_path).write_text(
            json.dumps(report, sort_keys=True, indent=2) + "\n", encoding="utf-8"
        )
    return report
