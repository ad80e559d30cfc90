"""Prompt templates and strict parsing of the model's JSON replies.

Three wire schemas flow through here: the enrollment reply (description,
category, distinct features), the candidate-selection verdict (per-option
shared attributes plus an answer letter), and the pairwise yes/no reply.
Templates live as text assets with ``⟨placeholder⟩`` markers; parsers apply a
fixed recovery ladder — fence/prose stripping, first balanced JSON block,
case-insensitive keys — and raise :class:`ParseFailure` with the stage
reached when the ladder runs out.
"""

from __future__ import annotations

import json
import logging
import re
import string
from dataclasses import dataclass
from importlib import resources
from typing import Mapping, Optional, Sequence

from .db import ConceptRecord
from .errors import ParseFailure

log = logging.getLogger(__name__)

LETTERS = string.ascii_uppercase

# literal strings the verdict schema allows for "no shared attributes"
_NONE_WORDS = frozenset({"none", "n/a", "na", ""})

# appended on the single re-ask after a malformed reply
JSON_REMINDER = "Output only the JSON."


def _load_template(name: str) -> str:
    return (
        resources.files("percept").joinpath(f"prompts/{name}").read_text("utf-8")
    )


_TEMPLATES = {
    name: _load_template(f"{name}.txt")
    for name in ("enrollment", "cot", "pairwise", "caption", "vqa")
}


def _substitute(template: str, mapping: Mapping[str, str]) -> str:
    out = template
    for key, value in mapping.items():
        out = out.replace(f"⟨{key}⟩", value)
    return out


# --- reply types --------------------------------------------------------------

@dataclass(frozen=True)
class EnrollmentReply:
    general: str
    category: str
    distinct_features: tuple[str, ...]


@dataclass(frozen=True)
class CotVerdict:
    """Parsed selection output: shared attributes per option plus the answer."""

    matched_attributes: dict[str, tuple[str, ...]]
    reasoning: str
    answer: str


@dataclass(frozen=True)
class PairwiseReply:
    reasoning: str
    answer: str  # "yes" | "no"


# --- rendering ----------------------------------------------------------------

def render_enrollment_prompt(category: str, name: str) -> str:
    if not category.strip():
        raise ValueError("category must be non-empty")
    if not name.strip():
        raise ValueError("name must be non-empty")
    return _substitute(_TEMPLATES["enrollment"], {"category": category, "name": name})


def _features_block(attributes: Sequence[str]) -> str:
    return "[" + ", ".join(attributes) + "]"


def render_cot_prompt(
    candidates: Sequence[ConceptRecord],
    *,
    include_attributes: bool = True,
    extra_option: Optional[str] = None,
) -> tuple[str, dict[str, str], Optional[str]]:
    """Candidate-selection prompt over the ranked candidates.

    Options are lettered A, B, C... in the given (retrieval rank) order; an
    ``extra_option`` (e.g. an uncertainty escape hatch) takes the next letter.
    Returns (prompt, letter -> concept_id map, extra option letter or None).
    """
    total = len(candidates) + (1 if extra_option else 0)
    if not candidates:
        raise ValueError("at least one candidate required")
    if total > len(LETTERS):
        raise ValueError(f"at most {len(LETTERS)} options supported")

    letter_map: dict[str, str] = {}
    option_blocks: list[str] = []
    schema_lines: list[str] = []
    for i, record in enumerate(candidates):
        letter = LETTERS[i]
        letter_map[letter] = record.concept_id
        info = f"general: {record.description}, category: {record.category}"
        if include_attributes:
            info += f", distinct features: {_features_block(record.attributes)}"
        option_blocks.append(f"{letter}. Name: {record.name},\nInfo: {{{info}}}\n")
        schema_lines.append(
            f'  "{letter}": "[Matching attributes for option {letter}]",'
        )

    extra_letter: Optional[str] = None
    if extra_option:
        extra_letter = LETTERS[len(candidates)]
        option_blocks.append(f"{extra_letter}. {extra_option}\n")

    letters = list(letter_map) + ([extra_letter] if extra_letter else [])
    prompt = _substitute(
        _TEMPLATES["cot"],
        {
            "count": str(len(candidates)),
            "options": "".join(option_blocks),
            "letters": ", ".join(letters),
            "schema": "\n".join(schema_lines),
        },
    )
    return prompt, letter_map, extra_letter


def render_pairwise_prompt(record: ConceptRecord,
                           *, include_attributes: bool = True) -> str:
    if not record.name.strip() or not record.description.strip():
        raise ValueError("candidate needs a non-empty name and description")
    if include_attributes and not record.attributes:
        # enrollment normally guarantees attributes; render [] rather than fail
        log.warning("candidate %s has no fingerprint attributes", record.name)
    features = _features_block(record.attributes) if include_attributes else "[]"
    return _substitute(
        _TEMPLATES["pairwise"],
        {
            "name": record.name,
            "description": record.description,
            "category": record.category,
            "features": features,
        },
    )


def render_caption_prompt(record: ConceptRecord) -> str:
    return _substitute(
        _TEMPLATES["caption"],
        {"name": record.name, "description": record.description.rstrip(". ")},
    )


def render_vqa_prompt(record: ConceptRecord, question: str,
                      choices: Sequence[str] = ()) -> str:
    if not question.strip():
        raise ValueError("question must be non-empty")
    return _substitute(
        _TEMPLATES["vqa"],
        {
            "name": record.name,
            "description": record.description.rstrip(". "),
            "question": question,
            "choices": ", ".join(choices) if choices else "(free-form answer)",
        },
    )


# --- parsing helpers ------------------------------------------------------------

_FENCE_RE = re.compile(r"```[a-zA-Z]*\n?|```")


def extract_json_block(raw: str) -> Optional[str]:
    """First balanced ``{...}`` block, ignoring braces inside strings."""
    start = raw.find("{")
    if start < 0:
        return None
    depth = 0
    in_string = False
    escaped = False
    for i in range(start, len(raw)):
        ch = raw[i]
        if in_string:
            if escaped:
                escaped = False
            elif ch == "\\":
                escaped = True
            elif ch == '"':
                in_string = False
            continue
        if ch == '"':
            in_string = True
        elif ch == "{":
            depth += 1
        elif ch == "}":
            depth -= 1
            if depth == 0:
                return raw[start : i + 1]
    return None


def _load_object(raw: str) -> tuple[dict, str]:
    """Lenient JSON-object load; returns (object, recovery stage reached)."""
    if not raw.strip():
        raise ParseFailure("empty model output", raw=raw, stage="direct")
    stage = "direct"
    try:
        obj = json.loads(raw)
        if isinstance(obj, dict):
            return obj, stage
    except json.JSONDecodeError:
        pass
    stage = "block"
    cleaned = _FENCE_RE.sub("", raw)
    block = extract_json_block(cleaned)
    if block is not None:
        try:
            obj = json.loads(block)
            if isinstance(obj, dict):
                return obj, stage
        except json.JSONDecodeError:
            pass
    raise ParseFailure("no JSON object found in model output", raw=raw, stage=stage)


def _fold_keys(obj: dict) -> dict[str, object]:
    """Case-insensitive key view; later duplicates win."""
    return {str(k).strip().casefold(): v for k, v in obj.items()}


def split_attributes(value: str) -> list[str]:
    """Split a comma-joined attribute string on commas outside brackets/quotes."""
    parts: list[str] = []
    buf: list[str] = []
    depth = 0
    quote: Optional[str] = None
    for ch in value:
        if quote:
            if ch == quote:
                quote = None
            buf.append(ch)
            continue
        if ch in "\"'":
            quote = ch
            buf.append(ch)
        elif ch in "([{":
            depth += 1
            buf.append(ch)
        elif ch in ")]}":
            depth = max(0, depth - 1)
            buf.append(ch)
        elif ch == "," and depth == 0:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return [p.strip() for p in parts if p.strip()]


def _attribute_list(value: object) -> tuple[str, ...]:
    """List or comma-string attribute field -> tuple, with None normalization."""
    if value is None:
        return ()
    if isinstance(value, str):
        if value.strip().casefold() in _NONE_WORDS:
            return ()
        items = split_attributes(value)
    elif isinstance(value, (list, tuple)):
        items = [str(v).strip() for v in value]
    else:
        items = [str(value).strip()]
    return tuple(
        item for item in items
        if item and item.casefold() not in _NONE_WORDS
    )


def _dedupe(items: Sequence[str], max_len: int = 200) -> tuple[str, ...]:
    seen: set[str] = set()
    out: list[str] = []
    for item in items:
        trimmed = item.strip()[:max_len]
        key = trimmed.casefold()
        if trimmed and key not in seen:
            seen.add(key)
            out.append(trimmed)
    return tuple(out)


# --- parsers --------------------------------------------------------------------

def parse_enrollment(raw: str) -> EnrollmentReply:
    """Enrollment reply: exactly the keys general / category / distinct features."""
    obj, stage = _load_object(raw)
    folded = _fold_keys(obj)
    expected = {"general", "category", "distinct features"}
    if set(folded) != expected:
        raise ParseFailure(
            f"enrollment reply keys {sorted(folded)} != {sorted(expected)}",
            raw=raw,
            stage="keys",
        )
    general = str(folded["general"]).strip()
    if not general:
        raise ParseFailure("enrollment 'general' is empty", raw=raw, stage=stage)
    features = _dedupe(_attribute_list(folded["distinct features"]))
    if not features:
        raise ParseFailure(
            "enrollment 'distinct features' is empty", raw=raw, stage=stage
        )
    return EnrollmentReply(
        general=general,
        category=str(folded["category"]).strip(),
        distinct_features=features,
    )


def _clean_answer_letter(value: object) -> str:
    text = re.sub(r"[^A-Za-z]", "", str(value))
    return text.upper()


def parse_cot(
    raw: str,
    expected_letters: Sequence[str],
    answer_letters: Optional[Sequence[str]] = None,
) -> CotVerdict:
    """Selection verdict over the presented options.

    ``expected_letters`` are the candidate options that carry attribute lists;
    ``answer_letters`` (default: same) is the set the answer may come from —
    wider when an uncertainty option was offered.
    """
    obj, stage = _load_object(raw)
    folded = _fold_keys(obj)
    allowed = tuple(answer_letters) if answer_letters is not None else tuple(expected_letters)

    answer_value = folded.get("answer")
    if answer_value is None:
        raise ParseFailure("verdict has no Answer field", raw=raw, stage=stage)
    answer = _clean_answer_letter(answer_value)
    if answer not in allowed:
        raise ParseFailure(
            f"answer {answer_value!r} outside option set {list(allowed)}",
            raw=raw,
            stage=stage,
        )

    matched: dict[str, tuple[str, ...]] = {}
    for letter in expected_letters:
        matched[letter] = _attribute_list(folded.get(letter.casefold()))

    reasoning = str(folded.get("reasoning", "") or "")
    return CotVerdict(matched_attributes=matched, reasoning=reasoning, answer=answer)


def parse_pairwise(raw: str) -> PairwiseReply:
    obj, stage = _load_object(raw)
    folded = _fold_keys(obj)
    answer_value = folded.get("answer")
    if answer_value is None:
        raise ParseFailure("pairwise reply has no Answer field", raw=raw, stage=stage)
    word = re.sub(r"[^A-Za-z]", "", str(answer_value)).casefold()
    if word not in ("yes", "no"):
        raise ParseFailure(
            f"pairwise answer {answer_value!r} is not yes/no", raw=raw, stage=stage
        )
    return PairwiseReply(
        reasoning=str(folded.get("reasoning", "") or ""), answer=word
    )
