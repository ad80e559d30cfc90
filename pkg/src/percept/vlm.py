"""Multimodal chat gateway: remote OpenAI-compatible client and scripted mock.

Besides plain generation, the gateway exposes the yes/no decision probability
used by pairwise matching: the log-probabilities of the Yes and No tokens at
the answer position are renormalized with a two-way softmax, which is shift
invariant and keeps the score in [0, 1] even for negative logits.
"""

from __future__ import annotations

import base64
import json
import logging
import math
import re
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import httpx

from ._http import bearer_headers, post_json_with_retries
from .encoders import image_label
from .errors import (
    AnswerUnparseable,
    MalformedResponse,
    ResponseTruncated,
    ScriptMiss,
)

log = logging.getLogger(__name__)

_ANSWER_KEY_RE = re.compile(r'"answer"\s*:\s*"?', re.IGNORECASE)
_YES_NO_RE = re.compile(r"\b(yes|no)\b", re.IGNORECASE)


@dataclass(frozen=True)
class ImagePayload:
    data: bytes
    media_type: str = "image/png"


@dataclass(frozen=True)
class ChatRequest:
    """Single-turn multimodal request: up to two images plus a text prompt."""

    prompt_text: str
    images: tuple[ImagePayload, ...] = ()
    want_logprobs: bool = False
    max_tokens: int = 512
    temperature: float = 0.0

    def validate(self) -> None:
        if not self.prompt_text.strip():
            raise ValueError("prompt_text must be non-empty")
        if len(self.images) > 2:
            raise ValueError("at most 2 images per request")
        if self.max_tokens < 1:
            raise ValueError("max_tokens must be positive")
        if self.temperature < 0:
            raise ValueError("temperature must be non-negative")


@dataclass(frozen=True)
class ChatResponse:
    text: str
    # log-probabilities of the top alternatives at the answer token position
    first_token_logits: Optional[dict[str, float]] = None


@dataclass(frozen=True)
class VlmBackendConfig:
    kind: str  # "remote" | "mock"
    model_id: str
    base_url: Optional[str] = None
    api_key_env: Optional[str] = None
    timeout: float = 60.0
    max_retries: int = 3
    max_inflight: int = 2
    # compute Eq-style raw logit ratio instead of the two-way softmax
    logit_ratio_literal: bool = False
    script_path: Optional[str] = None

    def validate(self) -> None:
        if self.kind not in ("remote", "mock"):
            raise ValueError(f"unknown vlm kind {self.kind!r}")
        if self.kind == "remote" and not self.base_url:
            raise ValueError("remote vlm requires base_url")


def _normalize_token(token: str) -> str:
    return re.sub(r"^[^A-Za-z]+|[^A-Za-z]+$", "", token).casefold()


def two_way_softmax(yes_logit: float, no_logit: float) -> float:
    """P(yes) from two log-probabilities; exact 0.5 when equal."""
    return 1.0 / (1.0 + math.exp(no_logit - yes_logit))


def literal_logit_ratio(yes_logit: float, no_logit: float) -> float:
    """Raw ratio yes/(yes+no) clamped to [0, 1]; for fidelity experiments."""
    denominator = yes_logit + no_logit
    if denominator == 0.0:
        return 0.5
    return min(1.0, max(0.0, yes_logit / denominator))


class VlmGateway:
    """Shared request validation, in-flight cap, and yes/no scoring."""

    def __init__(self, config: VlmBackendConfig):
        config.validate()
        self.config = config
        self._inflight = threading.BoundedSemaphore(max(1, config.max_inflight))

    def chat(self, request: ChatRequest) -> ChatResponse:
        request.validate()
        with self._inflight:
            return self._chat(request)

    def _chat(self, request: ChatRequest) -> ChatResponse:
        raise NotImplementedError

    def yes_no_probability(self, request: ChatRequest) -> tuple[str, float]:
        """Answer-token confidence for a yes/no prompt.

        Prefers the answer-token log-probabilities; when the backend cannot
        supply them, falls back to the parsed text with p in {0.99, 0.01}.
        """
        if not request.want_logprobs:
            request = ChatRequest(
                prompt_text=request.prompt_text,
                images=request.images,
                want_logprobs=True,
                max_tokens=request.max_tokens,
                temperature=request.temperature,
            )
        response = self.chat(request)

        logits = response.first_token_logits
        if logits:
            yes_logit: Optional[float] = None
            no_logit: Optional[float] = None
            for token, logprob in logits.items():
                word = _normalize_token(token)
                if word == "yes":
                    yes_logit = logprob if yes_logit is None else max(yes_logit, logprob)
                elif word == "no":
                    no_logit = logprob if no_logit is None else max(no_logit, logprob)
            if yes_logit is not None and no_logit is not None:
                if self.config.logit_ratio_literal:
                    p = literal_logit_ratio(yes_logit, no_logit)
                else:
                    p = two_way_softmax(yes_logit, no_logit)
                return ("yes" if p >= 0.5 else "no", p)
            if yes_logit is not None:
                return ("yes", 0.99)
            if no_logit is not None:
                return ("no", 0.01)

        word = _parse_yes_no_text(response.text)
        if word is None:
            raise AnswerUnparseable(
                f"no yes/no answer in logits or text: {response.text[:120]!r}"
            )
        return (word, 0.99 if word == "yes" else 0.01)


def _parse_yes_no_text(text: str) -> Optional[str]:
    """Yes/no from generated text: the Answer field first, any bare word second."""
    key = _ANSWER_KEY_RE.search(text)
    if key:
        match = _YES_NO_RE.search(text, key.end())
        if match:
            return match.group(1).casefold()
    match = _YES_NO_RE.search(text)
    if match:
        return match.group(1).casefold()
    return None


# --- scripted mock -----------------------------------------------------------

@dataclass(frozen=True)
class ScriptedTurn:
    """One canned exchange; a request must match exactly one turn.

    ``image_labels`` matches the request's image labels in order (None = any
    images); ``prompt_contains``/``prompt_excludes`` are substring tests on
    the prompt (the exclude lets a script tell apart a re-ask, whose prompt
    embeds the original).
    """

    response_text: str
    image_labels: Optional[tuple[str, ...]] = None
    prompt_contains: Optional[str] = None
    prompt_excludes: Optional[str] = None
    yes_logit: Optional[float] = None
    no_logit: Optional[float] = None

    def __post_init__(self) -> None:
        if self.image_labels is None and self.prompt_contains is None:
            raise ValueError("scripted turn needs image_labels or prompt_contains")

    def matches(self, labels: Sequence[str], prompt: str) -> bool:
        if self.image_labels is not None and tuple(labels) != self.image_labels:
            return False
        if self.prompt_contains is not None and self.prompt_contains not in prompt:
            return False
        if self.prompt_excludes is not None and self.prompt_excludes in prompt:
            return False
        return True


class ScriptedVlm(VlmGateway):
    """Offline mock driven by a list of scripted turns; fails loudly on misses."""

    def __init__(self, turns: Sequence[ScriptedTurn],
                 config: Optional[VlmBackendConfig] = None):
        super().__init__(config or VlmBackendConfig(kind="mock", model_id="scripted"))
        self.turns = list(turns)
        self.calls: list[ChatRequest] = []
        self._calls_lock = threading.Lock()

    def _chat(self, request: ChatRequest) -> ChatResponse:
        with self._calls_lock:
            self.calls.append(request)
        labels = [image_label(img.data) for img in request.images]
        hits = [t for t in self.turns if t.matches(labels, request.prompt_text)]
        prefix = request.prompt_text[:80].replace("\n", " ")
        if not hits:
            raise ScriptMiss(
                f"no scripted turn matches images {labels} prompt {prefix!r}"
            )
        if len(hits) > 1:
            raise ScriptMiss(
                f"{len(hits)} scripted turns match images {labels} prompt {prefix!r}"
            )
        turn = hits[0]
        logits = None
        if request.want_logprobs and turn.yes_logit is not None and turn.no_logit is not None:
            logits = {"Yes": turn.yes_logit, "No": turn.no_logit}
        return ChatResponse(text=turn.response_text, first_token_logits=logits)


def load_script(path: str | Path) -> list[ScriptedTurn]:
    """Read a mock script file: a JSON array of turn objects."""
    raw = json.loads(Path(path).read_text(encoding="utf-8"))
    turns = []
    for obj in raw:
        labels = obj.get("image_labels")
        turns.append(
            ScriptedTurn(
                response_text=obj["response_text"],
                image_labels=tuple(labels) if labels is not None else None,
                prompt_contains=obj.get("prompt_contains"),
                prompt_excludes=obj.get("prompt_excludes"),
                yes_logit=obj.get("yes_logit"),
                no_logit=obj.get("no_logit"),
            )
        )
    return turns


# --- remote client -----------------------------------------------------------

class RemoteVlm(VlmGateway):
    """OpenAI-compatible chat completions client.

    Sends the text part first and image parts after it (query image before
    reference image), requests top-20 alternatives when log-probabilities are
    wanted, and locates the answer token by scanning the generated tokens for
    the value following the ``Answer`` key.
    """

    def __init__(self, config: VlmBackendConfig,
                 transport: Optional[httpx.BaseTransport] = None):
        super().__init__(config)
        self._client = httpx.Client(timeout=config.timeout, transport=transport)
        self._url = config.base_url.rstrip("/") + "/chat/completions"

    def close(self) -> None:
        self._client.close()

    def _chat(self, request: ChatRequest) -> ChatResponse:
        content: list[dict] = [{"type": "text", "text": request.prompt_text}]
        for img in request.images:
            data_url = (
                f"data:{img.media_type};base64,"
                + base64.b64encode(img.data).decode("ascii")
            )
            content.append(
                {"type": "image_url", "image_url": {"url": data_url}}
            )
        body: dict = {
            "model": self.config.model_id,
            "messages": [{"role": "user", "content": content}],
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        }
        if request.want_logprobs:
            body["logprobs"] = True
            body["top_logprobs"] = 20

        response = post_json_with_retries(
            self._client,
            self._url,
            body,
            headers=bearer_headers(self.config.api_key_env),
            max_retries=self.config.max_retries,
        )
        try:
            payload = response.json()
            choice = payload["choices"][0]
            text = choice["message"]["content"]
        except (json.JSONDecodeError, KeyError, IndexError, TypeError) as exc:
            raise MalformedResponse(f"bad chat payload: {exc}") from exc
        if not isinstance(text, str) or not text:
            raise MalformedResponse("chat response has empty content")
        if choice.get("finish_reason") == "length":
            raise ResponseTruncated(
                f"generation hit max_tokens={request.max_tokens}"
            )

        logits = None
        if request.want_logprobs:
            logits = _answer_token_logits(choice, text)
        return ChatResponse(text=text, first_token_logits=logits)


def _answer_token_logits(choice: dict, text: str) -> Optional[dict[str, float]]:
    """Top alternatives at the token holding the Answer value, if locatable."""
    try:
        tokens = choice["logprobs"]["content"]
    except (KeyError, TypeError):
        return None
    if not tokens:
        return None

    key = _ANSWER_KEY_RE.search(text)
    if not key:
        return None
    target = key.end()
    while target < len(text) and text[target] in ' \t\n"':
        target += 1

    offset = 0
    for entry in tokens:
        token_text = entry.get("token", "")
        end = offset + len(token_text)
        if offset <= target < end:
            out: dict[str, float] = {}
            for alt in entry.get("top_logprobs", []):
                try:
                    out[alt["token"]] = float(alt["logprob"])
                except (KeyError, TypeError, ValueError):
                    continue
            own = entry.get("logprob")
            if own is not None:
                existing = out.get(token_text)
                own = float(own)
                out[token_text] = own if existing is None else max(existing, own)
            return out or None
        offset = end
    return None


def build_vlm(config: VlmBackendConfig,
              transport: Optional[httpx.BaseTransport] = None) -> VlmGateway:
    if config.kind == "mock":
        turns = load_script(config.script_path) if config.script_path else []
        return ScriptedVlm(turns, config=config)
    return RemoteVlm(config, transport=transport)
