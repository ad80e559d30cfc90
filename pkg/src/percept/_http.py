"""Shared HTTP plumbing for the remote gateways: auth, retries, backoff."""

from __future__ import annotations

import logging
import os
import random
import time
from typing import Callable, Optional

import httpx

from .errors import BackendUnavailable

log = logging.getLogger(__name__)

# statuses worth retrying; other 4xx fail immediately
RETRYABLE_STATUSES = frozenset({408, 429, 500, 502, 503, 504})


def bearer_headers(api_key_env: Optional[str]) -> dict[str, str]:
    """Authorization header from the env var named in the config, if set."""
    if not api_key_env:
        return {}
    key = os.environ.get(api_key_env, "")
    if not key:
        return {}
    return {"Authorization": f"Bearer {key}"}


def post_json_with_retries(
    client: httpx.Client,
    url: str,
    body: dict,
    *,
    headers: dict[str, str],
    max_retries: int,
    base_delay: float = 0.25,
    max_delay: float = 8.0,
    sleep: Optional[Callable[[float], None]] = None,
    rng: Optional[random.Random] = None,
) -> httpx.Response:
    """POST with exponential backoff plus jitter.

    Transport failures and retryable statuses are retried up to
    ``max_retries`` attempts total, then raised as BackendUnavailable.
    Non-retryable HTTP errors fail immediately.
    """
    rng = rng or random.Random()
    if sleep is None:
        sleep = time.sleep
    attempts = max(1, max_retries)
    last_error: Exception | None = None
    for attempt in range(attempts):
        try:
            response = client.post(url, json=body, headers=headers)
        except httpx.HTTPError as exc:
            last_error = exc
            log.debug("transport error on %s (attempt %d): %s", url, attempt + 1, exc)
        else:
            if response.status_code == 200:
                return response
            if response.status_code not in RETRYABLE_STATUSES:
                raise BackendUnavailable(
                    f"{url} returned HTTP {response.status_code}: "
                    f"{response.text[:200]}"
                )
            last_error = BackendUnavailable(
                f"{url} returned HTTP {response.status_code}"
            )
        if attempt + 1 < attempts:
            delay = min(max_delay, base_delay * (2 ** attempt))
            sleep(delay * (0.5 + rng.random() / 2))
    raise BackendUnavailable(
        f"{url} unavailable after {attempts} attempt(s): {last_error}"
    )
