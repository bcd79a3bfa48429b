"""Retry loop with exponential backoff and full jitter, shared by the
score-provider and chat-completion clients. Sleep and RNG are injectable so
contract tests run without real waiting or networking."""

from __future__ import annotations

import random
import time
from typing import Callable, TypeVar

T = TypeVar("T")

BACKOFF_BASE_SECONDS = 0.5
BACKOFF_MULTIPLIER = 2.0


def call_with_retries(
    attempt: Callable[[], T],
    *,
    max_retries: int,
    is_retryable: Callable[[Exception], bool],
    base_delay: float = BACKOFF_BASE_SECONDS,
    sleeper: Callable[[float], None] = time.sleep,
    rng: random.Random | None = None,
) -> T:
    """Run `attempt` up to max_retries+1 times.

    Non-retryable exceptions propagate immediately; retryable ones sleep a
    jittered delay uniform in [0, base * 2^k) before attempt k+1, and the
    last one propagates once the budget is exhausted.
    """
    if max_retries < 0:
        raise ValueError("max_retries must be >= 0")
    rng = rng if rng is not None else random.Random()
    for attempt_index in range(max_retries + 1):
        try:
            return attempt()
        except Exception as exc:
            if not is_retryable(exc) or attempt_index == max_retries:
                raise
            sleeper(rng.uniform(0.0, base_delay * (BACKOFF_MULTIPLIER ** attempt_index)))
    raise AssertionError("unreachable")


def requests_post_json(url: str, payload: dict, timeout: float, headers: dict[str, str]) -> tuple[int, object]:
    """Default HTTP transport: POST JSON, return (status, decoded body).

    Raises TimeoutError on socket timeouts and ConnectionError on transport
    failures, so callers can classify without importing requests themselves.
    """
    import requests

    try:
        response = requests.post(url, json=payload, timeout=timeout, headers=headers)
    except requests.Timeout as exc:
        raise TimeoutError(str(exc)) from exc
    except requests.RequestException as exc:
        raise ConnectionError(str(exc)) from exc
    try:
        body = response.json()
    except ValueError:
        body = response.text
    return response.status_code, body
