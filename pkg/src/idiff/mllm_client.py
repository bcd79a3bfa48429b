"""Client for an external multimodal chat-completion endpoint.

Sends one multimodal message per sample (system text, user text, four view
images as base64 PNG data URLs) and returns the raw completion text. The
transport, sleeper and jitter RNG are injectable, so every retry/backoff,
in-flight-cap and ordering contract is testable fully in-process.
"""

from __future__ import annotations

import base64
import io
import os
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Sequence

from PIL import Image

from idiff.image_core import ImageBuffer
from idiff.rationale import PromptBundle, PromptMode
from idiff.retrying import call_with_retries, requests_post_json

AUTH_TOKEN_ENV_VAR = "IDIFF_API_TOKEN"


@dataclass(frozen=True)
class EndpointConfig:
    base_url: str  # full URL of the chat-completions endpoint
    model_name: str
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    auth_token: str | None = None
    # decoding options are passed through verbatim when set
    temperature: float | None = None
    max_tokens: int | None = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")

    def resolved_token(self) -> str | None:
        return self.auth_token or os.environ.get(AUTH_TOKEN_ENV_VAR)


class MllmError(Exception):
    """Base for endpoint failures; always names the sample."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


class RequestTimeout(MllmError):
    pass


class AuthFailure(MllmError):
    pass


class RateLimited(MllmError):
    pass


class ServerError(MllmError):
    def __init__(self, sample_id: str, status: int):
        super().__init__(sample_id, f"server failure (status {status})")
        self.status = status


class SchemaMismatch(MllmError):
    pass


_RETRYABLE = (RequestTimeout, RateLimited, ServerError)


def _png_data_url(img: ImageBuffer) -> str:
    arr = img.data[:, :, 0] if img.channels == 1 else img.data
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return "data:image/png;base64," + base64.b64encode(buf.getvalue()).decode("ascii")


def build_request_body(config: EndpointConfig, bundle: PromptBundle) -> dict:
    """Chat-completions message payload for one prompt bundle."""
    if bundle.mode is PromptMode.ANSWER_AWARE:
        # Conditioned prompts must only ask for reasoning.
        for text in (bundle.system_text, bundle.user_text):
            if "<answer>" in text:
                raise ValueError(f"sample {bundle.sample_id!r}: answer-aware prompt requests an answer tag")
    content: list[dict] = [{"type": "text", "text": bundle.user_text}]
    for img in bundle.images:
        content.append({"type": "image_url", "image_url": {"url": _png_data_url(img)}})
    body: dict = {
        "model": config.model_name,
        "messages": [
            {"role": "system", "content": bundle.system_text},
            {"role": "user", "content": content},
        ],
    }
    if config.temperature is not None:
        body["temperature"] = config.temperature
    if config.max_tokens is not None:
        body["max_tokens"] = config.max_tokens
    return body


def _extract_completion(sample_id: str, body: object) -> str:
    try:
        text = body["choices"][0]["message"]["content"]  # type: ignore[index]
    except (KeyError, IndexError, TypeError):
        raise SchemaMismatch(sample_id, f"unexpected response shape: {type(body).__name__}") from None
    if not isinstance(text, str):
        raise SchemaMismatch(sample_id, "completion content is not a string")
    return text


Transport = Callable[[str, dict, float, dict[str, str]], tuple[int, object]]


def chat_complete(
    config: EndpointConfig,
    bundle: PromptBundle,
    transport: Transport = requests_post_json,
    sleeper: Callable[[float], None] | None = None,
    rng: random.Random | None = None,
) -> str:
    """Complete one prompt; transient failures (timeout, 429, 5xx) are retried
    with jittered exponential backoff up to max_retries extra attempts."""
    body = build_request_body(config, bundle)
    headers = {}
    token = config.resolved_token()
    if token:
        headers["Authorization"] = f"Bearer {token}"

    def attempt() -> str:
        try:
            status, response = transport(config.base_url, body, config.timeout, headers)
        except TimeoutError as exc:
            raise RequestTimeout(bundle.sample_id, f"request timed out: {exc}") from exc
        except ConnectionError as exc:
            raise ServerError(bundle.sample_id, 0) from exc
        if status in (401, 403):
            raise AuthFailure(bundle.sample_id, f"authentication rejected (status {status})")
        if status == 429:
            raise RateLimited(bundle.sample_id, "rate limited (status 429)")
        if status >= 500:
            raise ServerError(bundle.sample_id, status)
        if status != 200:
            raise SchemaMismatch(bundle.sample_id, f"unexpected status {status}")
        return _extract_completion(bundle.sample_id, response)

    kwargs = {}
    if sleeper is not None:
        kwargs["sleeper"] = sleeper
    return call_with_retries(
        attempt,
        max_retries=config.max_retries,
        is_retryable=lambda exc: isinstance(exc, _RETRYABLE),
        rng=rng,
        **kwargs,
    )


def batch_complete(
    config: EndpointConfig,
    bundles: Sequence[PromptBundle],
    transport: Transport = requests_post_json,
    sleeper: Callable[[float], None] | None = None,
    rng: random.Random | None = None,
) -> list[tuple[str, str | MllmError]]:
    """Complete every bundle with at most max_in_flight concurrent requests.

    The result list matches the input order regardless of completion order;
    per-item failures are returned in place, never aborting the batch.
    """

    def one(bundle: PromptBundle) -> tuple[str, str | MllmError]:
        try:
            return bundle.sample_id, chat_complete(config, bundle, transport, sleeper, rng)
        except MllmError as exc:
            return bundle.sample_id, exc

    if not bundles:
        return []
    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        return list(pool.map(one, bundles))
