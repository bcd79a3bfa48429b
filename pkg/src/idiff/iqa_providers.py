"""Learned IQA scores (LIQE / Q-Align / SAMA) from files or a scoring service.

The models themselves are external: scores arrive either precomputed in a
line-delimited file or from a remote endpoint. Absent metrics stay absent;
nothing here ever substitutes a zero.
"""

from __future__ import annotations

import base64
import io
import json
import random
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Mapping

from PIL import Image

from idiff.image_core import VIEW_KEYS, ImageBuffer, PairSample, decompose
from idiff.retrying import call_with_retries, requests_post_json

METRIC_NAMES = ("liqe", "qalign", "sama")


class ScoreFileError(ValueError):
    """Malformed or duplicated record in a score file."""


class ScoreFetchError(Exception):
    """Base for remote scoring failures; always names the sample."""

    def __init__(self, sample_id: str, message: str):
        super().__init__(f"sample {sample_id!r}: {message}")
        self.sample_id = sample_id


class ScoreFetchTimeout(ScoreFetchError):
    pass


class ScoreServiceError(ScoreFetchError):
    def __init__(self, sample_id: str, status: int):
        super().__init__(sample_id, f"scoring service returned status {status}")
        self.status = status


class ScoreSchemaError(ScoreFetchError):
    pass


@dataclass(frozen=True)
class MetricScores:
    """Scores for one view; any subset of the three metrics may be present."""

    liqe: float | None = None
    qalign: float | None = None
    sama: float | None = None

    def __post_init__(self) -> None:
        if self.liqe is None and self.qalign is None and self.sama is None:
            raise ScoreFileError("score record carries none of liqe/qalign/sama")

    def as_dict(self) -> dict[str, float]:
        return {name: v for name in METRIC_NAMES if (v := getattr(self, name)) is not None}


@dataclass(frozen=True)
class QualityScores:
    """Per-view metric scores for one sample."""

    views: Mapping[str, MetricScores]

    def __post_init__(self) -> None:
        unknown = set(self.views) - set(VIEW_KEYS)
        if unknown:
            raise ScoreFileError(f"unknown view keys: {sorted(unknown)}")
        if not self.views:
            raise ScoreFileError("QualityScores needs at least one view")

    def get(self, view: str) -> MetricScores | None:
        return self.views.get(view)


def _parse_score_record(record: dict, line_no: int) -> tuple[str, str, MetricScores]:
    for key in ("id", "view"):
        if key not in record:
            raise ScoreFileError(f"line {line_no}: missing {key!r}")
    view = record["view"]
    if view not in VIEW_KEYS:
        raise ScoreFileError(f"line {line_no}: unknown view {view!r}")
    values = {}
    for name in METRIC_NAMES:
        if record.get(name) is not None:
            try:
                values[name] = float(record[name])
            except (TypeError, ValueError):
                raise ScoreFileError(f"line {line_no}: {name} is not a number") from None
    if not values:
        raise ScoreFileError(f"line {line_no}: no metric present")
    return str(record["id"]), view, MetricScores(**values)


def load_scores(path: str | Path) -> dict[str, QualityScores]:
    """Read a line-delimited score file keyed by (sample id, view).

    Missing metrics remain absent. A duplicated (id, view) pair is an error
    naming the key; there is no silent last-one-wins.
    """
    per_sample: dict[str, dict[str, MetricScores]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise ScoreFileError(f"line {line_no}: malformed record: {exc}") from None
            sample_id, view, scores = _parse_score_record(record, line_no)
            views = per_sample.setdefault(sample_id, {})
            if view in views:
                raise ScoreFileError(f"line {line_no}: duplicate key ({sample_id!r}, {view!r})")
            views[view] = scores
    return {sid: QualityScores(views=views) for sid, views in per_sample.items()}


def serialize_scores(scores: Mapping[str, QualityScores], path: str | Path) -> None:
    """Write the score-file format; inverse of load_scores."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id in scores:
            quality = scores[sample_id]
            for view in VIEW_KEYS:
                metrics = quality.get(view)
                if metrics is None:
                    continue
                record: dict[str, object] = {"id": sample_id, "view": view}
                record.update(metrics.as_dict())
                fh.write(json.dumps(record, sort_keys=True) + "\n")


@dataclass(frozen=True)
class ScoreServiceConfig:
    url: str
    timeout: float = 30.0
    max_retries: int = 3
    max_in_flight: int = 4
    auth_token: str | None = None

    def __post_init__(self) -> None:
        if self.timeout <= 0:
            raise ValueError("timeout must be > 0")
        if self.max_in_flight < 1:
            raise ValueError("max_in_flight must be >= 1")


def _encode_png_base64(img: ImageBuffer) -> str:
    arr = img.data[:, :, 0] if img.channels == 1 else img.data
    buf = io.BytesIO()
    Image.fromarray(arr).save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


Transport = Callable[[str, dict, float, dict[str, str]], tuple[int, object]]


def fetch_scores(
    config: ScoreServiceConfig,
    sample: PairSample,
    transport: Transport = requests_post_json,
    sleeper: Callable[[float], None] | None = None,
    rng: random.Random | None = None,
) -> QualityScores:
    """Score the sample's four views via one request to the scoring service.

    Request body: {id, images: {view: base64 PNG}}. Response body: a JSON
    array of score-file records for this sample. Timeouts and 5xx responses
    are retried with jittered exponential backoff; schema problems are not.
    """
    views = decompose(sample)
    payload = {
        "id": sample.id,
        "images": {key: _encode_png_base64(getattr(views, key)) for key in VIEW_KEYS},
    }
    headers = {}
    if config.auth_token:
        headers["Authorization"] = f"Bearer {config.auth_token}"

    def attempt() -> QualityScores:
        try:
            status, body = transport(config.url, payload, config.timeout, headers)
        except TimeoutError as exc:
            raise ScoreFetchTimeout(sample.id, f"request timed out: {exc}") from exc
        except ConnectionError as exc:
            raise ScoreServiceError(sample.id, 0) from exc
        if status != 200:
            raise ScoreServiceError(sample.id, status)
        return _parse_service_body(sample.id, body)

    def retryable(exc: Exception) -> bool:
        return isinstance(exc, ScoreFetchTimeout) or (
            isinstance(exc, ScoreServiceError) and (exc.status >= 500 or exc.status == 0)
        )

    kwargs = {}
    if sleeper is not None:
        kwargs["sleeper"] = sleeper
    return call_with_retries(
        attempt, max_retries=config.max_retries, is_retryable=retryable, rng=rng, **kwargs
    )


def _parse_service_body(sample_id: str, body: object) -> QualityScores:
    if not isinstance(body, list):
        raise ScoreSchemaError(sample_id, f"expected a record array, got {type(body).__name__}")
    views: dict[str, MetricScores] = {}
    for i, record in enumerate(body):
        if not isinstance(record, dict):
            raise ScoreSchemaError(sample_id, f"record {i} is not an object")
        try:
            rec_id, view, scores = _parse_score_record(record, i)
        except ScoreFileError as exc:
            raise ScoreSchemaError(sample_id, str(exc)) from None
        if rec_id != sample_id:
            raise ScoreSchemaError(sample_id, f"record {i} is for sample {rec_id!r}")
        if view in views:
            raise ScoreSchemaError(sample_id, f"duplicate view {view!r} in response")
        views[view] = scores
    if not views:
        raise ScoreSchemaError(sample_id, "response carries no scores")
    return QualityScores(views=views)


def fetch_scores_batch(
    config: ScoreServiceConfig,
    samples: Iterable[PairSample],
    transport: Transport = requests_post_json,
) -> dict[str, QualityScores | ScoreFetchError]:
    """Fetch many samples with at most max_in_flight concurrent requests.

    Per-sample failures land in the result map instead of aborting the batch;
    the map is keyed (and therefore merged) by sample id.
    """
    ordered = list(samples)

    def one(sample: PairSample) -> QualityScores | ScoreFetchError:
        try:
            return fetch_scores(config, sample, transport=transport)
        except ScoreFetchError as exc:
            return exc

    with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
        results = list(pool.map(one, ordered))
    return {sample.id: result for sample, result in zip(ordered, results)}
