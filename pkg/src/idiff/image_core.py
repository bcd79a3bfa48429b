"""Image buffers, manifest ingestion, and left/right view decomposition.

A challenge sample arrives as two concatenated images (a global pair and a
crop pair, each left|right). Everything downstream works on the four split
views, so the splitter and its inverse are kept pixel-exact.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError


class Preference(Enum):
    """Which side of the pair is preferred. A is the left image."""

    A = "A"
    B = "B"

    def flipped(self) -> "Preference":
        return Preference.B if self is Preference.A else Preference.A

    @property
    def side_word(self) -> str:
        return "Left" if self is Preference.A else "Right"


class ContentDomain(Enum):
    PERSON = "person"
    SCENE = "scene"


VIEW_KEYS = ("a_global", "a_crop", "b_global", "b_crop")


@dataclass(frozen=True, eq=False)
class ImageBuffer:
    """8-bit image, shape (height, width, channels), channels 1 or 3."""

    data: np.ndarray

    def __post_init__(self) -> None:
        if not isinstance(self.data, np.ndarray) or self.data.ndim != 3:
            raise ValueError("ImageBuffer.data must be a (h, w, c) ndarray")
        if self.data.dtype != np.uint8:
            raise ValueError(f"ImageBuffer.data must be uint8, got {self.data.dtype}")
        h, w, c = self.data.shape
        if h < 1 or w < 1:
            raise ValueError(f"ImageBuffer dimensions must be >= 1, got {w}x{h}")
        if c not in (1, 3):
            raise ValueError(f"ImageBuffer must have 1 or 3 channels, got {c}")
        self.data.flags.writeable = False

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, ImageBuffer):
            return NotImplemented
        return self.data.shape == other.data.shape and np.array_equal(self.data, other.data)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "ImageBuffer":
        """Build from any integer/float array; 2-D arrays become 1-channel."""
        a = np.asarray(arr)
        if a.ndim == 2:
            a = a[:, :, np.newaxis]
        return cls(np.ascontiguousarray(np.clip(np.round(a), 0, 255)).astype(np.uint8))


@dataclass(frozen=True)
class PairSample:
    """One challenge item: concatenated global and crop pairs plus metadata."""

    id: str
    domain: ContentDomain
    global_pair: ImageBuffer
    crop_pair: ImageBuffer
    label: Preference | None = None
    reference_rationale: str | None = None

    def __post_init__(self) -> None:
        for name, buf in (("global_pair", self.global_pair), ("crop_pair", self.crop_pair)):
            if buf.width % 2 != 0:
                raise OddWidthError(f"sample {self.id!r}: {name} width {buf.width} is odd")


@dataclass(frozen=True)
class ViewSet:
    """The four aligned views: left/right of the global pair and of the crop pair."""

    a_global: ImageBuffer
    a_crop: ImageBuffer
    b_global: ImageBuffer
    b_crop: ImageBuffer

    def __post_init__(self) -> None:
        for name, a, b in (("global", self.a_global, self.b_global), ("crop", self.a_crop, self.b_crop)):
            if a.height != b.height or a.width != b.width or a.channels != b.channels:
                raise ValueError(
                    f"{name} views disagree: {a.width}x{a.height}x{a.channels} "
                    f"vs {b.width}x{b.height}x{b.channels}"
                )

    def swapped(self) -> "ViewSet":
        """A/B sides exchanged; used for the left/right symmetry law."""
        return ViewSet(
            a_global=self.b_global, a_crop=self.b_crop,
            b_global=self.a_global, b_crop=self.a_crop,
        )


class OddWidthError(ValueError):
    """A concatenated pair image has odd width and cannot be split in half."""


@dataclass(frozen=True)
class RecordError:
    """One rejected manifest record; ingestion continues past it."""

    line: int
    sample_id: str | None
    reason: str


_REQUIRED_FIELDS = ("id", "domain", "global_pair", "crop_pair")


def _decode_image(path: Path) -> ImageBuffer:
    """Decode PNG/JPEG to 8-bit RGB; grayscale is replicated to 3 channels."""
    with Image.open(path) as im:
        rgb = im.convert("RGB")
        arr = np.asarray(rgb, dtype=np.uint8)
    return ImageBuffer(np.ascontiguousarray(arr))


def load_manifest(path: str | Path) -> tuple[list[PairSample], list[RecordError]]:
    """Read a line-delimited manifest into PairSamples, in file order.

    Each line is a JSON object {id, domain, global_pair, crop_pair, label?,
    rationale?}; image paths resolve relative to the manifest's directory.
    Bad records (missing file, malformed JSON, undecodable image, odd-width
    pair) are reported in the returned error list and skipped.
    """
    manifest_path = Path(path)
    base = manifest_path.parent
    samples: list[PairSample] = []
    errors: list[RecordError] = []

    with open(manifest_path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            sample_id: str | None = None
            try:
                record = json.loads(line)
                if not isinstance(record, dict):
                    raise ValueError("record is not an object")
                missing = [k for k in _REQUIRED_FIELDS if k not in record]
                if missing:
                    raise ValueError(f"missing fields: {', '.join(missing)}")
                sample_id = str(record["id"])
                try:
                    domain = ContentDomain(record["domain"])
                except ValueError:
                    raise ValueError(f"unknown domain {record['domain']!r}") from None
                label = None
                if record.get("label") is not None:
                    try:
                        label = Preference(record["label"])
                    except ValueError:
                        raise ValueError(f"label must be A or B, got {record['label']!r}") from None
                global_pair = _decode_image(base / record["global_pair"])
                crop_pair = _decode_image(base / record["crop_pair"])
                samples.append(
                    PairSample(
                        id=sample_id,
                        domain=domain,
                        global_pair=global_pair,
                        crop_pair=crop_pair,
                        label=label,
                        reference_rationale=record.get("rationale"),
                    )
                )
            except FileNotFoundError as exc:
                errors.append(RecordError(line_no, sample_id, f"missing image file: {exc.filename}"))
            except UnidentifiedImageError as exc:
                errors.append(RecordError(line_no, sample_id, f"unsupported image codec: {exc}"))
            except json.JSONDecodeError as exc:
                errors.append(RecordError(line_no, None, f"malformed record: {exc}"))
            except (ValueError, OSError) as exc:
                errors.append(RecordError(line_no, sample_id, str(exc)))
    return samples, errors


def split_pair(pair: ImageBuffer) -> tuple[ImageBuffer, ImageBuffer]:
    """Split a left|right concatenation down the middle, pixel-exact."""
    if pair.width % 2 != 0:
        raise OddWidthError(f"pair width {pair.width} is odd")
    half = pair.width // 2
    left = ImageBuffer(np.ascontiguousarray(pair.data[:, :half, :]))
    right = ImageBuffer(np.ascontiguousarray(pair.data[:, half:, :]))
    return left, right


def decompose(sample: PairSample) -> ViewSet:
    """Split the sample's two concatenated pairs into the four aligned views."""
    a_global, b_global = split_pair(sample.global_pair)
    a_crop, b_crop = split_pair(sample.crop_pair)
    return ViewSet(a_global=a_global, a_crop=a_crop, b_global=b_global, b_crop=b_crop)


def concat_pair(left: ImageBuffer, right: ImageBuffer) -> ImageBuffer:
    if left.height != right.height or left.channels != right.channels:
        raise ValueError(
            f"cannot concatenate {left.width}x{left.height}x{left.channels} "
            f"with {right.width}x{right.height}x{right.channels}"
        )
    return ImageBuffer(np.ascontiguousarray(np.concatenate([left.data, right.data], axis=1)))


def recompose(views: ViewSet) -> tuple[ImageBuffer, ImageBuffer]:
    """Inverse of decompose: rebuild the (global, crop) concatenations."""
    return concat_pair(views.a_global, views.b_global), concat_pair(views.a_crop, views.b_crop)
