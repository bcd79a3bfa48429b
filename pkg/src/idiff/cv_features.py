"""Traditional no-reference quality statistics for a single view.

Ten numbers per view: Laplacian variance and Tenengrad (sharpness), the
Immerkaer noise estimate, high-frequency energy ratio, edge density,
histogram entropy, under/over-exposure fractions, Hasler-Suesstrunk
colorfulness, and mean brightness. Definitions are pinned here (kernels,
thresholds, padding) so every number is reproducible bit-for-bit.

Conventions: replicate border padding for all convolutions, population
statistics throughout, luma per BT.601.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from idiff.image_core import VIEW_KEYS, ImageBuffer, ViewSet

# Field order doubles as the feature-vector layout used by the answer model.
FEATURE_NAMES = (
    "laplacian_var",
    "tenengrad",
    "noise_std",
    "high_freq_ratio",
    "edge_density",
    "entropy",
    "under_exposure_ratio",
    "over_exposure_ratio",
    "colorfulness",
    "mean_brightness",
)

_LAPLACIAN_KERNEL = np.array([[0, 1, 0], [1, -4, 1], [0, 1, 0]], dtype=np.float64)
_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64)
_SOBEL_Y = _SOBEL_X.T
_IMMERKAER_KERNEL = np.array([[1, -2, 1], [-2, 4, -2], [1, -2, 1]], dtype=np.float64)

UNDER_EXPOSURE_LEVEL = 10   # pixels strictly below count as underexposed
OVER_EXPOSURE_LEVEL = 245   # pixels strictly above count as overexposed
HIGH_FREQ_CUTOFF = 0.25     # radial frequency threshold, Nyquist-normalized
EDGE_THRESHOLD_FACTOR = 2.0  # edge = gradient magnitude above this times the mean


class FeatureComputationError(ValueError):
    """Input violates a feature's preconditions (channels or minimum size)."""


@dataclass(frozen=True)
class FeatureVector:
    laplacian_var: float
    tenengrad: float
    noise_std: float
    high_freq_ratio: float
    edge_density: float
    entropy: float
    under_exposure_ratio: float
    over_exposure_ratio: float
    colorfulness: float
    mean_brightness: float

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def as_array(self) -> np.ndarray:
        return np.array([getattr(self, name) for name in FEATURE_NAMES], dtype=np.float64)

    @classmethod
    def from_dict(cls, values: dict[str, float]) -> "FeatureVector":
        return cls(**{name: float(values[name]) for name in FEATURE_NAMES})


@dataclass(frozen=True)
class PairFeatures:
    """Per-view feature vectors for the four views of one sample."""

    a_global: FeatureVector
    a_crop: FeatureVector
    b_global: FeatureVector
    b_crop: FeatureVector

    def swapped(self) -> "PairFeatures":
        return PairFeatures(
            a_global=self.b_global, a_crop=self.b_crop,
            b_global=self.a_global, b_crop=self.a_crop,
        )


def _require_luma(img: ImageBuffer, min_dim: int, op: str) -> np.ndarray:
    if img.channels != 1:
        raise FeatureComputationError(f"{op} expects a single-channel image, got {img.channels} channels")
    if min(img.height, img.width) < min_dim:
        raise FeatureComputationError(
            f"{op} needs min dimension >= {min_dim}, got {img.width}x{img.height}"
        )
    return img.data[:, :, 0].astype(np.float64)


def to_luma(img: ImageBuffer) -> ImageBuffer:
    """BT.601 luma: round(0.299 R + 0.587 G + 0.114 B), clamped to [0, 255]."""
    if img.channels != 3:
        raise FeatureComputationError(f"to_luma expects 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    y = 0.299 * rgb[:, :, 0] + 0.587 * rgb[:, :, 1] + 0.114 * rgb[:, :, 2]
    return ImageBuffer(np.clip(np.rint(y), 0, 255).astype(np.uint8)[:, :, np.newaxis])


def laplacian_var(luma: ImageBuffer) -> float:
    """Population variance of the 4-neighbor Laplacian response."""
    img = _require_luma(luma, 3, "laplacian_var")
    response = ndimage.correlate(img, _LAPLACIAN_KERNEL, mode="nearest")
    return float(response.var())


def tenengrad(luma: ImageBuffer) -> float:
    """Mean squared Sobel gradient magnitude (Gx^2 + Gy^2 per pixel)."""
    img = _require_luma(luma, 3, "tenengrad")
    gx = ndimage.correlate(img, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, _SOBEL_Y, mode="nearest")
    return float(np.mean(gx * gx + gy * gy))


def noise_std(luma: ImageBuffer) -> float:
    """Immerkaer fast noise estimate over interior pixels.

    The difference-of-Laplacians kernel annihilates affine image content, so
    the mean absolute response scales with the noise standard deviation:
    sigma = sqrt(pi/2) * mean|response| / 6.
    """
    img = _require_luma(luma, 3, "noise_std")
    response = ndimage.correlate(img, _IMMERKAER_KERNEL, mode="nearest")
    interior = response[1:-1, 1:-1]
    return float(math.sqrt(math.pi / 2.0) * np.mean(np.abs(interior)) / 6.0)


def high_freq_ratio(luma: ImageBuffer) -> float:
    """Share of AC spectral energy at Nyquist-normalized radius >= 0.25.

    Computed on the mean-subtracted image; the DC bin is excluded from both
    sides, so the value is invariant to intensity offsets. Returns 0 for
    images with no AC energy.
    """
    img = _require_luma(luma, 8, "high_freq_ratio")
    spectrum = np.fft.fft2(img - img.mean())
    power = np.abs(spectrum) ** 2
    fy = np.fft.fftfreq(img.shape[0])[:, np.newaxis]
    fx = np.fft.fftfreq(img.shape[1])[np.newaxis, :]
    radius = np.sqrt(fx * fx + fy * fy) / 0.5  # Nyquist -> 1.0
    power[0, 0] = 0.0
    total = float(power.sum())
    if total <= 0.0:
        return 0.0
    return float(power[radius >= HIGH_FREQ_CUTOFF].sum() / total)


def edge_density(luma: ImageBuffer) -> float:
    """Fraction of pixels whose Sobel magnitude exceeds 2x the mean magnitude."""
    img = _require_luma(luma, 3, "edge_density")
    gx = ndimage.correlate(img, _SOBEL_X, mode="nearest")
    gy = ndimage.correlate(img, _SOBEL_Y, mode="nearest")
    magnitude = np.sqrt(gx * gx + gy * gy)
    mean_mag = magnitude.mean()
    if mean_mag == 0.0:
        return 0.0
    return float(np.mean(magnitude > EDGE_THRESHOLD_FACTOR * mean_mag))


def entropy(luma: ImageBuffer) -> float:
    """Shannon entropy in bits of the 256-bin intensity histogram."""
    img = _require_luma(luma, 1, "entropy")
    counts = np.bincount(img.astype(np.int64).ravel(), minlength=256)
    p = counts[counts > 0] / img.size
    return float(-(p * np.log2(p)).sum())


def exposure_ratios(luma: ImageBuffer) -> tuple[float, float]:
    """(underexposed, overexposed) pixel fractions at the 10/245 levels."""
    img = _require_luma(luma, 1, "exposure_ratios")
    under = float(np.mean(img < UNDER_EXPOSURE_LEVEL))
    over = float(np.mean(img > OVER_EXPOSURE_LEVEL))
    return under, over


def colorfulness(img: ImageBuffer) -> float:
    """Hasler-Suesstrunk colorfulness over the rg / yb opponent channels."""
    if img.channels != 3:
        raise FeatureComputationError(f"colorfulness expects 3 channels, got {img.channels}")
    rgb = img.data.astype(np.float64)
    rg = rgb[:, :, 0] - rgb[:, :, 1]
    yb = 0.5 * (rgb[:, :, 0] + rgb[:, :, 1]) - rgb[:, :, 2]
    std_term = math.sqrt(rg.var() + yb.var())
    mean_term = math.sqrt(rg.mean() ** 2 + yb.mean() ** 2)
    return float(std_term + 0.3 * mean_term)


def mean_brightness(luma: ImageBuffer) -> float:
    img = _require_luma(luma, 1, "mean_brightness")
    return float(img.mean())


def feature_vector(view: ImageBuffer) -> FeatureVector:
    """All ten statistics for one RGB view (min dimension 8 for the DFT term)."""
    luma = to_luma(view)
    under, over = exposure_ratios(luma)
    return FeatureVector(
        laplacian_var=laplacian_var(luma),
        tenengrad=tenengrad(luma),
        noise_std=noise_std(luma),
        high_freq_ratio=high_freq_ratio(luma),
        edge_density=edge_density(luma),
        entropy=entropy(luma),
        under_exposure_ratio=under,
        over_exposure_ratio=over,
        colorfulness=colorfulness(view),
        mean_brightness=mean_brightness(luma),
    )


def extract_all(views: ViewSet) -> PairFeatures:
    """Feature vectors for the four views; deterministic, per-view independent."""
    return PairFeatures(
        a_global=feature_vector(views.a_global),
        a_crop=feature_vector(views.a_crop),
        b_global=feature_vector(views.b_global),
        b_crop=feature_vector(views.b_crop),
    )


def write_feature_dump(path: str | Path, features_by_id: Mapping[str, PairFeatures]) -> None:
    """Line-delimited {id, view, features} records, four per sample, at full
    float precision."""
    with open(path, "w", encoding="utf-8") as fh:
        for sample_id, pair in features_by_id.items():
            for view in VIEW_KEYS:
                record = {"id": sample_id, "view": view, "features": getattr(pair, view).as_dict()}
                fh.write(json.dumps(record, sort_keys=True) + "\n")


def load_feature_dump(path: str | Path) -> dict[str, PairFeatures]:
    """Inverse of write_feature_dump; every sample must carry all four views."""
    per_sample: dict[str, dict[str, FeatureVector]] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line:
                continue
            try:
                record = json.loads(line)
                sample_id = str(record["id"])
                view = record["view"]
                vector = FeatureVector.from_dict(record["features"])
            except (json.JSONDecodeError, KeyError, TypeError) as exc:
                raise ValueError(f"{path} line {line_no}: malformed feature record: {exc}") from None
            if view not in VIEW_KEYS:
                raise ValueError(f"{path} line {line_no}: unknown view {view!r}")
            views = per_sample.setdefault(sample_id, {})
            if view in views:
                raise ValueError(f"{path} line {line_no}: duplicate ({sample_id!r}, {view!r})")
            views[view] = vector
    result = {}
    for sample_id, views in per_sample.items():
        missing = [v for v in VIEW_KEYS if v not in views]
        if missing:
            raise ValueError(f"sample {sample_id!r}: feature dump is missing views {missing}")
        result[sample_id] = PairFeatures(**views)
    return result
