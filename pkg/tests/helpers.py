"""Shared fixtures: synthetic images, degraded pairs, on-disk manifests.

The synthetic benchmark builds pairs where one side is the smooth base image
and the other is the base plus blur and noise, with the degradation mix
depending on the domain (person pairs are blur-dominated, scene pairs are
noise-dominated) and the clean side placed left or right by coin flip. Labels
are therefore known by construction, and the domains carry genuinely opposite
feature cues, which is what makes specialization worth testing.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from idiff.image_core import ContentDomain, ImageBuffer, PairSample, Preference, concat_pair


def gray_image(height: int, width: int, value: int, channels: int = 3) -> ImageBuffer:
    return ImageBuffer(np.full((height, width, channels), value, dtype=np.uint8))


def rgb_from_planes(r: np.ndarray, g: np.ndarray, b: np.ndarray) -> ImageBuffer:
    return ImageBuffer.from_array(np.stack([r, g, b], axis=-1))


def random_rgb(rng: np.random.Generator, height: int, width: int) -> ImageBuffer:
    return ImageBuffer(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def smooth_texture(rng: np.random.Generator, height: int, width: int) -> ImageBuffer:
    """Band-limited random texture: white noise smoothed with a 5x5 box, then
    contrast-stretched back so gradients stay informative."""
    noise = rng.uniform(0, 255, size=(height, width, 3))
    smooth = ndimage.uniform_filter(noise, size=(5, 5, 1), mode="nearest")
    lo, hi = smooth.min(), smooth.max()
    stretched = (smooth - lo) / (hi - lo + 1e-12) * 255.0
    return ImageBuffer.from_array(stretched)


def box_blur(img: ImageBuffer, size: int) -> ImageBuffer:
    if size <= 1:
        return img
    blurred = ndimage.uniform_filter(img.data.astype(np.float64), size=(size, size, 1), mode="nearest")
    return ImageBuffer.from_array(blurred)


def with_noise(rng: np.random.Generator, img: ImageBuffer, sigma: float) -> ImageBuffer:
    if sigma <= 0:
        return img
    noisy = img.data.astype(np.float64) + rng.normal(0.0, sigma, size=img.data.shape)
    return ImageBuffer.from_array(noisy)


def build_sample(
    sample_id: str,
    domain: ContentDomain,
    a_global: ImageBuffer,
    b_global: ImageBuffer,
    a_crop: ImageBuffer,
    b_crop: ImageBuffer,
    label: Preference | None = None,
    rationale: str | None = None,
) -> PairSample:
    return PairSample(
        id=sample_id,
        domain=domain,
        global_pair=concat_pair(a_global, b_global),
        crop_pair=concat_pair(a_crop, b_crop),
        label=label,
        reference_rationale=rationale,
    )


# Degradation strengths per domain: person is blur-dominated, scene is
# noise-dominated, so the informative feature signs flip between domains.
_DEGRADE = {
    ContentDomain.PERSON: {"blur": 5, "sigma": 0.5},
    ContentDomain.SCENE: {"blur": 1, "sigma": 15.0},
}


def synthetic_pair(
    rng: np.random.Generator,
    sample_id: str,
    domain: ContentDomain,
    global_size: int = 48,
    crop_size: int = 24,
) -> PairSample:
    recipe = _DEGRADE[domain]

    def degrade(img: ImageBuffer) -> ImageBuffer:
        return with_noise(rng, box_blur(img, recipe["blur"]), recipe["sigma"])

    clean_g = smooth_texture(rng, global_size, global_size)
    clean_c = smooth_texture(rng, crop_size, crop_size)
    bad_g, bad_c = degrade(clean_g), degrade(clean_c)
    if rng.random() < 0.5:
        return build_sample(sample_id, domain, clean_g, bad_g, clean_c, bad_c, label=Preference.A)
    return build_sample(sample_id, domain, bad_g, clean_g, bad_c, clean_c, label=Preference.B)


def synthetic_benchmark(seed: int, n_pairs: int = 200, global_size: int = 48, crop_size: int = 24) -> list[PairSample]:
    rng = np.random.default_rng(seed)
    samples = []
    for i in range(n_pairs):
        domain = ContentDomain.PERSON if i % 2 == 0 else ContentDomain.SCENE
        samples.append(synthetic_pair(rng, f"pair-{i:04d}", domain, global_size, crop_size))
    return samples


def save_png(img: ImageBuffer, path: Path) -> None:
    arr = img.data[:, :, 0] if img.channels == 1 else img.data
    Image.fromarray(arr).save(path)


def write_manifest(directory: Path, samples: list[PairSample], reference_rationales: dict[str, str] | None = None) -> Path:
    """Write sample images and a manifest file under `directory`."""
    directory.mkdir(parents=True, exist_ok=True)
    image_dir = directory / "images"
    image_dir.mkdir(exist_ok=True)
    manifest_path = directory / "manifest.jsonl"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        for sample in samples:
            g_rel = f"images/{sample.id}_g.png"
            c_rel = f"images/{sample.id}_c.png"
            save_png(sample.global_pair, directory / g_rel)
            save_png(sample.crop_pair, directory / c_rel)
            record: dict = {
                "id": sample.id,
                "domain": sample.domain.value,
                "global_pair": g_rel,
                "crop_pair": c_rel,
            }
            if sample.label is not None:
                record["label"] = sample.label.value
            rationale = sample.reference_rationale
            if reference_rationales and sample.id in reference_rationales:
                rationale = reference_rationales[sample.id]
            if rationale is not None:
                record["rationale"] = rationale
            fh.write(json.dumps(record) + "\n")
    return manifest_path
