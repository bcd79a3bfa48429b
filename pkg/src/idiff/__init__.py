"""Pairwise image quality assessment toolkit.

Two cooperating paths: a discriminative answer path (view decomposition,
per-domain linear preference models, ensemble voting) and a thinking path
(feature-grounded, template-constrained rationale text), plus the metrics
harness (accuracy, BLEU-4, ROUGE-L, composite) and a pipeline CLI.
"""

__version__ = "0.1.0"

from idiff.image_core import (
    ContentDomain,
    ImageBuffer,
    PairSample,
    Preference,
    ViewSet,
    decompose,
    load_manifest,
    recompose,
)
from idiff.cv_features import FeatureVector, PairFeatures, extract_all

__all__ = [
    "ContentDomain",
    "ImageBuffer",
    "PairSample",
    "Preference",
    "ViewSet",
    "decompose",
    "load_manifest",
    "recompose",
    "FeatureVector",
    "PairFeatures",
    "extract_all",
]
