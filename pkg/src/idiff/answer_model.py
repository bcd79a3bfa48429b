"""Per-domain linear preference classifiers over view-pair feature differences.

Each member model scores a sample as w . z where z is the z-normalized
vector of (A - B) feature differences for the global and crop view pairs.
There is deliberately no bias term: swapping the two sides then negates the
margin exactly, which makes left/right symmetry a testable law instead of a
hope. Members differ by training seed; domains (person/scene) get separate
models; an ensemble votes, either equally or by validation accuracy.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.special import expit

from idiff.cv_features import FEATURE_NAMES, PairFeatures, extract_all
from idiff.image_core import ContentDomain, PairSample, Preference, decompose

N_DIFF_FEATURES = 2 * len(FEATURE_NAMES)  # global block then crop block
STD_FLOOR = 1e-8
MODEL_FILE_VERSION = 1


class TrainingDataError(ValueError):
    """Training set too small or single-class for the requested domain."""


class NoModelsForDomainError(LookupError):
    """A sample routed to a domain with no registered member models."""


class VoteError(ValueError):
    """Ensemble vote invoked with missing/duplicate member predictions."""


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-4
    steps: int = 10_000
    l2: float = 1e-4
    val_fraction: float = 0.2

    def as_dict(self) -> dict[str, float]:
        return {
            "learning_rate": self.learning_rate,
            "steps": self.steps,
            "l2": self.l2,
            "val_fraction": self.val_fraction,
        }


@dataclass(frozen=True)
class LinearPairwiseModel:
    member_id: str
    domain: ContentDomain | None  # None = pooled across domains
    weights: np.ndarray
    feature_means: np.ndarray
    feature_stds: np.ndarray
    val_accuracy: float
    seed: int
    hyperparams: TrainConfig

    def __post_init__(self) -> None:
        for name, vec in (
            ("weights", self.weights),
            ("feature_means", self.feature_means),
            ("feature_stds", self.feature_stds),
        ):
            if vec.shape != (N_DIFF_FEATURES,):
                raise ValueError(f"{name} must have shape ({N_DIFF_FEATURES},), got {vec.shape}")
        if not np.all(self.feature_stds > 0):
            raise ValueError("feature_stds must all be > 0")
        if not 0.0 <= self.val_accuracy <= 1.0:
            raise ValueError(f"val_accuracy out of [0,1]: {self.val_accuracy}")

    def normalized_difference(self, features: PairFeatures) -> np.ndarray:
        return pair_difference(features, self.feature_means, self.feature_stds)


class VoteMode(Enum):
    EQUAL = "equal"
    WEIGHTED = "weighted"


TIE_BREAK_POLICY = "max-abs-margin-then-A"


@dataclass(frozen=True)
class EnsembleConfig:
    mode: VoteMode
    members: tuple[str, ...]
    tie_break: str = TIE_BREAK_POLICY

    def __post_init__(self) -> None:
        if not self.members:
            raise ValueError("ensemble needs at least one member")
        if self.tie_break != TIE_BREAK_POLICY:
            raise ValueError(f"unsupported tie_break {self.tie_break!r}")


@dataclass(frozen=True)
class Prediction:
    preference: Preference
    margin: float  # positive favors A (left)
    member_id: str
    tie: bool = False


def raw_pair_difference(features: PairFeatures) -> np.ndarray:
    """[f(a_global) - f(b_global); f(a_crop) - f(b_crop)], unnormalized."""
    return np.concatenate(
        [
            features.a_global.as_array() - features.b_global.as_array(),
            features.a_crop.as_array() - features.b_crop.as_array(),
        ]
    )


def pair_difference(features: PairFeatures, means: np.ndarray, stds: np.ndarray) -> np.ndarray:
    """Z-normalized difference vector. Means are zero by construction (a pair
    difference is antisymmetric), which keeps side-swapping an exact negation."""
    return (raw_pair_difference(features) - means) / stds


def logistic_loss(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> float:
    """Mean log(1 + exp(-y * Xw)) plus l2 * ||w||^2, computed stably."""
    margins = X @ w
    return float(np.mean(np.logaddexp(0.0, -y * margins)) + l2 * (w @ w))


def logistic_gradient(w: np.ndarray, X: np.ndarray, y: np.ndarray, l2: float) -> np.ndarray:
    margins = X @ w
    slack = expit(-y * margins)
    return -(X * (y * slack)[:, np.newaxis]).mean(axis=0) + 2.0 * l2 * w


def fit_logistic_gd(X: np.ndarray, y: np.ndarray, config: TrainConfig) -> np.ndarray:
    """Full-batch gradient descent from zero weights; convex, so no restarts."""
    w = np.zeros(X.shape[1], dtype=np.float64)
    for _ in range(config.steps):
        w = w - config.learning_rate * logistic_gradient(w, X, y, config.l2)
    return w


def _preference_from_margin(margin: float) -> tuple[Preference, bool]:
    if margin > 0:
        return Preference.A, False
    if margin < 0:
        return Preference.B, False
    return Preference.A, True  # deterministic tie policy


def difference_std_stats(diffs: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Normalization statistics over raw difference rows: zero means, floored
    population stds."""
    means = np.zeros(diffs.shape[1], dtype=np.float64)
    stds = np.maximum(diffs.std(axis=0), STD_FLOOR)
    return means, stds


def train_linear(
    samples: Sequence[PairSample],
    domain: ContentDomain | None,
    hyperparams: TrainConfig = TrainConfig(),
    *,
    seed: int = 42,
    member_id: str | None = None,
    features_by_id: Mapping[str, PairFeatures] | None = None,
) -> LinearPairwiseModel:
    """Train one member model on the labeled samples of a domain.

    The seed drives the shuffled 80/20 train/validation split (weights start
    at zero, so the optimization itself is deterministic). Validation
    accuracy is recorded for weighted voting. domain=None trains a pooled
    model over all samples.
    """
    subset = [
        s
        for s in samples
        if s.label is not None and (domain is None or s.domain == domain)
    ]
    domain_name = domain.value if domain is not None else "pooled"
    if len(subset) < 2:
        raise TrainingDataError(f"domain {domain_name!r}: need >= 2 labeled samples, got {len(subset)}")
    labels = {s.label for s in subset}
    if labels != {Preference.A, Preference.B}:
        raise TrainingDataError(f"domain {domain_name!r}: training labels are single-class")

    if features_by_id is None:
        features_by_id = {s.id: extract_all(decompose(s)) for s in subset}
    diffs = np.stack([raw_pair_difference(features_by_id[s.id]) for s in subset])
    y = np.array([1.0 if s.label is Preference.A else -1.0 for s in subset])

    rng = np.random.default_rng(seed)
    order = rng.permutation(len(subset))
    n_train = max(1, min(len(subset) - 1, round((1.0 - hyperparams.val_fraction) * len(subset))))
    train_idx, val_idx = order[:n_train], order[n_train:]

    means, stds = difference_std_stats(diffs[train_idx])
    X = (diffs - means) / stds
    w = fit_logistic_gd(X[train_idx], y[train_idx], hyperparams)

    val_margins = X[val_idx] @ w
    val_preds = np.where(val_margins >= 0, 1.0, -1.0)  # margin 0 resolves to A
    val_accuracy = float(np.mean(val_preds == y[val_idx])) if len(val_idx) else 0.0

    return LinearPairwiseModel(
        member_id=member_id or f"{domain_name}-s{seed}",
        domain=domain,
        weights=w,
        feature_means=means,
        feature_stds=stds,
        val_accuracy=val_accuracy,
        seed=seed,
        hyperparams=hyperparams,
    )


def predict(model: LinearPairwiseModel, features: PairFeatures) -> Prediction:
    """Signed margin w . z; positive prefers A. Zero margin falls to the tie policy."""
    margin = float(model.weights @ model.normalized_difference(features))
    preference, tie = _preference_from_margin(margin)
    return Prediction(preference=preference, margin=margin, member_id=model.member_id, tie=tie)


@dataclass(frozen=True)
class VoteOutcome:
    preference: Preference
    tie: bool  # True only when every margin was exactly 0
    tally: Mapping[str, float]


def vote_outcome(
    predictions: Sequence[Prediction],
    config: EnsembleConfig,
    val_accs: Mapping[str, float] | None = None,
) -> VoteOutcome:
    """Combine member predictions per the configured mode.

    Equal mode counts preferences; weighted mode sums validation accuracy per
    side. A tied tally resolves to the preference of the member with the
    largest |margin| (ties on |margin| broken by member id); if every margin
    is exactly 0 the outcome is A with the tie flag set.
    """
    by_id: dict[str, Prediction] = {}
    for p in predictions:
        if p.member_id in by_id:
            raise VoteError(f"duplicate prediction for member {p.member_id!r}")
        by_id[p.member_id] = p
    missing = [m for m in config.members if m not in by_id]
    if missing:
        raise VoteError(f"missing predictions for members: {missing}")

    tally = {"A": 0.0, "B": 0.0}
    votes = []
    for member in config.members:
        pred = by_id[member]
        if config.mode is VoteMode.EQUAL:
            weight = 1.0
        else:
            if val_accs is None or member not in val_accs:
                raise VoteError(f"weighted vote needs val_accuracy for member {member!r}")
            weight = float(val_accs[member])
        tally[pred.preference.value] += weight
        votes.append(pred)

    if tally["A"] > tally["B"]:
        return VoteOutcome(Preference.A, False, tally)
    if tally["B"] > tally["A"]:
        return VoteOutcome(Preference.B, False, tally)
    # Tied tally: strongest member decides; member id makes it order-independent.
    strongest = sorted(votes, key=lambda p: (-abs(p.margin), p.member_id))[0]
    if strongest.margin == 0.0:
        return VoteOutcome(Preference.A, True, tally)
    return VoteOutcome(strongest.preference, False, tally)


def ensemble_vote(
    predictions: Sequence[Prediction],
    config: EnsembleConfig,
    val_accs: Mapping[str, float] | None = None,
) -> Preference:
    return vote_outcome(predictions, config, val_accs).preference


@dataclass(frozen=True)
class RoutedPrediction:
    preference: Preference
    outcome: VoteOutcome
    member_predictions: tuple[Prediction, ...]


def route_and_predict_detailed(
    sample: PairSample,
    person_models: Sequence[LinearPairwiseModel],
    scene_models: Sequence[LinearPairwiseModel],
    config: EnsembleConfig,
    features: PairFeatures | None = None,
) -> RoutedPrediction:
    """Dispatch to the sample's domain members, vote, keep the breakdown."""
    domain_models = person_models if sample.domain is ContentDomain.PERSON else scene_models
    selected = [m for m in domain_models if m.member_id in config.members]
    if not selected:
        raise NoModelsForDomainError(
            f"sample {sample.id!r}: no configured models for domain {sample.domain.value!r}"
        )
    if features is None:
        features = extract_all(decompose(sample))
    predictions = tuple(predict(m, features) for m in selected)
    effective = replace(config, members=tuple(m.member_id for m in selected))
    outcome = vote_outcome(predictions, effective, {m.member_id: m.val_accuracy for m in selected})
    return RoutedPrediction(outcome.preference, outcome, predictions)


def route_and_predict(
    sample: PairSample,
    person_models: Sequence[LinearPairwiseModel],
    scene_models: Sequence[LinearPairwiseModel],
    config: EnsembleConfig,
    features: PairFeatures | None = None,
) -> Preference:
    return route_and_predict_detailed(sample, person_models, scene_models, config, features).preference


def save_model(model: LinearPairwiseModel, path: str | Path) -> None:
    """Versioned JSON record; floats round-trip losslessly via repr."""
    record = {
        "version": MODEL_FILE_VERSION,
        "member_id": model.member_id,
        "domain": model.domain.value if model.domain is not None else "pooled",
        "weights": model.weights.tolist(),
        "feature_means": model.feature_means.tolist(),
        "feature_stds": model.feature_stds.tolist(),
        "val_accuracy": model.val_accuracy,
        "seed": model.seed,
        "hyperparams": model.hyperparams.as_dict(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(record, fh, sort_keys=True)
        fh.write("\n")


def load_model(path: str | Path) -> LinearPairwiseModel:
    with open(path, "r", encoding="utf-8") as fh:
        record = json.load(fh)
    version = record.get("version")
    if version != MODEL_FILE_VERSION:
        raise ValueError(f"unsupported model file version {version!r} in {path}")
    hp = record["hyperparams"]
    return LinearPairwiseModel(
        member_id=record["member_id"],
        domain=None if record["domain"] == "pooled" else ContentDomain(record["domain"]),
        weights=np.array(record["weights"], dtype=np.float64),
        feature_means=np.array(record["feature_means"], dtype=np.float64),
        feature_stds=np.array(record["feature_stds"], dtype=np.float64),
        val_accuracy=record["val_accuracy"],
        seed=record["seed"],
        hyperparams=TrainConfig(
            learning_rate=hp["learning_rate"],
            steps=int(hp["steps"]),
            l2=hp["l2"],
            val_fraction=hp["val_fraction"],
        ),
    )
