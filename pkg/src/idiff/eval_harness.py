"""Challenge metrics and per-run reports.

Accuracy over pairwise labels, sentence-level BLEU-4 and ROUGE-L over
rationale text, and a weight-normalized composite. The text-metric variants
are pinned exactly (ASCII alphanumeric tokenization, add-one smoothing for
zero higher-order n-gram matches, LCS F-measure with beta=1.2) so runs of
this toolkit are comparable with each other; no claim is made that they
match any external scorer.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass
from typing import Sequence

from idiff.image_core import PairSample, Preference

ROUGE_BETA = 1.2

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def tokenize(text: str) -> list[str]:
    """Lowercase, then take maximal ASCII alphanumeric runs as tokens."""
    return _TOKEN_RE.findall(text.lower())


def accuracy(preds: Sequence[Preference], labels: Sequence[Preference]) -> float:
    if len(preds) != len(labels):
        raise ValueError(f"length mismatch: {len(preds)} predictions vs {len(labels)} labels")
    if not preds:
        raise ValueError("accuracy over an empty set is undefined")
    return sum(p is l for p, l in zip(preds, labels)) / len(preds)


def _ngram_counts(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu4(candidate: str, reference: str) -> float:
    """Sentence-level BLEU with uniform 1/4 weights over n = 1..4.

    Clipped n-gram precisions; for n >= 2 a raw zero match count is smoothed
    to 1/(total+1) (unigram precision is never smoothed, so zero unigram
    overlap scores 0). Brevity penalty exp(1 - r/c) applies when the
    candidate is shorter than the reference. Empty candidates score 0.
    """
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand:
        return 0.0

    log_precision_sum = 0.0
    for n in range(1, 5):
        cand_counts = _ngram_counts(cand, n)
        total = sum(cand_counts.values())
        ref_counts = _ngram_counts(ref, n)
        matched = sum(min(count, ref_counts[gram]) for gram, count in cand_counts.items())
        if matched == 0:
            if n == 1:
                return 0.0
            precision = 1.0 / (total + 1.0)
        else:
            precision = matched / total
        log_precision_sum += 0.25 * math.log(precision)

    brevity = math.exp(1.0 - len(ref) / len(cand)) if len(cand) < len(ref) else 1.0
    return brevity * math.exp(log_precision_sum)


def _lcs_length(a: Sequence[str], b: Sequence[str]) -> int:
    # One-row DP; O(len(a) * len(b)).
    previous = [0] * (len(b) + 1)
    for token_a in a:
        current = [0]
        for j, token_b in enumerate(b):
            if token_a == token_b:
                current.append(previous[j] + 1)
            else:
                current.append(max(previous[j + 1], current[j]))
        previous = current
    return previous[-1]


def rouge_l(candidate: str, reference: str) -> float:
    """LCS-based F-measure with beta = 1.2; 0 if either side is empty or no
    common subsequence exists."""
    cand = tokenize(candidate)
    ref = tokenize(reference)
    if not cand or not ref:
        return 0.0
    lcs = _lcs_length(cand, ref)
    if lcs == 0:
        return 0.0
    recall = lcs / len(ref)
    precision = lcs / len(cand)
    beta_sq = ROUGE_BETA * ROUGE_BETA
    return (1.0 + beta_sq) * recall * precision / (recall + beta_sq * precision)


@dataclass(frozen=True)
class MetricWeights:
    acc: float = 1.0
    bleu: float = 1.0
    rouge: float = 1.0
    llm: float = 1.0

    def __post_init__(self) -> None:
        values = (self.acc, self.bleu, self.rouge, self.llm)
        if any(w < 0 for w in values):
            raise ValueError("metric weights must be nonnegative")
        if sum(values) == 0:
            raise ValueError("metric weights must not all be zero")


def composite_score(
    acc: float | None,
    bleu: float | None,
    rouge: float | None,
    llm_score: float | None = None,
    weights: MetricWeights = MetricWeights(),
) -> float:
    """Weight-normalized combination of the components that are present.

    Absent components (None) are excluded and the remaining weights
    renormalized, so e.g. a run without an LLM-judge score is still scored
    on accuracy/BLEU/ROUGE alone.
    """
    pairs = [
        (acc, weights.acc),
        (bleu, weights.bleu),
        (rouge, weights.rouge),
        (llm_score, weights.llm),
    ]
    present = [(value, weight) for value, weight in pairs if value is not None]
    weight_sum = sum(weight for _, weight in present)
    if not present or weight_sum == 0:
        raise ValueError("no positively weighted component present")
    return sum(value * weight for value, weight in present) / weight_sum


@dataclass(frozen=True)
class PredictionRecord:
    id: str
    preference: Preference
    tie: bool = False


@dataclass(frozen=True)
class RationaleRecord:
    id: str
    thinking: str
    compliant: bool | None = None


@dataclass(frozen=True)
class SampleEval:
    id: str
    predicted: Preference | None
    label: Preference | None
    bleu4: float | None
    rouge_l: float | None
    compliant: bool | None
    tie: bool | None


@dataclass(frozen=True)
class EvalReport:
    accuracy: float | None
    mean_bleu4: float | None
    mean_rouge_l: float | None
    composite: float | None
    per_sample: tuple[SampleEval, ...]


class CoverageError(ValueError):
    """A labeled sample has no prediction."""


def evaluate_run(
    predictions: Sequence[PredictionRecord],
    rationales: Sequence[RationaleRecord] | None,
    manifest: Sequence[PairSample],
    weights: MetricWeights = MetricWeights(),
) -> EvalReport:
    """Score one run against the manifest.

    Text metrics are computed where both a generated rationale and a
    reference rationale exist; accuracy over all labeled samples, which must
    each be covered by a prediction. Aggregates are means of the present
    per-sample values.
    """
    preds_by_id: dict[str, PredictionRecord] = {}
    for record in predictions:
        if record.id in preds_by_id:
            raise ValueError(f"duplicate prediction for sample {record.id!r}")
        preds_by_id[record.id] = record
    rationales_by_id: dict[str, RationaleRecord] = {}
    for record in rationales or ():
        if record.id in rationales_by_id:
            raise ValueError(f"duplicate rationale for sample {record.id!r}")
        rationales_by_id[record.id] = record

    missing = [s.id for s in manifest if s.label is not None and s.id not in preds_by_id]
    if missing:
        raise CoverageError(f"labeled samples without predictions: {missing}")

    rows: list[SampleEval] = []
    correct: list[bool] = []
    bleus: list[float] = []
    rouges: list[float] = []
    for sample in manifest:
        pred = preds_by_id.get(sample.id)
        rat = rationales_by_id.get(sample.id)
        bleu_value = rouge_value = None
        if rat is not None and sample.reference_rationale is not None:
            bleu_value = bleu4(rat.thinking, sample.reference_rationale)
            rouge_value = rouge_l(rat.thinking, sample.reference_rationale)
            bleus.append(bleu_value)
            rouges.append(rouge_value)
        if sample.label is not None and pred is not None:
            correct.append(pred.preference is sample.label)
        rows.append(
            SampleEval(
                id=sample.id,
                predicted=pred.preference if pred else None,
                label=sample.label,
                bleu4=bleu_value,
                rouge_l=rouge_value,
                compliant=rat.compliant if rat else None,
                tie=pred.tie if pred else None,
            )
        )

    acc = sum(correct) / len(correct) if correct else None
    mean_bleu = sum(bleus) / len(bleus) if bleus else None
    mean_rouge = sum(rouges) / len(rouges) if rouges else None
    composite = None
    if any(v is not None for v in (acc, mean_bleu, mean_rouge)):
        composite = composite_score(acc, mean_bleu, mean_rouge, None, weights)
    return EvalReport(
        accuracy=acc,
        mean_bleu4=mean_bleu,
        mean_rouge_l=mean_rouge,
        composite=composite,
        per_sample=tuple(rows),
    )


def report_to_json(report: EvalReport) -> str:
    """Machine-readable report; stable key order and full float precision."""
    payload = {
        "accuracy": report.accuracy,
        "mean_bleu4": report.mean_bleu4,
        "mean_rouge_l": report.mean_rouge_l,
        "composite": report.composite,
        "n_samples": len(report.per_sample),
        "per_sample": [
            {
                "id": row.id,
                "predicted": row.predicted.value if row.predicted else None,
                "label": row.label.value if row.label else None,
                "bleu4": row.bleu4,
                "rouge_l": row.rouge_l,
                "compliant": row.compliant,
                "tie": row.tie,
            }
            for row in report.per_sample
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def format_report_text(report: EvalReport) -> str:
    def fmt(value: float | None) -> str:
        return "n/a" if value is None else f"{value:.4f}"

    lines = [
        f"samples:      {len(report.per_sample)}",
        f"accuracy:     {fmt(report.accuracy)}",
        f"mean BLEU-4:  {fmt(report.mean_bleu4)}",
        f"mean ROUGE-L: {fmt(report.mean_rouge_l)}",
        f"composite:    {fmt(report.composite)}",
    ]
    ties = sum(1 for row in report.per_sample if row.tie)
    noncompliant = sum(1 for row in report.per_sample if row.compliant is False)
    lines.append(f"tie-flagged:  {ties}")
    lines.append(f"noncompliant rationales: {noncompliant}")
    return "\n".join(lines) + "\n"
