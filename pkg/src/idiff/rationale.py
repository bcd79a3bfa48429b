"""Text machinery for the thinking path.

Covers the expert-style comparison templates (person/scene/generic), the
feature-evidence block injected into prompts, prompt assembly for the four
supervision modes, a deterministic built-in rationale renderer (so the
pipeline runs without any model endpoint), and the parser/validator for the
tagged output format.

Wire contract: `<thinking>...</thinking>` optionally followed by
`<answer>A</answer>` or `<answer>B</answer>`. Answer-conditioned prompts
state the decided side as "Ground truth: Left is better." (or Right) and
must never ask for an answer tag.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from idiff.cv_features import FEATURE_NAMES, PairFeatures
from idiff.image_core import ContentDomain, ImageBuffer, PairSample, Preference, decompose
from idiff.iqa_providers import METRIC_NAMES, QualityScores


class TemplateStyle(Enum):
    DOMAIN_SPECIFIC = "domain"
    GENERIC = "generic"


class PromptMode(Enum):
    BASELINE = "baseline"
    TEMPLATED = "templated"
    TEMPLATED_FEATURES = "templated-features"
    ANSWER_AWARE = "answer-aware"


class ConditioningSource(Enum):
    PREDICTED = "predicted"
    GROUND_TRUTH = "ground-truth"
    FIXED_WRONG = "fixed-wrong"


@dataclass(frozen=True)
class Conditioning:
    source: ConditioningSource
    preference: Preference


class RationaleParseError(ValueError):
    pass


class MissingThinkingError(RationaleParseError):
    pass


class MalformedAnswerError(RationaleParseError):
    pass


class DuplicateAnswerError(RationaleParseError):
    pass


@dataclass(frozen=True)
class TemplateSlot:
    """One comparison line: a region/metric pair, backed by a feature of one
    view pair so the renderer can pick the favored side deterministically."""

    region: str
    metric: str
    view: str  # "global" or "crop"
    feature: str
    higher_is_better: bool

    def __post_init__(self) -> None:
        if self.view not in ("global", "crop"):
            raise ValueError(f"slot view must be 'global' or 'crop', got {self.view!r}")
        if self.feature not in FEATURE_NAMES:
            raise ValueError(f"unknown feature {self.feature!r}")


MIN_COMPARISON_LINES = 4
MAX_COMPARISON_LINES = 7


@dataclass(frozen=True)
class Template:
    name: str
    slots: tuple[TemplateSlot, ...]
    min_lines: int = MIN_COMPARISON_LINES
    max_lines: int = MAX_COMPARISON_LINES

    def __post_init__(self) -> None:
        if not self.min_lines <= len(self.slots) <= self.max_lines:
            raise ValueError(
                f"template {self.name!r} needs {self.min_lines}-{self.max_lines} slots, "
                f"got {len(self.slots)}"
            )


def _slot(region: str, metric: str, view: str, feature: str, higher_is_better: bool = True) -> TemplateSlot:
    return TemplateSlot(region, metric, view, feature, higher_is_better)


PERSON_TEMPLATE = Template(
    name="person",
    slots=(
        _slot("Face", "Texture", "crop", "laplacian_var"),
        _slot("Face", "Sharpness", "crop", "tenengrad"),
        _slot("Face", "Noise", "crop", "noise_std", higher_is_better=False),
        _slot("Hair", "Texture", "crop", "high_freq_ratio"),
        _slot("Clothing", "Texture", "crop", "edge_density"),
        _slot("Global", "Sharpness", "global", "tenengrad"),
        _slot("Global", "Naturalness", "global", "entropy"),
    ),
)

SCENE_TEMPLATE = Template(
    name="scene",
    slots=(
        _slot("Global", "Sharpness", "global", "tenengrad"),
        _slot("Global", "Noise", "global", "noise_std", higher_is_better=False),
        _slot("Global", "Texture", "global", "laplacian_var"),
        _slot("Architecture", "Edges", "crop", "edge_density"),
        _slot("Foliage", "Texture", "crop", "laplacian_var"),
        _slot("Text", "Clarity", "crop", "high_freq_ratio"),
        _slot("Global", "Artifacts", "global", "over_exposure_ratio", higher_is_better=False),
    ),
)

GENERIC_TEMPLATE = Template(
    name="generic",
    slots=(
        _slot("Global", "Sharpness", "global", "tenengrad"),
        _slot("Global", "Noise", "global", "noise_std", higher_is_better=False),
        _slot("Global", "Texture", "global", "laplacian_var"),
        _slot("Detail", "Sharpness", "crop", "tenengrad"),
        _slot("Detail", "Texture", "crop", "laplacian_var"),
        _slot("Detail", "Noise", "crop", "noise_std", higher_is_better=False),
        _slot("Global", "Colorfulness", "global", "colorfulness"),
    ),
)

BUILTIN_TEMPLATES = {
    "person": PERSON_TEMPLATE,
    "scene": SCENE_TEMPLATE,
    "generic": GENERIC_TEMPLATE,
}


def select_template(
    domain: ContentDomain,
    style: TemplateStyle,
    templates: dict[str, Template] | None = None,
) -> Template:
    """Domain-specific templates for person/scene, or the shared generic one."""
    table = templates if templates is not None else BUILTIN_TEMPLATES
    if style is TemplateStyle.GENERIC:
        return table["generic"]
    return table[domain.value]


def load_templates(path: str | Path) -> dict[str, Template]:
    """Read a template file: {name: [{region, metric, view, feature,
    higher_is_better}, ...]}. Every named template must carry 4-7 slots."""
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError("template file must map template names to slot lists")
    templates: dict[str, Template] = {}
    for name, slots in raw.items():
        templates[name] = Template(
            name=name,
            slots=tuple(
                TemplateSlot(
                    region=s["region"],
                    metric=s["metric"],
                    view=s["view"],
                    feature=s["feature"],
                    higher_is_better=bool(s.get("higher_is_better", True)),
                )
                for s in slots
            ),
        )
    for required in ("person", "scene", "generic"):
        if required not in templates:
            raise ValueError(f"template file is missing the {required!r} template")
    return templates


# --- numeric formatting: 4 significant digits, stable across runs ---

def _sig4(x: float) -> str:
    if x == 0:
        return "0.000"
    return f"{x:.4g}"


def _signed4(x: float) -> str:
    return ("+" if x >= 0 else "-") + _sig4(abs(x))


def format_feature_block(features: PairFeatures, scores: QualityScores | None = None) -> str:
    """Deterministic text table of the measured evidence.

    One section per view pair with A-value, B-value and signed A-B difference
    per feature; learned IQA scores follow, with "n/a" for absent metrics
    (never a substituted zero).
    """
    lines: list[str] = []
    sections = (
        ("Global views (A vs B):", features.a_global, features.b_global),
        ("Crop views (A vs B):", features.a_crop, features.b_crop),
    )
    for title, a_vec, b_vec in sections:
        lines.append(title)
        for name in FEATURE_NAMES:
            a_val = getattr(a_vec, name)
            b_val = getattr(b_vec, name)
            lines.append(f"  {name}: A {_sig4(a_val)} | B {_sig4(b_val)} | diff {_signed4(a_val - b_val)}")
    lines.append("Learned IQA scores:")
    for view in ("a_global", "a_crop", "b_global", "b_crop"):
        metrics = scores.get(view) if scores is not None else None
        cells = []
        for metric in METRIC_NAMES:
            value = getattr(metrics, metric) if metrics is not None else None
            cells.append(f"{metric} {'n/a' if value is None else _sig4(value)}")
        lines.append(f"  {view}: " + " | ".join(cells))
    return "\n".join(lines)


_SYSTEM_WITH_ANSWER = (
    "You are an expert photographic quality assessor comparing two candidate "
    "photographs, A (left) and B (right). Write your comparison inside "
    "<thinking>...</thinking>, then give the preferred image inside "
    "<answer>A</answer> or <answer>B</answer>."
)

# Must never mention an answer tag: in conditioned mode the model is asked
# for reasoning only.
_SYSTEM_CONDITIONED = (
    "You are an expert photographic quality assessor comparing two candidate "
    "photographs, A (left) and B (right). The preferred image has already been "
    "decided and is stated at the end of the user message. Write only the "
    "supporting comparison inside <thinking>...</thinking>; do not add any "
    "verdict token after it."
)

_BASE_TASK = (
    "Compare Image A (Left) and Image B (Right) of this pair and decide which "
    "has better perceptual quality. Four images are attached in order: global "
    "view of A, detail crop of A, global view of B, detail crop of B."
)


def _template_clause(template: Template) -> str:
    aspects = "; ".join(f"{slot.region} {slot.metric}" for slot in template.slots)
    return (
        f"\n\nWrite {template.min_lines}-{template.max_lines} concise comparison lines, "
        "each covering one region and one metric, of the form "
        "'<Region> <Metric>: Image A (Left) ...' or '<Region> <Metric>: Image B (Right) ...'. "
        f"Draw the aspects from: {aspects}. Finish with a mandatory final summary line "
        "'Overall: Image A (Left) ...' or 'Overall: Image B (Right) ...' naming the better image."
    )


def conditioning_sentence(preference: Preference) -> str:
    return f"Ground truth: {preference.side_word} is better."


@dataclass(frozen=True)
class PromptBundle:
    sample_id: str
    system_text: str
    user_text: str
    images: tuple[ImageBuffer, ImageBuffer, ImageBuffer, ImageBuffer]
    mode: PromptMode
    conditioning: Conditioning | None = None

    def __post_init__(self) -> None:
        if self.mode is PromptMode.ANSWER_AWARE and self.conditioning is None:
            raise ValueError("answer-aware prompts require conditioning")
        if self.mode is not PromptMode.ANSWER_AWARE and self.conditioning is not None:
            raise ValueError(f"conditioning is only valid in answer-aware mode, not {self.mode.value}")


def build_prompt(
    sample: PairSample,
    features: PairFeatures,
    scores: QualityScores | None,
    mode: PromptMode,
    template: Template,
    conditioning: Conditioning | None = None,
) -> PromptBundle:
    """Assemble the prompt for one sample under the given supervision mode.

    The user text grows monotonically along baseline -> templated ->
    templated-features; answer-aware additionally appends the decided side
    and switches to a system prompt that requests reasoning only.
    """
    if mode is PromptMode.ANSWER_AWARE and conditioning is None:
        raise ValueError("answer-aware mode requires conditioning")
    if mode is not PromptMode.ANSWER_AWARE and conditioning is not None:
        raise ValueError("conditioning given outside answer-aware mode")

    user_text = _BASE_TASK
    if mode in (PromptMode.TEMPLATED, PromptMode.TEMPLATED_FEATURES, PromptMode.ANSWER_AWARE):
        user_text += _template_clause(template)
    if mode in (PromptMode.TEMPLATED_FEATURES, PromptMode.ANSWER_AWARE):
        user_text += "\n\nMeasured quality statistics:\n" + format_feature_block(features, scores)
    if mode is PromptMode.ANSWER_AWARE:
        assert conditioning is not None
        user_text += "\n\n" + conditioning_sentence(conditioning.preference)
        system_text = _SYSTEM_CONDITIONED
    else:
        system_text = _SYSTEM_WITH_ANSWER

    views = decompose(sample)
    return PromptBundle(
        sample_id=sample.id,
        system_text=system_text,
        user_text=user_text,
        images=(views.a_global, views.a_crop, views.b_global, views.b_crop),
        mode=mode,
        conditioning=conditioning,
    )


# Comparative clause per metric; the renderer stays byte-deterministic.
_METRIC_CLAUSES = {
    "Sharpness": "resolves finer detail",
    "Texture": "preserves more natural texture",
    "Noise": "shows lower noise",
    "Edges": "keeps cleaner edge transitions",
    "Clarity": "retains clearer fine structure",
    "Naturalness": "looks more natural",
    "Artifacts": "exhibits fewer artifacts",
    "Colorfulness": "reproduces richer color",
}
_DEFAULT_CLAUSE = "compares favorably"


def _slot_values(slot: TemplateSlot, features: PairFeatures) -> tuple[float, float]:
    if slot.view == "global":
        a_vec, b_vec = features.a_global, features.b_global
    else:
        a_vec, b_vec = features.a_crop, features.b_crop
    return getattr(a_vec, slot.feature), getattr(b_vec, slot.feature)


def render_reference_rationale(
    features: PairFeatures,
    preference: Preference,
    template: Template,
) -> str:
    """Deterministic expert-style rationale from measured evidence.

    Each slot's favored side follows the sign of its feature difference; a
    zero difference falls back to the overall preference so evidence never
    contradicts the stated decision for no reason. The output always passes
    validate_template_compliance by construction.
    """
    lines: list[str] = []
    for slot in template.slots:
        a_val, b_val = _slot_values(slot, features)
        delta = a_val - b_val if slot.higher_is_better else b_val - a_val
        if delta > 0:
            favored = Preference.A
        elif delta < 0:
            favored = Preference.B
        else:
            favored = preference
        other = favored.flipped()
        clause = _METRIC_CLAUSES.get(slot.metric, _DEFAULT_CLAUSE)
        lines.append(
            f"{slot.region} {slot.metric}: Image {favored.value} ({favored.side_word}) "
            f"{clause} than Image {other.value} ({other.side_word}) "
            f"({slot.feature} {_sig4(a_val)} vs {_sig4(b_val)})."
        )
    lines.append(f"Overall: Image {preference.value} ({preference.side_word}) is the better image.")
    return "\n".join(lines)


@dataclass(frozen=True)
class Rationale:
    thinking: str
    answer: Preference | None = None
    compliant: "ComplianceReport | None" = None


def compose_structured_output(rationale: Rationale) -> str:
    """Serialize to the tagged wire format."""
    text = f"<thinking>{rationale.thinking}</thinking>"
    if rationale.answer is not None:
        text += f"<answer>{rationale.answer.value}</answer>"
    return text


_THINKING_RE = re.compile(r"<thinking>(.*?)</thinking>", re.DOTALL)
_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.DOTALL)


def parse_structured_output(text: str) -> Rationale:
    """Extract the first <thinking> block and the optional <answer> token.

    Prose or whitespace outside the tags is tolerated. Raises
    MissingThinkingError, MalformedAnswerError (token other than A/B), or
    DuplicateAnswerError (more than one answer tag).
    """
    thinking_match = _THINKING_RE.search(text)
    if thinking_match is None:
        raise MissingThinkingError("no <thinking>...</thinking> block found")
    answers = _ANSWER_RE.findall(text)
    if len(answers) > 1:
        raise DuplicateAnswerError(f"{len(answers)} <answer> tags found")
    answer: Preference | None = None
    if answers:
        token = answers[0].strip()
        if token not in ("A", "B"):
            raise MalformedAnswerError(f"answer token must be A or B, got {token!r}")
        answer = Preference(token)
    return Rationale(thinking=thinking_match.group(1), answer=answer)


_COMPARISON_LINE_RE = re.compile(
    r"^(?P<region>[A-Z][A-Za-z]*) (?P<metric>[A-Z][A-Za-z]*): "
    r"Image (?P<image>[AB]) \((?P<side>Left|Right)\)"
)
_SUMMARY_LINE_RE = re.compile(r"^Overall: Image (?P<image>[AB]) \((?P<side>Left|Right)\)")
_SIDE_FOR_IMAGE = {"A": "Left", "B": "Right"}


@dataclass(frozen=True)
class ComplianceReport:
    ok: bool
    violations: tuple[str, ...]


def validate_template_compliance(thinking: str, template: Template) -> ComplianceReport:
    """Syntactic check of the expert-line structure.

    Requires min-max comparison lines of the '<Region> <Metric>: Image X
    (Side)' form, a final 'Overall:' summary line, and consistent A/Left,
    B/Right pairing. Violations are reported as data, never raised.
    """
    lines = [line.strip() for line in thinking.splitlines() if line.strip()]
    violations: list[str] = []

    if not lines:
        return ComplianceReport(False, ("empty rationale",))

    summary_match = _SUMMARY_LINE_RE.match(lines[-1])
    if summary_match is None:
        violations.append("final line is not a global summary ('Overall: Image X (Side) ...')")
        comparison_lines = lines
    else:
        if _SIDE_FOR_IMAGE[summary_match.group("image")] != summary_match.group("side"):
            violations.append("summary line pairs the image letter with the wrong side")
        comparison_lines = lines[:-1]

    count = len(comparison_lines)
    if not template.min_lines <= count <= template.max_lines:
        violations.append(
            f"expected {template.min_lines}-{template.max_lines} comparison lines, got {count}"
        )
    for index, line in enumerate(comparison_lines, start=1):
        match = _COMPARISON_LINE_RE.match(line)
        if match is None:
            violations.append(
                f"line {index} does not match '<Region> <Metric>: Image X (Side) ...': {line[:60]!r}"
            )
        elif _SIDE_FOR_IMAGE[match.group("image")] != match.group("side"):
            violations.append(f"line {index} pairs the image letter with the wrong side")

    return ComplianceReport(not violations, tuple(violations))
