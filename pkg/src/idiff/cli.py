"""Pipeline orchestration CLI.

Subcommands: features, train, predict, explain, eval. Each run resolves its
configuration (config file plus flag overrides), validates every referenced
path before touching the output directory, writes a resolved-config snapshot
next to its artifacts, and exits 0 on success, 1 when per-sample failures
occurred, 2 on config/IO errors.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from idiff import answer_model as am
from idiff import eval_harness as ev
from idiff.cv_features import (
    FeatureComputationError,
    PairFeatures,
    extract_all,
    load_feature_dump,
    write_feature_dump,
)
from idiff.image_core import ContentDomain, PairSample, Preference, decompose, load_manifest
from idiff.iqa_providers import QualityScores, load_scores
from idiff.mllm_client import EndpointConfig, MllmError, Transport, batch_complete
from idiff.rationale import (
    BUILTIN_TEMPLATES,
    Conditioning,
    ConditioningSource,
    PromptMode,
    RationaleParseError,
    Template,
    TemplateStyle,
    build_prompt,
    load_templates,
    parse_structured_output,
    render_reference_rationale,
    select_template,
    validate_template_compliance,
)
from idiff.retrying import requests_post_json

EXIT_OK = 0
EXIT_SAMPLE_ERRORS = 1
EXIT_CONFIG_ERROR = 2

DEFAULT_MEMBER_COUNT = 5


class ConfigError(Exception):
    """Invalid configuration or unreadable input; nothing was written."""


@dataclass
class RunConfig:
    manifest: Path | None = None
    features: Path | None = None
    scores: Path | None = None
    predictions: Path | None = None
    rationales: Path | None = None
    models: Path | None = None
    out: Path | None = None
    vote: str = "equal"
    template_style: str = "domain"
    template_file: Path | None = None
    prompt_mode: str = "templated-features"
    conditioning: str = "predicted"
    generator: str = "builtin"
    endpoint_url: str | None = None
    endpoint_model: str = "default-model"
    timeout: float = 60.0
    max_retries: int = 3
    max_in_flight: int = 4
    temperature: float | None = None
    max_tokens: int | None = None
    weights: tuple[float, ...] = (1.0, 1.0, 1.0)
    seed: int = 42
    member_seeds: tuple[int, ...] = field(default_factory=tuple)

    def resolved_member_seeds(self) -> tuple[int, ...]:
        if self.member_seeds:
            return self.member_seeds
        return tuple(self.seed + i for i in range(DEFAULT_MEMBER_COUNT))

    def snapshot(self) -> dict:
        """Resolved-config record; the output dir is stored self-relatively so
        identical runs into different directories stay byte-identical."""
        record = {}
        for key, value in vars(self).items():
            if key == "out":
                record[key] = "."
            elif isinstance(value, Path):
                record[key] = str(value)
            elif isinstance(value, tuple):
                record[key] = list(value)
            else:
                record[key] = value
        record["member_seeds"] = list(self.resolved_member_seeds())
        return record


_PATH_KEYS = ("manifest", "features", "scores", "predictions", "rationales", "models", "out", "template_file")


def _parse_weights(text: str) -> tuple[float, ...]:
    try:
        values = tuple(float(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--weights must be comma-separated numbers, got {text!r}") from None
    if len(values) not in (3, 4):
        raise ConfigError("--weights takes 3 values (acc,bleu,rouge) or 4 (plus llm)")
    return values


def _parse_seed_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ConfigError(f"--member-seeds must be comma-separated integers, got {text!r}") from None


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Merge defaults < config file < explicit flags into a RunConfig."""
    file_values: dict = {}
    config_path = getattr(args, "config", None)
    if config_path is not None:
        try:
            with open(config_path, "r", encoding="utf-8") as fh:
                file_values = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {config_path}: {exc}") from None
        if not isinstance(file_values, dict):
            raise ConfigError("config file must contain a JSON object")

    cfg = RunConfig()
    for key in vars(cfg):
        flag_value = getattr(args, key, None)
        value = flag_value if flag_value is not None else file_values.get(key)
        if value is None:
            continue
        if key in _PATH_KEYS:
            value = Path(value)
        elif key == "weights" and isinstance(value, str):
            value = _parse_weights(value)
        elif key == "weights":
            value = tuple(float(v) for v in value)
        elif key == "member_seeds" and isinstance(value, str):
            value = _parse_seed_list(value)
        elif key == "member_seeds":
            value = tuple(int(v) for v in value)
        setattr(cfg, key, value)
    return cfg


def _require_file(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not path.is_file():
        raise ConfigError(f"{flag}: no such file: {path}")
    return path


def _require_dir(path: Path | None, flag: str) -> Path:
    if path is None:
        raise ConfigError(f"{flag} is required")
    if not path.is_dir():
        raise ConfigError(f"{flag}: no such directory: {path}")
    return path


def _require_out(cfg: RunConfig) -> Path:
    if cfg.out is None:
        raise ConfigError("--out is required")
    return cfg.out


def _prepare_out(cfg: RunConfig, command: str) -> Path:
    """Create the output directory and drop the resolved-config snapshot.
    Only called after all input validation passed."""
    out = _require_out(cfg)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / f"{command}_config.json", "w", encoding="utf-8") as fh:
        json.dump(cfg.snapshot(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return out


def _load_manifest_checked(path: Path) -> tuple[list[PairSample], list]:
    try:
        samples, errors = load_manifest(path)
    except OSError as exc:
        raise ConfigError(f"cannot read manifest {path}: {exc}") from None
    for err in errors:
        print(f"error: manifest line {err.line} (sample {err.sample_id}): {err.reason}", file=sys.stderr)
    return samples, errors


def _sample_features(
    samples: Sequence[PairSample],
    features_path: Path | None,
) -> tuple[dict[str, PairFeatures], list[str]]:
    """Features per sample id, loaded from a dump or computed fresh.
    Returns (features, per-sample error messages)."""
    errors: list[str] = []
    if features_path is not None:
        try:
            loaded = load_feature_dump(features_path)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        feats = {}
        for s in samples:
            if s.id in loaded:
                feats[s.id] = loaded[s.id]
            else:
                errors.append(f"sample {s.id!r}: not present in feature file")
        return feats, errors
    feats = {}
    for s in samples:
        try:
            feats[s.id] = extract_all(decompose(s))
        except FeatureComputationError as exc:
            errors.append(f"sample {s.id!r}: {exc}")
    return feats, errors


def _write_jsonl(path: Path, rows: Sequence[Mapping]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")


def _read_jsonl(path: Path) -> list[dict]:
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rows.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ConfigError(f"{path} line {line_no}: malformed record: {exc}") from None
    return rows


# ---------------------------------------------------------------- features


def cmd_features(cfg: RunConfig) -> int:
    _require_file(cfg.manifest, "--manifest")
    _require_out(cfg)
    samples, ingest_errors = _load_manifest_checked(cfg.manifest)
    out = _prepare_out(cfg, "features")

    feats, feat_errors = _sample_features(samples, None)
    for message in feat_errors:
        print(f"error: {message}", file=sys.stderr)
    ordered = {s.id: feats[s.id] for s in samples if s.id in feats}
    write_feature_dump(out / "features.jsonl", ordered)
    print(f"wrote {4 * len(ordered)} feature records for {len(ordered)} samples to {out / 'features.jsonl'}")
    return EXIT_SAMPLE_ERRORS if (ingest_errors or feat_errors) else EXIT_OK


# ------------------------------------------------------------------- train


def cmd_train(cfg: RunConfig) -> int:
    _require_file(cfg.manifest, "--manifest")
    if cfg.features is not None:
        _require_file(cfg.features, "--features")
    _require_out(cfg)
    samples, ingest_errors = _load_manifest_checked(cfg.manifest)
    labeled = [s for s in samples if s.label is not None]
    feats, feat_errors = _sample_features(labeled, cfg.features)
    out = _prepare_out(cfg, "train")
    for message in feat_errors:
        print(f"error: {message}", file=sys.stderr)
    usable = [s for s in labeled if s.id in feats]

    train_errors: list[str] = []
    trained = 0
    for domain in (ContentDomain.PERSON, ContentDomain.SCENE):
        subset = [s for s in usable if s.domain is domain]
        if not subset:
            print(f"warning: no labeled {domain.value} samples; skipping {domain.value} members", file=sys.stderr)
            continue
        for seed in cfg.resolved_member_seeds():
            try:
                model = am.train_linear(usable, domain, seed=seed, features_by_id=feats)
            except am.TrainingDataError as exc:
                train_errors.append(str(exc))
                print(f"error: {exc}", file=sys.stderr)
                break
            am.save_model(model, out / f"{model.member_id}.json")
            trained += 1
            print(f"{model.member_id}: val_accuracy {model.val_accuracy:.4f}")
    print(f"wrote {trained} model files to {out}")
    if ingest_errors or feat_errors or train_errors:
        return EXIT_SAMPLE_ERRORS
    return EXIT_OK


# ----------------------------------------------------------------- predict


def _load_models(models_dir: Path, member_seeds: tuple[int, ...] | None) -> list[am.LinearPairwiseModel]:
    # a train run drops its config snapshot next to the model files
    paths = sorted(p for p in models_dir.glob("*.json") if not p.name.endswith("_config.json"))
    models = []
    for path in paths:
        try:
            model = am.load_model(path)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad model file {path}: {exc}") from None
        models.append(model)
    if member_seeds:
        wanted = set(member_seeds)
        models = [m for m in models if m.seed in wanted]
    if not models:
        raise ConfigError(f"no usable model files in {models_dir}")
    return models


def cmd_predict(cfg: RunConfig) -> int:
    _require_file(cfg.manifest, "--manifest")
    models_dir = _require_dir(cfg.models, "--models")
    _require_out(cfg)
    if cfg.vote not in ("equal", "weighted"):
        raise ConfigError(f"--vote must be equal or weighted, got {cfg.vote!r}")
    models = _load_models(models_dir, cfg.member_seeds or None)

    samples, ingest_errors = _load_manifest_checked(cfg.manifest)
    out = _prepare_out(cfg, "predict")

    person_models = [m for m in models if m.domain is ContentDomain.PERSON]
    scene_models = [m for m in models if m.domain is ContentDomain.SCENE]
    for m in models:
        if m.domain is None:
            print(f"warning: ignoring pooled model {m.member_id!r} for routing", file=sys.stderr)
    config = am.EnsembleConfig(
        mode=am.VoteMode(cfg.vote),
        members=tuple(sorted(m.member_id for m in models if m.domain is not None)),
    )

    rows: list[dict] = []
    sample_errors: list[str] = []
    for sample in samples:
        try:
            routed = am.route_and_predict_detailed(sample, person_models, scene_models, config)
        except (am.NoModelsForDomainError, FeatureComputationError) as exc:
            sample_errors.append(str(exc))
            print(f"error: {exc}", file=sys.stderr)
            continue
        rows.append(
            {
                "id": sample.id,
                "answer": routed.preference.value,
                "tie": routed.outcome.tie,
                "tally": dict(routed.outcome.tally),
                "votes": {p.member_id: p.preference.value for p in routed.member_predictions},
                "margins": {p.member_id: p.margin for p in routed.member_predictions},
            }
        )
    _write_jsonl(out / "predictions.jsonl", rows)
    print(f"wrote {len(rows)} predictions to {out / 'predictions.jsonl'}")
    return EXIT_SAMPLE_ERRORS if (ingest_errors or sample_errors) else EXIT_OK


# ----------------------------------------------------------------- explain


def _read_predictions_map(path: Path) -> dict[str, Preference]:
    preds = {}
    for row in _read_jsonl(path):
        try:
            preds[str(row["id"])] = Preference(row["answer"])
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{path}: bad prediction record {row!r}: {exc}") from None
    return preds


def _template_table(cfg: RunConfig) -> dict[str, Template]:
    if cfg.template_file is not None:
        _require_file(cfg.template_file, "--template-file")
        try:
            return load_templates(cfg.template_file)
        except (ValueError, KeyError) as exc:
            raise ConfigError(f"bad template file {cfg.template_file}: {exc}") from None
    return dict(BUILTIN_TEMPLATES)


def cmd_explain(cfg: RunConfig, transport: Transport = requests_post_json) -> int:
    _require_file(cfg.manifest, "--manifest")
    if cfg.features is not None:
        _require_file(cfg.features, "--features")
    if cfg.scores is not None:
        _require_file(cfg.scores, "--scores")
    _require_out(cfg)
    try:
        mode = PromptMode(cfg.prompt_mode)
        source = ConditioningSource(cfg.conditioning)
        style = TemplateStyle(cfg.template_style)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg.generator not in ("builtin", "remote"):
        raise ConfigError(f"--generator must be builtin or remote, got {cfg.generator!r}")
    templates = _template_table(cfg)

    needs_predictions = source in (ConditioningSource.PREDICTED, ConditioningSource.FIXED_WRONG)
    predictions: dict[str, Preference] = {}
    if needs_predictions:
        predictions = _read_predictions_map(_require_file(cfg.predictions, "--predictions"))

    endpoint: EndpointConfig | None = None
    if cfg.generator == "remote":
        if not cfg.endpoint_url:
            raise ConfigError("--endpoint-url is required with --generator remote")
        endpoint = EndpointConfig(
            base_url=cfg.endpoint_url,
            model_name=cfg.endpoint_model,
            timeout=cfg.timeout,
            max_retries=cfg.max_retries,
            max_in_flight=cfg.max_in_flight,
            temperature=cfg.temperature,
            max_tokens=cfg.max_tokens,
        )

    samples, ingest_errors = _load_manifest_checked(cfg.manifest)
    scores_by_id: dict[str, QualityScores] = {}
    if cfg.scores is not None:
        try:
            scores_by_id = load_scores(cfg.scores)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    feats, feat_errors = _sample_features(samples, cfg.features)
    out = _prepare_out(cfg, "explain")
    for message in feat_errors:
        print(f"error: {message}", file=sys.stderr)

    sample_errors = list(feat_errors)
    plans = []  # (sample, template, conditioning preference)
    for sample in samples:
        if sample.id not in feats:
            continue
        if source is ConditioningSource.GROUND_TRUTH:
            if sample.label is None:
                sample_errors.append(f"sample {sample.id!r}: ground-truth conditioning needs a label")
                print(f"error: {sample_errors[-1]}", file=sys.stderr)
                continue
            preference = sample.label
        else:
            if sample.id not in predictions:
                sample_errors.append(f"sample {sample.id!r}: no prediction available for conditioning")
                print(f"error: {sample_errors[-1]}", file=sys.stderr)
                continue
            preference = predictions[sample.id]
            if source is ConditioningSource.FIXED_WRONG:
                preference = preference.flipped()
        plans.append((sample, select_template(sample.domain, style, templates), preference))

    rows: list[dict] = []
    if cfg.generator == "builtin":
        for sample, template, preference in plans:
            thinking = render_reference_rationale(feats[sample.id], preference, template)
            answer = None if mode is PromptMode.ANSWER_AWARE else preference
            report = validate_template_compliance(thinking, template)
            rows.append(_rationale_row(sample.id, thinking, answer, report, mode, source, preference))
    else:
        bundles = []
        for sample, template, preference in plans:
            conditioning = Conditioning(source, preference) if mode is PromptMode.ANSWER_AWARE else None
            bundles.append(
                build_prompt(sample, feats[sample.id], scores_by_id.get(sample.id), mode, template, conditioning)
            )
        results = batch_complete(endpoint, bundles, transport=transport)
        template_by_id = {sample.id: template for sample, template, _ in plans}
        pref_by_id = {sample.id: pref for sample, _, pref in plans}
        for sample_id, result in results:
            if isinstance(result, MllmError):
                sample_errors.append(str(result))
                print(f"error: {result}", file=sys.stderr)
                rows.append({"id": sample_id, "error": str(result)})
                continue
            try:
                parsed = parse_structured_output(result)
            except RationaleParseError as exc:
                sample_errors.append(f"sample {sample_id!r}: {exc}")
                print(f"error: {sample_errors[-1]}", file=sys.stderr)
                rows.append({"id": sample_id, "error": str(exc), "raw": result})
                continue
            report = validate_template_compliance(parsed.thinking, template_by_id[sample_id])
            rows.append(
                _rationale_row(sample_id, parsed.thinking, parsed.answer, report, mode, source, pref_by_id[sample_id])
            )

    _write_jsonl(out / "rationales.jsonl", rows)
    compliant = sum(1 for r in rows if r.get("compliant"))
    print(f"wrote {len(rows)} rationales to {out / 'rationales.jsonl'} ({compliant} compliant)")
    return EXIT_SAMPLE_ERRORS if (ingest_errors or sample_errors) else EXIT_OK


def _rationale_row(
    sample_id: str,
    thinking: str,
    answer: Preference | None,
    report,
    mode: PromptMode,
    source: ConditioningSource,
    preference: Preference,
) -> dict:
    row = {
        "id": sample_id,
        "thinking": thinking,
        "answer": answer.value if answer is not None else None,
        "compliant": report.ok,
        "violations": list(report.violations),
        "mode": mode.value,
    }
    if mode is PromptMode.ANSWER_AWARE:
        row["conditioning_source"] = source.value
        row["conditioning_preference"] = preference.value
    return row


# -------------------------------------------------------------------- eval


def cmd_eval(cfg: RunConfig) -> int:
    _require_file(cfg.manifest, "--manifest")
    predictions_path = _require_file(cfg.predictions, "--predictions")
    if cfg.rationales is not None:
        _require_file(cfg.rationales, "--rationales")
    _require_out(cfg)

    weights_values = cfg.weights
    llm_weight = weights_values[3] if len(weights_values) == 4 else 1.0
    try:
        weights = ev.MetricWeights(
            acc=weights_values[0], bleu=weights_values[1], rouge=weights_values[2], llm=llm_weight
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    pred_records = []
    for row in _read_jsonl(predictions_path):
        try:
            pred_records.append(
                ev.PredictionRecord(
                    id=str(row["id"]),
                    preference=Preference(row["answer"]),
                    tie=bool(row.get("tie", False)),
                )
            )
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"{predictions_path}: bad prediction record {row!r}: {exc}") from None

    rationale_records = None
    if cfg.rationales is not None:
        rationale_records = []
        for row in _read_jsonl(cfg.rationales):
            if "thinking" not in row:
                continue  # error rows carry no text
            rationale_records.append(
                ev.RationaleRecord(
                    id=str(row["id"]),
                    thinking=str(row["thinking"]),
                    compliant=row.get("compliant"),
                )
            )

    samples, ingest_errors = _load_manifest_checked(cfg.manifest)
    out = _prepare_out(cfg, "eval")
    try:
        report = ev.evaluate_run(pred_records, rationale_records, samples, weights)
    except (ev.CoverageError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_SAMPLE_ERRORS

    with open(out / "report.json", "w", encoding="utf-8") as fh:
        fh.write(ev.report_to_json(report))
    text = ev.format_report_text(report)
    with open(out / "report.txt", "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")
    return EXIT_SAMPLE_ERRORS if ingest_errors else EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="idiff",
        description="Pairwise image quality assessment pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", help="JSON config file; flags override its values")
        p.add_argument("--manifest", help="line-delimited sample manifest")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="base seed (default 42)")

    p = sub.add_parser("features", help="extract CV quality features for every sample view")
    common(p)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train per-domain ensemble members")
    common(p)
    p.add_argument("--features", help="reuse a feature dump instead of recomputing")
    p.add_argument("--member-seeds", dest="member_seeds", help="comma-separated member seeds")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="route samples to domain members and vote")
    common(p)
    p.add_argument("--models", help="directory of trained model files")
    p.add_argument("--vote", choices=["equal", "weighted"], help="voting mode")
    p.add_argument("--member-seeds", dest="member_seeds", help="restrict to these member seeds")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("explain", help="generate rationales (built-in renderer or remote endpoint)")
    common(p)
    p.add_argument("--features", help="reuse a feature dump instead of recomputing")
    p.add_argument("--scores", help="learned IQA score file")
    p.add_argument("--predictions", help="predictions file for conditioning")
    p.add_argument("--generator", choices=["builtin", "remote"])
    p.add_argument(
        "--prompt-mode",
        dest="prompt_mode",
        choices=[m.value for m in PromptMode],
    )
    p.add_argument(
        "--conditioning",
        choices=[s.value for s in ConditioningSource],
        help="where the conditioning answer comes from (answer-aware mode)",
    )
    p.add_argument("--template", dest="template_style", choices=["generic", "domain"])
    p.add_argument("--template-file", dest="template_file", help="custom template definitions")
    p.add_argument("--endpoint-url", dest="endpoint_url")
    p.add_argument("--endpoint-model", dest="endpoint_model")
    p.add_argument("--timeout", type=float)
    p.add_argument("--max-retries", dest="max_retries", type=int)
    p.add_argument("--max-in-flight", dest="max_in_flight", type=int)
    p.add_argument("--temperature", type=float)
    p.add_argument("--max-tokens", dest="max_tokens", type=int)
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("eval", help="score predictions and rationales against the manifest")
    common(p)
    p.add_argument("--predictions", help="predictions file")
    p.add_argument("--rationales", help="rationales file")
    p.add_argument("--weights", help="acc,bleu,rouge[,llm] composite weights")
    p.set_defaults(func=cmd_eval)

    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return args.func(cfg)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
