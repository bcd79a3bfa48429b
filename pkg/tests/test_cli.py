import json
from pathlib import Path

import numpy as np
import pytest

from helpers import build_sample, gray_image, smooth_texture, synthetic_benchmark, write_manifest
from idiff import answer_model as am
from idiff.cli import (
    EXIT_CONFIG_ERROR,
    EXIT_OK,
    EXIT_SAMPLE_ERRORS,
    RunConfig,
    cmd_explain,
    main,
)
from idiff.image_core import ContentDomain, Preference


def read_jsonl(path):
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def tree_bytes(directory: Path) -> dict[str, bytes]:
    return {
        str(p.relative_to(directory)): p.read_bytes()
        for p in sorted(directory.rglob("*"))
        if p.is_file()
    }


@pytest.fixture(scope="module")
def small_manifest(tmp_path_factory):
    directory = tmp_path_factory.mktemp("smallset")
    samples = synthetic_benchmark(seed=123, n_pairs=6, global_size=24, crop_size=12)
    return write_manifest(directory, samples), samples


class TestFeaturesCommand:
    def test_feature_record_count(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        out = tmp_path / "out"
        assert main(["features", "--manifest", str(manifest), "--out", str(out)]) == EXIT_OK
        rows = read_jsonl(out / "features.jsonl")
        assert len(rows) == 4 * len(samples)
        assert {r["view"] for r in rows} == {"a_global", "a_crop", "b_global", "b_crop"}

    def test_rerun_byte_identical(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        out1, out2 = tmp_path / "r1", tmp_path / "r2"
        main(["features", "--manifest", str(manifest), "--out", str(out1)])
        main(["features", "--manifest", str(manifest), "--out", str(out2)])
        assert tree_bytes(out1) == tree_bytes(out2)

    def test_missing_image_exit_one(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        broken_dir = tmp_path / "broken"
        broken_dir.mkdir()
        broken = broken_dir / "manifest.jsonl"
        broken.write_text(
            manifest.read_text()
            + json.dumps({"id": "ghost", "domain": "person", "global_pair": "images/ghost_g.png", "crop_pair": "images/ghost_c.png"})
            + "\n"
        )
        (broken_dir / "images").symlink_to(manifest.parent / "images")
        out = tmp_path / "out_broken"
        assert main(["features", "--manifest", str(broken), "--out", str(out)]) == EXIT_SAMPLE_ERRORS
        assert (out / "features.jsonl").exists()  # good samples still written

    def test_missing_manifest_is_config_error(self, tmp_path):
        out = tmp_path / "never"
        code = main(["features", "--manifest", str(tmp_path / "nope.jsonl"), "--out", str(out)])
        assert code == EXIT_CONFIG_ERROR
        assert not out.exists()  # no partial output directory


class TestTrainCommand:
    def test_model_file_count_two_domains(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        out = tmp_path / "models"
        code = main([
            "train", "--manifest", str(manifest), "--out", str(out), "--member-seeds", "42,43",
        ])
        assert code == EXIT_OK
        files = sorted(p.name for p in out.glob("*.json") if "config" not in p.name)
        assert files == ["person-s42.json", "person-s43.json", "scene-s42.json", "scene-s43.json"]

    def test_deterministic_model_files(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        out1, out2 = tmp_path / "m1", tmp_path / "m2"
        for out in (out1, out2):
            main(["train", "--manifest", str(manifest), "--out", str(out), "--member-seeds", "42"])
        assert tree_bytes(out1) == tree_bytes(out2)

    def test_person_only_manifest_skips_scene_with_warning(self, tmp_path, capsys):
        rng = np.random.default_rng(5)
        samples = []
        for i in range(6):
            label = Preference.A if i % 2 == 0 else Preference.B
            g1, g2 = smooth_texture(rng, 16, 16), smooth_texture(rng, 16, 16)
            c1, c2 = smooth_texture(rng, 12, 12), smooth_texture(rng, 12, 12)
            samples.append(build_sample(f"p{i}", ContentDomain.PERSON, g1, g2, c1, c2, label=label))
        manifest = write_manifest(tmp_path / "persons", samples)
        out = tmp_path / "models"
        code = main(["train", "--manifest", str(manifest), "--out", str(out), "--member-seeds", "42"])
        assert code == EXIT_OK
        assert "skipping scene" in capsys.readouterr().err
        assert [p.name for p in sorted(out.glob("person*.json"))] == ["person-s42.json"]
        assert not list(out.glob("scene*.json"))


def hand_model(member_id, vote_for_a: bool, val_accuracy: float):
    """Member that votes by the sign of the global laplacian_var difference."""
    weights = np.zeros(am.N_DIFF_FEATURES)
    weights[0] = 1.0 if vote_for_a else -1.0
    return am.LinearPairwiseModel(
        member_id=member_id,
        domain=ContentDomain.PERSON,
        weights=weights,
        feature_means=np.zeros(am.N_DIFF_FEATURES),
        feature_stds=np.ones(am.N_DIFF_FEATURES),
        val_accuracy=val_accuracy,
        seed=0,
        hyperparams=am.TrainConfig(),
    )


@pytest.fixture()
def split_vote_setup(tmp_path):
    """One person sample whose A side is textured (positive laplacian diff),
    five hand-built members: two vote A with high validation accuracy, three
    vote B with low accuracy. Equal voting says B, weighted says A."""
    rng = np.random.default_rng(9)
    sample = build_sample(
        "sv", ContentDomain.PERSON,
        smooth_texture(rng, 16, 16), gray_image(16, 16, 128),
        smooth_texture(rng, 12, 12), gray_image(12, 12, 128),
        label=Preference.A,
    )
    manifest = write_manifest(tmp_path / "data", [sample])
    models_dir = tmp_path / "models"
    models_dir.mkdir()
    specs = [("a1", True, 0.55), ("a2", True, 0.55), ("b1", False, 0.3), ("b2", False, 0.3), ("b3", False, 0.3)]
    for member_id, for_a, acc in specs:
        am.save_model(hand_model(member_id, for_a, acc), models_dir / f"{member_id}.json")
    return manifest, models_dir


class TestPredictCommand:
    def test_unanimous_members(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        models = tmp_path / "models"
        main(["train", "--manifest", str(manifest), "--out", str(models), "--member-seeds", "42,43"])
        out = tmp_path / "preds"
        code = main(["predict", "--manifest", str(manifest), "--models", str(models), "--out", str(out)])
        assert code == EXIT_OK
        rows = read_jsonl(out / "predictions.jsonl")
        assert len(rows) == len(samples)
        for row in rows:
            votes = set(row["votes"].values())
            if len(votes) == 1:
                assert row["answer"] == votes.pop()

    def test_equal_vs_weighted_disagree_on_crafted_split(self, split_vote_setup, tmp_path):
        manifest, models_dir = split_vote_setup
        out_equal, out_weighted = tmp_path / "equal", tmp_path / "weighted"
        main(["predict", "--manifest", str(manifest), "--models", str(models_dir), "--out", str(out_equal), "--vote", "equal"])
        main(["predict", "--manifest", str(manifest), "--models", str(models_dir), "--out", str(out_weighted), "--vote", "weighted"])
        equal_row = read_jsonl(out_equal / "predictions.jsonl")[0]
        weighted_row = read_jsonl(out_weighted / "predictions.jsonl")[0]
        # hand arithmetic: equal tally 3 B vs 2 A; weighted tally 1.10 A vs 0.90 B
        assert equal_row["answer"] == "B"
        assert weighted_row["answer"] == "A"
        assert weighted_row["tally"]["A"] == pytest.approx(1.10)
        assert weighted_row["tally"]["B"] == pytest.approx(0.90)

    def test_rerun_deterministic(self, split_vote_setup, tmp_path):
        manifest, models_dir = split_vote_setup
        out1, out2 = tmp_path / "p1", tmp_path / "p2"
        for out in (out1, out2):
            main(["predict", "--manifest", str(manifest), "--models", str(models_dir), "--out", str(out)])
        assert tree_bytes(out1) == tree_bytes(out2)

    def test_domain_without_models_exit_one(self, tmp_path, split_vote_setup):
        manifest, models_dir = split_vote_setup
        rng = np.random.default_rng(11)
        scene_sample = build_sample(
            "scene-only", ContentDomain.SCENE,
            smooth_texture(rng, 16, 16), smooth_texture(rng, 16, 16),
            smooth_texture(rng, 12, 12), smooth_texture(rng, 12, 12),
        )
        scene_manifest = write_manifest(tmp_path / "scene", [scene_sample])
        out = tmp_path / "out"
        code = main(["predict", "--manifest", str(scene_manifest), "--models", str(models_dir), "--out", str(out)])
        assert code == EXIT_SAMPLE_ERRORS
        assert read_jsonl(out / "predictions.jsonl") == []


class FakeEndpoint:
    """Returns a canned compliant rationale; records every request body."""

    def __init__(self, text=None, answer="<answer>A</answer>"):
        lines = [
            "Face Texture: Image A (Left) preserves more natural texture than Image B (Right).",
            "Face Sharpness: Image A (Left) resolves finer detail than Image B (Right).",
            "Face Noise: Image A (Left) shows lower noise than Image B (Right).",
            "Global Sharpness: Image A (Left) resolves finer detail than Image B (Right).",
            "Overall: Image A (Left) is the better image.",
        ]
        self.text = text if text is not None else "<thinking>" + "\n".join(lines) + "</thinking>" + answer
        self.bodies = []

    def __call__(self, url, payload, timeout, headers):
        self.bodies.append(payload)
        return 200, {"choices": [{"message": {"content": self.text}}]}

    def user_texts(self):
        return [b["messages"][1]["content"][0]["text"] for b in self.bodies]


def explain_config(manifest, out, predictions=None, **overrides):
    cfg = RunConfig(manifest=Path(manifest), out=Path(out))
    if predictions is not None:
        cfg.predictions = Path(predictions)
    for key, value in overrides.items():
        setattr(cfg, key, value)
    return cfg


class TestExplainCommand:
    def make_predictions(self, tmp_path, samples, answer="A"):
        path = tmp_path / "predictions.jsonl"
        with open(path, "w") as fh:
            for s in samples:
                fh.write(json.dumps({"id": s.id, "answer": answer}) + "\n")
        return path

    def test_builtin_renderer_fully_compliant(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        preds = self.make_predictions(tmp_path, samples)
        out = tmp_path / "out"
        code = main([
            "explain", "--manifest", str(manifest), "--out", str(out),
            "--predictions", str(preds),
        ])
        assert code == EXIT_OK
        rows = read_jsonl(out / "rationales.jsonl")
        assert len(rows) == len(samples)
        assert all(r["compliant"] for r in rows)
        assert all(r["violations"] == [] for r in rows)

    def test_ground_truth_conditioning_uses_labels(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        out = tmp_path / "out"
        code = main([
            "explain", "--manifest", str(manifest), "--out", str(out),
            "--prompt-mode", "answer-aware", "--conditioning", "ground-truth",
        ])
        assert code == EXIT_OK
        rows = read_jsonl(out / "rationales.jsonl")
        by_id = {s.id: s for s in samples}
        for row in rows:
            assert row["conditioning_preference"] == by_id[row["id"]].label.value
            assert row["answer"] is None  # answer-aware output carries no verdict

    def test_fixed_wrong_flips_predictions(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        preds = self.make_predictions(tmp_path, samples, answer="A")
        out = tmp_path / "out"
        code = main([
            "explain", "--manifest", str(manifest), "--out", str(out),
            "--predictions", str(preds),
            "--prompt-mode", "answer-aware", "--conditioning", "fixed-wrong",
        ])
        assert code == EXIT_OK
        rows = read_jsonl(out / "rationales.jsonl")
        assert all(row["conditioning_preference"] == "B" for row in rows)

    def test_remote_answer_aware_embeds_conditioning_sentence(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        preds = self.make_predictions(tmp_path, samples, answer="A")
        endpoint = FakeEndpoint(answer="")
        cfg = explain_config(
            manifest, tmp_path / "out", predictions=preds,
            generator="remote", endpoint_url="http://fake.test",
            prompt_mode="answer-aware", conditioning="predicted",
        )
        assert cmd_explain(cfg, transport=endpoint) == EXIT_OK
        texts = endpoint.user_texts()
        assert len(texts) == len(samples)
        for text in texts:
            assert text.count("Ground truth: Left is better.") == 1
        for body in endpoint.bodies:
            assert "<answer>" not in json.dumps(body)

    def test_remote_parses_answer_and_checks_compliance(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        endpoint = FakeEndpoint()
        cfg = explain_config(
            manifest, tmp_path / "out",
            generator="remote", endpoint_url="http://fake.test",
            prompt_mode="templated-features", conditioning="ground-truth",
        )
        assert cmd_explain(cfg, transport=endpoint) == EXIT_OK
        rows = read_jsonl(tmp_path / "out" / "rationales.jsonl")
        assert all(row["answer"] == "A" for row in rows)
        assert all(row["compliant"] for row in rows)

    def test_remote_unparseable_output_is_per_sample_error(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        endpoint = FakeEndpoint(text="no tags at all")
        cfg = explain_config(
            manifest, tmp_path / "out",
            generator="remote", endpoint_url="http://fake.test",
            prompt_mode="baseline", conditioning="ground-truth",
        )
        assert cmd_explain(cfg, transport=endpoint) == EXIT_SAMPLE_ERRORS
        rows = read_jsonl(tmp_path / "out" / "rationales.jsonl")
        assert all("error" in row for row in rows)

    def test_remote_feature_prompts_include_learned_scores(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        scores_path = tmp_path / "scores.jsonl"
        with open(scores_path, "w") as fh:
            for s in samples:
                fh.write(json.dumps({"id": s.id, "view": "a_global", "liqe": 4.125}) + "\n")
        endpoint = FakeEndpoint()
        cfg = explain_config(
            manifest, tmp_path / "out", scores=scores_path,
            generator="remote", endpoint_url="http://fake.test",
            prompt_mode="templated-features", conditioning="ground-truth",
        )
        assert cmd_explain(cfg, transport=endpoint) == EXIT_OK
        for text in endpoint.user_texts():
            assert "liqe 4.125" in text
            assert "qalign n/a" in text

    def test_remote_requires_endpoint_url(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        out = tmp_path / "never"
        code = main([
            "explain", "--manifest", str(manifest), "--out", str(out),
            "--generator", "remote", "--conditioning", "ground-truth",
        ])
        assert code == EXIT_CONFIG_ERROR
        assert not out.exists()


class TestEvalCommand:
    def write_run(self, tmp_path, samples, correct=True):
        preds = tmp_path / "predictions.jsonl"
        rats = tmp_path / "rationales.jsonl"
        with open(preds, "w") as fh:
            for s in samples:
                answer = s.label.value if correct else s.label.flipped().value
                fh.write(json.dumps({"id": s.id, "answer": answer}) + "\n")
        with open(rats, "w") as fh:
            for s in samples:
                fh.write(json.dumps({"id": s.id, "thinking": s.reference_rationale or "text", "compliant": True}) + "\n")
        return preds, rats

    def manifest_with_rationales(self, tmp_path):
        samples = synthetic_benchmark(seed=7, n_pairs=4, global_size=16, crop_size=12)
        refs = {s.id: f"sample {s.id} reference rationale text" for s in samples}
        directory = tmp_path / "evaldata"
        manifest = write_manifest(directory, samples, reference_rationales=refs)
        loaded = [
            build_sample(s.id, s.domain, gray_image(2, 2, 0), gray_image(2, 2, 0), gray_image(2, 2, 0), gray_image(2, 2, 0), label=s.label, rationale=refs[s.id])
            for s in samples
        ]
        return manifest, loaded

    def test_perfect_run_scores_accuracy_one(self, tmp_path):
        manifest, samples = self.manifest_with_rationales(tmp_path)
        preds, rats = self.write_run(tmp_path, samples)
        # make generated rationales equal the references
        with open(rats, "w") as fh:
            for s in samples:
                fh.write(json.dumps({"id": s.id, "thinking": s.reference_rationale, "compliant": True}) + "\n")
        out = tmp_path / "report"
        code = main([
            "eval", "--manifest", str(manifest), "--predictions", str(preds),
            "--rationales", str(rats), "--out", str(out),
        ])
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["accuracy"] == 1.0
        assert report["mean_bleu4"] == pytest.approx(1.0)
        assert report["mean_rouge_l"] == pytest.approx(1.0)

    def test_missing_prediction_coverage_error(self, tmp_path):
        manifest, samples = self.manifest_with_rationales(tmp_path)
        preds, _ = self.write_run(tmp_path, samples)
        lines = preds.read_text().splitlines()[:-1]
        preds.write_text("\n".join(lines) + "\n")
        out = tmp_path / "report"
        code = main(["eval", "--manifest", str(manifest), "--predictions", str(preds), "--out", str(out)])
        assert code == EXIT_SAMPLE_ERRORS

    def test_report_rerun_deterministic(self, tmp_path):
        manifest, samples = self.manifest_with_rationales(tmp_path)
        preds, rats = self.write_run(tmp_path, samples)
        out1, out2 = tmp_path / "rep1", tmp_path / "rep2"
        for out in (out1, out2):
            main([
                "eval", "--manifest", str(manifest), "--predictions", str(preds),
                "--rationales", str(rats), "--out", str(out),
            ])
        assert tree_bytes(out1) == tree_bytes(out2)

    def test_weights_flag_parsed(self, tmp_path):
        manifest, samples = self.manifest_with_rationales(tmp_path)
        preds, rats = self.write_run(tmp_path, samples)
        out = tmp_path / "report"
        code = main([
            "eval", "--manifest", str(manifest), "--predictions", str(preds),
            "--rationales", str(rats), "--out", str(out), "--weights", "1,0,0",
        ])
        assert code == EXIT_OK
        report = json.loads((out / "report.json").read_text())
        assert report["composite"] == report["accuracy"]

    def test_bad_weights_config_error(self, tmp_path):
        manifest, samples = self.manifest_with_rationales(tmp_path)
        preds, _ = self.write_run(tmp_path, samples)
        out = tmp_path / "never"
        code = main(["eval", "--manifest", str(manifest), "--predictions", str(preds), "--out", str(out), "--weights", "x,y"])
        assert code == EXIT_CONFIG_ERROR
        assert not out.exists()


class TestConfigHandling:
    def test_config_file_supplies_values_and_flags_override(self, small_manifest, tmp_path):
        manifest, samples = small_manifest
        config_path = tmp_path / "run.json"
        out_from_config = tmp_path / "from_config"
        config_path.write_text(json.dumps({"manifest": str(manifest), "out": str(out_from_config)}))
        assert main(["features", "--config", str(config_path)]) == EXIT_OK
        assert (out_from_config / "features.jsonl").exists()

        out_override = tmp_path / "override"
        assert main(["features", "--config", str(config_path), "--out", str(out_override)]) == EXIT_OK
        assert (out_override / "features.jsonl").exists()

    def test_snapshot_written_with_relative_out(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        out = tmp_path / "snap"
        main(["features", "--manifest", str(manifest), "--out", str(out)])
        snapshot = json.loads((out / "features_config.json").read_text())
        assert snapshot["out"] == "."
        assert snapshot["manifest"] == str(manifest)

    def test_end_to_end_determinism_small(self, small_manifest, tmp_path):
        manifest, _ = small_manifest
        runs = []
        for name in ("runA", "runB"):
            base = tmp_path / name
            main(["features", "--manifest", str(manifest), "--out", str(base / "features")])
            main([
                "train", "--manifest", str(manifest), "--out", str(base / "models"),
                "--features", str(base / "features" / "features.jsonl"), "--member-seeds", "42,43",
            ])
            main(["predict", "--manifest", str(manifest), "--models", str(base / "models"), "--out", str(base / "preds")])
            main([
                "explain", "--manifest", str(manifest), "--out", str(base / "rats"),
                "--features", str(base / "features" / "features.jsonl"),
                "--predictions", str(base / "preds" / "predictions.jsonl"),
            ])
            main([
                "eval", "--manifest", str(manifest),
                "--predictions", str(base / "preds" / "predictions.jsonl"),
                "--rationales", str(base / "rats" / "rationales.jsonl"),
                "--out", str(base / "report"),
            ])
            files = tree_bytes(base)
            # snapshots reference sibling artifacts by absolute path; normalize
            normalized = {
                name: content.replace(str(base).encode(), b"BASE")
                for name, content in files.items()
            }
            runs.append(normalized)
        assert runs[0] == runs[1]
