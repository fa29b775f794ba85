import json

import cv2
import pytest
import torch
from click.testing import CliRunner

from mpxscreen import dataset as ds
from mpxscreen.classifier import HeadSpec, build_model, save_model
from mpxscreen.cli import main
from mpxscreen.config import load_settings
from mpxscreen.imaging import LABEL_MONKEYPOX, LABEL_OTHERS
from tests.conftest import make_image
from tests.synthetic import write_texture_dataset


@pytest.fixture
def runner():
    return CliRunner()


def write_pool_manifest(tmp_path, n_mp, n_others, with_files=False):
    records = []
    for i in range(n_mp + n_others):
        label = LABEL_MONKEYPOX if i < n_mp else LABEL_OTHERS
        rel = f"images/r{i}.png"
        if with_files:
            (tmp_path / "images").mkdir(exist_ok=True)
            cv2.imwrite(str(tmp_path / rel), make_image(12, 12, seed=i).pixels)
        records.append(
            ds.ManifestRecord(id=f"r{i}", path=rel, label=label, split="val")
        )
    manifest = ds.DatasetManifest(records)
    path = tmp_path / "pool.jsonl"
    manifest.save(path)
    return path


class TestDatasetCommands:
    def test_balance_then_split_counts(self, runner, tmp_path):
        pool = write_pool_manifest(tmp_path, 132, 180)
        balanced = tmp_path / "balanced.jsonl"
        result = runner.invoke(
            main,
            ["dataset", "balance", "--manifest", str(pool), "--split", "val",
             "--seed", "7", "--out", str(balanced)],
        )
        assert result.exit_code == 0, result.output
        assert "appended 48" in result.output

        split_out = tmp_path / "split.jsonl"
        result = runner.invoke(
            main,
            ["dataset", "split", "--manifest", str(balanced), "--ratio", "0.65,0.35",
             "--seed", "8", "--out", str(split_out)],
        )
        assert result.exit_code == 0, result.output
        counts = ds.DatasetManifest.load(split_out).class_counts
        assert sum(counts["val"].values()) == 234
        assert sum(counts["test"].values()) == 126

    def test_audit_reports_counts(self, runner, tmp_path):
        pool = write_pool_manifest(tmp_path, 3, 5)
        result = runner.invoke(main, ["dataset", "audit", "--manifest", str(pool)])
        assert result.exit_code == 0, result.output
        assert "monkeypox=3" in result.output
        assert "leakage check: ok" in result.output

    def test_audit_expectation_failure_exits_nonzero(self, runner, tmp_path):
        pool = write_pool_manifest(tmp_path, 3, 5)
        result = runner.invoke(
            main,
            ["dataset", "audit", "--manifest", str(pool), "--expect", "val/monkeypox=99"],
        )
        assert result.exit_code == 1
        assert "EXPECTATION MISMATCH" in result.output

    def test_assemble_external(self, runner, tmp_path):
        negatives = ds.DatasetManifest(
            [ds.ManifestRecord(id=f"n{i}", path=f"n{i}.png", label=LABEL_OTHERS,
                               split="external") for i in range(4)]
        )
        positives = ds.DatasetManifest(
            [ds.ManifestRecord(id=f"p{i}", path=f"p{i}.png", label=LABEL_MONKEYPOX,
                               split="external") for i in range(3)]
        )
        neg_path, pos_path = tmp_path / "n.jsonl", tmp_path / "p.jsonl"
        negatives.save(neg_path)
        positives.save(pos_path)
        out = tmp_path / "ext.jsonl"
        result = runner.invoke(
            main,
            ["dataset", "assemble-external", "--negatives", str(neg_path),
             "--positives", str(pos_path), "--out", str(out)],
        )
        assert result.exit_code == 0, result.output
        assert "7 records" in result.output

    def test_ingest_and_augment_materialize(self, runner, tmp_path):
        pool = write_pool_manifest(tmp_path, 2, 3, with_files=True)
        ingested = tmp_path / "ingested.jsonl"
        result = runner.invoke(
            main,
            ["dataset", "ingest", "--manifest", str(pool), "--root", str(tmp_path),
             "--out", str(ingested)],
        )
        assert result.exit_code == 0, result.output

        balanced = tmp_path / "balanced.jsonl"
        runner.invoke(
            main,
            ["dataset", "balance", "--manifest", str(ingested), "--split", "val",
             "--seed", "1", "--out", str(balanced)],
        )
        materialized = tmp_path / "materialized.jsonl"
        result = runner.invoke(
            main,
            ["dataset", "augment", "--manifest", str(balanced), "--root", str(tmp_path),
             "--out", str(materialized)],
        )
        assert result.exit_code == 0, result.output
        loaded = ds.DatasetManifest.load(materialized)
        assert all(r.checksum for r in loaded if r.origin == "augmented")


class TestScreenCommand:
    def test_screen_prints_single_json_record(self, runner, tmp_path):
        torch.manual_seed(0)
        model_dir = save_model(build_model(HeadSpec(), backbone="micro0"), tmp_path / "model")
        image_path = tmp_path / "photo.png"
        cv2.imwrite(str(image_path), make_image(300, 300, seed=1).pixels)
        result = runner.invoke(
            main,
            ["screen", "--image", str(image_path), "--model", str(model_dir),
             "--no-restoration"],
        )
        assert result.exit_code == 0, result.output
        body = json.loads(result.output.strip())
        assert body["label"] in ("monkeypox", "others")
        assert len(body["stage_trace"]) == 3
        assert body["stage_trace"][0]["reason"] == "not_requested"


class TestTrainEvaluateAblate:
    def test_train_evaluate_ablate_flow(self, runner, tmp_path):
        train_m, val_m = write_texture_dataset(tmp_path, n_train=12, n_val=6, seed=2)
        train_path, val_path = tmp_path / "train.jsonl", tmp_path / "val.jsonl"
        train_m.save(train_path)
        val_m.save(val_path)

        model_dir = tmp_path / "model"
        result = runner.invoke(
            main,
            ["train", "--train-manifest", str(train_path), "--val-manifest", str(val_path),
             "--root", str(tmp_path), "--out", str(model_dir), "--backbone", "micro0",
             "--epochs", "1", "--batch-size", "6", "--seed", "0"],
        )
        assert result.exit_code == 0, result.output
        assert (model_dir / "weights.pt").is_file()

        result = runner.invoke(
            main,
            ["evaluate", "--manifest", str(val_path), "--model", str(model_dir),
             "--root", str(tmp_path)],
        )
        assert result.exit_code == 0, result.output
        assert "weighted f1" in result.output

        report_path = tmp_path / "ablation.json"
        result = runner.invoke(
            main,
            ["ablate", "--manifest", str(val_path), "--model", str(model_dir),
             "--root", str(tmp_path), "--json", str(report_path)],
        )
        assert result.exit_code == 0, result.output
        report = json.loads(report_path.read_text())
        assert len(report["rows"]) == 8  # no alternate model supplied


class TestConfig:
    def test_defaults(self):
        settings = load_settings(env={})
        assert settings.port == 8000
        assert settings.blackout_threshold == 0.87
        assert settings.compressor_max_side == 1024

    def test_file_values(self, tmp_path):
        cfg = tmp_path / "svc.yaml"
        cfg.write_text(
            "port: 9100\n"
            "model_dir: /models/m1\n"
            "backends:\n"
            "  background_removal: stub:all-foreground\n"
            "gate:\n"
            "  blackout_threshold: 0.8\n"
            "compressor:\n"
            "  max_side: 2048\n"
            "persistence:\n"
            "  enabled: true\n"
            "  audit_dir: /tmp/audit\n"
        )
        settings = load_settings(cfg, env={})
        assert settings.port == 9100
        assert settings.model_dir == "/models/m1"
        assert settings.background_backend == "stub:all-foreground"
        assert settings.blackout_threshold == 0.8
        assert settings.compressor_max_side == 2048
        assert settings.persistence_enabled

    def test_env_overrides_file(self, tmp_path):
        cfg = tmp_path / "svc.yaml"
        cfg.write_text("port: 9100\n")
        settings = load_settings(
            cfg, env={"MPXSCREEN_PORT": "9200", "MPXSCREEN_BLACKOUT_THRESHOLD": "0.5"}
        )
        assert settings.port == 9200
        assert settings.blackout_threshold == 0.5
