import cv2
import numpy as np
import pytest
import torch

from mpxscreen import evaluation as ev
from mpxscreen.classifier import ClassificationResult, HeadSpec, build_model, save_model
from mpxscreen.dataset import DatasetManifest, ManifestRecord
from mpxscreen.errors import EvaluationError
from mpxscreen.imaging import CLASS_ORDER, LABEL_MONKEYPOX, LABEL_OTHERS
from mpxscreen.pipeline import ScreeningPipeline
from mpxscreen.segmentation import KIND_SALIENT_OBJECT, KIND_SKIN_REGION, StubBackend
from tests.conftest import make_image


def brute_force_weighted(y_true, y_pred):
    """Independent oracle: recompute weighted metrics from raw pairs."""
    n = len(y_true)
    weighted = {"precision": 0.0, "recall": 0.0, "f1": 0.0}
    for c in CLASS_ORDER:
        support = sum(1 for t in y_true if t == c)
        tp = sum(1 for t, p in zip(y_true, y_pred) if t == c and p == c)
        predicted = sum(1 for p in y_pred if p == c)
        precision = tp / predicted if predicted else 0.0
        recall = tp / support if support else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        weight = support / n
        weighted["precision"] += weight * precision
        weighted["recall"] += weight * recall
        weighted["f1"] += weight * f1
    accuracy = sum(1 for t, p in zip(y_true, y_pred) if t == p) / n
    return weighted, accuracy


def random_pairs(rng, n):
    y_true = [CLASS_ORDER[int(b)] for b in rng.integers(0, 2, size=n)]
    y_pred = [CLASS_ORDER[int(b)] for b in rng.integers(0, 2, size=n)]
    return y_true, y_pred


def stub_screen(label):
    probs = (1.0, 0.0) if label == LABEL_MONKEYPOX else (0.0, 1.0)
    return lambda image: ClassificationResult(label=label, probabilities=probs)


class TestWeightedMetrics:
    def test_perfect_predictions(self):
        cm = ev.ConfusionMatrix.from_pairs(
            [LABEL_MONKEYPOX] * 4 + [LABEL_OTHERS] * 6,
            [LABEL_MONKEYPOX] * 4 + [LABEL_OTHERS] * 6,
        )
        report = ev.weighted_metrics(cm)
        assert report.weighted_precision == 1.0
        assert report.weighted_recall == 1.0
        assert report.weighted_f1 == 1.0
        assert report.accuracy == 1.0

    def test_balanced_example_against_hand_computation(self):
        # 10/10 split; 8 and 9 correct, 2 and 1 crossing over:
        #   precision_mp = 8/9, precision_other = 9/11
        #   weighted precision = (8/9 + 9/11) / 2 = 0.85353...
        y_true = [LABEL_MONKEYPOX] * 10 + [LABEL_OTHERS] * 10
        y_pred = (
            [LABEL_MONKEYPOX] * 8 + [LABEL_OTHERS] * 2
            + [LABEL_MONKEYPOX] * 1 + [LABEL_OTHERS] * 9
        )
        report = ev.weighted_metrics(ev.ConfusionMatrix.from_pairs(y_true, y_pred))
        assert report.weighted_precision == pytest.approx(0.5 * (8 / 9 + 9 / 11))
        assert report.weighted_precision == pytest.approx(0.8535, abs=1e-4)
        assert report.weighted_recall == pytest.approx(0.85)
        f1_mp = 2 * (8 / 9) * 0.8 / ((8 / 9) + 0.8)
        f1_ot = 2 * (9 / 11) * 0.9 / ((9 / 11) + 0.9)
        assert report.weighted_f1 == pytest.approx(0.5 * (f1_mp + f1_ot))
        assert report.weighted_f1 == pytest.approx(0.8496, abs=1e-4)

    def test_all_wrong_is_zero(self):
        y_true = [LABEL_MONKEYPOX] * 3 + [LABEL_OTHERS] * 3
        y_pred = [LABEL_OTHERS] * 3 + [LABEL_MONKEYPOX] * 3
        report = ev.weighted_metrics(ev.ConfusionMatrix.from_pairs(y_true, y_pred))
        assert report.weighted_precision == 0.0
        assert report.weighted_recall == 0.0
        assert report.weighted_f1 == 0.0

    def test_empty_matrix_rejected(self):
        with pytest.raises(EvaluationError):
            ev.weighted_metrics(ev.ConfusionMatrix(counts=((0, 0), (0, 0))))

    def test_zero_support_class_contributes_zero(self):
        y_true = [LABEL_OTHERS] * 5
        y_pred = [LABEL_OTHERS] * 4 + [LABEL_MONKEYPOX]
        report = ev.weighted_metrics(ev.ConfusionMatrix.from_pairs(y_true, y_pred))
        assert report.per_class[LABEL_MONKEYPOX]["recall"] == 0.0
        assert report.weighted_recall == pytest.approx(0.8)

    def test_matches_brute_force_on_random_matrices(self, rng):
        for _ in range(300):
            y_true, y_pred = random_pairs(rng, int(rng.integers(1, 60)))
            report = ev.weighted_metrics(ev.ConfusionMatrix.from_pairs(y_true, y_pred))
            weighted, accuracy = brute_force_weighted(y_true, y_pred)
            assert report.weighted_precision == pytest.approx(weighted["precision"], abs=1e-9)
            assert report.weighted_recall == pytest.approx(weighted["recall"], abs=1e-9)
            assert report.weighted_f1 == pytest.approx(weighted["f1"], abs=1e-9)
            assert report.accuracy == pytest.approx(accuracy, abs=1e-9)

    def test_weighted_recall_equals_accuracy_under_full_coverage(self, rng):
        for _ in range(200):
            y_true, y_pred = random_pairs(rng, int(rng.integers(1, 50)))
            report = ev.weighted_metrics(ev.ConfusionMatrix.from_pairs(y_true, y_pred))
            assert report.weighted_recall == pytest.approx(report.accuracy, abs=1e-12)


def write_manifest_images(tmp_path, n_mp, n_others, broken=0):
    records = []
    for i in range(n_mp + n_others + broken):
        label = LABEL_MONKEYPOX if i < n_mp else LABEL_OTHERS
        rel = f"img{i}.png"
        if i < n_mp + n_others:
            cv2.imwrite(str(tmp_path / rel), make_image(16, 16, seed=i).pixels)
        else:
            (tmp_path / rel).write_bytes(b"broken")
        records.append(
            ManifestRecord(id=f"e{i}", path=rel, label=label, split="external")
        )
    return DatasetManifest(records)


class TestEvaluate:
    def test_majority_class_stub_accuracy(self, tmp_path):
        manifest = write_manifest_images(tmp_path, n_mp=13, n_others=20)
        report = ev.evaluate(stub_screen(LABEL_OTHERS), manifest, root=tmp_path)
        assert report.n_evaluated == 33
        assert report.accuracy == pytest.approx(20 / 33)

    def test_undecodable_records_skipped_and_surfaced(self, tmp_path):
        manifest = write_manifest_images(tmp_path, n_mp=2, n_others=2, broken=1)
        report = ev.evaluate(stub_screen(LABEL_OTHERS), manifest, root=tmp_path)
        assert report.n_evaluated == 4
        assert report.skipped == ("e4",)

    def test_empty_manifest_rejected(self):
        with pytest.raises(EvaluationError):
            ev.evaluate(stub_screen(LABEL_OTHERS), DatasetManifest([]))

    def test_pipeline_object_accepted(self, tmp_path):
        manifest = write_manifest_images(tmp_path, n_mp=2, n_others=2)
        torch.manual_seed(0)
        pipe = ScreeningPipeline(
            model=build_model(HeadSpec(), backbone="micro0"),
            background_backend=StubBackend(KIND_SALIENT_OBJECT, blackout=0.0),
            skin_backend=StubBackend(KIND_SKIN_REGION, blackout=0.0),
        )
        report = ev.evaluate(pipe, manifest, root=tmp_path)
        assert report.n_evaluated == 4


class TestRunAblation:
    @pytest.fixture()
    def setup(self, tmp_path):
        torch.manual_seed(1)
        primary = build_model(HeadSpec(), backbone="micro0")
        torch.manual_seed(2)
        alternate = build_model(HeadSpec(), backbone="micro0")
        manifest = write_manifest_images(tmp_path, n_mp=2, n_others=3)
        backends = {
            "background_removal": StubBackend(KIND_SALIENT_OBJECT, blackout=0.0),
            "skin_segmentation": StubBackend(KIND_SKIN_REGION, blackout=0.0),
        }
        return primary, alternate, manifest, backends, tmp_path

    def test_nine_rows_full_grid(self, setup):
        primary, alternate, manifest, backends, root = setup
        report = ev.run_ablation(
            {"primary": primary, "alternate": alternate}, backends, manifest, root=root
        )
        assert len(report.rows) == 9
        assert report.rows[0].stages == {
            "restoration": False,
            "background_removal": False,
            "skin_segmentation": False,
        }
        assert report.rows[1].stages == report.rows[0].stages
        assert report.rows[-1].stages == {
            "restoration": True,
            "background_removal": True,
            "skin_segmentation": True,
        }
        assert all(r.error is None for r in report.rows)
        assert report.dataset_id == ev.manifest_digest(manifest)

    def test_deterministic_across_runs(self, setup):
        primary, alternate, manifest, backends, root = setup
        models = {"primary": primary, "alternate": alternate}
        a = ev.run_ablation(models, backends, manifest, root=root)
        b = ev.run_ablation(models, backends, manifest, root=root)
        assert [r.to_dict() for r in a.rows] == [r.to_dict() for r in b.rows]

    def test_single_config_subset(self, setup):
        primary, _, manifest, backends, root = setup
        from mpxscreen.pipeline import ablation_configs

        report = ev.run_ablation(
            {"primary": primary}, backends, manifest, root=root,
            configs=[ablation_configs()[0]],
        )
        assert len(report.rows) == 1

    def test_unloadable_artifact_marks_row(self, setup, tmp_path):
        primary, _, manifest, backends, root = setup
        report = ev.run_ablation(
            {"primary": primary, "alternate": str(tmp_path / "missing-artifact")},
            backends, manifest, root=root,
        )
        assert len(report.rows) == 9
        assert report.rows[0].error is not None
        assert report.rows[0].accuracy is None
        assert all(r.error is None for r in report.rows[1:])

    def test_artifact_dir_accepted_for_models(self, setup, tmp_path):
        primary, _, manifest, backends, root = setup
        artifact = save_model(primary, tmp_path / "saved")
        report = ev.run_ablation(
            {"primary": str(artifact)}, backends, manifest, root=root
        )
        assert len(report.rows) == 8
        assert all(r.error is None for r in report.rows)

    def test_report_lines_render(self, setup):
        primary, alternate, manifest, backends, root = setup
        report = ev.run_ablation(
            {"primary": primary, "alternate": alternate}, backends, manifest, root=root
        )
        text = "\n".join(report.lines())
        assert "accuracy" in text
        assert "micro0-head256" in text
