"""Weighted-metric computation and the stage-ablation grid runner."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import cv2

from .classifier import ClassificationResult, ScreeningModel, load_model
from .errors import EvaluationError
from .imaging import CLASS_ORDER, ScreeningImage
from .pipeline import PipelineConfig, ScreeningPipeline, ablation_configs

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ConfusionMatrix:
    """Binary confusion counts, indexed [true class][predicted class]."""

    counts: tuple[tuple[int, int], tuple[int, int]]

    def __post_init__(self):
        flat = [c for row in self.counts for c in row]
        if len(self.counts) != 2 or any(len(r) != 2 for r in self.counts):
            raise EvaluationError(f"expected a 2x2 matrix, got {self.counts}")
        if any(c < 0 for c in flat):
            raise EvaluationError(f"counts must be non-negative, got {self.counts}")

    @classmethod
    def from_pairs(cls, y_true: Sequence[str], y_pred: Sequence[str]) -> "ConfusionMatrix":
        if len(y_true) != len(y_pred):
            raise EvaluationError("prediction list length mismatch")
        counts = [[0, 0], [0, 0]]
        for t, p in zip(y_true, y_pred):
            counts[CLASS_ORDER.index(t)][CLASS_ORDER.index(p)] += 1
        return cls(counts=tuple(tuple(row) for row in counts))

    @property
    def total(self) -> int:
        return sum(c for row in self.counts for c in row)

    def support(self, class_index: int) -> int:
        return sum(self.counts[class_index])

    def true_positives(self, class_index: int) -> int:
        return self.counts[class_index][class_index]

    def false_positives(self, class_index: int) -> int:
        return sum(self.counts[other][class_index] for other in range(2) if other != class_index)

    def false_negatives(self, class_index: int) -> int:
        return sum(self.counts[class_index][other] for other in range(2) if other != class_index)


@dataclass(frozen=True)
class MetricsReport:
    """Support-weighted precision/recall/F1 plus plain accuracy."""

    weighted_precision: float
    weighted_recall: float
    weighted_f1: float
    accuracy: float
    per_class: dict
    n_evaluated: int
    skipped: tuple[str, ...] = ()

    def to_dict(self) -> dict:
        return {
            "weighted_precision": self.weighted_precision,
            "weighted_recall": self.weighted_recall,
            "weighted_f1": self.weighted_f1,
            "accuracy": self.accuracy,
            "per_class": self.per_class,
            "n_evaluated": self.n_evaluated,
            "skipped": list(self.skipped),
        }

    def lines(self) -> list[str]:
        out = [
            f"evaluated: {self.n_evaluated} (skipped: {len(self.skipped)})",
            f"accuracy:           {self.accuracy:.4f}",
            f"weighted precision: {self.weighted_precision:.4f}",
            f"weighted recall:    {self.weighted_recall:.4f}",
            f"weighted f1:        {self.weighted_f1:.4f}",
        ]
        for label, metrics in self.per_class.items():
            out.append(
                f"  {label}: precision={metrics['precision']:.4f} "
                f"recall={metrics['recall']:.4f} f1={metrics['f1']:.4f} "
                f"support={metrics['support']}"
            )
        return out


def _safe_div(num: float, den: float) -> float:
    """Zero-denominator classes contribute 0 rather than NaN."""
    return num / den if den > 0 else 0.0


def weighted_metrics(cm: ConfusionMatrix, skipped: Sequence[str] = ()) -> MetricsReport:
    """Per-class precision/recall/F1, averaged with support weights."""
    n = cm.total
    if n < 1:
        raise EvaluationError("cannot compute metrics over an empty confusion matrix")
    per_class = {}
    weighted_p = weighted_r = weighted_f1 = 0.0
    correct = 0
    for idx, label in enumerate(CLASS_ORDER):
        tp = cm.true_positives(idx)
        precision = _safe_div(tp, tp + cm.false_positives(idx))
        recall = _safe_div(tp, tp + cm.false_negatives(idx))
        f1 = _safe_div(2 * precision * recall, precision + recall)
        support = cm.support(idx)
        per_class[label] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": support,
        }
        weight = support / n
        weighted_p += weight * precision
        weighted_r += weight * recall
        weighted_f1 += weight * f1
        correct += tp
    return MetricsReport(
        weighted_precision=weighted_p,
        weighted_recall=weighted_r,
        weighted_f1=weighted_f1,
        accuracy=correct / n,
        per_class=per_class,
        n_evaluated=n,
        skipped=tuple(skipped),
    )


# ---------------------------------------------------------------------------
# Manifest evaluation
# ---------------------------------------------------------------------------

ScreenFn = Callable[[ScreeningImage], ClassificationResult]


def _as_screen_fn(model_or_pipeline, cfg: PipelineConfig | None) -> ScreenFn:
    if isinstance(model_or_pipeline, ScreeningPipeline):
        config = cfg or PipelineConfig()
        return lambda image: model_or_pipeline.screen(image, config)
    if callable(model_or_pipeline):
        return model_or_pipeline
    raise EvaluationError(
        f"expected a ScreeningPipeline or a callable, got {type(model_or_pipeline)!r}"
    )


def manifest_digest(manifest) -> str:
    """Stable content hash identifying the evaluated dataset."""
    payload = "\n".join(json.dumps(rec.to_dict(), sort_keys=True) for rec in manifest)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def evaluate(
    model_or_pipeline,
    manifest,
    cfg: PipelineConfig | None = None,
    root: str | Path = ".",
) -> MetricsReport:
    """Screen every manifest record once and score against its label.

    Records whose files do not decode are skipped (excluded from N) and
    surfaced in the report.
    """
    records = list(manifest)
    if not records:
        raise EvaluationError("manifest is empty")
    screen_fn = _as_screen_fn(model_or_pipeline, cfg)
    root = Path(root)
    y_true: list[str] = []
    y_pred: list[str] = []
    skipped: list[str] = []
    for rec in records:
        raw = cv2.imread(str(root / rec.path), cv2.IMREAD_COLOR)
        if raw is None:
            skipped.append(rec.id)
            logger.warning("skipping record %s: %s does not decode", rec.id, rec.path)
            continue
        image = ScreeningImage(pixels=cv2.cvtColor(raw, cv2.COLOR_BGR2RGB), source_id=rec.id)
        result = screen_fn(image)
        y_true.append(rec.label)
        y_pred.append(result.label)
    if not y_true:
        raise EvaluationError("no manifest record decoded; nothing to evaluate")
    return weighted_metrics(ConfusionMatrix.from_pairs(y_true, y_pred), skipped=skipped)


# ---------------------------------------------------------------------------
# Ablation grid
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AblationRow:
    stages: dict
    model_version: str
    accuracy: float | None
    n_evaluated: int
    error: str | None = None

    def to_dict(self) -> dict:
        return {
            "stages": dict(self.stages),
            "model_version": self.model_version,
            "accuracy": self.accuracy,
            "n_evaluated": self.n_evaluated,
            "error": self.error,
        }


@dataclass(frozen=True)
class AblationReport:
    rows: tuple[AblationRow, ...]
    dataset_id: str

    def to_dict(self) -> dict:
        return {"dataset_id": self.dataset_id, "rows": [r.to_dict() for r in self.rows]}

    def lines(self) -> list[str]:
        header = f"{'model':<24} {'rest':<5} {'bg':<5} {'skin':<5} {'accuracy':>9}"
        out = [f"dataset: {self.dataset_id[:16]}", header, "-" * len(header)]
        for row in self.rows:
            acc = f"{row.accuracy:.4f}" if row.accuracy is not None else "ERROR"
            flags = row.stages
            out.append(
                f"{row.model_version:<24} "
                f"{'on' if flags['restoration'] else 'off':<5} "
                f"{'on' if flags['background_removal'] else 'off':<5} "
                f"{'on' if flags['skin_segmentation'] else 'off':<5} "
                f"{acc:>9}"
            )
            if row.error:
                out.append(f"    error: {row.error}")
        return out


def _resolve_model(spec) -> tuple[ScreeningModel | None, str | None]:
    if isinstance(spec, ScreeningModel):
        return spec, None
    try:
        return load_model(spec), None
    except Exception as exc:
        return None, str(exc)


def run_ablation(
    models: Mapping[str, object],
    backends: Mapping[str, object],
    manifest,
    root: str | Path = ".",
    gate=None,
    restoration_policy=None,
    configs: Sequence[PipelineConfig] | None = None,
) -> AblationReport:
    """Evaluate the stage grid over a manifest.

    ``models`` maps ``primary`` (required) and optionally ``alternate`` to
    models or artifact directories. The default grid is the alternate model
    with all stages off, then the primary across all eight stage
    combinations: nine rows. Pass ``configs`` to evaluate a subset
    (primary model only). Unloadable artifacts produce per-row error
    markers instead of aborting the grid.
    """
    if "primary" not in models:
        raise EvaluationError("models mapping must contain a 'primary' entry")
    rows: list[AblationRow] = []

    def evaluate_row(model_spec, cfg: PipelineConfig, version_hint: str) -> AblationRow:
        model, err = _resolve_model(model_spec)
        stages = cfg.stage_flags()
        if err is not None:
            return AblationRow(
                stages=stages, model_version=version_hint, accuracy=None,
                n_evaluated=0, error=err,
            )
        pipe = ScreeningPipeline(
            model=model,
            background_backend=backends.get("background_removal"),
            skin_backend=backends.get("skin_segmentation"),
            restoration_backend=backends.get("restoration"),
        )
        try:
            report = evaluate(pipe, manifest, cfg, root=root)
        except EvaluationError as exc:
            return AblationRow(
                stages=stages, model_version=model.model_version, accuracy=None,
                n_evaluated=0, error=str(exc),
            )
        return AblationRow(
            stages=stages,
            model_version=model.model_version,
            accuracy=report.accuracy,
            n_evaluated=report.n_evaluated,
        )

    if configs is not None:
        for cfg in configs:
            rows.append(evaluate_row(models["primary"], cfg, "primary"))
    else:
        grid = ablation_configs(gate=gate, restoration_policy=restoration_policy)
        if "alternate" in models:
            rows.append(evaluate_row(models["alternate"], grid[0], "alternate"))
        for cfg in grid:
            rows.append(evaluate_row(models["primary"], cfg, "primary"))

    return AblationReport(rows=tuple(rows), dataset_id=manifest_digest(manifest))
