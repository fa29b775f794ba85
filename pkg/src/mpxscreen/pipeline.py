"""End-to-end screening chain: restoration, two gated masks, classifier.

Stage order is fixed (restoration first, then background removal, then
skin segmentation, then classification) and every result carries a
three-entry stage trace in that order, whether or not a stage ran.
Per-stage toggles realize every row of the ablation grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .classifier import ClassificationResult, ScreeningModel, predict
from .errors import InvalidInputError
from .imaging import (
    STAGE_BACKGROUND_REMOVAL,
    STAGE_RESTORATION,
    STAGE_SKIN_SEGMENTATION,
    DecisionReason,
    ScreeningImage,
    StageDecision,
)
from .restoration import RestorationBackend, RestorationPolicy, restore
from .segmentation import GateConfig, SegmentationBackend, gated_segment


@dataclass(frozen=True)
class PipelineConfig:
    """Per-stage toggles plus the gate and restoration parameters."""

    enable_restoration: bool = True
    enable_background_removal: bool = True
    enable_skin_segmentation: bool = True
    gate: GateConfig = field(default_factory=GateConfig)
    restoration_policy: RestorationPolicy = field(default_factory=RestorationPolicy)
    model_version: str = ""

    def stage_flags(self) -> dict[str, bool]:
        return {
            "restoration": self.enable_restoration,
            "background_removal": self.enable_background_removal,
            "skin_segmentation": self.enable_skin_segmentation,
        }


def _skipped(stage: str) -> StageDecision:
    return StageDecision(
        stage_name=stage,
        applied=False,
        blackout_fraction=0.0,
        reason=DecisionReason.NOT_REQUESTED,
    )


def _unavailable(stage: str) -> StageDecision:
    return StageDecision(
        stage_name=stage,
        applied=False,
        blackout_fraction=0.0,
        reason=DecisionReason.BACKEND_UNAVAILABLE,
    )


class ScreeningPipeline:
    """Holds the loaded model and backends; ``screen`` is reentrant."""

    def __init__(
        self,
        model: ScreeningModel,
        background_backend: SegmentationBackend | None = None,
        skin_backend: SegmentationBackend | None = None,
        restoration_backend: RestorationBackend | None = None,
    ):
        if background_backend is not None and background_backend.kind != "salient_object":
            raise InvalidInputError(
                f"background backend has kind {background_backend.kind!r}"
            )
        if skin_backend is not None and skin_backend.kind != "skin_region":
            raise InvalidInputError(f"skin backend has kind {skin_backend.kind!r}")
        self.model = model
        self.background_backend = background_backend
        self.skin_backend = skin_backend
        self.restoration_backend = restoration_backend

    def preprocess(
        self, image: ScreeningImage, cfg: PipelineConfig, allow_restoration: bool = True
    ) -> tuple[ScreeningImage, list[StageDecision]]:
        """Run the enabled stages ahead of the classifier.

        Training callers pass ``allow_restoration=False``: training images
        are consumed at original resolution, and asking for restoration
        there is a programming error.
        """
        if not allow_restoration and cfg.enable_restoration:
            raise InvalidInputError(
                "restoration is an inference-only stage; disable it for training"
            )
        trace: list[StageDecision] = []
        if cfg.enable_restoration:
            image, decision = restore(image, cfg.restoration_policy, self.restoration_backend)
            trace.append(decision)
        else:
            trace.append(_skipped(STAGE_RESTORATION))

        if cfg.enable_background_removal:
            if self.background_backend is None:
                trace.append(_unavailable(STAGE_BACKGROUND_REMOVAL))
            else:
                image, decision = gated_segment(image, self.background_backend, cfg.gate)
                trace.append(decision)
        else:
            trace.append(_skipped(STAGE_BACKGROUND_REMOVAL))

        if cfg.enable_skin_segmentation:
            if self.skin_backend is None:
                trace.append(_unavailable(STAGE_SKIN_SEGMENTATION))
            else:
                image, decision = gated_segment(image, self.skin_backend, cfg.gate)
                trace.append(decision)
        else:
            trace.append(_skipped(STAGE_SKIN_SEGMENTATION))
        return image, trace

    def screen(self, image: ScreeningImage, cfg: PipelineConfig) -> ClassificationResult:
        """Full inference chain; deterministic for fixed model and backends."""
        processed, trace = self.preprocess(image, cfg, allow_restoration=True)
        result = predict(self.model, processed)
        return replace(result, stage_trace=tuple(trace))


def ablation_configs(
    gate: GateConfig | None = None,
    restoration_policy: RestorationPolicy | None = None,
    model_version: str = "",
) -> list[PipelineConfig]:
    """The eight stage on/off combinations, classifier-only first,
    full stack last, singles before pairs."""
    gate = gate or GateConfig()
    restoration_policy = restoration_policy or RestorationPolicy()
    combos = [
        (False, False, False),
        (True, False, False),
        (False, True, False),
        (False, False, True),
        (True, True, False),
        (False, True, True),
        (True, False, True),
        (True, True, True),
    ]
    return [
        PipelineConfig(
            enable_restoration=r,
            enable_background_removal=b,
            enable_skin_segmentation=s,
            gate=gate,
            restoration_policy=restoration_policy,
            model_version=model_version,
        )
        for r, b, s in combos
    ]
