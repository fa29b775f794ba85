"""Staged skin-lesion screening for monkeypox.

Dataset construction, a three-level gated vision pipeline with a
restoration front end, training and ablation harnesses, and an HTTP
screening service.
"""

__version__ = "0.1.0"

from .imaging import (
    CLASS_ORDER,
    LABEL_MONKEYPOX,
    LABEL_OTHERS,
    BinaryMask,
    DecisionReason,
    ScreeningImage,
    StageDecision,
    apply_mask,
    blackout_fraction,
    resize,
)
from .pipeline import PipelineConfig, ScreeningPipeline, ablation_configs
from .segmentation import GateConfig, SegmentationBackend, gated_segment, load_backend

__all__ = [
    "CLASS_ORDER",
    "LABEL_MONKEYPOX",
    "LABEL_OTHERS",
    "BinaryMask",
    "DecisionReason",
    "GateConfig",
    "PipelineConfig",
    "ScreeningImage",
    "ScreeningPipeline",
    "SegmentationBackend",
    "StageDecision",
    "ablation_configs",
    "apply_mask",
    "blackout_fraction",
    "gated_segment",
    "load_backend",
    "resize",
]
