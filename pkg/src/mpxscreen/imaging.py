"""Core image and mask types plus the coverage arithmetic used by every gate.

All types are immutable after construction and all operations are pure, so
they are safe for unrestricted concurrent use. Pixels are 8-bit sRGB, three
channels, no alpha; file decoding lives in the service/CLI layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import cv2
import numpy as np

from .errors import InvalidInputError

# Canonical stage names, in pipeline order.
STAGE_RESTORATION = "restoration"
STAGE_BACKGROUND_REMOVAL = "background_removal"
STAGE_SKIN_SEGMENTATION = "skin_segmentation"
STAGE_ORDER = (STAGE_RESTORATION, STAGE_BACKGROUND_REMOVAL, STAGE_SKIN_SEGMENTATION)

# Binary class labels, index order used for probability pairs everywhere.
LABEL_MONKEYPOX = "monkeypox"
LABEL_OTHERS = "others"
CLASS_ORDER = (LABEL_MONKEYPOX, LABEL_OTHERS)


class DecisionReason(str, Enum):
    OK = "ok"
    OVER_THRESHOLD = "over_threshold"
    BACKEND_UNAVAILABLE = "backend_unavailable"
    NOT_REQUESTED = "not_requested"


@dataclass(frozen=True)
class ScreeningImage:
    """Decoded 8-bit sRGB raster with provenance metadata.

    ``pixels`` is an H x W x 3 uint8 array, made read-only on construction.
    """

    pixels: np.ndarray
    source_id: str = ""
    color_space: str = field(default="srgb")

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise InvalidInputError(
                f"expected HxWx3 pixel array, got shape {px.shape}"
            )
        if px.shape[0] < 1 or px.shape[1] < 1:
            raise InvalidInputError(f"image dimensions must be >= 1, got {px.shape}")
        if px.dtype != np.uint8:
            raise InvalidInputError(f"expected uint8 pixels, got {px.dtype}")
        if not px.flags.c_contiguous:
            px = np.ascontiguousarray(px)
        px = px.view()
        px.flags.writeable = False
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def with_pixels(self, pixels: np.ndarray) -> "ScreeningImage":
        """New image with the same provenance but different pixel content."""
        return ScreeningImage(pixels=pixels, source_id=self.source_id)


@dataclass(frozen=True)
class BinaryMask:
    """Per-pixel keep/remove grid; ``True`` marks foreground to preserve."""

    bits: np.ndarray

    def __post_init__(self):
        bits = np.asarray(self.bits)
        if bits.ndim != 2:
            raise InvalidInputError(f"expected HxW mask, got shape {bits.shape}")
        if bits.dtype != np.bool_:
            bits = bits.astype(np.bool_)
        bits = bits.view()
        bits.flags.writeable = False
        object.__setattr__(self, "bits", bits)

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass(frozen=True)
class StageDecision:
    """Outcome of one pipeline stage: applied or bypassed, and why."""

    stage_name: str
    applied: bool
    blackout_fraction: float
    reason: DecisionReason

    def __post_init__(self):
        if not 0.0 <= self.blackout_fraction <= 1.0:
            raise InvalidInputError(
                f"blackout_fraction must be in [0, 1], got {self.blackout_fraction}"
            )
        if not self.applied and self.reason == DecisionReason.OK:
            raise InvalidInputError("a bypassed stage cannot carry reason 'ok'")

    def to_dict(self) -> dict:
        return {
            "name": self.stage_name,
            "applied": self.applied,
            "blackout_fraction": self.blackout_fraction,
            "reason": self.reason.value,
        }


def blackout_fraction(mask: BinaryMask) -> float:
    """Fraction of cells the mask would remove (set to black)."""
    total = mask.bits.size
    if total == 0:
        raise InvalidInputError("mask has zero area")
    return float(np.count_nonzero(~mask.bits)) / float(total)


def apply_mask(image: ScreeningImage, mask: BinaryMask) -> ScreeningImage:
    """Black out every pixel where the mask is ``False``."""
    if (mask.height, mask.width) != (image.height, image.width):
        raise InvalidInputError(
            f"mask {mask.height}x{mask.width} does not match "
            f"image {image.height}x{image.width}"
        )
    out = np.where(mask.bits[:, :, None], image.pixels, np.uint8(0))
    return image.with_pixels(out)


def resize(image: ScreeningImage, target_w: int, target_h: int) -> ScreeningImage:
    """Bilinear resize to the target dimensions; exact no-op when they match."""
    if target_w < 1 or target_h < 1:
        raise InvalidInputError(
            f"target dimensions must be >= 1, got {target_w}x{target_h}"
        )
    if (target_w, target_h) == (image.width, image.height):
        return image
    out = cv2.resize(image.pixels, (target_w, target_h), interpolation=cv2.INTER_LINEAR)
    return image.with_pixels(out)
