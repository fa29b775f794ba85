"""Resolution restoration for low-resolution captures.

Images whose shorter side falls below the trigger are upscaled before the
rest of the pipeline; anything already at classifier resolution passes
through untouched. A pluggable backend supplies the upscaler, with a
deterministic bicubic fallback so the stage works without model weights.
Training data never goes through this stage.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np

from .errors import BackendLoadError, InvalidInputError
from .imaging import (
    STAGE_RESTORATION,
    DecisionReason,
    ScreeningImage,
    StageDecision,
    resize,
)

FALLBACK_SUFFIX = "+bicubic-fallback"


@dataclass(frozen=True)
class RestorationPolicy:
    """When to restore and how far to upscale."""

    min_side_trigger: int = 224
    upscale_factor: int = 2
    max_output_side: int = 2048

    def __post_init__(self):
        if self.min_side_trigger < 1:
            raise InvalidInputError(f"min_side_trigger must be >= 1, got {self.min_side_trigger}")
        if self.upscale_factor < 1:
            raise InvalidInputError(f"upscale_factor must be >= 1, got {self.upscale_factor}")
        if self.max_output_side < 1:
            raise InvalidInputError(f"max_output_side must be >= 1, got {self.max_output_side}")


class RestorationBackend:
    """Upscaler interface; implementations must preserve aspect ratio."""

    name: str = "restoration-backend"

    def upscale(self, image: ScreeningImage, scale: float) -> ScreeningImage:
        raise NotImplementedError


class BicubicBackend(RestorationBackend):
    """Deterministic bicubic interpolation; the built-in fallback."""

    name = "bicubic"

    def upscale(self, image: ScreeningImage, scale: float) -> ScreeningImage:
        target_w = round(image.width * scale)
        target_h = round(image.height * scale)
        return _bicubic(image, target_w, target_h)


class TorchscriptRestorationBackend(RestorationBackend):
    """Runs a TorchScript super-resolution export (NCHW, [0, 1] in and out)."""

    def __init__(self, module, name: str):
        self.module = module
        self.name = name

    def upscale(self, image: ScreeningImage, scale: float) -> ScreeningImage:
        import torch

        tensor = torch.from_numpy(
            image.pixels.astype(np.float32).transpose(2, 0, 1)[None] / 255.0
        )
        with torch.no_grad():
            out = self.module(tensor)
        if isinstance(out, (tuple, list)):
            out = out[0]
        arr = out.detach().cpu().numpy().squeeze(0).transpose(1, 2, 0)
        pixels = np.clip(np.rint(arr * 255.0), 0, 255).astype(np.uint8)
        return image.with_pixels(pixels)


def _bicubic(image: ScreeningImage, target_w: int, target_h: int) -> ScreeningImage:
    if (target_w, target_h) == (image.width, image.height):
        return image
    out = cv2.resize(image.pixels, (target_w, target_h), interpolation=cv2.INTER_CUBIC)
    return image.with_pixels(out)


def restore(
    image: ScreeningImage,
    policy: RestorationPolicy,
    backend: RestorationBackend | None = None,
) -> tuple[ScreeningImage, StageDecision]:
    """Upscale small images; pass everything else through.

    The effective scale is the policy factor, reduced if needed so the
    longer output side stays within ``max_output_side``, and never below 1
    (restoration never shrinks). Backend failures fall back to bicubic,
    recorded as a suffix on the stage name.
    """
    if min(image.width, image.height) >= policy.min_side_trigger:
        return image, StageDecision(
            stage_name=STAGE_RESTORATION,
            applied=False,
            blackout_fraction=0.0,
            reason=DecisionReason.NOT_REQUESTED,
        )
    scale = max(
        1.0,
        min(float(policy.upscale_factor), policy.max_output_side / max(image.width, image.height)),
    )
    target_w = round(image.width * scale)
    target_h = round(image.height * scale)
    stage_name = STAGE_RESTORATION
    if backend is not None:
        try:
            out = backend.upscale(image, scale)
            if (out.width, out.height) != (target_w, target_h):
                out = resize(out, target_w, target_h)
        except Exception:
            out = _bicubic(image, target_w, target_h)
            stage_name = STAGE_RESTORATION + FALLBACK_SUFFIX
    else:
        out = _bicubic(image, target_w, target_h)
    return out, StageDecision(
        stage_name=stage_name,
        applied=True,
        blackout_fraction=0.0,
        reason=DecisionReason.OK,
    )


def load_restoration_backend(locator: str) -> RestorationBackend:
    """Resolve ``builtin:bicubic`` or a TorchScript export path."""
    if locator == "builtin:bicubic":
        return BicubicBackend()
    import torch

    path = Path(locator)
    if not path.is_file():
        raise BackendLoadError(f"restoration weights not found: {locator}")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise BackendLoadError(
            f"cannot load TorchScript restoration weights {locator} (sha256={digest}): {exc}"
        ) from exc
    module.eval()
    return TorchscriptRestorationBackend(module=module, name=path.stem)
