"""Gated segmentation stages: background removal and skin-region masking.

Both stages share one gate rule: run the backend, measure how much of the
image its mask would black out, and refuse to apply any mask that removes
strictly more than the configured fraction (default 0.87) of the image.
Backends are pluggable so pretrained salient-object and skin models can be
swapped in from TorchScript exports; deterministic built-ins (rule-based
skin detection, spectral-residual saliency, stubs) keep the pipeline fully
testable without weights.
"""

from __future__ import annotations

import hashlib
import json
import tempfile
import urllib.request
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import cv2
import numpy as np

from .errors import BackendLoadError, InvalidInputError
from .imaging import (
    STAGE_BACKGROUND_REMOVAL,
    STAGE_SKIN_SEGMENTATION,
    BinaryMask,
    DecisionReason,
    ScreeningImage,
    StageDecision,
    apply_mask,
    blackout_fraction,
)

KIND_SALIENT_OBJECT = "salient_object"
KIND_SKIN_REGION = "skin_region"
BACKEND_KINDS = (KIND_SALIENT_OBJECT, KIND_SKIN_REGION)

STAGE_FOR_KIND = {
    KIND_SALIENT_OBJECT: STAGE_BACKGROUND_REMOVAL,
    KIND_SKIN_REGION: STAGE_SKIN_SEGMENTATION,
}

SOFT_MASK_THRESHOLD = 0.5

# ImageNet statistics; the pretrained segmentation exports expect them.
_NORM_MEAN = np.array([0.485, 0.456, 0.406], dtype=np.float32)
_NORM_STD = np.array([0.229, 0.224, 0.225], dtype=np.float32)


@dataclass(frozen=True)
class GateConfig:
    """Coverage gate: masks blacking out more than this fraction are skipped."""

    blackout_threshold: float = 0.87

    def __post_init__(self):
        if not 0.0 < self.blackout_threshold < 1.0:
            raise InvalidInputError(
                f"blackout_threshold must be in (0, 1), got {self.blackout_threshold}"
            )


class SegmentationBackend:
    """Base for mask producers. Subclasses implement :meth:`predict_soft`.

    ``predict`` resizes the soft foreground map back to the input image's
    dimensions and binarizes at 0.5, so returned masks always match the
    image. Backends are read-only after construction; concurrent predict
    calls are permitted.
    """

    name: str = "backend"
    kind: str = KIND_SALIENT_OBJECT
    input_size: int | None = None  # None: backend runs at native resolution

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        """Foreground probability map, any resolution, values in [0, 1]."""
        raise NotImplementedError

    def predict(self, image: ScreeningImage) -> BinaryMask:
        soft = np.asarray(self.predict_soft(image), dtype=np.float32)
        if soft.ndim != 2:
            raise InvalidInputError(
                f"backend {self.name!r} produced a {soft.ndim}-d map, expected 2-d"
            )
        if soft.shape != (image.height, image.width):
            soft = cv2.resize(
                soft, (image.width, image.height), interpolation=cv2.INTER_LINEAR
            )
        return BinaryMask(bits=soft > SOFT_MASK_THRESHOLD)


def gated_segment(
    image: ScreeningImage, backend: SegmentationBackend, cfg: GateConfig
) -> tuple[ScreeningImage, StageDecision]:
    """Apply the backend's mask unless it blacks out too much of the image.

    Strictly more than ``cfg.blackout_threshold`` removed: the input passes
    through untouched. Any backend failure also degrades to pass-through
    (reason=backend_unavailable); the gate never aborts the pipeline.
    """
    stage = STAGE_FOR_KIND[backend.kind]
    try:
        mask = backend.predict(image)
        if (mask.height, mask.width) != (image.height, image.width):
            raise InvalidInputError("backend returned a mask of mismatched dimensions")
        fraction = blackout_fraction(mask)
    except Exception:
        return image, StageDecision(
            stage_name=stage,
            applied=False,
            blackout_fraction=0.0,
            reason=DecisionReason.BACKEND_UNAVAILABLE,
        )
    if fraction > cfg.blackout_threshold:
        return image, StageDecision(
            stage_name=stage,
            applied=False,
            blackout_fraction=fraction,
            reason=DecisionReason.OVER_THRESHOLD,
        )
    return apply_mask(image, mask), StageDecision(
        stage_name=stage,
        applied=True,
        blackout_fraction=fraction,
        reason=DecisionReason.OK,
    )


# ---------------------------------------------------------------------------
# Built-in backends
# ---------------------------------------------------------------------------

class StubBackend(SegmentationBackend):
    """Constant-fraction mask, for tests and wiring checks.

    ``blackout`` of 0.0 keeps everything; 0.9 blacks out the first 90% of
    cells in row-major order (deterministic, exact to one cell).
    """

    def __init__(self, kind: str, blackout: float = 0.0, name: str | None = None):
        if kind not in BACKEND_KINDS:
            raise InvalidInputError(f"unknown backend kind {kind!r}")
        if not 0.0 <= blackout <= 1.0:
            raise InvalidInputError(f"blackout must be in [0, 1], got {blackout}")
        self.kind = kind
        self.blackout = blackout
        self.name = name or f"stub-blackout-{blackout:g}"

    def predict(self, image: ScreeningImage) -> BinaryMask:
        total = image.height * image.width
        n_black = round(self.blackout * total)
        flat = np.ones(total, dtype=np.bool_)
        flat[:n_black] = False
        return BinaryMask(bits=flat.reshape(image.height, image.width))

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        return self.predict(image).bits.astype(np.float32)


class CallableBackend(SegmentationBackend):
    """Wraps an arbitrary image -> mask function (tests, experiments)."""

    def __init__(self, kind: str, fn: Callable[[ScreeningImage], BinaryMask], name: str = "callable"):
        if kind not in BACKEND_KINDS:
            raise InvalidInputError(f"unknown backend kind {kind!r}")
        self.kind = kind
        self.fn = fn
        self.name = name

    def predict(self, image: ScreeningImage) -> BinaryMask:
        return self.fn(image)

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        return self.predict(image).bits.astype(np.float32)


class SkinRuleBackend(SegmentationBackend):
    """Rule-based skin detector over RGB values; no weights required.

    Classic explicit thresholds: skin pixels are red-dominant, moderately
    bright, and not gray. Coarse but deterministic, useful as a default
    when no pretrained skin model is configured.
    """

    name = "skin-rules"
    kind = KIND_SKIN_REGION

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        px = image.pixels.astype(np.int16)
        r, g, b = px[:, :, 0], px[:, :, 1], px[:, :, 2]
        spread = px.max(axis=2) - px.min(axis=2)
        skin = (
            (r > 95) & (g > 40) & (b > 20)
            & (spread > 15)
            & (np.abs(r - g) > 15)
            & (r > g) & (r > b)
        )
        return skin.astype(np.float32)


def _fill_holes(binary: np.ndarray) -> np.ndarray:
    """Set enclosed zero regions of a 0/1 uint8 map to 1."""
    h, w = binary.shape
    flood = binary.copy()
    mask = np.zeros((h + 2, w + 2), np.uint8)
    for seed in ((0, 0), (w - 1, 0), (0, h - 1), (w - 1, h - 1)):
        if flood[seed[1], seed[0]] == 0:
            cv2.floodFill(flood, mask, seed, 1)
    out = binary.copy()
    out[flood == 0] = 1
    return out


class SpectralSaliencyBackend(SegmentationBackend):
    """Spectral-residual saliency turned into a foreground mask.

    Lightweight salient-object baseline: the residual of the log amplitude
    spectrum highlights regions that differ from the image's statistical
    background. The map is binarized at three times its mean (saliency
    concentrates on object boundaries), closed, and hole-filled so the
    object interior counts as foreground. Runs at a small internal
    resolution.
    """

    name = "spectral-saliency"
    kind = KIND_SALIENT_OBJECT
    input_size = 64

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        gray = cv2.cvtColor(image.pixels, cv2.COLOR_RGB2GRAY).astype(np.float32)
        small = cv2.resize(gray, (self.input_size, self.input_size), interpolation=cv2.INTER_AREA)
        spectrum = np.fft.fft2(small)
        log_amp = np.log1p(np.abs(spectrum))
        residual = log_amp - cv2.blur(log_amp, (3, 3))
        saliency = np.abs(np.fft.ifft2(np.exp(residual + 1j * np.angle(spectrum)))) ** 2
        saliency = cv2.GaussianBlur(saliency.astype(np.float32), (9, 9), 2.5)
        mean = float(saliency.mean())
        if mean <= 0.0:
            return np.ones_like(saliency)
        binary = (saliency > 3.0 * mean).astype(np.uint8)
        kernel = cv2.getStructuringElement(cv2.MORPH_ELLIPSE, (7, 7))
        closed = cv2.morphologyEx(binary, cv2.MORPH_CLOSE, kernel)
        return _fill_holes(closed).astype(np.float32)


class TorchscriptBackend(SegmentationBackend):
    """Runs a TorchScript export of a segmentation model.

    Input: RGB scaled to [0, 1], optionally ImageNet-normalized, resized to
    ``input_size``, NCHW float32. Output: the first tensor, squeezed to a
    2-d map; values outside [0, 1] are squashed through a logistic before
    thresholding.
    """

    def __init__(self, kind: str, module, name: str, input_size: int = 320, normalize: bool = True):
        if kind not in BACKEND_KINDS:
            raise InvalidInputError(f"unknown backend kind {kind!r}")
        self.kind = kind
        self.module = module
        self.name = name
        self.input_size = input_size
        self.normalize = normalize

    def predict_soft(self, image: ScreeningImage) -> np.ndarray:
        import torch

        rgb = cv2.resize(
            image.pixels, (self.input_size, self.input_size), interpolation=cv2.INTER_LINEAR
        ).astype(np.float32) / 255.0
        if self.normalize:
            rgb = (rgb - _NORM_MEAN) / _NORM_STD
        tensor = torch.from_numpy(rgb.transpose(2, 0, 1)[None])
        with torch.no_grad():
            out = self.module(tensor)
        if isinstance(out, (tuple, list)):
            out = out[0]
        soft = out.detach().cpu().numpy().squeeze()
        if soft.ndim != 2:
            raise InvalidInputError(
                f"torchscript backend {self.name!r} emitted shape {soft.shape}"
            )
        if soft.min() < 0.0 or soft.max() > 1.0:
            soft = 1.0 / (1.0 + np.exp(-soft))
        return soft.astype(np.float32)


# ---------------------------------------------------------------------------
# Backend loading
# ---------------------------------------------------------------------------

def load_backend(kind: str, weights_locator: str) -> SegmentationBackend:
    """Resolve a locator into a ready backend.

    Locator forms:
      - ``stub:all-foreground`` / ``stub:blackout=<fraction>``
      - ``builtin:skin-rules`` / ``builtin:spectral-saliency``
      - filesystem path to a TorchScript export (optional ``<path>.json``
        sidecar with ``kind``, ``name``, ``input_size``, ``normalize``)
      - http(s) URL to a TorchScript export
    """
    if kind not in BACKEND_KINDS:
        raise BackendLoadError(f"unknown backend kind {kind!r}")
    if weights_locator.startswith("stub:"):
        spec = weights_locator[len("stub:"):]
        if spec == "all-foreground":
            return StubBackend(kind, blackout=0.0, name="stub-all-foreground")
        if spec.startswith("blackout="):
            return StubBackend(kind, blackout=float(spec.split("=", 1)[1]))
        raise BackendLoadError(f"unknown stub backend {weights_locator!r}")
    if weights_locator.startswith("builtin:"):
        spec = weights_locator[len("builtin:"):]
        if spec == "skin-rules":
            backend = SkinRuleBackend()
        elif spec == "spectral-saliency":
            backend = SpectralSaliencyBackend()
        else:
            raise BackendLoadError(f"unknown builtin backend {weights_locator!r}")
        if backend.kind != kind:
            raise BackendLoadError(
                f"builtin backend {spec!r} has kind {backend.kind!r}, requested {kind!r}"
            )
        return backend
    if weights_locator.startswith(("http://", "https://")):
        with tempfile.NamedTemporaryFile(suffix=".pt", delete=False) as tmp:
            with urllib.request.urlopen(weights_locator) as resp:
                tmp.write(resp.read())
            local = Path(tmp.name)
        return _load_torchscript(kind, local, display_name=weights_locator)
    return _load_torchscript(kind, Path(weights_locator), display_name=weights_locator)


def _load_torchscript(kind: str, path: Path, display_name: str) -> TorchscriptBackend:
    import torch

    if not path.is_file():
        raise BackendLoadError(f"weights file not found: {display_name}")
    digest = hashlib.sha256(path.read_bytes()).hexdigest()
    meta = {}
    sidecar = path.with_name(path.name + ".json")
    if sidecar.is_file():
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        declared = meta.get("kind")
        if declared is not None and declared != kind:
            raise BackendLoadError(
                f"weights {display_name} declare kind {declared!r}, requested {kind!r} "
                f"(sha256={digest})"
            )
    try:
        module = torch.jit.load(str(path), map_location="cpu")
    except Exception as exc:
        raise BackendLoadError(
            f"cannot load TorchScript weights {display_name} (sha256={digest}): {exc}"
        ) from exc
    module.eval()
    return TorchscriptBackend(
        kind=kind,
        module=module,
        name=meta.get("name", path.stem),
        input_size=int(meta.get("input_size", 320)),
        normalize=bool(meta.get("normalize", True)),
    )
