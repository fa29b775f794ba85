"""HTTP screening service: compressor ingress, pipeline, JSON responses.

Privacy default: no uploaded image is ever written to disk. The opt-in
audit store keeps manifest-style metadata (request id, content checksum,
verdict) only. Requests are handled concurrently over the shared
read-only model and backends.
"""

from __future__ import annotations

import hashlib
import io
import json
import time
import uuid
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, UploadFile
from fastapi.responses import JSONResponse
from PIL import Image, UnidentifiedImageError

from . import __version__ as service_version
from .classifier import load_model
from .config import ServiceSettings
from .errors import InvalidInputError, UnsupportedMediaError, UploadTooLargeError
from .imaging import ScreeningImage
from .pipeline import PipelineConfig, ScreeningPipeline
from .restoration import RestorationPolicy, load_restoration_backend
from .segmentation import (
    KIND_SALIENT_OBJECT,
    KIND_SKIN_REGION,
    GateConfig,
    load_backend,
)

ACCEPTED_FORMATS = {"PNG", "JPEG"}


@dataclass(frozen=True)
class CompressorPolicy:
    """Ingress normalization: size cap, byte budget, re-encode quality."""

    max_side: int = 1024
    max_upload_bytes: int = 10 * 1024 * 1024
    re_encode_quality: int = 85

    def __post_init__(self):
        if self.max_side < 224:
            raise InvalidInputError(f"max_side must be >= 224, got {self.max_side}")
        if self.max_upload_bytes < 1:
            raise InvalidInputError("max_upload_bytes must be positive")
        if not 1 <= self.re_encode_quality <= 100:
            raise InvalidInputError(
                f"re_encode_quality must be in [1, 100], got {self.re_encode_quality}"
            )


def compress_ingress(data: bytes, policy: CompressorPolicy) -> ScreeningImage:
    """Decode an uploaded PNG/JPEG and normalize it for the pipeline.

    Oversized payloads and non-image uploads are rejected. Images larger
    than ``max_side`` are shrunk (never enlarged) preserving aspect ratio,
    then every upload is re-encoded once at the policy's JPEG quality so
    downstream behavior does not depend on the upload codec.
    """
    if len(data) > policy.max_upload_bytes:
        raise UploadTooLargeError(
            f"payload of {len(data)} bytes exceeds limit {policy.max_upload_bytes}"
        )
    try:
        with Image.open(io.BytesIO(data)) as decoded:
            image_format = decoded.format
            if image_format not in ACCEPTED_FORMATS:
                raise UnsupportedMediaError(
                    f"unsupported image format {image_format!r}; accepted: PNG, JPEG"
                )
            rgb = decoded.convert("RGB")
    except UnsupportedMediaError:
        raise
    except (UnidentifiedImageError, OSError, ValueError) as exc:
        raise UnsupportedMediaError(f"payload does not decode as an image: {exc}") from exc

    longest = max(rgb.size)
    if longest > policy.max_side:
        scale = policy.max_side / longest
        new_size = (max(1, round(rgb.width * scale)), max(1, round(rgb.height * scale)))
        rgb = rgb.resize(new_size, Image.BILINEAR)

    buffer = io.BytesIO()
    rgb.save(buffer, format="JPEG", quality=policy.re_encode_quality)
    buffer.seek(0)
    with Image.open(buffer) as normalized:
        pixels = np.asarray(normalized.convert("RGB"), dtype=np.uint8)
    return ScreeningImage(pixels=pixels, source_id="upload")


@dataclass
class AuditStore:
    """Opt-in metadata log; never stores image bytes."""

    directory: Path

    def record(self, request_id: str, checksum: str, result) -> None:
        self.directory.mkdir(parents=True, exist_ok=True)
        entry = {
            "request_id": request_id,
            "checksum": checksum,
            "label": result.label,
            "probabilities": list(result.probabilities),
            "model_version": result.model_version,
        }
        with (self.directory / "audit.jsonl").open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(entry) + "\n")


def build_pipeline(settings: ServiceSettings) -> tuple[ScreeningPipeline, PipelineConfig]:
    """Load the model and backends named by the settings."""
    if not settings.model_dir:
        raise InvalidInputError("settings.model_dir is required to build the pipeline")
    model = load_model(settings.model_dir)
    background = (
        load_backend(KIND_SALIENT_OBJECT, settings.background_backend)
        if settings.background_backend
        else None
    )
    skin = (
        load_backend(KIND_SKIN_REGION, settings.skin_backend)
        if settings.skin_backend
        else None
    )
    restoration = (
        load_restoration_backend(settings.restoration_backend)
        if settings.restoration_backend
        else None
    )
    pipeline = ScreeningPipeline(
        model=model,
        background_backend=background,
        skin_backend=skin,
        restoration_backend=restoration,
    )
    cfg = PipelineConfig(
        enable_restoration=settings.enable_restoration,
        enable_background_removal=settings.enable_background_removal,
        enable_skin_segmentation=settings.enable_skin_segmentation,
        gate=GateConfig(blackout_threshold=settings.blackout_threshold),
        restoration_policy=RestorationPolicy(
            min_side_trigger=settings.restoration_min_side_trigger,
            upscale_factor=settings.restoration_upscale_factor,
            max_output_side=settings.restoration_max_output_side,
        ),
        model_version=model.model_version,
    )
    return pipeline, cfg


def create_app(
    pipeline: ScreeningPipeline,
    pipeline_config: PipelineConfig | None = None,
    compressor: CompressorPolicy | None = None,
    audit_store: AuditStore | None = None,
    ui_dir: str | Path | None = None,
):
    """Assemble the FastAPI app around prebuilt components."""
    cfg = pipeline_config or PipelineConfig()
    policy = compressor or CompressorPolicy()
    app = FastAPI(title="mpxscreen", version=service_version)

    def error_response(status: int, code: str, message: str, request_id: str):
        return JSONResponse(
            status_code=status,
            content={"code": code, "message": message, "request_id": request_id},
        )

    @app.get("/v1/health")
    def health():
        return {"status": "ok", "model_version": pipeline.model.model_version}

    @app.get("/v1/version")
    def version():
        return {
            "model_version": pipeline.model.model_version,
            "service_version": service_version,
        }

    @app.post("/v1/screen")
    async def screen(image: UploadFile = File(...)):
        request_id = uuid.uuid4().hex
        started = time.perf_counter()
        data = await image.read()
        try:
            decoded = compress_ingress(data, policy)
        except UploadTooLargeError as exc:
            return error_response(413, "payload_too_large", str(exc), request_id)
        except UnsupportedMediaError as exc:
            return error_response(415, "unsupported_media_type", str(exc), request_id)
        try:
            result = pipeline.screen(decoded, cfg)
        except Exception as exc:  # classifier failure is a request-level error
            return error_response(500, "screening_failed", str(exc), request_id)
        if audit_store is not None:
            audit_store.record(request_id, hashlib.sha256(data).hexdigest(), result)
        timing_ms = (time.perf_counter() - started) * 1000.0
        return {
            "label": result.label,
            "probabilities": list(result.probabilities),
            "stage_trace": [d.to_dict() for d in result.stage_trace],
            "model_version": result.model_version,
            "request_id": request_id,
            "timing_ms": timing_ms,
        }

    if ui_dir:
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app


def create_app_from_settings(settings: ServiceSettings):
    pipeline, cfg = build_pipeline(settings)
    compressor = CompressorPolicy(
        max_side=settings.compressor_max_side,
        max_upload_bytes=settings.compressor_max_upload_bytes,
        re_encode_quality=settings.compressor_quality,
    )
    audit = None
    if settings.persistence_enabled and settings.persistence_audit_dir:
        audit = AuditStore(directory=Path(settings.persistence_audit_dir))
    ui_dir = settings.ui_dir or None
    return create_app(pipeline, cfg, compressor, audit_store=audit, ui_dir=ui_dir)
