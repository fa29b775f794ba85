"""Service configuration: one YAML file plus environment overrides."""

from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path

import yaml

from .errors import InvalidInputError

ENV_PREFIX = "MPXSCREEN_"

DEFAULT_BG_BACKEND = "builtin:spectral-saliency"
DEFAULT_SKIN_BACKEND = "builtin:skin-rules"
DEFAULT_RESTORATION_BACKEND = "builtin:bicubic"


@dataclass(frozen=True)
class ServiceSettings:
    port: int = 8000
    model_dir: str = ""
    background_backend: str = DEFAULT_BG_BACKEND
    skin_backend: str = DEFAULT_SKIN_BACKEND
    restoration_backend: str = DEFAULT_RESTORATION_BACKEND
    enable_restoration: bool = True
    enable_background_removal: bool = True
    enable_skin_segmentation: bool = True
    blackout_threshold: float = 0.87
    restoration_min_side_trigger: int = 224
    restoration_upscale_factor: int = 2
    restoration_max_output_side: int = 2048
    compressor_max_side: int = 1024
    compressor_max_upload_bytes: int = 10 * 1024 * 1024
    compressor_quality: int = 85
    persistence_enabled: bool = False
    persistence_audit_dir: str = ""
    ui_dir: str = ""


_ENV_FIELDS = {
    "PORT": ("port", int),
    "MODEL_DIR": ("model_dir", str),
    "BG_BACKEND": ("background_backend", str),
    "SKIN_BACKEND": ("skin_backend", str),
    "RESTORATION_BACKEND": ("restoration_backend", str),
    "BLACKOUT_THRESHOLD": ("blackout_threshold", float),
    "MAX_UPLOAD_BYTES": ("compressor_max_upload_bytes", int),
    "MAX_SIDE": ("compressor_max_side", int),
    "UI_DIR": ("ui_dir", str),
}


def _from_file(path: Path) -> dict:
    raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    if not isinstance(raw, dict):
        raise InvalidInputError(f"config file {path} must contain a mapping")
    out: dict = {}
    out.update({k: raw[k] for k in ("port", "model_dir", "ui_dir") if k in raw})
    backends = raw.get("backends", {})
    if "background_removal" in backends:
        out["background_backend"] = backends["background_removal"]
    if "skin_segmentation" in backends:
        out["skin_backend"] = backends["skin_segmentation"]
    if "restoration" in backends:
        out["restoration_backend"] = backends["restoration"] or ""
    pipeline = raw.get("pipeline", {})
    for key in ("enable_restoration", "enable_background_removal", "enable_skin_segmentation"):
        if key in pipeline:
            out[key] = bool(pipeline[key])
    if "gate" in raw and "blackout_threshold" in raw["gate"]:
        out["blackout_threshold"] = float(raw["gate"]["blackout_threshold"])
    restoration = raw.get("restoration", {})
    for src, dst in (
        ("min_side_trigger", "restoration_min_side_trigger"),
        ("upscale_factor", "restoration_upscale_factor"),
        ("max_output_side", "restoration_max_output_side"),
    ):
        if src in restoration:
            out[dst] = int(restoration[src])
    compressor = raw.get("compressor", {})
    for src, dst in (
        ("max_side", "compressor_max_side"),
        ("max_upload_bytes", "compressor_max_upload_bytes"),
        ("re_encode_quality", "compressor_quality"),
    ):
        if src in compressor:
            out[dst] = int(compressor[src])
    persistence = raw.get("persistence", {})
    if "enabled" in persistence:
        out["persistence_enabled"] = bool(persistence["enabled"])
    if "audit_dir" in persistence:
        out["persistence_audit_dir"] = persistence["audit_dir"] or ""
    return out


def load_settings(
    config_path: str | Path | None = None, env: dict | None = None
) -> ServiceSettings:
    """Defaults, overridden by the config file, overridden by MPXSCREEN_* vars."""
    settings = ServiceSettings()
    if config_path is not None:
        settings = replace(settings, **_from_file(Path(config_path)))
    env = os.environ if env is None else env
    overrides = {}
    for suffix, (field_name, cast) in _ENV_FIELDS.items():
        value = env.get(ENV_PREFIX + suffix)
        if value is not None:
            overrides[field_name] = cast(value)
    return replace(settings, **overrides) if overrides else settings
