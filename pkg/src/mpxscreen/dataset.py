"""Dataset construction: manifests, augmentation, balancing, and splits.

A dataset is described by a line-delimited manifest (one JSON record per
line, UTF-8). Records carry label, split assignment, and augmentation
lineage so that leakage checks and audits can run without touching pixels.
Balancing and splitting are manifest-level operations; augmented records
are planned first and materialized to image files in a separate step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import cv2
import numpy as np

from .errors import (
    BalanceError,
    IngestError,
    InvalidInputError,
    InvalidTransformError,
    SplitError,
)
from .imaging import LABEL_MONKEYPOX, LABEL_OTHERS, ScreeningImage

logger = logging.getLogger(__name__)

LABELS = (LABEL_MONKEYPOX, LABEL_OTHERS)
SPLITS = ("train", "val", "test", "external")
POOL_SPLITS = ("val", "test")  # the validation/testing pool that `split` partitions

TRANSFORM_KINDS = ("rotation", "translation", "noise_injection", "color_space_shift")

# Parameter bounds keep lesions recognizable; photometric distortions are
# deliberately excluded.
ROTATION_MAX_DEGREES = 40.0
TRANSLATION_MAX_FRACTION = 0.2
NOISE_MAX_VARIANCE = 0.05
CHANNEL_SHIFT_MAX = 20.0 / 255.0

_PARAM_KEYS = {
    "rotation": ("degrees",),
    "translation": ("dx", "dy"),
    "noise_injection": ("variance",),
    "color_space_shift": ("shift_r", "shift_g", "shift_b"),
}


@dataclass(frozen=True)
class TransformDescriptor:
    """One augmentation step: a kind, its numeric parameters, and a seed."""

    kind: str
    parameters: dict
    seed: int = 0

    def __post_init__(self):
        if self.kind not in TRANSFORM_KINDS:
            raise InvalidTransformError(f"unknown transform kind {self.kind!r}")
        expected = _PARAM_KEYS[self.kind]
        missing = [k for k in expected if k not in self.parameters]
        if missing:
            raise InvalidTransformError(
                f"{self.kind} transform missing parameters: {missing}"
            )
        self.validate_bounds()

    def validate_bounds(self):
        p = self.parameters
        if self.kind == "rotation":
            if abs(p["degrees"]) > ROTATION_MAX_DEGREES:
                raise InvalidTransformError(
                    f"rotation degrees {p['degrees']} outside "
                    f"[-{ROTATION_MAX_DEGREES}, {ROTATION_MAX_DEGREES}]"
                )
        elif self.kind == "translation":
            if abs(p["dx"]) > TRANSLATION_MAX_FRACTION or abs(p["dy"]) > TRANSLATION_MAX_FRACTION:
                raise InvalidTransformError(
                    f"translation ({p['dx']}, {p['dy']}) outside "
                    f"+/-{TRANSLATION_MAX_FRACTION}"
                )
        elif self.kind == "noise_injection":
            if not 0.0 <= p["variance"] <= NOISE_MAX_VARIANCE:
                raise InvalidTransformError(
                    f"noise variance {p['variance']} outside [0, {NOISE_MAX_VARIANCE}]"
                )
        elif self.kind == "color_space_shift":
            for key in ("shift_r", "shift_g", "shift_b"):
                if abs(p[key]) > CHANNEL_SHIFT_MAX:
                    raise InvalidTransformError(
                        f"channel shift {key}={p[key]} outside +/-{CHANNEL_SHIFT_MAX:.6f}"
                    )

    def to_dict(self) -> dict:
        return {"kind": self.kind, "parameters": dict(self.parameters), "seed": self.seed}

    @classmethod
    def from_dict(cls, d: dict) -> "TransformDescriptor":
        return cls(kind=d["kind"], parameters=dict(d["parameters"]), seed=int(d.get("seed", 0)))


@dataclass(frozen=True)
class ManifestRecord:
    """One image in the dataset, original or augmented."""

    id: str
    path: str
    label: str
    split: str
    origin: str = "original"
    parent_id: str | None = None
    transform: TransformDescriptor | None = None
    source_tag: str = ""
    checksum: str = ""

    def __post_init__(self):
        if self.label not in LABELS:
            raise InvalidInputError(f"record {self.id}: unknown label {self.label!r}")
        if self.split not in SPLITS:
            raise InvalidInputError(f"record {self.id}: unknown split {self.split!r}")
        if self.origin not in ("original", "augmented"):
            raise InvalidInputError(f"record {self.id}: unknown origin {self.origin!r}")
        augmented = self.origin == "augmented"
        if augmented != (self.parent_id is not None) or augmented != (self.transform is not None):
            raise InvalidInputError(
                f"record {self.id}: origin=augmented requires exactly "
                "parent_id and transform to be present, originals neither"
            )

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "path": self.path,
            "label": self.label,
            "split": self.split,
            "origin": self.origin,
            "parent_id": self.parent_id,
            "transform": self.transform.to_dict() if self.transform else None,
            "source_tag": self.source_tag,
            "checksum": self.checksum,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ManifestRecord":
        transform = d.get("transform")
        return cls(
            id=d["id"],
            path=d["path"],
            label=d["label"],
            split=d["split"],
            origin=d.get("origin", "original"),
            parent_id=d.get("parent_id"),
            transform=TransformDescriptor.from_dict(transform) if transform else None,
            source_tag=d.get("source_tag", ""),
            checksum=d.get("checksum", ""),
        )


class DatasetManifest:
    """Validated collection of manifest records.

    Construction enforces: unique ids, resolvable parents, and lineage
    consistency (children share their parent's split and label).
    """

    def __init__(self, records: Iterable[ManifestRecord]):
        self.records: tuple[ManifestRecord, ...] = tuple(records)
        self.by_id: dict[str, ManifestRecord] = {}
        offenders: list[str] = []
        problems: list[str] = []
        for rec in self.records:
            if rec.id in self.by_id:
                offenders.append(rec.id)
                problems.append(f"duplicate id {rec.id!r}")
            self.by_id[rec.id] = rec
        for rec in self.records:
            if rec.parent_id is None:
                continue
            parent = self.by_id.get(rec.parent_id)
            if parent is None:
                offenders.append(rec.id)
                problems.append(f"record {rec.id!r} references missing parent {rec.parent_id!r}")
                continue
            if parent.split != rec.split:
                offenders.append(rec.id)
                problems.append(
                    f"record {rec.id!r} split {rec.split!r} differs from parent's {parent.split!r}"
                )
            if parent.label != rec.label:
                offenders.append(rec.id)
                problems.append(
                    f"record {rec.id!r} label {rec.label!r} differs from parent's {parent.label!r}"
                )
        if problems:
            raise IngestError("; ".join(problems), offenders=sorted(set(offenders)))

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def class_counts(self) -> dict[str, dict[str, int]]:
        """Per-split, per-label record tallies."""
        counts: dict[str, dict[str, int]] = {}
        for rec in self.records:
            counts.setdefault(rec.split, {lab: 0 for lab in LABELS})
            counts[rec.split][rec.label] += 1
        return counts

    def in_split(self, *splits: str) -> list[ManifestRecord]:
        wanted = set(splits)
        return [r for r in self.records if r.split in wanted]

    def root_of(self, rec: ManifestRecord) -> ManifestRecord:
        """Walk the lineage up to the originating original record."""
        while rec.parent_id is not None:
            rec = self.by_id[rec.parent_id]
        return rec

    def save(self, path: str | Path) -> None:
        path = Path(path)
        with path.open("w", encoding="utf-8") as fh:
            for rec in self.records:
                fh.write(json.dumps(rec.to_dict(), ensure_ascii=False) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        records = []
        with Path(path).open("r", encoding="utf-8") as fh:
            for line in fh:
                line = line.strip()
                if line:
                    records.append(ManifestRecord.from_dict(json.loads(line)))
        return cls(records)


def sha256_file(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def find_duplicate_checksums(manifest: DatasetManifest) -> dict[str, list[str]]:
    """Checksums shared by more than one record (empty checksums ignored)."""
    seen: dict[str, list[str]] = {}
    for rec in manifest:
        if rec.checksum:
            seen.setdefault(rec.checksum, []).append(rec.id)
    return {c: ids for c, ids in seen.items() if len(ids) > 1}


def ingest(
    record_stream: Iterable[ManifestRecord | dict],
    root: str | Path | None = None,
    verify_files: bool = True,
) -> DatasetManifest:
    """Validate a record stream into a manifest.

    Every referenced file must exist and decode when ``verify_files`` is set;
    violations raise :class:`IngestError` listing the offending ids.
    Duplicate content checksums are reported via logging (they are legal:
    the same photo may legitimately appear under two source tags).
    """
    records = [r if isinstance(r, ManifestRecord) else ManifestRecord.from_dict(r) for r in record_stream]
    manifest = DatasetManifest(records)
    if verify_files:
        base = Path(root) if root is not None else Path(".")
        offenders, problems = [], []
        for rec in manifest:
            p = base / rec.path
            if not p.is_file():
                offenders.append(rec.id)
                problems.append(f"record {rec.id!r}: missing file {p}")
                continue
            img = cv2.imread(str(p), cv2.IMREAD_COLOR)
            if img is None:
                offenders.append(rec.id)
                problems.append(f"record {rec.id!r}: file {p} does not decode")
        if problems:
            raise IngestError("; ".join(problems), offenders=offenders)
    duplicates = find_duplicate_checksums(manifest)
    for checksum, ids in duplicates.items():
        logger.warning("duplicate checksum %s shared by records %s", checksum[:12], ids)
    return manifest


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

def rotate_pixels(pixels: np.ndarray, degrees: float) -> np.ndarray:
    """Rotate about the image center, counterclockwise for positive angles.

    Exact right-angle rotations of square images are pure pixel permutations;
    other angles use bilinear resampling with black fill. Output dimensions
    always equal input dimensions.
    """
    if degrees % 90 == 0:
        k = int(degrees // 90) % 4
        h, w = pixels.shape[:2]
        if k == 0:
            return pixels.copy()
        if k == 2 or h == w:
            return np.ascontiguousarray(np.rot90(pixels, k))
    h, w = pixels.shape[:2]
    matrix = cv2.getRotationMatrix2D((w / 2.0, h / 2.0), degrees, 1.0)
    return cv2.warpAffine(
        pixels, matrix, (w, h),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )


def translate_pixels(pixels: np.ndarray, dx: float, dy: float) -> np.ndarray:
    """Shift by (dx, dy) as fractions of width/height; vacated area is black."""
    h, w = pixels.shape[:2]
    tx, ty = round(dx * w), round(dy * h)
    matrix = np.array([[1.0, 0.0, tx], [0.0, 1.0, ty]], dtype=np.float64)
    return cv2.warpAffine(
        pixels, matrix, (w, h),
        flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT, borderValue=0,
    )


def inject_noise(pixels: np.ndarray, variance: float, seed: int) -> np.ndarray:
    """Add seeded Gaussian noise with the given variance in [0, 1] units."""
    if variance == 0:
        return pixels.copy()
    rng = np.random.default_rng(seed)
    noise = rng.normal(0.0, math.sqrt(variance), size=pixels.shape)
    shifted = pixels.astype(np.float64) / 255.0 + noise
    return np.clip(np.rint(shifted * 255.0), 0, 255).astype(np.uint8)


def shift_channels(pixels: np.ndarray, shift_r: float, shift_g: float, shift_b: float) -> np.ndarray:
    """Add a per-channel offset, given in [0, 1] units."""
    offsets = np.array([shift_r, shift_g, shift_b], dtype=np.float64) * 255.0
    shifted = pixels.astype(np.float64) + offsets[None, None, :]
    return np.clip(np.rint(shifted), 0, 255).astype(np.uint8)


def augment(image: ScreeningImage, t: TransformDescriptor) -> ScreeningImage:
    """Apply one transform; deterministic given (image, descriptor)."""
    t.validate_bounds()
    p = t.parameters
    if t.kind == "rotation":
        out = rotate_pixels(image.pixels, float(p["degrees"]))
    elif t.kind == "translation":
        out = translate_pixels(image.pixels, float(p["dx"]), float(p["dy"]))
    elif t.kind == "noise_injection":
        out = inject_noise(image.pixels, float(p["variance"]), t.seed)
    else:
        out = shift_channels(
            image.pixels, float(p["shift_r"]), float(p["shift_g"]), float(p["shift_b"])
        )
    return image.with_pixels(out)


def sample_transform(rng: random.Random) -> TransformDescriptor:
    """Draw one in-bounds transform; used when planning balancing records."""
    kind = rng.choice(TRANSFORM_KINDS)
    seed = rng.randrange(2**31)
    if kind == "rotation":
        params = {"degrees": round(rng.uniform(-ROTATION_MAX_DEGREES, ROTATION_MAX_DEGREES), 3)}
    elif kind == "translation":
        params = {
            "dx": round(rng.uniform(-TRANSLATION_MAX_FRACTION, TRANSLATION_MAX_FRACTION), 4),
            "dy": round(rng.uniform(-TRANSLATION_MAX_FRACTION, TRANSLATION_MAX_FRACTION), 4),
        }
    elif kind == "noise_injection":
        params = {"variance": round(rng.uniform(0.001, NOISE_MAX_VARIANCE), 5)}
    else:
        params = {
            "shift_r": round(rng.uniform(-CHANNEL_SHIFT_MAX, CHANNEL_SHIFT_MAX), 5),
            "shift_g": round(rng.uniform(-CHANNEL_SHIFT_MAX, CHANNEL_SHIFT_MAX), 5),
            "shift_b": round(rng.uniform(-CHANNEL_SHIFT_MAX, CHANNEL_SHIFT_MAX), 5),
        }
    return TransformDescriptor(kind=kind, parameters=params, seed=seed)


# ---------------------------------------------------------------------------
# Balancing and splitting
# ---------------------------------------------------------------------------

def balance(manifest: DatasetManifest, split: str, rng_seed: int) -> DatasetManifest:
    """Append planned augmented minority records until the split is balanced.

    Parents are the minority-class originals of the split, cycled round-robin
    in seeded-shuffled order, one freshly drawn transform per child. New
    records carry an empty checksum until materialized.
    """
    if split not in SPLITS:
        raise InvalidInputError(f"unknown split {split!r}")
    pool = manifest.in_split(split)
    counts = {lab: sum(1 for r in pool if r.label == lab) for lab in LABELS}
    if min(counts.values()) == 0:
        raise BalanceError(
            f"split {split!r} has counts {counts}; both classes must be present"
        )
    if counts[LABEL_MONKEYPOX] == counts[LABEL_OTHERS]:
        return DatasetManifest(manifest.records)
    minority = min(LABELS, key=lambda lab: counts[lab])
    deficit = max(counts.values()) - counts[minority]
    parents = sorted(
        (r for r in pool if r.label == minority and r.origin == "original"),
        key=lambda r: r.id,
    )
    if not parents:
        raise BalanceError(
            f"split {split!r} minority class {minority!r} has no original "
            "records to augment from"
        )
    rng = random.Random(rng_seed)
    rng.shuffle(parents)

    existing_ids = set(manifest.by_id)
    new_records: list[ManifestRecord] = []
    per_parent_counter: dict[str, int] = {}
    for i in range(deficit):
        parent = parents[i % len(parents)]
        k = per_parent_counter.get(parent.id, 0) + 1
        per_parent_counter[parent.id] = k
        child_id = f"{parent.id}.aug{k}"
        while child_id in existing_ids:
            k += 1
            per_parent_counter[parent.id] = k
            child_id = f"{parent.id}.aug{k}"
        existing_ids.add(child_id)
        new_records.append(
            ManifestRecord(
                id=child_id,
                path=f"augmented/{child_id}.png",
                label=parent.label,
                split=parent.split,
                origin="augmented",
                parent_id=parent.id,
                transform=sample_transform(rng),
                source_tag=parent.source_tag,
                checksum="",
            )
        )
    return DatasetManifest(list(manifest.records) + new_records)


def _round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def split(
    manifest: DatasetManifest,
    ratio: Sequence[float],
    rng_seed: int,
) -> DatasetManifest:
    """Partition the validation/test pool by ``ratio``, stratified by label.

    The per-class validation count is round(N * ratio[0]), ties going to the
    first partition. Augmented children always land with their parents, so
    lineage groups are assigned as units. Records outside the pool are
    untouched.
    """
    if len(ratio) != 2:
        raise InvalidInputError(f"ratio must have two entries, got {ratio}")
    if any(r < 0 for r in ratio) or abs(sum(ratio) - 1.0) > 1e-9:
        raise InvalidInputError(f"ratio must be non-negative and sum to 1, got {ratio}")
    pool = manifest.in_split(*POOL_SPLITS)
    if not pool:
        raise SplitError("validation/test pool is empty")

    # Lineage groups: an original plus all of its pool descendants.
    groups: dict[str, list[ManifestRecord]] = {}
    for rec in pool:
        groups.setdefault(manifest.root_of(rec).id, []).append(rec)

    rng = random.Random(rng_seed)
    val_ids: set[str] = set()
    for label in LABELS:
        label_groups = [
            (root_id, members)
            for root_id, members in groups.items()
            if members[0].label == label
        ]
        n_label = sum(len(members) for _, members in label_groups)
        if n_label == 0:
            continue
        target = _round_half_up(n_label * ratio[0])
        rng.shuffle(label_groups)
        label_groups.sort(key=lambda item: -len(item[1]))  # stable: keeps seeded order within sizes

        assigned = 0
        remaining = []
        for root_id, members in label_groups:
            if assigned + len(members) <= target:
                val_ids.update(r.id for r in members)
                assigned += len(members)
            else:
                remaining.append((root_id, members))
        # Top up with whichever group brings the count closest to the target.
        while assigned < target and remaining:
            best = min(remaining, key=lambda item: abs(assigned + len(item[1]) - target))
            if abs(assigned + len(best[1]) - target) >= abs(assigned - target):
                break
            remaining.remove(best)
            val_ids.update(r.id for r in best[1])
            assigned += len(best[1])

    pool_ids = {r.id for r in pool}
    out = []
    for rec in manifest.records:
        if rec.id not in pool_ids:
            out.append(rec)
        elif rec.id in val_ids:
            out.append(replace(rec, split="val"))
        else:
            out.append(replace(rec, split="test"))
    return DatasetManifest(out)


def assemble_external(
    coco_like_negatives: Sequence[ManifestRecord],
    monkeypox_originals: Sequence[ManifestRecord],
) -> DatasetManifest:
    """Build the real-world external test manifest from original-only inputs."""
    offenders, problems = [], []
    for rec in coco_like_negatives:
        if rec.label != LABEL_OTHERS:
            offenders.append(rec.id)
            problems.append(f"negative record {rec.id!r} has label {rec.label!r}")
    for rec in monkeypox_originals:
        if rec.label != LABEL_MONKEYPOX:
            offenders.append(rec.id)
            problems.append(f"positive record {rec.id!r} has label {rec.label!r}")
    for rec in list(coco_like_negatives) + list(monkeypox_originals):
        if rec.origin != "original":
            offenders.append(rec.id)
            problems.append(f"record {rec.id!r} is augmented; external set is original-only")
    if problems:
        raise InvalidInputError("; ".join(problems))
    records = [
        replace(rec, split="external")
        for rec in list(coco_like_negatives) + list(monkeypox_originals)
    ]
    return DatasetManifest(records)


# ---------------------------------------------------------------------------
# Materialization and audit
# ---------------------------------------------------------------------------

def materialize_augmented(
    manifest: DatasetManifest, root: str | Path
) -> DatasetManifest:
    """Render planned augmented records to PNG files and fill checksums.

    Parents are rendered before children, so chained augmentations resolve.
    Records that already carry a checksum are left untouched.
    """
    root = Path(root)
    pending = [r for r in manifest if r.origin == "augmented" and not r.checksum]

    def depth(rec: ManifestRecord) -> int:
        d = 0
        while rec.parent_id is not None:
            rec = manifest.by_id[rec.parent_id]
            d += 1
        return d

    updated: dict[str, ManifestRecord] = {r.id: r for r in manifest}
    for rec in sorted(pending, key=depth):
        parent = updated[rec.parent_id]
        parent_path = root / parent.path
        pixels = cv2.imread(str(parent_path), cv2.IMREAD_COLOR)
        if pixels is None:
            raise IngestError(
                f"cannot materialize {rec.id!r}: parent file {parent_path} does not decode",
                offenders=[rec.id],
            )
        image = ScreeningImage(pixels=cv2.cvtColor(pixels, cv2.COLOR_BGR2RGB), source_id=parent.id)
        result = augment(image, rec.transform)
        out_path = root / rec.path
        out_path.parent.mkdir(parents=True, exist_ok=True)
        cv2.imwrite(str(out_path), cv2.cvtColor(result.pixels, cv2.COLOR_RGB2BGR))
        updated[rec.id] = replace(rec, checksum=sha256_file(out_path))
    return DatasetManifest(updated[r.id] for r in manifest)


@dataclass
class AuditReport:
    class_counts: dict[str, dict[str, int]]
    total: int
    duplicate_checksums: dict[str, list[str]]
    unmaterialized: list[str]
    leakage_violations: list[str]
    expectation_mismatches: list[str] = field(default_factory=list)

    @property
    def clean(self) -> bool:
        return not (self.leakage_violations or self.expectation_mismatches)

    def lines(self) -> list[str]:
        out = [f"records: {self.total}"]
        for split_name in sorted(self.class_counts):
            counts = self.class_counts[split_name]
            per_label = ", ".join(f"{lab}={counts[lab]}" for lab in LABELS)
            out.append(f"  {split_name}: {per_label}")
        out.append(f"duplicate checksums: {len(self.duplicate_checksums)}")
        out.append(f"unmaterialized augmented records: {len(self.unmaterialized)}")
        if self.leakage_violations:
            out.append("LEAKAGE VIOLATIONS:")
            out.extend(f"  {v}" for v in self.leakage_violations)
        else:
            out.append("leakage check: ok (every child shares its parent's split)")
        for m in self.expectation_mismatches:
            out.append(f"EXPECTATION MISMATCH: {m}")
        return out


def audit(
    manifest: DatasetManifest,
    expectations: dict[str, dict[str, int]] | None = None,
) -> AuditReport:
    """Tally per-split/per-class counts and re-run the leakage check.

    ``expectations`` optionally maps split -> label -> expected count;
    mismatches are flagged in the report rather than raised.
    """
    leakage = []
    for rec in manifest:
        if rec.parent_id is not None:
            parent = manifest.by_id[rec.parent_id]
            if parent.split != rec.split:
                leakage.append(
                    f"{rec.id} in {rec.split!r} but parent {parent.id} in {parent.split!r}"
                )
    mismatches = []
    counts = manifest.class_counts
    if expectations:
        for split_name, by_label in expectations.items():
            for label, expected in by_label.items():
                actual = counts.get(split_name, {}).get(label, 0)
                if actual != expected:
                    mismatches.append(
                        f"{split_name}/{label}: expected {expected}, found {actual}"
                    )
    return AuditReport(
        class_counts=counts,
        total=len(manifest),
        duplicate_checksums=find_duplicate_checksums(manifest),
        unmaterialized=[r.id for r in manifest if r.origin == "augmented" and not r.checksum],
        leakage_violations=leakage,
        expectation_mismatches=mismatches,
    )
