"""Binary lesion classifier: compound-scaled backbone plus transfer head.

The head follows the transfer-learning recipe exactly: batch normalization
(moving-average momentum 0.99, epsilon 0.001), a dense layer with an L2
kernel penalty (0.016), L1 activity and bias penalties (0.006) and relu,
dropout at 0.45, then a two-class softmax output. Backbones come from the
EfficientNet family (via torchvision, no weights downloaded unless asked)
or a small locally defined compound-scaled family for CPU-bound work.

Note on conventions: the recorded batch-norm momentum (0.99) is the
moving-average decay; torch's BatchNorm momentum is its complement (0.01).
The optimizer momentum (0.99) is Adam's first-moment coefficient.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import InvalidInputError, ModelArtifactError, TrainingError
from .imaging import CLASS_ORDER, ScreeningImage, StageDecision, resize

WEIGHTS_FILE = "weights.pt"
METADATA_FILE = "metadata.json"

# ImageNet statistics, matching the backbone's pretraining distribution.
_NORM_MEAN = (0.485, 0.456, 0.406)
_NORM_STD = (0.229, 0.224, 0.225)


@dataclass(frozen=True)
class HeadSpec:
    """Hyperparameters of the four-layer transfer head."""

    bn_momentum: float = 0.99
    bn_epsilon: float = 0.001
    dense_units: int = 256
    kernel_l2: float = 0.016
    activity_l1: float = 0.006
    bias_l1: float = 0.006
    dense_activation: str = "relu"
    dropout_rate: float = 0.45
    classes: int = 2
    output_activation: str = "softmax"

    def __post_init__(self):
        if not 0.0 <= self.dropout_rate < 1.0:
            raise InvalidInputError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.classes != 2:
            raise InvalidInputError(f"binary task requires 2 classes, got {self.classes}")
        if self.dense_units < 1:
            raise InvalidInputError(f"dense_units must be >= 1, got {self.dense_units}")

    def to_dict(self) -> dict:
        return {
            "batch_norm": {"momentum": self.bn_momentum, "epsilon": self.bn_epsilon},
            "dense": {
                "units": self.dense_units,
                "kernel_l2": self.kernel_l2,
                "activity_l1": self.activity_l1,
                "bias_l1": self.bias_l1,
                "activation": self.dense_activation,
            },
            "dropout_rate": self.dropout_rate,
            "output": {"classes": self.classes, "activation": self.output_activation},
        }

    @classmethod
    def from_dict(cls, d: dict) -> "HeadSpec":
        return cls(
            bn_momentum=d["batch_norm"]["momentum"],
            bn_epsilon=d["batch_norm"]["epsilon"],
            dense_units=d["dense"]["units"],
            kernel_l2=d["dense"]["kernel_l2"],
            activity_l1=d["dense"]["activity_l1"],
            bias_l1=d["dense"]["bias_l1"],
            dense_activation=d["dense"]["activation"],
            dropout_rate=d["dropout_rate"],
            classes=d["output"]["classes"],
            output_activation=d["output"]["activation"],
        )


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings for the transfer-learning harness."""

    input_size: int = 224
    optimizer: str = "adam"
    learning_rate: float = 0.001
    lr_decay: float = 0.95
    batch_size: int = 48
    momentum: float = 0.99
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidInputError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate <= 0:
            raise InvalidInputError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 < self.lr_decay <= 1.0:
            raise InvalidInputError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.epochs < 1:
            raise InvalidInputError(f"epochs must be >= 1, got {self.epochs}")

    def to_dict(self) -> dict:
        return {
            "input_size": self.input_size,
            "optimizer": self.optimizer,
            "learning_rate": self.learning_rate,
            "lr_decay": self.lr_decay,
            "batch_size": self.batch_size,
            "momentum": self.momentum,
            "epochs": self.epochs,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass(frozen=True)
class ClassificationResult:
    """Binary verdict with class probabilities and the per-stage trace."""

    label: str
    probabilities: tuple[float, float]
    stage_trace: tuple[StageDecision, ...] = ()
    model_version: str = ""

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probabilities)
        if len(probs) != 2 or any(p < 0 for p in probs):
            raise InvalidInputError(f"probabilities must be a non-negative pair, got {probs}")
        if abs(sum(probs) - 1.0) > 1e-6:
            raise InvalidInputError(f"probabilities must sum to 1 +/- 1e-6, got {sum(probs)}")
        expected = CLASS_ORDER[int(np.argmax(probs))]
        if self.label != expected:
            raise InvalidInputError(
                f"label {self.label!r} is not the argmax class {expected!r}"
            )
        object.__setattr__(self, "probabilities", probs)
        object.__setattr__(self, "stage_trace", tuple(self.stage_trace))

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "probabilities": list(self.probabilities),
            "stage_trace": [d.to_dict() for d in self.stage_trace],
            "model_version": self.model_version,
        }


# ---------------------------------------------------------------------------
# Backbones
# ---------------------------------------------------------------------------

class _MicroBackbone(nn.Module):
    """Small compound-scaled conv stack for CPU training and tests.

    Width and depth grow with the scaling exponent phi the same way the
    big family's do (width x 1.1^phi, depth x 1.2^phi).
    """

    BASE_WIDTHS = (8, 16, 24, 32, 48)
    BASE_DEPTHS = (1, 1, 1, 1)

    def __init__(self, phi: int = 0):
        super().__init__()
        width_mult = 1.1 ** phi
        depth_mult = 1.2 ** phi
        widths = [max(8, int(round(w * width_mult / 8)) * 8) for w in self.BASE_WIDTHS]
        depths = [max(1, int(math.ceil(d * depth_mult))) for d in self.BASE_DEPTHS]

        def block(cin, cout, stride):
            return nn.Sequential(
                nn.Conv2d(cin, cout, 3, stride=stride, padding=1, bias=False),
                nn.BatchNorm2d(cout),
                nn.SiLU(inplace=True),
            )

        layers = [block(3, widths[0], stride=2)]
        cin = widths[0]
        for stage, (cout, depth) in enumerate(zip(widths[1:], depths)):
            for i in range(depth):
                layers.append(block(cin, cout, stride=2 if i == 0 else 1))
                cin = cout
        self.features = nn.Sequential(*layers)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.feature_dim = cin

    def forward(self, x):
        return torch.flatten(self.pool(self.features(x)), 1)


def _build_backbone(name: str, pretrained: bool) -> tuple[nn.Module, int]:
    if name.startswith("micro"):
        if pretrained:
            raise ModelArtifactError(f"no pretrained weights exist for backbone {name!r}")
        phi = int(name[len("micro"):] or 0)
        backbone = _MicroBackbone(phi)
        return backbone, backbone.feature_dim
    if name in {f"b{i}" for i in range(8)}:
        from torchvision import models

        builder = getattr(models, f"efficientnet_{name}")
        weights = None
        if pretrained:
            enum = getattr(models, f"EfficientNet_{name.upper()}_Weights")
            weights = enum.DEFAULT
        try:
            net = builder(weights=weights)
        except Exception as exc:
            raise ModelArtifactError(
                f"pretrained weights for backbone {name!r} unavailable: {exc}"
            ) from exc
        feature_dim = net.classifier[1].in_features
        backbone = nn.Sequential(net.features, net.avgpool, nn.Flatten(1))
        return backbone, feature_dim
    raise ModelArtifactError(f"unknown backbone {name!r}")


class ScreeningModel(nn.Module):
    """Backbone plus the regularized transfer head; forward emits softmax."""

    def __init__(self, head: HeadSpec, backbone: str = "b7", pretrained: bool = False):
        super().__init__()
        self.head_spec = head
        self.backbone_name = backbone
        self.backbone, self.feature_dim = _build_backbone(backbone, pretrained)
        # torch's momentum is the complement of the moving-average decay
        self.head_bn = nn.BatchNorm1d(
            self.feature_dim, eps=head.bn_epsilon, momentum=1.0 - head.bn_momentum
        )
        self.head_dense = nn.Linear(self.feature_dim, head.dense_units)
        self.head_dropout = nn.Dropout(head.dropout_rate)
        self.head_out = nn.Linear(head.dense_units, head.classes)
        self.model_version = f"{backbone}-head{head.dense_units}"

    def forward_parts(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Logits plus the dense activations the activity penalty applies to."""
        feats = self.backbone(x)
        z = self.head_bn(feats)
        a = F.relu(self.head_dense(z))
        logits = self.head_out(self.head_dropout(a))
        return logits, a

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        logits, _ = self.forward_parts(x)
        return F.softmax(logits, dim=1)

    def head_penalty(self, activations: torch.Tensor) -> torch.Tensor:
        """Regularization terms: L2 on the dense kernel, L1 on bias and activity.

        The activity term averages over the batch so the penalty scale does
        not depend on batch size; weight terms are batch-independent sums.
        """
        spec = self.head_spec
        penalty = spec.kernel_l2 * torch.sum(self.head_dense.weight**2)
        penalty = penalty + spec.bias_l1 * torch.sum(torch.abs(self.head_dense.bias))
        penalty = penalty + spec.activity_l1 * torch.abs(activations).sum(dim=1).mean()
        return penalty


def build_model(head: HeadSpec, pretrained: bool = False, backbone: str = "b7") -> ScreeningModel:
    """Construct the classifier; raises if requested pretrained weights are absent."""
    return ScreeningModel(head=head, backbone=backbone, pretrained=pretrained)


def compute_training_loss(
    model: ScreeningModel, inputs: torch.Tensor, targets: torch.Tensor
) -> torch.Tensor:
    """Cross-entropy on the logits plus the head's regularization penalty.

    This is the exact quantity the trainer descends; the gradient-check
    oracle differentiates it numerically.
    """
    logits, activations = model.forward_parts(inputs)
    data_loss = F.cross_entropy(logits, targets)
    return data_loss + model.head_penalty(activations)


# ---------------------------------------------------------------------------
# Input preparation
# ---------------------------------------------------------------------------

def image_to_tensor(image: ScreeningImage, input_size: int = 224) -> torch.Tensor:
    """Resize to the classifier's square input and ImageNet-normalize."""
    resized = resize(image, input_size, input_size)
    arr = resized.pixels.astype(np.float32) / 255.0
    arr = (arr - np.array(_NORM_MEAN, dtype=np.float32)) / np.array(_NORM_STD, dtype=np.float32)
    return torch.from_numpy(arr.transpose(2, 0, 1))


def predict(model: ScreeningModel, image: ScreeningImage) -> ClassificationResult:
    """Deterministic inference: eval mode, dropout inactive."""
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            batch = image_to_tensor(image).unsqueeze(0)
            probs = model(batch)[0].numpy().astype(np.float64)
    finally:
        if was_training:
            model.train()
    probs = probs / probs.sum()  # guard against float32 rounding drift
    label = CLASS_ORDER[int(np.argmax(probs))]
    return ClassificationResult(
        label=label,
        probabilities=(float(probs[0]), float(probs[1])),
        model_version=model.model_version,
    )


# ---------------------------------------------------------------------------
# Training harness
# ---------------------------------------------------------------------------

def steps_per_epoch(n_records: int, batch_size: int) -> int:
    return math.ceil(n_records / batch_size)


def learning_rate_at(cfg: TrainConfig, epoch: int) -> float:
    """Per-epoch multiplicative decay: lr(e) = lr0 * decay^e, e from 0."""
    return cfg.learning_rate * cfg.lr_decay**epoch


@dataclass
class TrainResult:
    model: ScreeningModel
    history: list[dict]
    best_epoch: int
    best_val_accuracy: float


class _RecordLoader:
    """Streams (tensor, class index) pairs for manifest records."""

    def __init__(self, records, root: Path, input_size: int, preprocess=None):
        self.records = list(records)
        self.root = root
        self.input_size = input_size
        self.preprocess = preprocess

    def __len__(self):
        return len(self.records)

    def load(self, idx: int) -> tuple[torch.Tensor, int]:
        import cv2

        rec = self.records[idx]
        raw = cv2.imread(str(self.root / rec.path), cv2.IMREAD_COLOR)
        if raw is None:
            raise TrainingError(f"record {rec.id!r}: file {rec.path} does not decode")
        image = ScreeningImage(pixels=cv2.cvtColor(raw, cv2.COLOR_BGR2RGB), source_id=rec.id)
        if self.preprocess is not None:
            image = self.preprocess(image)
        return image_to_tensor(image, self.input_size), CLASS_ORDER.index(rec.label)

    def batch(self, indices: Sequence[int]) -> tuple[torch.Tensor, torch.Tensor]:
        tensors, targets = zip(*(self.load(i) for i in indices))
        return torch.stack(tensors), torch.tensor(targets, dtype=torch.long)


def train(
    model: ScreeningModel,
    train_manifest,
    val_manifest,
    cfg: TrainConfig,
    root: str | Path = ".",
    preprocess=None,
) -> TrainResult:
    """Fit the model, keeping the best-validation-accuracy checkpoint.

    ``preprocess`` optionally maps each decoded image through the gated
    segmentation stages so training sees the same view as inference.
    Restoration is deliberately absent here: training consumes images at
    their original resolution.
    """
    train_records = list(train_manifest)
    val_records = list(val_manifest)
    if not train_records or not val_records:
        raise TrainingError("training and validation manifests must be non-empty")
    train_labels = {r.label for r in train_records}
    if len(train_labels) < 2:
        raise TrainingError(f"training split has a single class: {train_labels}")
    if len(train_records) == 1:
        raise TrainingError("cannot train on a single record (batch statistics undefined)")

    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    root = Path(root)
    train_loader = _RecordLoader(train_records, root, cfg.input_size, preprocess)
    val_loader = _RecordLoader(val_records, root, cfg.input_size, preprocess)

    optimizer = torch.optim.Adam(
        model.parameters(), lr=cfg.learning_rate, betas=(cfg.momentum, 0.999)
    )

    history: list[dict] = []
    best_state = None
    best_epoch = -1
    best_acc = -1.0
    best_val_loss = float("inf")

    for epoch in range(cfg.epochs):
        lr = learning_rate_at(cfg, epoch)
        for group in optimizer.param_groups:
            group["lr"] = lr

        order = rng.permutation(len(train_loader))
        batches = [
            order[i : i + cfg.batch_size] for i in range(0, len(order), cfg.batch_size)
        ]
        # batch statistics need at least two samples; fold a trailing
        # singleton into the previous batch
        if len(batches) > 1 and len(batches[-1]) == 1:
            batches[-2] = np.concatenate([batches[-2], batches[-1]])
            batches = batches[:-1]

        model.train()
        epoch_loss = 0.0
        epoch_correct = 0
        for indices in batches:
            inputs, targets = train_loader.batch(indices)
            optimizer.zero_grad()
            logits, activations = model.forward_parts(inputs)
            loss = F.cross_entropy(logits, targets) + model.head_penalty(activations)
            if not torch.isfinite(loss):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, lr={lr:.2e}; "
                    "inspect inputs or lower the learning rate"
                )
            loss.backward()
            optimizer.step()
            epoch_loss += float(loss.detach()) * len(indices)
            epoch_correct += int((logits.argmax(dim=1) == targets).sum())

        val_loss, val_acc = _evaluate_split(model, val_loader, cfg.batch_size)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": epoch_loss / len(train_loader),
                "train_accuracy": epoch_correct / len(train_loader),
                "val_loss": val_loss,
                "val_accuracy": val_acc,
            }
        )
        if val_acc > best_acc or (val_acc == best_acc and val_loss < best_val_loss):
            best_acc = val_acc
            best_val_loss = val_loss
            best_epoch = epoch
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}

    if best_state is not None:
        model.load_state_dict(best_state)
    model.eval()
    return TrainResult(
        model=model, history=history, best_epoch=best_epoch, best_val_accuracy=best_acc
    )


def _evaluate_split(model: ScreeningModel, loader: _RecordLoader, batch_size: int):
    model.eval()
    total_loss = 0.0
    correct = 0
    with torch.no_grad():
        for start in range(0, len(loader), batch_size):
            indices = range(start, min(start + batch_size, len(loader)))
            inputs, targets = loader.batch(indices)
            logits, activations = model.forward_parts(inputs)
            loss = F.cross_entropy(logits, targets) + model.head_penalty(activations)
            total_loss += float(loss) * len(indices)
            correct += int((logits.argmax(dim=1) == targets).sum())
    return total_loss / len(loader), correct / len(loader)


# ---------------------------------------------------------------------------
# Model artifacts
# ---------------------------------------------------------------------------

def save_model(
    model: ScreeningModel,
    out_dir: str | Path,
    train_config: TrainConfig | None = None,
    manifest_checksum: str = "",
    history: list[dict] | None = None,
) -> Path:
    """Write the weights blob and metadata file into a directory."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    torch.save(model.state_dict(), out / WEIGHTS_FILE)
    metadata = {
        "model_version": model.model_version,
        "backbone": model.backbone_name,
        "classes": list(CLASS_ORDER),
        "head": model.head_spec.to_dict(),
        "train_config": train_config.to_dict() if train_config else None,
        "dataset_manifest_checksum": manifest_checksum,
        "history": history,
    }
    (out / METADATA_FILE).write_text(
        json.dumps(metadata, indent=2) + "\n", encoding="utf-8"
    )
    return out


def load_metadata(artifact_dir: str | Path) -> dict:
    meta_path = Path(artifact_dir) / METADATA_FILE
    if not meta_path.is_file():
        raise ModelArtifactError(f"metadata file missing: {meta_path}")
    try:
        return json.loads(meta_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ModelArtifactError(f"metadata file corrupt: {meta_path}: {exc}") from exc


def load_model(artifact_dir: str | Path) -> ScreeningModel:
    """Rebuild a model from its artifact directory."""
    artifact_dir = Path(artifact_dir)
    metadata = load_metadata(artifact_dir)
    weights_path = artifact_dir / WEIGHTS_FILE
    if not weights_path.is_file():
        raise ModelArtifactError(f"weights blob missing: {weights_path}")
    head = HeadSpec.from_dict(metadata["head"])
    model = ScreeningModel(head=head, backbone=metadata["backbone"], pretrained=False)
    try:
        state = torch.load(weights_path, map_location="cpu", weights_only=True)
        model.load_state_dict(state)
    except Exception as exc:
        raise ModelArtifactError(f"cannot load weights {weights_path}: {exc}") from exc
    model.model_version = metadata.get("model_version", model.model_version)
    model.eval()
    return model
