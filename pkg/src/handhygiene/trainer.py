"""Head fine-tuning loop, history bookkeeping and the model artifact."""
from __future__ import annotations

import csv
import io
import logging
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from .errors import ConfigError, ExportError, LossError, ModelLoadError, TrainingError
from .labels import SET_1, GestureLabel, parse_labels
from .model import (
    BackboneSpec,
    ClassifierModel,
    HeadSpec,
    attach_head,
    backbone_checksum,
    extract_features,
    freeze_backbone,
    head_checksum,
    load_backbone,
    trainable_parameters,
)
from .prep import PreprocessConfig

log = logging.getLogger(__name__)

EPSILON = 1e-7
ARTIFACT_FORMAT = "handhygiene-classifier"
ARTIFACT_VERSION = 1
HISTORY_FIELDS = ["epoch", "train_loss", "train_accuracy", "val_loss", "val_accuracy"]


@dataclass
class TrainConfig:
    epochs: int = 25
    batch_size: int = 32
    learning_rate: float = 1e-4
    momentum: float = 0.9
    seed: int = 0
    class_order: list[GestureLabel] = field(default_factory=lambda: list(SET_1))
    optimizer: str = "sgd"

    def __post_init__(self):
        self.class_order = parse_labels(self.class_order)
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        d = asdict(self)
        d["class_order"] = [label.value for label in self.class_order]
        return d

    @classmethod
    def from_json(cls, data: dict) -> "TrainConfig":
        return cls(**data)


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float


@dataclass
class TrainingHistory:
    records: list[EpochRecord]
    config: TrainConfig
    wall_seconds: float = 0.0

    def to_json(self) -> dict:
        return {
            "records": [asdict(r) for r in self.records],
            "config": self.config.to_json(),
            "wall_seconds": self.wall_seconds,
        }

    @classmethod
    def from_json(cls, data: dict) -> "TrainingHistory":
        return cls(
            records=[EpochRecord(**r) for r in data["records"]],
            config=TrainConfig.from_json(data["config"]),
            wall_seconds=float(data.get("wall_seconds", 0.0)),
        )


def _check_pair(probabilities, onehot) -> tuple[np.ndarray, np.ndarray]:
    p = np.asarray(probabilities, dtype=np.float64)
    y = np.asarray(onehot, dtype=np.float64)
    if p.ndim == 1:
        p = p[None, :]
    if y.ndim == 1:
        y = y[None, :]
    if p.shape != y.shape or p.ndim != 2 or p.shape[0] == 0:
        raise LossError(f"probability shape {p.shape} does not match target shape {y.shape}")
    return p, y


def cross_entropy(probabilities, onehot, eps: float = EPSILON) -> float:
    """Batch mean of -sum(onehot * log(clip(p, eps, 1)))."""
    p, y = _check_pair(probabilities, onehot)
    return float(np.mean(-np.sum(y * np.log(np.clip(p, eps, 1.0)), axis=1)))


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy_logit_grad(logits, onehot) -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. the head logits (no clipping active)."""
    z, y = _check_pair(logits, onehot)
    return (softmax(z) - y) / z.shape[0]


def _torch_cross_entropy(probs: torch.Tensor, onehot: torch.Tensor, eps: float = EPSILON) -> torch.Tensor:
    return -(onehot * torch.log(probs.clamp(eps, 1.0))).sum(dim=1).mean()


def _as_features(model: ClassifierModel, data) -> tuple[torch.Tensor, torch.Tensor]:
    inputs, onehot = data
    targets = torch.as_tensor(np.asarray(onehot, dtype=np.float32))
    if isinstance(inputs, torch.Tensor) and inputs.ndim == 2:
        feats = inputs.float()
    else:
        feats = extract_features(model, inputs)
    if feats.shape[0] != targets.shape[0]:
        raise TrainingError(f"{feats.shape[0]} inputs but {targets.shape[0]} targets")
    return feats, targets


def _is_frozen(model: ClassifierModel) -> bool:
    return not any(p.requires_grad for p in model.backbone.parameters())


def train(
    model: ClassifierModel, train_set, val_set, config: TrainConfig
) -> tuple[ClassifierModel, TrainingHistory]:
    """Fit the head; the backbone is checked to be bit-identical afterwards.

    ``train_set`` and ``val_set`` are ``(inputs, onehot)`` pairs where inputs
    are preprocessed Bx224x224x3 arrays, or precomputed backbone features of
    shape (B, 2048).  Because the backbone is frozen and in inference mode its
    features are computed once and reused every epoch.
    """
    if not _is_frozen(model):
        raise TrainingError("backbone is not frozen; call freeze_backbone first")
    if model.num_classes != len(config.class_order):
        raise TrainingError(
            f"head has {model.num_classes} outputs but class_order has {len(config.class_order)} labels"
        )
    if train_set is None or len(train_set[1]) == 0:
        raise TrainingError("empty training set")
    if val_set is None or len(val_set[1]) == 0:
        raise TrainingError("empty validation set")

    started = time.perf_counter()
    bb_before = backbone_checksum(model)
    x_train, y_train = _as_features(model, train_set)
    x_val, y_val = _as_features(model, val_set)
    n = x_train.shape[0]

    params = trainable_parameters(model)
    if config.optimizer == "sgd":
        opt = torch.optim.SGD(params, lr=config.learning_rate, momentum=config.momentum)
    else:
        opt = torch.optim.Adam(params, lr=config.learning_rate)
    shuffle = torch.Generator().manual_seed(config.seed)

    records = []
    with torch.random.fork_rng():
        torch.manual_seed(config.seed)
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = torch.randperm(n, generator=shuffle)
            loss_sum, correct = 0.0, 0
            for step, start in enumerate(range(0, n, config.batch_size)):
                idx = order[start : start + config.batch_size]
                probs = torch.softmax(model.head_logits(x_train[idx]), dim=1)
                loss = _torch_cross_entropy(probs, y_train[idx])
                if not torch.isfinite(loss):
                    raise TrainingError(f"non-finite loss at epoch {epoch}, step {step}: {loss.item()}")
                opt.zero_grad()
                loss.backward()
                opt.step()
                loss_sum += loss.item() * len(idx)
                correct += int((probs.argmax(1) == y_train[idx].argmax(1)).sum())
            val_loss, val_acc = _evaluate_features(model, x_val, y_val)
            records.append(EpochRecord(epoch, loss_sum / n, correct / n, val_loss, val_acc))
            log.info(
                "epoch %d/%d loss %.4f acc %.4f val_loss %.4f val_acc %.4f",
                epoch, config.epochs, *[getattr(records[-1], f) for f in HISTORY_FIELDS[1:]],
            )
    model.eval()

    if backbone_checksum(model) != bb_before:
        raise TrainingError("backbone parameters changed during training")
    model.class_order = list(config.class_order)
    history = TrainingHistory(records, config, time.perf_counter() - started)
    return model, history


def _evaluate_features(model: ClassifierModel, feats: torch.Tensor, onehot: torch.Tensor) -> tuple[float, float]:
    model.eval()
    with torch.no_grad():
        probs = torch.softmax(model.head_logits(feats), dim=1)
        loss = _torch_cross_entropy(probs, onehot).item()
        acc = (probs.argmax(1) == onehot.argmax(1)).double().mean().item()
    return loss, acc


def save_model(model: ClassifierModel, history: TrainingHistory | None, path: str | os.PathLike) -> Path:
    """Write backbone reference, head weights, class order and preprocessing to one file.

    Backbone weights are referenced by path and sha256, not copied.
    """
    path = Path(path)
    bb_spec = model.backbone_spec.to_json()
    bb_spec["weights_sha256"] = model.backbone_weights_sha256 or bb_spec.get("weights_sha256")
    head_state = {k: v.detach().clone() for k, v in model.head.state_dict().items()}
    payload = {
        "format": ARTIFACT_FORMAT,
        "version": ARTIFACT_VERSION,
        "backbone": bb_spec,
        "head_spec": model.head_spec.to_json(),
        "head_state": head_state,
        "head_sha256": head_checksum(model),
        "class_order": [label.value for label in (model.class_order or [])],
        "preprocess": (model.preprocess or PreprocessConfig()).to_json(),
        "history": history.to_json() if history is not None else None,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(buf.getvalue())
    os.replace(tmp, path)
    return path


def load_model(
    path: str | os.PathLike, weights_path: str | os.PathLike | None = None
) -> tuple[ClassifierModel, TrainingHistory | None]:
    path = Path(path)
    if not path.is_file():
        raise ModelLoadError(f"model artifact not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:
        raise ModelLoadError(f"cannot read model artifact {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != ARTIFACT_FORMAT:
        raise ModelLoadError(f"{path} is not a classifier artifact")
    if payload.get("version") != ARTIFACT_VERSION:
        raise ModelLoadError(f"{path}: artifact version {payload.get('version')} is not {ARTIFACT_VERSION}")

    bb = dict(payload["backbone"])
    if weights_path is not None:
        bb["weights_path"] = str(weights_path)
    bb_spec = BackboneSpec.from_json(bb)
    backbone = load_backbone(bb_spec)
    model = attach_head(backbone, HeadSpec(**payload["head_spec"]), bb_spec)
    try:
        model.head.load_state_dict(payload["head_state"], strict=True)
    except RuntimeError as exc:
        raise ModelLoadError(f"{path}: head weights do not fit the head spec: {exc}") from exc
    if head_checksum(model) != payload["head_sha256"]:
        raise ModelLoadError(f"{path}: head checksum mismatch")
    freeze_backbone(model)
    model.eval()
    model.class_order = parse_labels(payload["class_order"]) or None
    model.preprocess = PreprocessConfig.from_json(payload["preprocess"])
    history = TrainingHistory.from_json(payload["history"]) if payload.get("history") else None
    return model, history


def write_history_csv(history: TrainingHistory, path: str | os.PathLike) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(HISTORY_FIELDS)
        for r in history.records:
            writer.writerow([r.epoch] + [repr(float(getattr(r, f))) for f in HISTORY_FIELDS[1:]])
    return path


def read_history_csv(path: str | os.PathLike) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochRecord(int(row["epoch"]), *(float(row[f]) for f in HISTORY_FIELDS[1:]))
            for row in reader
        ]


def export_curves(history: TrainingHistory, out_dir: str | os.PathLike, stem: str = "history") -> tuple[Path, Path]:
    """Write ``<stem>.csv`` (authoritative) and a four-series ``<stem>.png`` plot."""
    if not history.records:
        raise ExportError("cannot export an empty training history")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = write_history_csv(history, out_dir / f"{stem}.csv")

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    epochs = [r.epoch for r in history.records]
    fig, ax = plt.subplots(figsize=(8, 5))
    ax.plot(epochs, [r.train_loss for r in history.records], label="train_loss")
    ax.plot(epochs, [r.val_loss for r in history.records], label="val_loss")
    ax.plot(epochs, [r.train_accuracy for r in history.records], label="train_acc")
    ax.plot(epochs, [r.val_accuracy for r in history.records], label="val_acc")
    ax.set_title("Training Loss and Accuracy")
    ax.set_xlabel("Epoch #")
    ax.set_ylabel("Loss/Accuracy")
    ax.legend(loc="best")
    png_path = out_dir / f"{stem}.png"
    fig.savefig(png_path, metadata={"Software": None})
    plt.close(fig)
    return png_path, csv_path


def smoothed(values: Sequence[float], window: int = 3) -> np.ndarray:
    """Trailing moving average; the first ``window - 1`` points average what exists."""
    v = np.asarray(values, dtype=np.float64)
    out = np.empty_like(v)
    for i in range(len(v)):
        out[i] = v[max(0, i - window + 1) : i + 1].mean()
    return out


def build_classifier(
    backbone_spec: BackboneSpec, head_spec: HeadSpec, preprocess: PreprocessConfig | None = None
) -> ClassifierModel:
    """load_backbone -> attach_head -> freeze_backbone in one call."""
    model = freeze_backbone(attach_head(load_backbone(backbone_spec), head_spec, backbone_spec))
    model.preprocess = preprocess or PreprocessConfig()
    return model

