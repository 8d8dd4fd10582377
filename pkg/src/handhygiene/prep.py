"""Class balancing, stratified splitting and frame preprocessing."""
from __future__ import annotations

import json
import os
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

from .errors import ConfigError, EncodingError, PreprocessError, SplitError
from .ingest import Manifest
from .labels import GestureLabel, parse_labels

SPLIT_NAME = "split.json"

# Per-channel RGB means of the ImageNet training set on a 0-255 scale.
IMAGENET_MEANS = (123.675, 116.28, 103.53)


@dataclass
class ClassCorpus:
    entries: dict[GestureLabel, list[str]]

    def __post_init__(self):
        seen: dict[str, GestureLabel] = {}
        for label, refs in self.entries.items():
            for ref in refs:
                if ref in seen:
                    raise SplitError(f"{ref} appears under {seen[ref].value} and {label.value}")
                seen[ref] = label

    @property
    def counts(self) -> dict[GestureLabel, int]:
        return {label: len(refs) for label, refs in self.entries.items()}

    @property
    def labels(self) -> list[GestureLabel]:
        return list(self.entries)

    def total(self) -> int:
        return sum(self.counts.values())

    def items(self) -> list[tuple[str, GestureLabel]]:
        return [(ref, label) for label, refs in self.entries.items() for ref in refs]

    def subset(self, labels: Sequence[GestureLabel]) -> "ClassCorpus":
        return ClassCorpus({label: list(self.entries.get(label, [])) for label in labels})


@dataclass(frozen=True)
class SplitSpec:
    val_fraction: float = 0.25
    seed: int = 0
    rounding: str = "half-up"

    def __post_init__(self):
        if not 0 < self.val_fraction < 1:
            raise ConfigError(f"val_fraction must lie in (0, 1), got {self.val_fraction}")
        if self.rounding != "half-up":
            raise ConfigError(f"unsupported rounding {self.rounding!r}")


@dataclass(frozen=True)
class PreprocessConfig:
    target_size: tuple[int, int] = (224, 224)
    channel_means: tuple[float, float, float] = IMAGENET_MEANS
    scale: float = 1.0

    def to_json(self) -> dict:
        return {
            "target_size": list(self.target_size),
            "channel_means": list(self.channel_means),
            "scale": self.scale,
        }

    @classmethod
    def from_json(cls, data: dict) -> "PreprocessConfig":
        return cls(
            target_size=tuple(int(v) for v in data.get("target_size", (224, 224))),
            channel_means=tuple(float(v) for v in data.get("channel_means", IMAGENET_MEANS)),
            scale=float(data.get("scale", 1.0)),
        )


def corpus_from_manifest(manifest: Manifest, labels: Sequence[GestureLabel] | None = None) -> ClassCorpus:
    by_label = manifest.by_label()
    labels = list(labels) if labels is not None else [l for l, rows in by_label.items() if rows]
    return ClassCorpus({label: [row.path for row in by_label[label]] for label in labels})


def _rng(seed: int, label: GestureLabel) -> np.random.Generator:
    return np.random.default_rng([seed, label.who_stage])


def balance_classes(corpus: ClassCorpus, tolerance: float = 0.2, seed: int = 0) -> ClassCorpus:
    """Undersample classes larger than ``(1 + tolerance)`` times the smallest one."""
    if tolerance < 0:
        raise ConfigError(f"tolerance must be >= 0, got {tolerance}")
    counts = corpus.counts
    if not counts or min(counts.values()) == 0:
        raise ConfigError("every class needs at least one frame to balance")
    cap = int(Decimal(min(counts.values())) * (1 + Decimal(str(tolerance))))
    out = {}
    for label, refs in corpus.entries.items():
        if len(refs) <= cap:
            out[label] = list(refs)
        else:
            keep = np.sort(_rng(seed, label).choice(len(refs), size=cap, replace=False))
            out[label] = [refs[i] for i in keep]
    return ClassCorpus(out)


def round_half_up(x: Decimal | float) -> int:
    return int(Decimal(str(x)).quantize(Decimal(1), rounding=ROUND_HALF_UP))


def validation_size(count: int, val_fraction: float) -> int:
    return round_half_up(Decimal(count) * Decimal(str(val_fraction)))


def stratified_split(corpus: ClassCorpus, spec: SplitSpec) -> tuple[ClassCorpus, ClassCorpus]:
    train, val = {}, {}
    for label, refs in corpus.entries.items():
        n = len(refs)
        n_val = validation_size(n, spec.val_fraction)
        if n_val == 0 or n_val == n:
            raise SplitError(
                f"{label.value}: {n} frames at val_fraction {spec.val_fraction} leaves an empty split"
            )
        order = _rng(spec.seed, label).permutation(n)
        val_idx = np.sort(order[:n_val])
        train_idx = np.sort(order[n_val:])
        val[label] = [refs[i] for i in val_idx]
        train[label] = [refs[i] for i in train_idx]
    return ClassCorpus(train), ClassCorpus(val)


def write_split(
    path: str | os.PathLike,
    train: ClassCorpus,
    val: ClassCorpus,
    spec: SplitSpec,
    class_order: Sequence[GestureLabel],
    extra: dict | None = None,
) -> Path:
    path = Path(path)
    doc = {
        "seed": spec.seed,
        "val_fraction": spec.val_fraction,
        "rounding": spec.rounding,
        "class_order": [label.value for label in class_order],
        "train": {label.value: refs for label, refs in train.entries.items()},
        "val": {label.value: refs for label, refs in val.entries.items()},
    }
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1)
        fh.write("\n")
    return path


def read_split(path: str | os.PathLike) -> tuple[ClassCorpus, ClassCorpus, SplitSpec, list[GestureLabel]]:
    with open(path) as fh:
        doc = json.load(fh)
    spec = SplitSpec(val_fraction=doc["val_fraction"], seed=doc["seed"], rounding=doc.get("rounding", "half-up"))

    def corpus(part):
        return ClassCorpus({GestureLabel.parse(k): list(v) for k, v in doc[part].items()})

    return corpus("train"), corpus("val"), spec, parse_labels(doc["class_order"])


def preprocess_frame(image: np.ndarray, config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    """Bilinear resize, subtract channel means, scale.  Returns float32 HxWx3."""
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise PreprocessError(f"expected an HxWx3 image, got shape {image.shape}")
    h, w = config.target_size
    img = image.astype(np.float32)
    if img.shape[:2] != (h, w):
        img = cv2.resize(img, (w, h), interpolation=cv2.INTER_LINEAR)
    out = (img - np.asarray(config.channel_means, np.float32)) * np.float32(config.scale)
    if not np.isfinite(out).all():
        raise PreprocessError("non-finite values after preprocessing")
    return out


def preprocess_batch(images: Sequence[np.ndarray], config: PreprocessConfig = PreprocessConfig()) -> np.ndarray:
    h, w = config.target_size
    if len(images) == 0:
        return np.zeros((0, h, w, 3), np.float32)
    return np.stack([preprocess_frame(img, config) for img in images])


def encode_labels(labels: Sequence[GestureLabel], class_order: Sequence[GestureLabel]) -> np.ndarray:
    index = {label: i for i, label in enumerate(class_order)}
    out = np.zeros((len(labels), len(class_order)), np.float64)
    for row, label in enumerate(labels):
        if label not in index:
            raise EncodingError(f"label {label!r} is not in the class order")
        out[row, index[label]] = 1.0
    return out


def decode_labels(onehot: np.ndarray, class_order: Sequence[GestureLabel]) -> list[GestureLabel]:
    return [class_order[i] for i in np.argmax(onehot, axis=1)]
