"""Per-frame video inference with rolling-average smoothing."""
from __future__ import annotations

import csv
import os
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .errors import ConfigError, ExportError
from .ingest import SessionVideo, iter_frames
from .labels import GestureLabel, parse_labels
from .model import ClassifierModel, forward
from .prep import PreprocessConfig, preprocess_frame

DEFAULT_WINDOW = 30


class RollingWindow:
    """Fixed-capacity FIFO of probability vectors."""

    def __init__(self, capacity: int = DEFAULT_WINDOW):
        if capacity < 1:
            raise ConfigError(f"window capacity must be >= 1, got {capacity}")
        self.capacity = capacity
        self.buffer: deque[np.ndarray] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self.buffer)

    def push(self, probs) -> np.ndarray:
        """Insert ``probs`` (evicting the oldest at capacity) and return the window mean."""
        self.buffer.append(np.asarray(probs, dtype=np.float64))
        return self.mean()

    def mean(self) -> np.ndarray:
        return np.mean(np.stack(self.buffer), axis=0)

    def clear(self) -> None:
        self.buffer.clear()


@dataclass(frozen=True)
class PredictionEvent:
    frame_index: int
    timestamp_s: float
    raw_probs: np.ndarray
    smoothed_probs: np.ndarray
    label: GestureLabel
    confidence: float


def _class_order(model: ClassifierModel, class_order=None) -> list[GestureLabel]:
    order = class_order or model.class_order
    if not order:
        raise ConfigError("model carries no class order; pass class_order explicitly")
    order = parse_labels(order)
    if len(order) != model.num_classes:
        raise ConfigError(f"class order has {len(order)} labels, model outputs {model.num_classes}")
    return order


def predict_frame(model: ClassifierModel, frame: np.ndarray, config: PreprocessConfig | None = None) -> np.ndarray:
    """Raw class probabilities for one RGB frame."""
    config = config or model.preprocess or PreprocessConfig()
    return forward(model, preprocess_frame(frame, config)[None])[0]


def smooth_stream(
    raw: Iterable[tuple[int, float, np.ndarray]],
    window: RollingWindow,
    class_order: Sequence[GestureLabel],
) -> Iterator[PredictionEvent]:
    """Turn (frame_index, timestamp, raw_probs) triples into smoothed events."""
    for index, ts, probs in raw:
        probs = np.asarray(probs, dtype=np.float64)
        smooth = window.push(probs)
        k = int(np.argmax(smooth))  # first maximum wins ties
        yield PredictionEvent(index, ts, probs, smooth, class_order[k], float(smooth[k]))


def _raw_probabilities(
    video: SessionVideo, model: ClassifierModel, config: PreprocessConfig, batch_size: int, sample_every: int
) -> Iterator[tuple[int, float, np.ndarray]]:
    batch, meta = [], []
    for frame in iter_frames(video, sample_every):
        batch.append(preprocess_frame(frame.image, config))
        meta.append((frame.index, frame.timestamp_s))
        if len(batch) == batch_size:
            for (index, ts), probs in zip(meta, forward(model, np.stack(batch))):
                yield index, ts, probs
            batch, meta = [], []
    if batch:
        for (index, ts), probs in zip(meta, forward(model, np.stack(batch))):
            yield index, ts, probs


def rolling_predict(
    video: SessionVideo,
    model: ClassifierModel,
    window: RollingWindow | None = None,
    class_order: Sequence[GestureLabel] | None = None,
    batch_size: int = 16,
    sample_every: int = 1,
) -> list[PredictionEvent]:
    """One event per decoded frame; decode errors propagate as IngestError."""
    window = window if window is not None else RollingWindow()
    order = _class_order(model, class_order)
    config = model.preprocess or PreprocessConfig()
    raw = _raw_probabilities(video, model, config, batch_size, sample_every)
    return list(smooth_stream(raw, window, order))


def prediction_fields(class_order: Sequence[GestureLabel]) -> list[str]:
    return (
        ["frame_index", "timestamp_s", "label", "confidence"]
        + [f"raw_{c.slug}" for c in class_order]
        + [f"smoothed_{c.slug}" for c in class_order]
    )


def export_predictions(
    events: Sequence[PredictionEvent], path: str | os.PathLike, class_order: Sequence[GestureLabel]
) -> Path:
    if not events:
        raise ExportError("no prediction events to export")
    path = Path(path)
    try:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(prediction_fields(class_order))
            for e in events:
                writer.writerow(
                    [e.frame_index, repr(float(e.timestamp_s)), e.label.value, repr(e.confidence)]
                    + [repr(float(v)) for v in e.raw_probs]
                    + [repr(float(v)) for v in e.smoothed_probs]
                )
    except OSError as exc:
        raise ExportError(f"cannot write predictions to {path}: {exc}") from exc
    return path


def read_predictions(path: str | os.PathLike) -> list[dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    for row in rows:
        row["frame_index"] = int(row["frame_index"])
        row["label"] = GestureLabel.parse(row["label"])
        for key in list(row):
            if key not in ("frame_index", "label"):
                row[key] = float(row[key])
    return rows
