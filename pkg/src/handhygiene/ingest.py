"""Session video -> labelled frame corpus.

Each session video holds the six rubbing stages in WHO order, separated by
pauses in which the participant moves their hands out of view.  Pauses are
found from frame-to-frame motion, the activity bursts between them are
labelled in stage order, and the frames are written out as a class-per-directory
corpus with a CSV manifest.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import cv2
import numpy as np

from .errors import IngestError, LabelingError, ManifestError
from .labels import STAGE_ORDER, GestureLabel

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.csv"
SIDECAR_NAME = "sessions.json"
MANIFEST_FIELDS = ["path", "session", "index", "timestamp_s", "label"]

DEFAULT_ACTIVITY_THRESHOLD = 0.02


@dataclass(frozen=True)
class SessionVideo:
    path: Path
    participant_id: str
    fps: float
    duration_s: float
    frame_count: int = 0

    def __post_init__(self):
        if not self.fps > 0:
            raise IngestError(f"{self.path}: fps must be positive, got {self.fps}")
        if self.duration_s < 0:
            raise IngestError(f"{self.path}: negative duration")


@dataclass
class FrameRecord:
    session: str
    index: int
    timestamp_s: float
    image: np.ndarray  # HxWx3 uint8, RGB
    label: GestureLabel | None = None


@dataclass(frozen=True)
class SegmentBoundary:
    start_index: int
    end_index: int  # inclusive
    kind: str  # "activity" | "pause"

    def __post_init__(self):
        if self.start_index > self.end_index:
            raise ValueError("segment start after end")
        if self.kind not in ("activity", "pause"):
            raise ValueError(f"bad segment kind {self.kind!r}")

    def __len__(self) -> int:
        return self.end_index - self.start_index + 1


@dataclass(frozen=True)
class ManifestRow:
    path: str
    session: str
    index: int
    timestamp_s: float
    label: GestureLabel


@dataclass
class Manifest:
    root: Path
    rows: list[ManifestRow]
    frame_size: tuple[int, int] | None = None  # (width, height)
    sessions: dict = field(default_factory=dict)

    @property
    def counts(self) -> dict[GestureLabel, int]:
        counts = {label: 0 for label in STAGE_ORDER}
        for row in self.rows:
            counts[row.label] += 1
        return counts

    def by_label(self) -> dict[GestureLabel, list[ManifestRow]]:
        out: dict[GestureLabel, list[ManifestRow]] = {label: [] for label in STAGE_ORDER}
        for row in self.rows:
            out[row.label].append(row)
        return out


def expected_frame_count(duration_s: float, fps: float, sample_every: int = 1) -> int:
    return math.floor(math.floor(duration_s * fps + 1e-9) / sample_every)


def probe_video(path: str | os.PathLike, participant_id: str | None = None) -> SessionVideo:
    path = Path(path)
    cap = cv2.VideoCapture(str(path))
    try:
        if not path.is_file() or not cap.isOpened():
            raise IngestError(f"cannot decode video container: {path}")
        fps = float(cap.get(cv2.CAP_PROP_FPS))
        n = int(cap.get(cv2.CAP_PROP_FRAME_COUNT))
    finally:
        cap.release()
    if not fps > 0:
        raise IngestError(f"{path}: container reports no frame rate")
    n = max(n, 0)
    return SessionVideo(
        path=path,
        participant_id=participant_id or path.stem,
        fps=fps,
        duration_s=n / fps,
        frame_count=n,
    )


def iter_frames(video: SessionVideo, sample_every: int = 1) -> Iterator[FrameRecord]:
    """Yield every ``sample_every``-th decoded frame.

    The trailing partial group is dropped so that exactly
    ``floor(total / sample_every)`` frames come out.
    """
    if sample_every < 1:
        raise IngestError("sample_every must be >= 1")
    cap = cv2.VideoCapture(str(video.path))
    if not cap.isOpened():
        cap.release()
        raise IngestError(f"cannot decode video container: {video.path}")
    try:
        index = 0
        pending: FrameRecord | None = None
        while True:
            ok, bgr = cap.read()
            if not ok:
                break
            if index % sample_every == 0:
                pending = FrameRecord(
                    session=video.participant_id,
                    index=index,
                    timestamp_s=index / video.fps,
                    image=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB),
                )
            if (index + 1) % sample_every == 0 and pending is not None:
                yield pending
                pending = None
            index += 1
    finally:
        cap.release()


def extract_frames(video: SessionVideo, sample_every: int = 1) -> list[FrameRecord]:
    return list(iter_frames(video, sample_every))


def activity_scores(frames: Sequence[FrameRecord] | Sequence[np.ndarray]) -> np.ndarray:
    """Per-frame motion score in [0, 1].

    A frame's score is the smaller of its mean absolute difference to the
    previous and to the next frame, so the first and last frames of a static
    run both read as static.
    """
    images = [f.image if isinstance(f, FrameRecord) else f for f in frames]
    n = len(images)
    if n < 2:
        return np.zeros(n)
    diffs = np.empty(n - 1)
    prev = images[0].astype(np.int16)
    for i in range(1, n):
        cur = images[i].astype(np.int16)
        diffs[i - 1] = np.abs(cur - prev).mean() / 255.0
        prev = cur
    scores = np.empty(n)
    scores[0] = diffs[0]
    scores[-1] = diffs[-1]
    scores[1:-1] = np.minimum(diffs[:-1], diffs[1:])
    return scores


def segment_scores(
    scores: np.ndarray, activity_threshold: float, min_pause_frames: int
) -> list[SegmentBoundary]:
    n = len(scores)
    if n == 0:
        return []
    if n < 2:
        return [SegmentBoundary(0, n - 1, "activity")]
    still = np.asarray(scores) < activity_threshold
    kinds = np.full(n, "activity", dtype=object)
    i = 0
    while i < n:
        if not still[i]:
            i += 1
            continue
        j = i
        while j + 1 < n and still[j + 1]:
            j += 1
        if j - i + 1 >= max(1, min_pause_frames):
            kinds[i : j + 1] = "pause"
        i = j + 1
    segments = []
    start = 0
    for k in range(1, n + 1):
        if k == n or kinds[k] != kinds[start]:
            segments.append(SegmentBoundary(start, k - 1, str(kinds[start])))
            start = k
    return segments


def detect_pauses(
    frames: Sequence[FrameRecord],
    activity_threshold: float = DEFAULT_ACTIVITY_THRESHOLD,
    min_pause_frames: int = 15,
) -> list[SegmentBoundary]:
    """Split a session into alternating activity and pause segments.

    Segment indices are positions in ``frames``; they tile ``[0, len(frames))``.
    """
    if len(frames) == 0:
        raise IngestError("detect_pauses needs at least one frame")
    sessions = {f.session for f in frames if isinstance(f, FrameRecord)}
    if len(sessions) > 1:
        raise IngestError(f"frames from several sessions: {sorted(sessions)}")
    return segment_scores(activity_scores(frames), activity_threshold, min_pause_frames)


def assign_labels(
    segments: Sequence[SegmentBoundary],
    expected_order: Sequence[GestureLabel] = STAGE_ORDER,
    session: str | None = None,
) -> list[tuple[SegmentBoundary, GestureLabel | None]]:
    activity = [s for s in segments if s.kind == "activity"]
    if len(activity) != len(expected_order):
        raise LabelingError(len(activity), session)
    labels = iter(expected_order)
    return [(s, next(labels) if s.kind == "activity" else None) for s in segments]


def label_frames(
    frames: Sequence[FrameRecord],
    labelled_segments: Sequence[tuple[SegmentBoundary, GestureLabel | None]],
) -> list[FrameRecord]:
    """Attach segment labels to frames; pause frames are dropped."""
    out = []
    for seg, label in labelled_segments:
        if label is None:
            continue
        for frame in frames[seg.start_index : seg.end_index + 1]:
            frame.label = label
            out.append(frame)
    return out


def frame_filename(session: str, index: int) -> str:
    return f"{session}_{index}.png"


def _check_frames(frames: Sequence[FrameRecord], seen: set, size: tuple[int, int] | None):
    for frame in frames:
        if frame.label is None:
            raise ManifestError(f"frame {frame.session}:{frame.index} has no label")
        key = (frame.session, frame.index)
        if key in seen:
            raise ManifestError(f"duplicate frame {frame.session}:{frame.index}")
        seen.add(key)
        h, w = frame.image.shape[:2]
        if size is None:
            size = (w, h)
        elif size != (w, h):
            raise ManifestError(
                f"frame {frame.session}:{frame.index} is {w}x{h}, corpus is {size[0]}x{size[1]}"
            )
    return size


def write_frame_files(frames: Sequence[FrameRecord], out_dir: str | os.PathLike) -> list[ManifestRow]:
    """Write labelled frames as lossless PNGs under ``out_dir/<class>/``."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        for label in {f.label for f in frames}:
            (out_dir / label.slug).mkdir(exist_ok=True)
    except OSError as exc:
        raise IngestError(f"cannot create corpus directory {out_dir}: {exc}") from exc
    rows = []
    for frame in frames:
        rel = f"{frame.label.slug}/{frame_filename(frame.session, frame.index)}"
        target = out_dir / rel
        if not cv2.imwrite(str(target), cv2.cvtColor(frame.image, cv2.COLOR_RGB2BGR)):
            raise IngestError(f"failed to write {target}")
        rows.append(ManifestRow(rel, frame.session, frame.index, frame.timestamp_s, frame.label))
    return rows


class ManifestWriter:
    """Accumulates frames session by session, then writes the manifest once."""

    def __init__(self, out_dir: str | os.PathLike):
        self.out_dir = Path(out_dir)
        self.rows: list[ManifestRow] = []
        self.sessions: dict = {}
        self._seen: set[tuple[str, int]] = set()
        self._size: tuple[int, int] | None = None

    def add(self, frames: Sequence[FrameRecord], session_meta: dict | None = None, session: str | None = None):
        self._size = _check_frames(frames, self._seen, self._size)
        self.rows.extend(write_frame_files(frames, self.out_dir))
        if session is not None:
            self.sessions[session] = session_meta or {}

    def finish(self) -> Manifest:
        rows = sorted(self.rows, key=lambda r: (r.label.who_stage, r.session, r.index))
        self.out_dir.mkdir(parents=True, exist_ok=True)
        manifest = Manifest(root=self.out_dir, rows=rows, frame_size=self._size, sessions=self.sessions)
        write_manifest(manifest)
        return manifest


def build_manifest(
    labeled_frames: Sequence[FrameRecord],
    out_dir: str | os.PathLike,
    sessions: dict | None = None,
) -> Manifest:
    writer = ManifestWriter(out_dir)
    writer.add(labeled_frames)
    writer.sessions = dict(sessions or {})
    return writer.finish()


def write_manifest(manifest: Manifest) -> None:
    path = manifest.root / MANIFEST_NAME
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for row in manifest.rows:
            writer.writerow([row.path, row.session, row.index, repr(row.timestamp_s), row.label.value])
    sidecar = {
        "frame_size": list(manifest.frame_size) if manifest.frame_size else None,
        "counts": {label.value: n for label, n in manifest.counts.items()},
        "sessions": manifest.sessions,
    }
    with open(manifest.root / SIDECAR_NAME, "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_manifest(path: str | os.PathLike) -> Manifest:
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    if not path.is_file():
        raise ManifestError(f"manifest not found: {path}")
    rows = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != MANIFEST_FIELDS:
            raise ManifestError(f"{path}: unexpected header {reader.fieldnames}")
        for rec in reader:
            rows.append(
                ManifestRow(
                    path=rec["path"],
                    session=rec["session"],
                    index=int(rec["index"]),
                    timestamp_s=float(rec["timestamp_s"]),
                    label=GestureLabel.parse(rec["label"]),
                )
            )
    sidecar_path = path.parent / SIDECAR_NAME
    size, sessions = None, {}
    if sidecar_path.is_file():
        with open(sidecar_path) as fh:
            meta = json.load(fh)
        size = tuple(meta["frame_size"]) if meta.get("frame_size") else None
        sessions = meta.get("sessions", {})
    return Manifest(root=path.parent, rows=rows, frame_size=size, sessions=sessions)


def load_frames(manifest: Manifest) -> list[FrameRecord]:
    frames = []
    for row in manifest.rows:
        bgr = cv2.imread(str(manifest.root / row.path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise ManifestError(f"missing or unreadable frame {row.path}")
        frames.append(
            FrameRecord(row.session, row.index, row.timestamp_s, cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), row.label)
        )
    return frames


def manifest_from_class_dirs(image_root: str | os.PathLike, out_dir: str | os.PathLike) -> Manifest:
    """Index an existing class-per-directory image corpus.

    Used when the frames were already cut from the session videos (as in the
    published dataset).  Directory names may be any form accepted by
    :meth:`GestureLabel.parse`.  Images are copied losslessly into ``out_dir``.
    """
    image_root = Path(image_root)
    frames = []
    for class_dir in sorted(p for p in image_root.iterdir() if p.is_dir()):
        try:
            label = GestureLabel.parse(class_dir.name)
        except ValueError:
            log.warning("skipping unrecognised class directory %s", class_dir)
            continue
        for i, img_path in enumerate(sorted(class_dir.iterdir())):
            bgr = cv2.imread(str(img_path), cv2.IMREAD_COLOR)
            if bgr is None:
                continue
            frames.append(
                FrameRecord(
                    session=img_path.stem.replace(",", "_"),
                    index=i,
                    timestamp_s=0.0,
                    image=cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB),
                    label=label,
                )
            )
    if not frames:
        raise IngestError(f"no labelled images under {image_root}")
    return build_manifest(frames, out_dir)


@dataclass
class SessionResult:
    session: str
    status: str  # "labelled" | "rejected"
    frames: int
    fps: float
    segments: list[SegmentBoundary]
    activity_segments: int
    reason: str = ""

    def to_json(self) -> dict:
        return {
            "status": self.status,
            "frames": self.frames,
            "fps": self.fps,
            "activity_segments": self.activity_segments,
            "segments": [[s.start_index, s.end_index, s.kind] for s in self.segments],
            "reason": self.reason,
        }


def ingest_session(
    video: SessionVideo,
    sample_every: int = 1,
    activity_threshold: float = DEFAULT_ACTIVITY_THRESHOLD,
    min_pause_frames: int | None = None,
) -> tuple[list[FrameRecord], SessionResult]:
    """Extract, segment and label one session.

    A session whose burst count is not six is returned as ``rejected`` with no
    frames, never truncated.
    """
    frames = extract_frames(video, sample_every)
    if min_pause_frames is None:
        min_pause_frames = max(1, round(video.fps / 2 / sample_every))
    if not frames:
        return [], SessionResult(video.participant_id, "rejected", 0, video.fps, [], 0, "no frames decoded")
    segments = detect_pauses(frames, activity_threshold, min_pause_frames)
    n_activity = sum(s.kind == "activity" for s in segments)
    try:
        labelled = assign_labels(segments, STAGE_ORDER, video.participant_id)
    except LabelingError as exc:
        log.warning("%s", exc)
        return [], SessionResult(
            video.participant_id, "rejected", len(frames), video.fps, segments, n_activity, str(exc)
        )
    kept = label_frames(frames, labelled)
    return kept, SessionResult(video.participant_id, "labelled", len(frames), video.fps, segments, n_activity)
