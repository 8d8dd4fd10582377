"""Deterministic synthetic data for desk-scale runs and tests."""
from __future__ import annotations

import os
from pathlib import Path

import cv2
import numpy as np

from .labels import STAGE_ORDER, GestureLabel, RECORDING_FPS

FRAME_W, FRAME_H = 320, 240

# One RGB tint per stage; the moving texture inside a burst is tinted with it.
STAGE_COLOURS: dict[GestureLabel, tuple[int, int, int]] = {
    GestureLabel.PALM_TO_PALM: (220, 40, 40),
    GestureLabel.FINGERS_INTERLACED: (40, 220, 40),
    GestureLabel.P2P_FINGERS_INTERLACED: (40, 40, 220),
    GestureLabel.FINGERS_INTERLOCKED: (220, 220, 40),
    GestureLabel.THUMB_RUB: (220, 40, 220),
    GestureLabel.ROTATIONAL_RUB: (40, 220, 220),
}


def background(width: int = FRAME_W, height: int = FRAME_H) -> np.ndarray:
    """Static sink-and-sheet backdrop shared by every session."""
    img = np.empty((height, width, 3), np.uint8)
    img[...] = (30, 110, 60)
    img[height * 3 // 4 :, :] = (150, 150, 150)
    return img


def activity_frame(
    label: GestureLabel, t: int, width: int = FRAME_W, height: int = FRAME_H
) -> np.ndarray:
    """Background plus a tinted stripe texture whose phase advances with ``t``."""
    img = background(width, height)
    y0, y1 = height // 4, height * 3 // 4
    x0, x1 = width // 4, width * 3 // 4
    xs = np.arange(x1 - x0)[None, :]
    ys = np.arange(y1 - y0)[:, None]
    period = 16 + 2 * label.who_stage
    wave = ((xs + ys + 5 * t) % period) < period // 2
    tint = np.array(STAGE_COLOURS[label], np.uint8)
    patch = np.where(wave[..., None], tint, tint // 4)
    img[y0:y1, x0:x1] = patch
    return img


def session_frames(
    bursts: int = 6,
    burst_frames: int = 24,
    pause_frames: int = 20,
    lead_pause: int = 20,
    width: int = FRAME_W,
    height: int = FRAME_H,
) -> list[np.ndarray]:
    """RGB frames of a session: ``bursts`` stage bursts separated by static pauses."""
    frames = [background(width, height) for _ in range(lead_pause)]
    stages = [STAGE_ORDER[k % len(STAGE_ORDER)] for k in range(bursts)]
    for k, label in enumerate(stages):
        frames.extend(activity_frame(label, t, width, height) for t in range(burst_frames))
        if k < bursts - 1:
            frames.extend(background(width, height) for _ in range(pause_frames))
    frames.extend(background(width, height) for _ in range(lead_pause))
    return frames


def write_video(
    frames: list[np.ndarray], path: str | os.PathLike, fps: float = RECORDING_FPS, codec: str | None = None
) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if codec is None:
        codec = "mp4v" if path.suffix.lower() == ".mp4" else "FFV1"
    if frames:
        h, w = frames[0].shape[:2]
    else:
        w, h = FRAME_W, FRAME_H
    writer = cv2.VideoWriter(str(path), cv2.VideoWriter_fourcc(*codec), fps, (w, h))
    if not writer.isOpened():
        raise RuntimeError(f"cannot open video writer for {path}")
    for frame in frames:
        writer.write(cv2.cvtColor(frame, cv2.COLOR_RGB2BGR))
    writer.release()
    return path


def write_session(path: str | os.PathLike, bursts: int = 6, fps: float = RECORDING_FPS, **kwargs) -> Path:
    return write_video(session_frames(bursts=bursts, **kwargs), path, fps=fps)


def solid_colour_images(
    per_class: int,
    colours: list[tuple[int, int, int]] | None = None,
    size: tuple[int, int] = (FRAME_W, FRAME_H),
    jitter: int = 12,
    seed: int = 0,
) -> tuple[list[np.ndarray], list[int]]:
    """Linearly separable image fixture: one base colour per class plus noise.

    Returns images (RGB uint8, ``size`` = (width, height)) and integer class ids,
    interleaved by class.
    """
    colours = colours or [(200, 40, 40), (40, 200, 40), (40, 40, 200)]
    rng = np.random.default_rng(seed)
    w, h = size
    images, targets = [], []
    for i in range(per_class):
        for c, colour in enumerate(colours):
            base = np.array(colour, np.int16) + rng.integers(-jitter, jitter + 1, 3)
            noise = rng.integers(-jitter, jitter + 1, (h, w, 3))
            images.append(np.clip(base + noise, 0, 255).astype(np.uint8))
            targets.append(c)
    return images, targets
