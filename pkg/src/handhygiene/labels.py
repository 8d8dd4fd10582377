"""The six WHO hand-rubbing stages used as classification targets."""
from __future__ import annotations

import enum


class GestureLabel(enum.Enum):
    PALM_TO_PALM = "Rub hands Palm to Palm"
    FINGERS_INTERLACED = "Fingers Interlaced"
    P2P_FINGERS_INTERLACED = "P2PFingersInterlaced"
    FINGERS_INTERLOCKED = "Fingers Interlocked"
    THUMB_RUB = "Thumb Rub"
    ROTATIONAL_RUB = "Rotational Rub"

    @property
    def who_stage(self) -> int:
        return _STAGES[self]

    @property
    def slug(self) -> str:
        """Filesystem-safe name used for class directories and CSV columns."""
        return self.name.lower()

    @classmethod
    def parse(cls, text: str) -> "GestureLabel":
        """Accept a display name, enum name, slug or WHO stage number."""
        key = str(text).strip()
        for member in cls:
            if key in (member.value, member.name, member.slug, str(member.who_stage)):
                return member
        lowered = key.lower()
        for member in cls:
            if lowered == member.value.lower():
                return member
        raise ValueError(f"unknown gesture label: {text!r}")

    @classmethod
    def from_stage(cls, stage: int) -> "GestureLabel":
        for member, s in _STAGES.items():
            if s == stage:
                return member
        raise ValueError(f"no gesture for WHO stage {stage}")


_STAGES = {
    GestureLabel.PALM_TO_PALM: 2,
    GestureLabel.FINGERS_INTERLACED: 3,
    GestureLabel.P2P_FINGERS_INTERLACED: 4,
    GestureLabel.FINGERS_INTERLOCKED: 5,
    GestureLabel.THUMB_RUB: 6,
    GestureLabel.ROTATIONAL_RUB: 7,
}

# Order in which the stages are performed within one session video.
STAGE_ORDER: list[GestureLabel] = sorted(GestureLabel, key=lambda g: g.who_stage)

SET_1: list[GestureLabel] = [
    GestureLabel.FINGERS_INTERLACED,
    GestureLabel.P2P_FINGERS_INTERLACED,
    GestureLabel.ROTATIONAL_RUB,
]
SET_2: list[GestureLabel] = [
    GestureLabel.PALM_TO_PALM,
    GestureLabel.FINGERS_INTERLOCKED,
    GestureLabel.THUMB_RUB,
]

# Images per class in the published 30-participant corpus.
PUBLISHED_CLASS_COUNTS: dict[GestureLabel, int] = {
    GestureLabel.PALM_TO_PALM: 2042,
    GestureLabel.FINGERS_INTERLOCKED: 1839,
    GestureLabel.THUMB_RUB: 2019,
    GestureLabel.P2P_FINGERS_INTERLACED: 2149,
    GestureLabel.FINGERS_INTERLACED: 2043,
    GestureLabel.ROTATIONAL_RUB: 1834,
}

# Frame rate of the published session recordings.
RECORDING_FPS = 29.84


def parse_labels(items) -> list[GestureLabel]:
    return [item if isinstance(item, GestureLabel) else GestureLabel.parse(item) for item in items]
