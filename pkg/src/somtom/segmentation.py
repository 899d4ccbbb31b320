"""Shot-consistent clip splitting and text-video similarity filtering.

Cuts come from a content-change score: the mean absolute difference of
16x16 downsampled luma between consecutive frames. Similarity scores are
computed by an external scorer and only ingested here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import cv2
import numpy as np

from .errors import ValidationError
from .tracking import FrameSequence

DEFAULT_THRESHOLD = 27.0
DEFAULT_MIN_LEN = 12
SIMILARITY_THRESHOLD = 0.25
_THUMB = 16


@dataclass(frozen=True)
class Segment:
    video_id: str
    start_frame: int
    end_frame: int
    text: str = ""

    def __post_init__(self):
        if not self.start_frame < self.end_frame:
            raise ValidationError(
                f"segment of {self.video_id}: start {self.start_frame} must be < end {self.end_frame}"
            )
        if self.start_frame < 0:
            raise ValidationError("segment start must be non-negative")

    def to_json(self) -> dict:
        return {"video": self.video_id, "start": self.start_frame, "end": self.end_frame, "text": self.text}

    @classmethod
    def from_json(cls, data: dict) -> Segment:
        return cls(str(data["video"]), int(data["start"]), int(data["end"]), str(data.get("text", "")))


@dataclass(frozen=True)
class Clip:
    """Frames ``[start_frame, end_frame)`` of a segment with no detected cut."""

    segment: Segment
    start_frame: int
    end_frame: int
    shot_scores: tuple[float, ...] = field(default=(), compare=False)

    @property
    def clip_id(self) -> str:
        return f"{self.segment.video_id}:{self.start_frame}-{self.end_frame}"

    def __len__(self) -> int:
        return self.end_frame - self.start_frame

    def to_json(self) -> dict:
        out = self.segment.to_json()
        out.update(
            clip=self.clip_id,
            clip_start=self.start_frame,
            clip_end=self.end_frame,
            shot_scores=[round(float(s), 6) for s in self.shot_scores],
        )
        return out


def thumbnail(frame: np.ndarray) -> np.ndarray:
    return cv2.resize(frame, (_THUMB, _THUMB), interpolation=cv2.INTER_AREA).astype(np.float64)


def split_by_scores(
    scores: Sequence[float],
    start: int,
    end: int,
    threshold: float = DEFAULT_THRESHOLD,
    min_len: int = DEFAULT_MIN_LEN,
) -> list[tuple[int, int]]:
    """Frame ranges for ``[start, end)`` given ``scores[i]`` = change from frame start+i to start+i+1."""
    bounds = []
    clip_start = start
    for i, s in enumerate(scores):
        frame = start + i + 1
        if s > threshold and frame - clip_start >= min_len:
            bounds.append((clip_start, frame))
            clip_start = frame
    bounds.append((clip_start, end))
    return bounds


def detect_shots(
    seq: FrameSequence | Iterable[np.ndarray],
    threshold: float = DEFAULT_THRESHOLD,
    min_len: int = DEFAULT_MIN_LEN,
    segment: Segment | None = None,
) -> list[Clip]:
    """Split a segment into clips at content cuts.

    A cut opens before frame ``i`` when the change score from ``i-1`` to
    ``i`` exceeds ``threshold`` and the running clip already has ``min_len``
    frames. The clips cover the segment without overlap; only the last one
    may be shorter than ``min_len``.

    ``seq`` may be a `FrameSequence` or any iterable of grayscale frames
    covering exactly the segment. Without ``segment`` the whole input is one
    segment of an unnamed video.
    """
    if min_len < 1:
        raise ValidationError("min_len must be >= 1")
    frames = seq.frames if isinstance(seq, FrameSequence) else seq
    if segment is not None and isinstance(seq, FrameSequence):
        frames = seq.frames[segment.start_frame : segment.end_frame]
    scores = []
    count = 0
    prev = None
    for f in frames:
        cur = thumbnail(np.asarray(f))
        if prev is not None:
            scores.append(float(np.abs(cur - prev).mean()))
        prev = cur
        count += 1
    if count < 2:
        raise ValidationError(f"need at least 2 frames, got {count}")
    if segment is None:
        segment = Segment("video", 0, count)
    elif segment.end_frame - segment.start_frame != count:
        raise ValidationError(
            f"segment spans {segment.end_frame - segment.start_frame} frames but {count} were given"
        )
    clips = []
    for a, b in split_by_scores(scores, segment.start_frame, segment.end_frame, threshold, min_len):
        lo, hi = a - segment.start_frame, b - segment.start_frame
        clips.append(Clip(segment, a, b, tuple(scores[lo : hi - 1])))
    return clips


def filter_by_similarity(
    clips: Sequence[Clip],
    scores: Mapping[str, float],
    threshold: float = SIMILARITY_THRESHOLD,
) -> list[Clip]:
    """Keep clips scoring at least ``threshold``; order is preserved."""
    missing = [c.clip_id for c in clips if c.clip_id not in scores]
    if missing:
        raise ValidationError(f"no similarity score for clips: {', '.join(missing)}")
    return [c for c in clips if scores[c.clip_id] >= threshold]


def load_scores(path) -> dict[str, float]:
    """Read ``{"clip": id, "score": s}`` JSONL, or ``clip,score`` CSV rows."""
    scores: dict[str, float] = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                if line.startswith("{"):
                    rec = json.loads(line)
                    scores[str(rec["clip"])] = float(rec["score"])
                else:
                    clip, score = line.rsplit(",", 1)
                    if clip == "clip":
                        continue
                    scores[clip] = float(score)
            except (ValueError, KeyError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad score record ({exc})") from None
    return scores


def load_segments(path) -> list[dict]:
    """Raw segment-manifest records; each must at least parse as a `Segment`."""
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                Segment.from_json(rec)
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad segment record ({exc})") from None
            out.append(rec)
    return out
