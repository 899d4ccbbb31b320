"""Normalized 2D geometry, the 256-bin coordinate quantizer and point traces.

All coordinates are fractions of the image size: ``x`` of the width, ``y`` of
the height. Pixel values only appear at API boundaries, where callers pass the
image size explicitly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ValidationError

NUM_BINS = 256
_EDGE_TOL = 1e-9


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    @classmethod
    def from_pixels(cls, px: float, py: float, width: int, height: int) -> Point2:
        return cls(px / width, py / height)

    def to_pixels(self, width: int, height: int) -> tuple[float, float]:
        return self.x * width, self.y * height

    @property
    def in_frame(self) -> bool:
        return 0.0 <= self.x <= 1.0 and 0.0 <= self.y <= 1.0

    def to_json(self) -> list[float]:
        return [float(self.x), float(self.y)]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> Point2:
        if len(data) != 2:
            raise ValidationError(f"point needs 2 values, got {len(data)}")
        return cls(float(data[0]), float(data[1]))


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box: top-left corner plus extents, all normalized."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValidationError(f"box extents must be positive, got w={self.w}, h={self.h}")
        if self.x < -_EDGE_TOL or self.y < -_EDGE_TOL:
            raise ValidationError(f"box corner outside image: ({self.x}, {self.y})")
        if self.x + self.w > 1 + _EDGE_TOL or self.y + self.h > 1 + _EDGE_TOL:
            raise ValidationError(
                f"box exceeds image: x+w={self.x + self.w}, y+h={self.y + self.h}"
            )

    @classmethod
    def from_pixels(cls, x: float, y: float, w: float, h: float, width: int, height: int) -> BBox:
        return cls(x / width, y / height, w / width, h / height)

    @property
    def center(self) -> Point2:
        return Point2(self.x + self.w / 2, self.y + self.h / 2)

    def contains(self, p: Point2) -> bool:
        return self.x <= p.x <= self.x + self.w and self.y <= p.y <= self.y + self.h

    def to_pixels(self, width: int, height: int) -> tuple[float, float, float, float]:
        return self.x * width, self.y * height, self.w * width, self.h * height

    def to_json(self) -> list[float]:
        return [float(self.x), float(self.y), float(self.w), float(self.h)]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> BBox:
        if len(data) != 4:
            raise ValidationError(f"box needs 4 values, got {len(data)}")
        return cls(*(float(v) for v in data))


def _check_unit(v: float, name: str) -> None:
    if not (0.0 <= v <= 1.0):
        raise ValidationError(f"coordinate {name}={v!r} outside [0, 1]")


def quantize_value(v: float, name: str = "v") -> int:
    _check_unit(v, name)
    return min(int(math.floor(v * NUM_BINS)), NUM_BINS - 1)


def quantize(p: Point2) -> tuple[int, int]:
    """Map a normalized point to its (x, y) bins in [0, 255]."""
    return quantize_value(p.x, "x"), quantize_value(p.y, "y")


def dequantize_value(b: int, name: str = "bin") -> float:
    if isinstance(b, bool) or int(b) != b or not (0 <= b < NUM_BINS):
        raise ValidationError(f"{name}={b!r} outside [0, {NUM_BINS - 1}]")
    return (int(b) + 0.5) / NUM_BINS


def dequantize(qx: int, qy: int) -> Point2:
    return Point2(dequantize_value(qx, "x bin"), dequantize_value(qy, "y bin"))


def quantize_array(v: np.ndarray) -> np.ndarray:
    """Vectorized `quantize_value`; raises on any value outside [0, 1]."""
    v = np.asarray(v, dtype=np.float64)
    bad = ~((v >= 0.0) & (v <= 1.0))
    if bad.any():
        idx = np.argwhere(bad)[0]
        raise ValidationError(f"coordinate at index {tuple(int(i) for i in idx)} = {v[tuple(idx)]!r} outside [0, 1]")
    return np.minimum(np.floor(v * NUM_BINS), NUM_BINS - 1).astype(np.int64)


def dequantize_array(b: np.ndarray) -> np.ndarray:
    b = np.asarray(b)
    if b.size and (b.min() < 0 or b.max() >= NUM_BINS):
        raise ValidationError(f"bins outside [0, {NUM_BINS - 1}]")
    return (b.astype(np.float64) + 0.5) / NUM_BINS


class Trace:
    """Path of one tracked point over ``L`` frames.

    ``points`` is an ``(L, 2)`` array of normalized coordinates (which may
    leave [0, 1] when a point exits the frame), ``occluded`` an ``(L,)`` bool
    array. Both are stored read-only.
    """

    __slots__ = ("points", "occluded", "seed_index")

    def __init__(self, points, occluded=None, seed_index: int = 0):
        pts = np.array(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValidationError(f"trace points must have shape (L, 2), got {pts.shape}")
        if pts.shape[0] < 2:
            raise ValidationError(f"trace needs at least 2 points, got {pts.shape[0]}")
        if occluded is None:
            occ = np.zeros(pts.shape[0], dtype=bool)
        else:
            occ = np.array(occluded, dtype=bool)
        if occ.shape != (pts.shape[0],):
            raise ValidationError(
                f"occlusion flags length {occ.shape} does not match {pts.shape[0]} points"
            )
        if int(seed_index) != seed_index or seed_index < 0:
            raise ValidationError(f"seed_index must be a non-negative integer, got {seed_index!r}")
        pts.setflags(write=False)
        occ.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "occluded", occ)
        object.__setattr__(self, "seed_index", int(seed_index))

    def __setattr__(self, name, value):
        raise AttributeError("Trace is immutable")

    def __len__(self) -> int:
        return self.points.shape[0]

    def __eq__(self, other) -> bool:
        if not isinstance(other, Trace):
            return NotImplemented
        return (
            self.seed_index == other.seed_index
            and np.array_equal(self.points, other.points)
            and np.array_equal(self.occluded, other.occluded)
        )

    def __hash__(self):
        return hash((self.seed_index, self.points.tobytes(), self.occluded.tobytes()))

    def __repr__(self) -> str:
        return f"Trace(seed_index={self.seed_index}, len={len(self)}, start={self.start.to_json()})"

    def point(self, i: int) -> Point2:
        return Point2(float(self.points[i, 0]), float(self.points[i, 1]))

    @property
    def start(self) -> Point2:
        return self.point(0)

    @property
    def out_of_frame(self) -> np.ndarray:
        p = self.points
        return (p[:, 0] < 0) | (p[:, 0] > 1) | (p[:, 1] < 0) | (p[:, 1] > 1)

    def replace(self, points=None, occluded=None) -> Trace:
        return Trace(
            self.points if points is None else points,
            self.occluded if occluded is None else occluded,
            self.seed_index,
        )

    def to_json(self) -> dict:
        return {
            "points": self.points.tolist(),
            "occluded": [bool(v) for v in self.occluded],
            "seed": self.seed_index,
        }

    @classmethod
    def from_json(cls, data: dict) -> Trace:
        try:
            return cls(data["points"], data["occluded"], data["seed"])
        except KeyError as exc:
            raise ValidationError(f"trace record missing field {exc.args[0]!r}") from None
        except (TypeError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"malformed trace record: {exc}") from None


def check_seed_range(traces: Iterable[Trace], s: int) -> None:
    for t in traces:
        if t.seed_index >= s * s:
            raise ValidationError(f"seed_index {t.seed_index} outside grid of {s * s} points")


def step_displacements_px(points: np.ndarray, width: int, height: int) -> np.ndarray:
    """Pixel length of each adjacent step; works on ``(L, 2)`` or ``(N, L, 2)``."""
    d = np.diff(points, axis=-2)
    return np.hypot(d[..., 0] * width, d[..., 1] * height)


def motion_magnitudes(
    points: np.ndarray, occluded: np.ndarray, width: int, height: int
) -> np.ndarray:
    """Batch form of `trace_motion_magnitude` over ``(N, L, 2)`` points."""
    steps = step_displacements_px(points, width, height)
    valid = ~(occluded[..., 1:] | occluded[..., :-1])
    count = valid.sum(axis=-1)
    total = np.where(valid, steps, 0.0).sum(axis=-1)
    return np.divide(total, count, out=np.zeros_like(total), where=count > 0)


def trace_motion_magnitude(t: Trace, width: int, height: int) -> float:
    """Mean pixel displacement between adjacent frames.

    A step is skipped when either of its endpoints is occluded; a trace with
    no visible step has magnitude 0.
    """
    if len(t) < 2:
        raise ValidationError("trace needs at least 2 points")
    return float(motion_magnitudes(t.points, t.occluded, width, height))


def stack_traces(traces: Sequence[Trace]) -> tuple[np.ndarray, np.ndarray]:
    """Stack equal-length traces into ``(N, L, 2)`` points and ``(N, L)`` flags."""
    if not traces:
        return np.zeros((0, 0, 2)), np.zeros((0, 0), dtype=bool)
    lengths = {len(t) for t in traces}
    if len(lengths) != 1:
        raise ValidationError(f"traces have mixed lengths {sorted(lengths)}")
    return np.stack([t.points for t in traces]), np.stack([t.occluded for t in traces])
