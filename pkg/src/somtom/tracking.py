"""Grid-seeded point tracking.

`LKTracker` is a classical stand-in for a learned point tracker: pyramidal
Lucas-Kanade flow against a per-window anchor frame, with a forward-backward
consistency check to flag occlusions. Any object with a
``track(seq) -> list[Trace]`` method can replace it, and
`load_external_traces` lets precomputed traces enter the pipeline directly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass
from typing import Protocol, Sequence

import cv2
import numpy as np

from .errors import TraceParseError, ValidationError
from .geometry import Point2, Trace

# ITU-R BT.601 luma
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


@dataclass(frozen=True, eq=False)
class FrameSequence:
    """Grayscale frames ``(T, H, W)`` uint8 plus frame rate.

    ``rgb_first`` optionally keeps the first frame in color so that it can be
    marked without losing color.
    """

    frames: np.ndarray
    fps: float = 30.0
    rgb_first: np.ndarray | None = None

    def __post_init__(self):
        frames = self.frames
        if isinstance(frames, (list, tuple)):
            if not frames:
                raise ValidationError("frame sequence is empty")
            shapes = {np.shape(f) for f in frames}
            if len(shapes) != 1:
                raise ValidationError(f"frames have mismatched dimensions: {sorted(shapes)}")
            frames = np.stack(frames)
        frames = np.asarray(frames)
        if frames.ndim != 3 or frames.shape[0] == 0:
            raise ValidationError(f"expected (T, H, W) grayscale frames, got shape {frames.shape}")
        if frames.shape[0] < 2:
            raise ValidationError(f"need at least 2 frames, got {frames.shape[0]}")
        if frames.dtype != np.uint8:
            raise ValidationError(f"frames must be uint8, got {frames.dtype}")
        if not self.fps > 0:
            raise ValidationError(f"fps must be positive, got {self.fps}")
        if self.rgb_first is not None and self.rgb_first.shape != frames.shape[1:] + (3,):
            raise ValidationError("rgb_first does not match frame dimensions")
        object.__setattr__(self, "frames", frames)

    @classmethod
    def from_rgb(cls, frames_rgb, fps: float = 30.0) -> FrameSequence:
        if len(frames_rgb) == 0:
            raise ValidationError("frame sequence is empty")
        shapes = {np.shape(f) for f in frames_rgb}
        if len(shapes) != 1:
            raise ValidationError(f"frames have mismatched dimensions: {sorted(shapes)}")
        gray = np.stack([rgb_to_luma(f) for f in frames_rgb])
        return cls(gray, fps, np.ascontiguousarray(frames_rgb[0], dtype=np.uint8))

    def __len__(self) -> int:
        return self.frames.shape[0]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def size(self) -> tuple[int, int]:
        return self.width, self.height

    def first_frame_rgb(self) -> np.ndarray:
        if self.rgb_first is not None:
            return self.rgb_first.copy()
        return np.repeat(self.frames[0][:, :, None], 3, axis=2)

    def slice(self, start: int, end: int) -> FrameSequence:
        return FrameSequence(self.frames[start:end], self.fps, self.rgb_first if start == 0 else None)


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb, dtype=np.uint8)
    if rgb.ndim == 2:
        return rgb
    return cv2.cvtColor(rgb, cv2.COLOR_RGB2GRAY)


@dataclass(frozen=True)
class TrackerConfig:
    grid_size: int = 15
    pyramid_levels: int = 3
    window: int = 21
    max_iters: int = 30
    fb_threshold: float = 1.5
    window_frames: int = 64
    # mean absolute luma difference between anchor and tracked patch
    max_patch_error: float = 8.0

    def __post_init__(self):
        if self.grid_size < 2:
            raise ValidationError(f"grid_size must be >= 2, got {self.grid_size}")
        if self.window < 3 or self.window % 2 == 0:
            raise ValidationError(f"window must be an odd integer >= 3, got {self.window}")
        for name in ("pyramid_levels", "max_iters", "window_frames"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.window_frames < 2:
            raise ValidationError("window_frames must be at least 2")
        if not self.fb_threshold > 0:
            raise ValidationError("fb_threshold must be positive")


def seed_grid(width: int, height: int, s: int) -> list[Point2]:
    """Centers of an ``s x s`` partition of the image, row-major."""
    if s < 2:
        raise ValidationError(f"grid size must be >= 2, got {s}")
    if width < s or height < s:
        raise ValidationError(f"image {width}x{height} too small for a {s}x{s} grid")
    c = (np.arange(s) + 0.5) / s
    return [Point2(float(x), float(y)) for y in c for x in c]


def _seed_array(s: int) -> np.ndarray:
    c = (np.arange(s) + 0.5) / s
    xx, yy = np.meshgrid(c, c)
    return np.stack([xx.ravel(), yy.ravel()], axis=1)


class Tracker(Protocol):
    def track(self, seq: FrameSequence) -> list[Trace]: ...


class LKTracker:
    """Pyramidal Lucas-Kanade grid tracker with forward-backward occlusion checks.

    Within a window of ``cfg.window_frames`` frames, every frame is matched
    against the window's first frame (initialized from the previous estimate),
    which avoids template drift. Consecutive windows overlap by one frame and
    are re-anchored at the stitched positions, keeping seed identity.
    """

    def __init__(self, config: TrackerConfig | None = None):
        self.config = config or TrackerConfig()

    def _lk_params(self, flags: int) -> dict:
        cfg = self.config
        return dict(
            winSize=(cfg.window, cfg.window),
            maxLevel=cfg.pyramid_levels - 1,
            criteria=(cv2.TERM_CRITERIA_COUNT | cv2.TERM_CRITERIA_EPS, cfg.max_iters, 0.01),
            flags=flags,
        )

    def track(self, seq: FrameSequence) -> list[Trace]:
        cfg = self.config
        w, h = seq.size
        seeds = _seed_array(cfg.grid_size)
        if w < cfg.grid_size or h < cfg.grid_size:
            raise ValidationError(f"image {w}x{h} too small for a {cfg.grid_size}x{cfg.grid_size} grid")
        n, length = len(seeds), len(seq)
        # cv2 places pixel centers on integers; normalized coords put them at i + 0.5
        scale = np.array([w, h], dtype=np.float64)
        pos = np.empty((length, n, 2), dtype=np.float64)
        occ = np.zeros((length, n), dtype=bool)
        pos[0] = seeds * scale - 0.5
        exited = np.zeros(n, dtype=bool)
        velocity = np.zeros((n, 2))

        params = self._lk_params(cv2.OPTFLOW_USE_INITIAL_FLOW)
        anchor_idx = 0
        anchor_img = np.ascontiguousarray(seq.frames[0])
        anchor_pts = pos[0].astype(np.float32)
        for t in range(1, length):
            if t - anchor_idx >= cfg.window_frames:
                anchor_idx = t - 1
                anchor_img = np.ascontiguousarray(seq.frames[anchor_idx])
                anchor_pts = pos[anchor_idx].astype(np.float32)
            cur_img = np.ascontiguousarray(seq.frames[t])
            # constant-velocity guess keeps fast movers inside the LK basin
            guess = (pos[t - 1] + velocity).astype(np.float32)
            fwd, st_f, err_f = cv2.calcOpticalFlowPyrLK(anchor_img, cur_img, anchor_pts, guess.copy(), **params)
            bwd, st_b, _ = cv2.calcOpticalFlowPyrLK(cur_img, anchor_img, fwd, anchor_pts.copy(), **params)
            fwd = fwd.astype(np.float64)
            fb_err = np.linalg.norm(bwd.astype(np.float64) - anchor_pts, axis=1)
            good = (
                (st_f[:, 0] == 1)
                & (st_b[:, 0] == 1)
                & np.all(np.isfinite(fwd), axis=1)
                & (fb_err <= cfg.fb_threshold)
                & (err_f[:, 0] <= cfg.max_patch_error)
                & ~exited
            )
            new = np.where(good[:, None], fwd, guess.astype(np.float64))
            velocity = np.where(good[:, None], new - pos[t - 1], velocity)
            cont = new + 0.5
            outside = (cont[:, 0] < 0) | (cont[:, 0] > w) | (cont[:, 1] < 0) | (cont[:, 1] > h)
            exited |= outside
            pos[t] = new
            occ[t] = ~good | exited

        pts_norm = (pos + 0.5) / scale
        return [Trace(pts_norm[:, k], occ[:, k], k) for k in range(n)]


def track(seq: FrameSequence, cfg: TrackerConfig | None = None) -> list[Trace]:
    return LKTracker(cfg).track(seq)


class PrecomputedTracker:
    """Serves traces produced elsewhere (e.g. by a neural tracker)."""

    def __init__(self, traces: Sequence[Trace]):
        self.traces = list(traces)

    def track(self, seq: FrameSequence) -> list[Trace]:
        if self.traces and len(self.traces[0]) != len(seq):
            raise ValidationError(
                f"precomputed traces have length {len(self.traces[0])}, clip has {len(seq)} frames"
            )
        return list(self.traces)


def dumps_traces(traces: Sequence[Trace]) -> str:
    return "".join(json.dumps(t.to_json(), separators=(",", ":")) + "\n" for t in traces)


def write_traces(path: str | os.PathLike, traces: Sequence[Trace]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(dumps_traces(traces))


def load_external_traces(path: str | os.PathLike) -> list[Trace]:
    """Read a trace JSONL file; every trace must have the same length."""
    traces = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TraceParseError(f"invalid JSON ({exc.msg})", lineno) from None
            if not isinstance(data, dict):
                raise TraceParseError("trace record must be an object", lineno)
            try:
                traces.append(Trace.from_json(data))
            except ValidationError as exc:
                raise TraceParseError(str(exc), lineno) from None
    lengths = sorted({len(t) for t in traces})
    if len(lengths) > 1:
        raise ValidationError(f"traces in {os.fspath(path)} have mixed lengths {lengths}")
    return traces
