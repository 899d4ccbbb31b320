"""Trace-reliability metric and a synthetic scene renderer with exact ground truth.

The metric takes every trace that starts inside an annotated object box and
counts how many are still inside that object's box a fixed time later.
"""

from __future__ import annotations

import json
import math
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import cv2
import numpy as np

from .errors import UndefinedMetricError, ValidationError
from .geometry import BBox, Point2, Trace
from .tracking import FrameSequence


@dataclass(frozen=True)
class BoxAnnotation:
    frame_index: int
    box: BBox
    object_id: str
    visible: bool = True

    def to_json(self) -> dict:
        return {
            "frame": self.frame_index,
            "object": self.object_id,
            "box": self.box.to_json(),
            "visible": self.visible,
        }

    @classmethod
    def from_json(cls, data: dict) -> BoxAnnotation:
        try:
            return cls(int(data["frame"]), BBox.from_json(data["box"]), str(data["object"]), bool(data.get("visible", True)))
        except KeyError as exc:
            raise ValidationError(f"annotation missing field {exc.args[0]!r}") from None


def load_annotations(path) -> list[BoxAnnotation]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(BoxAnnotation.from_json(json.loads(line)))
            except (json.JSONDecodeError, ValidationError, TypeError) as exc:
                raise ValidationError(f"{path}:{lineno}: {exc}") from None
    return out


def horizon_frames(horizon_s: float, fps: float) -> int:
    # half-up rounding; round() would bank 0.5 cases toward even
    return int(math.floor(horizon_s * fps + 0.5))


@dataclass
class PrecisionResult:
    hits: int
    total: int
    horizon_frames: int

    @property
    def precision(self) -> float:
        if self.total == 0:
            raise UndefinedMetricError("no trace starts inside an annotated box")
        return self.hits / self.total


def _count_hits(traces: Sequence[Trace], annotations: Sequence[BoxAnnotation], horizon: int) -> PrecisionResult:
    by_frame: dict[int, list[BoxAnnotation]] = defaultdict(list)
    for a in annotations:
        by_frame[a.frame_index].append(a)
    start_boxes = by_frame.get(0, [])
    horizon_box = {a.object_id: a.box for a in by_frame.get(horizon, [])}
    hits = total = 0
    for t in traces:
        if horizon > len(t) - 1:
            raise ValidationError(f"horizon of {horizon} frames exceeds trace length {len(t)}")
        start = t.start
        owner = next((a.object_id for a in start_boxes if a.box.contains(start)), None)
        if owner is None:
            continue
        total += 1
        if t.occluded[horizon]:
            continue
        box = horizon_box.get(owner)
        if box is not None and box.contains(t.point(horizon)):
            hits += 1
    return PrecisionResult(hits, total, horizon)


def trace_precision(
    traces: Sequence[Trace],
    annotations: Sequence[BoxAnnotation],
    horizon_s: float = 1.0,
    fps: float = 30.0,
) -> float:
    """Fraction of in-box traces still inside their object's box after ``horizon_s``.

    Traces whose first point lies in no frame-0 box are ignored. A trace that
    is occluded at the horizon, or whose object has no box at that frame,
    counts as a miss.
    """
    h = horizon_frames(horizon_s, fps)
    return _count_hits(traces, annotations, h).precision


def precision_report(
    clips: Sequence[tuple[Sequence[Trace], Sequence[BoxAnnotation]]],
    horizon_s: float = 1.0,
    fps: float = 30.0,
    per_clip: bool = False,
) -> dict:
    """Pooled precision over several clips; optionally with per-clip values and their mean."""
    h = horizon_frames(horizon_s, fps)
    results = [_count_hits(tr, an, h) for tr, an in clips]
    hits = sum(r.hits for r in results)
    total = sum(r.total for r in results)
    if total == 0:
        raise UndefinedMetricError("no trace starts inside an annotated box")
    report = {"precision": hits / total, "n_traces": total, "horizon_frames": h}
    if per_clip:
        values = [r.hits / r.total if r.total else None for r in results]
        defined = [v for v in values if v is not None]
        report["per_clip"] = values
        report["per_clip_mean"] = sum(defined) / len(defined)
    return report


@dataclass
class SceneObject:
    """Textured shape moving in world pixel coordinates.

    ``poses`` holds the top-left corner per frame; later objects in a scene
    are drawn on top of earlier ones.
    """

    object_id: str
    size: tuple[float, float]
    poses: np.ndarray
    shape: str = "rect"
    texture_seed: int = 0

    def __post_init__(self):
        if self.shape not in ("rect", "disc"):
            raise ValidationError(f"unknown shape {self.shape!r}")
        if self.size[0] <= 0 or self.size[1] <= 0:
            raise ValidationError("object size must be positive")
        self.poses = np.asarray(self.poses, dtype=np.float64).reshape(-1, 2)

    def contains_local(self, q: np.ndarray) -> np.ndarray:
        w, h = self.size
        inside = (q[..., 0] >= 0) & (q[..., 0] < w) & (q[..., 1] >= 0) & (q[..., 1] < h)
        if self.shape == "disc":
            dx = (q[..., 0] - w / 2) / (w / 2)
            dy = (q[..., 1] - h / 2) / (h / 2)
            inside &= dx * dx + dy * dy <= 1.0
        return inside


@dataclass
class SyntheticScene:
    width: int
    height: int
    frames: int
    fps: float = 30.0
    objects: list[SceneObject] = field(default_factory=list)
    pan: np.ndarray | None = None
    zoom: np.ndarray | None = None
    background_seed: int = 0
    grid_size: int = 15

    def __post_init__(self):
        if self.frames < 2:
            raise ValidationError("scene needs at least 2 frames")
        if self.width < self.grid_size or self.height < self.grid_size:
            raise ValidationError("canvas smaller than the seed grid")
        self.pan = np.zeros((self.frames, 2)) if self.pan is None else np.asarray(self.pan, dtype=np.float64).reshape(-1, 2)
        self.zoom = np.ones(self.frames) if self.zoom is None else np.asarray(self.zoom, dtype=np.float64).reshape(-1)
        if len(self.pan) != self.frames or len(self.zoom) != self.frames:
            raise ValidationError("camera pan/zoom must be given for every frame")
        if np.any(self.zoom <= 0):
            raise ValidationError("zoom must be positive")
        for obj in self.objects:
            if len(obj.poses) != self.frames:
                raise ValidationError(f"object {obj.object_id} has {len(obj.poses)} poses for {self.frames} frames")

    @classmethod
    def from_json(cls, data: dict) -> SyntheticScene:
        """Build a scene from its declarative form.

        Objects and the camera accept either explicit per-frame lists
        (``poses``, ``pan``, ``zoom``) or a start plus constant per-frame rate
        (``start``/``velocity``, ``pan_velocity``, ``zoom_rate``).
        """
        n = int(data["frames"])
        steps = np.arange(n)[:, None]
        objects = []
        for i, o in enumerate(data.get("objects", [])):
            if "poses" in o:
                poses = np.asarray(o["poses"], dtype=np.float64)
            else:
                poses = np.asarray(o["start"], dtype=np.float64) + steps * np.asarray(o.get("velocity", [0, 0]), dtype=np.float64)
            objects.append(
                SceneObject(
                    str(o.get("id", f"obj{i}")),
                    tuple(o["size"]),
                    poses,
                    o.get("shape", "rect"),
                    int(o.get("texture_seed", i + 1)),
                )
            )
        cam = data.get("camera", {})
        if "pan" in cam:
            pan = np.asarray(cam["pan"], dtype=np.float64)
        else:
            pan = steps * np.asarray(cam.get("pan_velocity", [0, 0]), dtype=np.float64)
        if "zoom" in cam:
            zoom = np.asarray(cam["zoom"], dtype=np.float64)
        else:
            zoom = (1.0 + float(cam.get("zoom_rate", 0.0))) ** np.arange(n)
        return cls(
            int(data["width"]),
            int(data["height"]),
            n,
            float(data.get("fps", 30.0)),
            objects,
            pan,
            zoom,
            int(data.get("background_seed", 0)),
            int(data.get("grid_size", 15)),
        )

    def to_json(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "frames": self.frames,
            "fps": self.fps,
            "background_seed": self.background_seed,
            "grid_size": self.grid_size,
            "camera": {"pan": self.pan.tolist(), "zoom": self.zoom.tolist()},
            "objects": [
                {
                    "id": o.object_id,
                    "shape": o.shape,
                    "size": list(o.size),
                    "texture_seed": o.texture_seed,
                    "poses": o.poses.tolist(),
                }
                for o in self.objects
            ],
        }

    # continuous image coords: u = zoom * (X - pan - c) + c, c = image center
    def world_to_image(self, t: int, pts: np.ndarray) -> np.ndarray:
        c = np.array([self.width / 2, self.height / 2])
        return self.zoom[t] * (pts - self.pan[t] - c) + c

    def image_to_world(self, t: int, pts: np.ndarray) -> np.ndarray:
        c = np.array([self.width / 2, self.height / 2])
        return (pts - c) / self.zoom[t] + c + self.pan[t]


@dataclass
class RenderedScene:
    frames: FrameSequence
    traces: list[Trace]
    annotations: list[BoxAnnotation]
    owners: list[str | None]

    def traces_of(self, object_id: str | None) -> list[Trace]:
        return [t for t, o in zip(self.traces, self.owners) if o == object_id]


def _texture(shape: tuple[int, int], seed: int, sigma: float = 1.5, lo: int = 20, hi: int = 235) -> np.ndarray:
    rng = np.random.default_rng(seed)
    noise = rng.random(shape).astype(np.float32)
    noise = cv2.GaussianBlur(noise, (0, 0), sigma)
    noise -= noise.min()
    noise /= max(float(noise.max()), 1e-12)
    return (lo + noise * (hi - lo)).astype(np.float32)


def _cv_affine(a: float, b: np.ndarray) -> np.ndarray:
    """cv2 affine for u = a*X + b in continuous coordinates (pixel centers at i+0.5)."""
    off = b + 0.5 * a - 0.5
    return np.array([[a, 0.0, off[0]], [0.0, a, off[1]]], dtype=np.float64)


def _object_mask(obj: SceneObject) -> np.ndarray:
    w, h = int(math.ceil(obj.size[0])), int(math.ceil(obj.size[1]))
    ys, xs = np.mgrid[0:h, 0:w] + 0.5
    return obj.contains_local(np.stack([xs, ys], axis=-1)).astype(np.float32)


def render_scene(scene: SyntheticScene) -> RenderedScene:
    """Rasterize a scene and derive exact traces and per-frame object boxes.

    Ground-truth traces start at the seed grid of frame 0; each follows
    whichever layer is on top there (an object, or the background which only
    moves with the camera). A point is occluded while it is outside the frame
    or covered by a layer drawn above its own.
    """
    W, H, T = scene.width, scene.height, scene.frames
    corners = np.array([[0, 0], [W, 0], [0, H], [W, H]], dtype=np.float64)
    world = np.concatenate([scene.image_to_world(t, corners) for t in range(T)])
    margin = 8
    origin = np.floor(world.min(axis=0)) - margin
    extent = np.ceil(world.max(axis=0)) + margin - origin
    bg = _texture((int(extent[1]), int(extent[0])), scene.background_seed)

    textures = []
    for obj in scene.objects:
        mask = _object_mask(obj)
        tex = _texture(mask.shape, obj.texture_seed * 7919 + 17, sigma=1.2, lo=0, hi=255)
        textures.append((tex, mask))

    c = np.array([W / 2, H / 2])
    frames = np.empty((T, H, W), dtype=np.uint8)
    for t in range(T):
        z = scene.zoom[t]
        # texture pixel X_tex -> world X_tex + origin -> image
        m_bg = _cv_affine(z, z * (origin - scene.pan[t] - c) + c)
        img = cv2.warpAffine(bg, m_bg, (W, H), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REFLECT)
        for obj, (tex, mask) in zip(scene.objects, textures):
            m_obj = _cv_affine(z, z * (obj.poses[t] - scene.pan[t] - c) + c)
            wt = cv2.warpAffine(tex, m_obj, (W, H), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
            wm = cv2.warpAffine(mask, m_obj, (W, H), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_CONSTANT)
            img = wm * wt + (1.0 - wm) * img
        frames[t] = np.clip(np.rint(img), 0, 255).astype(np.uint8)

    s = scene.grid_size
    cc = (np.arange(s) + 0.5) / s
    xx, yy = np.meshgrid(cc, cc)
    seeds = np.stack([xx.ravel() * W, yy.ravel() * H], axis=1)
    n = len(seeds)
    world0 = scene.image_to_world(0, seeds)
    layer = np.full(n, -1)
    for k in range(len(scene.objects) - 1, -1, -1):
        q = world0 - scene.objects[k].poses[0]
        hit = scene.objects[k].contains_local(q) & (layer < 0)
        layer[hit] = k
    local = np.where(
        (layer >= 0)[:, None],
        world0 - np.array([scene.objects[k].poses[0] if k >= 0 else (0.0, 0.0) for k in layer]),
        world0,
    )

    pts = np.empty((T, n, 2))
    occ = np.zeros((T, n), dtype=bool)
    for t in range(T):
        wpos = local.copy()
        for k, obj in enumerate(scene.objects):
            sel = layer == k
            wpos[sel] = local[sel] + obj.poses[t]
        u = scene.world_to_image(t, wpos)
        pts[t] = u
        out = (u[:, 0] < 0) | (u[:, 0] > W) | (u[:, 1] < 0) | (u[:, 1] > H)
        covered = np.zeros(n, dtype=bool)
        for k, obj in enumerate(scene.objects):
            above = layer < k
            covered |= above & obj.contains_local(wpos - obj.poses[t])
        occ[t] = out | covered

    norm = pts / np.array([W, H])
    traces = [Trace(norm[:, k], occ[:, k], k) for k in range(n)]
    owners = [scene.objects[k].object_id if k >= 0 else None for k in layer]

    annotations = []
    for t in range(T):
        for obj in scene.objects:
            x0, y0 = scene.world_to_image(t, obj.poses[t][None])[0]
            x1, y1 = x0 + obj.size[0] * scene.zoom[t], y0 + obj.size[1] * scene.zoom[t]
            cx0, cy0, cx1, cy1 = max(x0, 0.0), max(y0, 0.0), min(x1, W), min(y1, H)
            if cx1 <= cx0 or cy1 <= cy0:
                continue
            visible = (cx0, cy0, cx1, cy1) == (x0, y0, x1, y1)
            box = BBox(cx0 / W, cy0 / H, (cx1 - cx0) / W, (cy1 - cy0) / H)
            annotations.append(BoxAnnotation(t, box, obj.object_id, visible))

    return RenderedScene(FrameSequence(frames, scene.fps), traces, annotations, owners)


def moving_object_scene(
    width: int = 256,
    height: int = 256,
    frames: int = 16,
    object_size: tuple[float, float] = (64, 64),
    object_start: tuple[float, float] = (64, 64),
    object_velocity: tuple[float, float] = (0, 0),
    pan_velocity: tuple[float, float] = (0, 0),
    fps: float = 30.0,
    seed: int = 0,
    grid_size: int = 15,
    shape: str = "rect",
) -> SyntheticScene:
    """One textured object with constant velocity under a constant camera pan."""
    steps = np.arange(frames)[:, None]
    obj = SceneObject(
        "obj0",
        object_size,
        np.asarray(object_start, dtype=np.float64) + steps * np.asarray(object_velocity, dtype=np.float64),
        shape,
        seed + 1,
    )
    return SyntheticScene(
        width,
        height,
        frames,
        fps,
        [obj],
        steps * np.asarray(pan_velocity, dtype=np.float64),
        None,
        seed,
        grid_size,
    )

