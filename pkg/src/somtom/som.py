"""Set-of-Mark overlays: numbered boxes for UI screenshots, numbered dots for frames.

Labels are placed at the box corner that is farthest from every previously
drawn box. The label rectangle sits just outside the box edge sharing that
corner, so it never hides the element it names.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Iterable, Mapping, NamedTuple, Sequence, Union

import numpy as np

from .errors import PlacementDegraded, ValidationError
from .font import GLYPH_H, GLYPH_W, render_text
from .geometry import BBox, Point2

Mark = Union[BBox, Point2]
CORNERS = ("TL", "TR", "BL", "BR")

# RGB, dark enough for white text
PALETTE = (
    (230, 25, 75),
    (60, 120, 40),
    (0, 90, 200),
    (200, 100, 0),
    (145, 30, 180),
    (0, 128, 128),
    (170, 40, 110),
    (90, 90, 90),
    (128, 0, 0),
    (0, 0, 128),
)
WHITE = (255, 255, 255)


@dataclass(frozen=True)
class MarkSet:
    """Numbered marks ``{label: box or point}`` overlaid on one image.

    Coordinates are the original, un-marked ones; the overlay is purely
    visual.
    """

    entries: Mapping[int, Mark] = field(default_factory=dict)
    image_ref: str = ""

    def __post_init__(self):
        entries = dict(self.entries)
        for label, mark in entries.items():
            if isinstance(label, bool) or not isinstance(label, int) or label < 1:
                raise ValidationError(f"mark labels must be positive integers, got {label!r}")
            if not isinstance(mark, (BBox, Point2)):
                raise ValidationError(f"mark {label} must be a BBox or Point2")
        object.__setattr__(self, "entries", dict(sorted(entries.items())))

    @classmethod
    def from_items(cls, marks: Iterable[Mark], image_ref: str = "") -> MarkSet:
        return cls({i + 1: m for i, m in enumerate(marks)}, image_ref)

    def __len__(self) -> int:
        return len(self.entries)

    def __contains__(self, label) -> bool:
        return label in self.entries

    def __getitem__(self, label: int) -> Mark:
        return self.entries[label]

    @property
    def labels(self) -> list[int]:
        return list(self.entries)

    def is_consecutive(self) -> bool:
        return self.labels == list(range(1, len(self) + 1))

    def point_of(self, label: int) -> Point2:
        """The mark's reference point (box center for boxes)."""
        m = self.entries[label]
        return m.center if isinstance(m, BBox) else m

    def subset(self, labels: Iterable[int]) -> MarkSet:
        return MarkSet({k: self.entries[k] for k in labels}, self.image_ref)

    def to_json(self) -> dict:
        out = {"marks": {str(k): m.to_json() for k, m in self.entries.items()}}
        if self.image_ref:
            out["image"] = self.image_ref
        return out

    @classmethod
    def from_json(cls, data: dict) -> MarkSet:
        entries = {}
        for k, v in data.get("marks", {}).items():
            entries[int(k)] = BBox.from_json(v) if len(v) == 4 else Point2.from_json(v)
        return cls(entries, data.get("image", ""))


class PixelBox(NamedTuple):
    x: int
    y: int
    w: int
    h: int

    @property
    def x1(self) -> int:
        return self.x + self.w

    @property
    def y1(self) -> int:
        return self.y + self.h

    def inside(self, width: int, height: int) -> bool:
        return self.x >= 0 and self.y >= 0 and self.x1 <= width and self.y1 <= height

    def intersects(self, other: PixelBox) -> bool:
        return self.x < other.x1 and other.x < self.x1 and self.y < other.y1 and other.y < self.y1


@dataclass(frozen=True)
class LabelPlacement:
    label: int
    text_box: PixelBox
    corner: str
    degraded: bool = False

    def to_json(self) -> dict:
        return {
            "label": self.label,
            "text_box": list(self.text_box),
            "corner": self.corner,
            "degraded": self.degraded,
        }


def check_raster(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype != np.uint8 or img.ndim != 3 or img.shape[2] != 3:
        raise ValidationError(f"raster must be uint8 (H, W, 3), got {img.dtype} {img.shape}")
    if img.shape[0] * img.shape[1] < 1:
        raise ValidationError("raster is empty")
    return img


def mark_scale(height: int, width: int) -> int:
    # half-up rounding of min(H, W) / 512
    return max(1, int(math.floor(min(height, width) / 512 + 0.5)))


def get_mark_size(text: str, image_dims: tuple[int, int]) -> tuple[int, int]:
    """Label rectangle ``(m_h, m_w)`` in pixels for ``text`` on an ``(H, W)`` image."""
    if not text:
        raise ValidationError("label text is empty")
    if not text.isdigit() or not text.isascii():
        raise ValidationError(f"label text must be digits, got {text!r}")
    scale = mark_scale(*image_dims)
    pad = 2 * scale
    return GLYPH_H * scale + 2 * pad, len(text) * GLYPH_W * scale + 2 * pad


def box_to_pixels(b: BBox, width: int, height: int) -> PixelBox:
    x0 = int(math.floor(b.x * width + 0.5))
    y0 = int(math.floor(b.y * height + 0.5))
    x1 = int(math.floor((b.x + b.w) * width + 0.5))
    y1 = int(math.floor((b.y + b.h) * height + 0.5))
    x0, y0 = min(max(x0, 0), width - 1), min(max(y0, 0), height - 1)
    x1, y1 = min(max(x1, x0 + 1), width), min(max(y1, y0 + 1), height)
    return PixelBox(x0, y0, x1 - x0, y1 - y0)


def _point_box_distance(px: float, py: float, r: PixelBox) -> float:
    dx = max(r.x - px, 0.0, px - r.x1)
    dy = max(r.y - py, 0.0, py - r.y1)
    return math.hypot(dx, dy)


def _corner_candidates(r: PixelBox, m_h: int, m_w: int) -> dict[str, tuple[tuple[int, int], PixelBox]]:
    return {
        "TL": ((r.x, r.y), PixelBox(r.x, r.y - m_h, m_w, m_h)),
        "TR": ((r.x1, r.y), PixelBox(r.x1 - m_w, r.y - m_h, m_w, m_h)),
        "BL": ((r.x, r.y1), PixelBox(r.x, r.y1, m_w, m_h)),
        "BR": ((r.x1, r.y1), PixelBox(r.x1 - m_w, r.y1, m_w, m_h)),
    }


@dataclass(frozen=True)
class CornerChoice:
    corner: str
    anchor: tuple[int, int]
    text_box: PixelBox
    degraded: bool = False


def find_optimal_corner(
    b: BBox | PixelBox,
    drawn: Sequence[BBox | PixelBox],
    image_dims: tuple[int, int],
    mark_size: tuple[int, int] | None = None,
) -> CornerChoice:
    """Pick the corner of ``b`` whose distance to the nearest drawn box is largest.

    Corners whose label rectangle (of ``mark_size``) would leave the image
    are not considered; ties go to the first of TL, TR, BL, BR. If no corner
    fits, TL is used with the label clamped into the image and a
    `PlacementDegraded` warning is issued.
    """
    height, width = image_dims
    r = b if isinstance(b, PixelBox) else box_to_pixels(b, width, height)
    others = [d if isinstance(d, PixelBox) else box_to_pixels(d, width, height) for d in drawn]
    m_h, m_w = mark_size if mark_size is not None else (0, 0)
    best = None
    best_score = -1.0
    for corner, (anchor, tb) in _corner_candidates(r, m_h, m_w).items():
        if mark_size is not None and not tb.inside(width, height):
            continue
        score = min((_point_box_distance(*anchor, o) for o in others), default=math.inf)
        if score > best_score:
            best, best_score = CornerChoice(corner, anchor, tb), score
    if best is not None:
        return best
    warnings.warn(
        f"no corner of box {tuple(r)} fits a {m_w}x{m_h} label; clamping at TL",
        PlacementDegraded,
        stacklevel=2,
    )
    w_fit, h_fit = min(m_w, width), min(m_h, height)
    x = min(max(r.x, 0), width - w_fit)
    y = min(max(r.y - m_h, 0), height - h_fit)
    return CornerChoice("TL", (r.x, r.y), PixelBox(x, y, w_fit, h_fit), degraded=True)


def _fill(img: np.ndarray, r: PixelBox, color) -> None:
    h, w = img.shape[:2]
    x0, y0 = max(r.x, 0), max(r.y, 0)
    x1, y1 = min(r.x1, w), min(r.y1, h)
    if x1 > x0 and y1 > y0:
        img[y0:y1, x0:x1] = color


def draw_rectangle(img: np.ndarray, r: PixelBox, color, thickness: int) -> None:
    t = max(1, min(thickness, (r.w + 1) // 2, (r.h + 1) // 2))
    _fill(img, PixelBox(r.x, r.y, r.w, t), color)
    _fill(img, PixelBox(r.x, r.y1 - t, r.w, t), color)
    _fill(img, PixelBox(r.x, r.y, t, r.h), color)
    _fill(img, PixelBox(r.x1 - t, r.y, t, r.h), color)


def draw_text(img: np.ndarray, x: int, y: int, text: str, scale: int, color=WHITE) -> None:
    mask = render_text(text, scale)
    h, w = img.shape[:2]
    mh, mw = mask.shape
    x0, y0 = max(x, 0), max(y, 0)
    x1, y1 = min(x + mw, w), min(y + mh, h)
    if x1 <= x0 or y1 <= y0:
        return
    sub = mask[y0 - y : y1 - y, x0 - x : x1 - x]
    img[y0:y1, x0:x1][sub] = color


def _draw_label(img: np.ndarray, tb: PixelBox, text: str, scale: int, color) -> None:
    _fill(img, tb, color)
    pad = 2 * scale
    draw_text(img, tb.x + pad, tb.y + pad, text, scale)


def apply_som(
    img: np.ndarray, boxes: Sequence[BBox], image_ref: str = ""
) -> tuple[np.ndarray, MarkSet, list[LabelPlacement]]:
    """Draw numbered boxes on a copy of ``img``.

    Boxes are processed in input order and labelled 1..K. Each outline is
    drawn first, then its label is placed at the corner farthest from the
    boxes drawn before it.
    """
    img = check_raster(img)
    out = img.copy()
    height, width = img.shape[:2]
    scale = mark_scale(height, width)
    drawn: list[PixelBox] = []
    placements = []
    for idx, b in enumerate(boxes):
        text = str(idx + 1)
        color = PALETTE[idx % len(PALETTE)]
        r = box_to_pixels(b, width, height)
        draw_rectangle(out, r, color, 2 * scale)
        choice = find_optimal_corner(r, drawn, (height, width), get_mark_size(text, (height, width)))
        _draw_label(out, choice.text_box, text, scale, color)
        placements.append(LabelPlacement(idx + 1, choice.text_box, choice.corner, choice.degraded))
        drawn.append(r)
    return out, MarkSet.from_items(boxes, image_ref), placements


def _disc(img: np.ndarray, cx: int, cy: int, radius: int, color) -> None:
    h, w = img.shape[:2]
    x0, x1 = max(cx - radius, 0), min(cx + radius + 1, w)
    y0, y1 = max(cy - radius, 0), min(cy + radius + 1, h)
    yy, xx = np.mgrid[y0:y1, x0:x1]
    inside = (xx - cx) ** 2 + (yy - cy) ** 2 <= radius * radius
    img[y0:y1, x0:x1][inside] = color


def apply_som_points(
    img: np.ndarray, points: Sequence[Point2], image_ref: str = ""
) -> tuple[np.ndarray, MarkSet, list[LabelPlacement]]:
    """Draw numbered dots; each label is offset diagonally toward the image center."""
    img = check_raster(img)
    out = img.copy()
    height, width = img.shape[:2]
    scale = mark_scale(height, width)
    radius = 3 * scale
    placements = []
    for idx, p in enumerate(points):
        if not p.in_frame:
            raise ValidationError(f"point {idx + 1} ({p.x}, {p.y}) outside the image")
        text = str(idx + 1)
        color = PALETTE[idx % len(PALETTE)]
        cx = min(int(p.x * width), width - 1)
        cy = min(int(p.y * height), height - 1)
        _disc(out, cx, cy, radius, color)
        m_h, m_w = get_mark_size(text, (height, width))
        x = cx + radius + 1 if cx < width / 2 else cx - radius - 1 - m_w
        y = cy + radius + 1 if cy < height / 2 else cy - radius - 1 - m_h
        w_fit, h_fit = min(m_w, width), min(m_h, height)
        x = min(max(x, 0), width - w_fit)
        y = min(max(y, 0), height - h_fit)
        tb = PixelBox(x, y, w_fit, h_fit)
        _draw_label(out, tb, text, scale, color)
        corner = ("T" if y >= cy else "B") + ("L" if x >= cx else "R")
        placements.append(LabelPlacement(idx + 1, tb, corner, (w_fit, h_fit) != (m_w, m_h)))
    return out, MarkSet.from_items(points, image_ref), placements


def load_boxes(path) -> list[BBox]:
    """Read candidate boxes from JSONL lines of ``{"boxes": [[x, y, w, h], ...]}``."""
    boxes = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                data = json.loads(line)
                boxes.extend(BBox.from_json(b) for b in data["boxes"])
            except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as exc:
                raise ValidationError(f"{path}:{lineno}: bad box record ({exc})") from None
    return boxes
