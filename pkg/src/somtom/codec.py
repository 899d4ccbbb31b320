"""Supervision strings and robot action tokens.

Wire grammar (all coordinates are 256-bin quantized, see `geometry.quantize`)::

    grounding := KIND [" : mark " INT] [" : (" BIN "," BIN ")"] [" : " JSON_STRING]
    tom       := TEXT " : marks {" [INT {"," INT}] "} : traces {" [entry {"," entry}] "}"
    entry     := INT ":[" coord {"," coord} "]"
    coord     := "(" BIN "," BIN ")"
    robot     := "robot : [" BIN {"," BIN} "]"
    KIND      := "click" | "type" | "select" | "scroll" | "press"

A grounding record always carries the coordinate when it names a mark (box
marks contribute their center). Robot actions map to the last 256 ids of a
vocabulary of size V.
"""

from __future__ import annotations

import json
import re
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DegenerateStats, ValidationError
from .geometry import NUM_BINS, BBox, Point2, Trace, quantize, quantize_array
from .som import MarkSet

ACTION_KINDS = ("click", "type", "select", "scroll", "press")
ACTION_DIMS = 7
DIM_NAMES = ("x", "y", "z", "yaw", "pitch", "roll", "gripper")


@dataclass(frozen=True)
class TokenRecord:
    text: str
    token_ids: list[int] | None = None
    kind: str = "grounding"

    def to_json(self) -> dict:
        return {"text": self.text, "ids": self.token_ids, "kind": self.kind}


@dataclass(frozen=True)
class UiAction:
    kind: str
    mark: int | None = None
    target: Point2 | BBox | None = None
    text_arg: str | None = None

    def __post_init__(self):
        if self.kind not in ACTION_KINDS:
            raise ValidationError(f"unknown action kind {self.kind!r}")
        if self.kind in ("click", "select") and self.mark is None and self.target is None:
            raise ValidationError(f"{self.kind} needs a mark or a target")
        if self.kind == "type" and self.text_arg is None:
            raise ValidationError("type needs text_arg")

    @classmethod
    def from_json(cls, data: dict) -> UiAction:
        target = data.get("target")
        if target is not None:
            target = BBox.from_json(target) if len(target) == 4 else Point2.from_json(target)
        mark = data.get("mark")
        return cls(data["kind"], None if mark is None else int(mark), target, data.get("text"))


def encode_grounding(action: UiAction, marks: MarkSet) -> TokenRecord:
    parts = [action.kind]
    point = None
    if action.mark is not None:
        if action.mark not in marks:
            raise ValidationError(f"mark {action.mark} not in mark set {marks.labels}")
        parts.append(f"mark {action.mark}")
        point = marks.point_of(action.mark)
    elif action.target is not None:
        point = action.target.center if isinstance(action.target, BBox) else action.target
    if point is not None:
        qx, qy = quantize(point)
        parts.append(f"({qx},{qy})")
    if action.text_arg is not None:
        parts.append(json.dumps(action.text_arg, ensure_ascii=False))
    return TokenRecord(" : ".join(parts), None, "grounding")


_GROUNDING_RE = re.compile(
    r"^(?P<kind>[a-z]+)"
    r"(?: : mark (?P<mark>\d+))?"
    r"(?: : \((?P<x>\d{1,3}),(?P<y>\d{1,3})\))?"
    r"(?: : (?P<text>\".*\"))?$",
    re.DOTALL,
)


@dataclass(frozen=True)
class ParsedGrounding:
    kind: str
    mark: int | None
    bins: tuple[int, int] | None
    text_arg: str | None


def parse_grounding(text: str) -> ParsedGrounding:
    m = _GROUNDING_RE.match(text)
    if m is None or m["kind"] not in ACTION_KINDS:
        raise ValidationError(f"not a grounding record: {text!r}")
    bins = None
    if m["x"] is not None:
        bins = (int(m["x"]), int(m["y"]))
        if max(bins) >= NUM_BINS:
            raise ValidationError(f"bin out of range in {text!r}")
    text_arg = None
    if m["text"] is not None:
        try:
            text_arg = json.loads(m["text"])
        except json.JSONDecodeError:
            raise ValidationError(f"bad text argument in {text!r}") from None
    return ParsedGrounding(m["kind"], None if m["mark"] is None else int(m["mark"]), bins, text_arg)


def future_indices(length: int, horizon: int) -> list[int]:
    """``horizon`` evenly spaced future step indices in ``[1, length-1]``, ending at the last."""
    span = length - 1
    return [(i * span * 2 + horizon) // (2 * horizon) for i in range(1, horizon + 1)]


def encode_tom(
    action_text: str,
    fg_marks: MarkSet,
    fg_traces: Sequence[Trace],
    horizon: int,
) -> TokenRecord:
    """Serialize marks and their future traces; traces pair with marks in label order.

    Out-of-frame trace points are clamped to the image border before
    quantization.
    """
    if horizon < 1:
        raise ValidationError(f"horizon must be >= 1, got {horizon}")
    labels = fg_marks.labels
    if len(labels) != len(fg_traces):
        raise ValidationError(f"{len(labels)} marks but {len(fg_traces)} traces")
    entries = []
    for label, trace in zip(labels, fg_traces):
        if len(trace) < horizon + 1:
            raise ValidationError(
                f"trace for mark {label} has {len(trace)} points, horizon {horizon} needs {horizon + 1}"
            )
        pts = np.clip(trace.points[future_indices(len(trace), horizon)], 0.0, 1.0)
        bins = quantize_array(pts)
        coords = ",".join(f"({bx},{by})" for bx, by in bins)
        entries.append(f"{label}:[{coords}]")
    text = f"{action_text} : marks {{{','.join(map(str, labels))}}} : traces {{{','.join(entries)}}}"
    return TokenRecord(text, None, "tom")


_TOM_RE = re.compile(r"^(?P<action>.*) : marks \{(?P<marks>[0-9,]*)\} : traces \{(?P<traces>[0-9:\[\](),]*)\}$", re.DOTALL)
_ENTRY_RE = re.compile(r"(\d+):\[((?:\(\d+,\d+\),?)*)\]")
_COORD_RE = re.compile(r"\((\d+),(\d+)\)")


def parse_tom(text: str) -> tuple[str, list[int], dict[int, list[tuple[int, int]]]]:
    m = _TOM_RE.match(text)
    if m is None:
        raise ValidationError(f"not a trace record: {text!r}")
    labels = [int(v) for v in m["marks"].split(",")] if m["marks"] else []
    traces = {}
    for em in _ENTRY_RE.finditer(m["traces"]):
        traces[int(em[1])] = [(int(x), int(y)) for x, y in _COORD_RE.findall(em[2])]
    if sorted(traces) != sorted(labels):
        raise ValidationError("trace entries do not match the mark list")
    return m["action"], labels, traces


@dataclass(frozen=True)
class RobotAction:
    """End-effector delta (x, y, z, yaw, pitch, roll) plus gripper open/close."""

    delta: tuple[float, ...]

    def __post_init__(self):
        d = tuple(float(v) for v in self.delta)
        if len(d) != ACTION_DIMS:
            raise ValidationError(f"robot action needs {ACTION_DIMS} values, got {len(d)}")
        if not all(np.isfinite(d)):
            raise ValidationError("robot action has non-finite values")
        object.__setattr__(self, "delta", d)


@dataclass(frozen=True, eq=False)
class ActionStats:
    """Per-dimension normalization bounds (1st/99th percentiles of a calibration set)."""

    low: np.ndarray
    high: np.ndarray

    def __post_init__(self):
        low = np.asarray(self.low, dtype=np.float64).reshape(-1)
        high = np.asarray(self.high, dtype=np.float64).reshape(-1)
        if low.shape != (ACTION_DIMS,) or high.shape != (ACTION_DIMS,):
            raise ValidationError(f"stats need {ACTION_DIMS} bounds per side")
        if not np.all(low < high):
            bad = [DIM_NAMES[i] for i in np.flatnonzero(~(low < high))]
            raise ValidationError(f"low must be < high for dimensions {bad}")
        object.__setattr__(self, "low", low)
        object.__setattr__(self, "high", high)

    def to_json(self) -> dict:
        return {"dims": list(DIM_NAMES), "low": self.low.tolist(), "high": self.high.tolist()}

    @classmethod
    def from_json(cls, data: dict) -> ActionStats:
        return cls(data["low"], data["high"])


def _check_vocab(vocab: int) -> None:
    if int(vocab) != vocab or vocab <= NUM_BINS:
        raise ValidationError(f"vocabulary size must be an integer > {NUM_BINS}, got {vocab}")


def encode_robot_batch(actions: np.ndarray, stats: ActionStats, vocab: int) -> np.ndarray:
    """Token ids ``(N, 7)`` for an ``(N, 7)`` array of raw actions."""
    _check_vocab(vocab)
    a = np.asarray(actions, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != ACTION_DIMS:
        raise ValidationError(f"actions must have shape (N, {ACTION_DIMS}), got {a.shape}")
    clipped = np.clip(a, stats.low, stats.high)
    unit = (clipped - stats.low) / (stats.high - stats.low) * 2.0 - 1.0
    bins = np.minimum(np.floor((unit + 1.0) / 2.0 * NUM_BINS), NUM_BINS - 1).astype(np.int64)
    return vocab - NUM_BINS + bins


def decode_robot_batch(ids: np.ndarray, stats: ActionStats, vocab: int) -> np.ndarray:
    _check_vocab(vocab)
    ids = np.asarray(ids)
    if ids.ndim != 2 or ids.shape[1] != ACTION_DIMS:
        raise ValidationError(f"ids must have shape (N, {ACTION_DIMS}), got {ids.shape}")
    bad = (ids < vocab - NUM_BINS) | (ids > vocab - 1)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise ValidationError(
            f"token id {int(ids[row, col])} at position {int(col)} (row {int(row)}) outside "
            f"[{vocab - NUM_BINS}, {vocab - 1}]"
        )
    bins = ids - (vocab - NUM_BINS)
    unit = (bins + 0.5) / NUM_BINS * 2.0 - 1.0
    return stats.low + (unit + 1.0) / 2.0 * (stats.high - stats.low)


def encode_robot(a: RobotAction, stats: ActionStats, vocab: int) -> TokenRecord:
    ids = encode_robot_batch(np.array([a.delta]), stats, vocab)[0]
    bins = ids - (vocab - NUM_BINS)
    text = "robot : [" + ",".join(str(int(b)) for b in bins) + "]"
    return TokenRecord(text, [int(i) for i in ids], "robot")


def decode_robot(ids: Sequence[int], stats: ActionStats, vocab: int) -> RobotAction:
    if len(ids) != ACTION_DIMS:
        raise ValidationError(f"need {ACTION_DIMS} token ids, got {len(ids)}")
    return RobotAction(tuple(decode_robot_batch(np.array([list(ids)]), stats, vocab)[0]))


def fit_stats(actions: Sequence[RobotAction] | np.ndarray) -> ActionStats:
    """1st/99th percentile bounds (linear interpolation) per dimension.

    A constant dimension is widened by 1e-6 on each side, with a
    `DegenerateStats` warning.
    """
    if isinstance(actions, np.ndarray):
        a = np.asarray(actions, dtype=np.float64)
    else:
        a = np.array([act.delta for act in actions], dtype=np.float64).reshape(-1, ACTION_DIMS)
    if a.ndim != 2 or a.shape[1] != ACTION_DIMS:
        raise ValidationError(f"actions must have {ACTION_DIMS} columns, got shape {a.shape}")
    if len(a) < 2:
        raise ValidationError(f"need at least 2 actions to fit stats, got {len(a)}")
    low, high = np.percentile(a, [1, 99], axis=0, method="linear")
    flat = ~(low < high)
    if flat.any():
        warnings.warn(
            f"constant dimensions {[DIM_NAMES[i] for i in np.flatnonzero(flat)]} widened by 1e-6",
            DegenerateStats,
            stacklevel=2,
        )
        low = np.where(flat, low - 1e-6, low)
        high = np.where(flat, high + 1e-6, high)
    return ActionStats(low, high)
