"""Frame directories, PNG files and JSON/JSONL helpers."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Iterable, Iterator

import cv2
import numpy as np

from .errors import ValidationError
from .tracking import FrameSequence, rgb_to_luma

FRAME_SUFFIXES = (".png", ".pgm")
META_FILE = "meta.json"
DEFAULT_FPS = 30.0


def frame_paths(directory: str | os.PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise ValidationError(f"frame directory {d} does not exist")
    return sorted(p for p in d.iterdir() if p.suffix.lower() in FRAME_SUFFIXES)


def read_fps(directory: str | os.PathLike) -> float:
    meta = Path(directory) / META_FILE
    if not meta.exists():
        return DEFAULT_FPS
    with open(meta, encoding="utf-8") as f:
        return float(json.load(f).get("fps", DEFAULT_FPS))


def read_image(path: str | os.PathLike) -> np.ndarray:
    """RGB (H, W, 3) or grayscale (H, W) uint8."""
    img = cv2.imread(os.fspath(path), cv2.IMREAD_UNCHANGED)
    if img is None:
        raise ValidationError(f"cannot read image {path}")
    if img.dtype != np.uint8:
        img = (img >> 8).astype(np.uint8) if img.dtype == np.uint16 else img.astype(np.uint8)
    if img.ndim == 3:
        if img.shape[2] == 4:
            img = img[:, :, :3]
        img = cv2.cvtColor(img, cv2.COLOR_BGR2RGB)
    return img


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    img = read_image(path)
    return np.repeat(img[:, :, None], 3, axis=2) if img.ndim == 2 else img


def encode_png(img: np.ndarray) -> bytes:
    arr = img if img.ndim == 2 else cv2.cvtColor(img, cv2.COLOR_RGB2BGR)
    ok, buf = cv2.imencode(".png", arr)
    if not ok:
        raise ValidationError("PNG encoding failed")
    return buf.tobytes()


def write_png(path: str | os.PathLike, img: np.ndarray) -> bytes:
    data = encode_png(img)
    Path(path).write_bytes(data)
    return data


def iter_luma(directory: str | os.PathLike, start: int = 0, end: int | None = None) -> Iterator[np.ndarray]:
    """Stream grayscale frames ``[start, end)`` one at a time."""
    for p in frame_paths(directory)[start:end]:
        yield rgb_to_luma(read_image(p))


def load_frames(directory: str | os.PathLike, start: int = 0, end: int | None = None) -> FrameSequence:
    paths = frame_paths(directory)[start:end]
    if len(paths) < 2:
        raise ValidationError(f"{directory}: need at least 2 frames in range, found {len(paths)}")
    first = read_image(paths[0])
    gray = [rgb_to_luma(first)] + [rgb_to_luma(read_image(p)) for p in paths[1:]]
    shapes = {g.shape for g in gray}
    if len(shapes) != 1:
        raise ValidationError(f"{directory}: frames have mismatched dimensions {sorted(shapes)}")
    rgb_first = first if first.ndim == 3 else None
    return FrameSequence(np.stack(gray), read_fps(directory), rgb_first)


def write_frames(directory: str | os.PathLike, frames: Iterable[np.ndarray], fps: float = DEFAULT_FPS) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_png(d / f"{i:06d}.png", f)
    with open(d / META_FILE, "w", encoding="utf-8") as f:
        json.dump({"fps": fps}, f)


def dumps(obj) -> str:
    """Canonical JSON: sorted keys, compact separators."""
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def write_json(path: str | os.PathLike, obj) -> bytes:
    data = (dumps(obj) + "\n").encode("utf-8")
    Path(path).write_bytes(data)
    return data


def read_json(path: str | os.PathLike):
    with open(path, encoding="utf-8") as f:
        try:
            return json.load(f)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: invalid JSON ({exc.msg})") from None


def read_jsonl(path: str | os.PathLike) -> list[dict]:
    out = []
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise ValidationError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
    return out


def write_jsonl(path: str | os.PathLike, records: Iterable) -> bytes:
    data = "".join(dumps(r) + "\n" for r in records).encode("utf-8")
    Path(path).write_bytes(data)
    return data


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def sha256_file(path: str | os.PathLike) -> str:
    return sha256_bytes(Path(path).read_bytes())
