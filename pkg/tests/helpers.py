"""Shared builders for synthetic test data."""

import numpy as np

from somtom.evalkit import SceneObject, SyntheticScene, moving_object_scene, render_scene
from somtom.geometry import Trace


def random_homography(rng, strength=0.15):
    """Well-conditioned projective matrix acting on normalized coordinates."""
    m = np.eye(3)
    m[:2, :2] += rng.uniform(-strength, strength, (2, 2))
    m[:2, 2] = rng.uniform(-0.1, 0.1, 2)
    m[2, :2] = rng.uniform(-strength, strength, 2)
    return m


def project(m, pts):
    ph = np.c_[pts, np.ones(len(pts))] @ m.T
    return ph[:, :2] / ph[:, 2:]


def grid_traces(n_side=15, length=8, width=200, height=200, drift=(0.0, 0.0), movers=()):
    """Grid traces under a constant pixel drift; ``movers`` maps seed -> extra px velocity."""
    movers = dict(movers)
    out = []
    cc = (np.arange(n_side) + 0.5) / n_side
    xx, yy = np.meshgrid(cc, cc)
    for k, (x, y) in enumerate(zip(xx.ravel(), yy.ravel())):
        v = np.array(drift, float) + np.array(movers.get(k, (0.0, 0.0)), float)
        steps = np.arange(length)[:, None] * v / [width, height]
        out.append(Trace(np.array([x, y]) + steps, np.zeros(length, bool), k))
    return out


def object_seeds(s, size_px, start_px, width, height):
    """Seed indices whose grid position falls inside an axis-aligned box at frame 0."""
    out = []
    for k in range(s * s):
        x = (k % s + 0.5) / s * width
        y = (k // s + 0.5) / s * height
        if start_px[0] <= x < start_px[0] + size_px[0] and start_px[1] <= y < start_px[1] + size_px[1]:
            out.append(k)
    return out


def pan_scene(rng, width=256, height=256, frames=12, max_pan=10.0, min_obj_speed=4.0, grid_size=15, size_range=(50, 80)):
    """One object moving in the world under a panning camera, kept in view with a margin.

    ``min_obj_speed`` bounds the world (camera-independent) speed of the object.
    """
    pan = rng.uniform(-max_pan, max_pan, 2)
    size = rng.uniform(*size_range, 2)
    vel = np.zeros(2)
    while np.hypot(*vel) < min_obj_speed:
        vel = rng.uniform(-8, 8, 2)
    # image position = world position - pan offset
    travel = (vel - pan) * (frames - 1)
    margin = 24
    lo = margin - np.minimum(travel, 0)
    hi = np.array([width, height]) - size - margin - np.maximum(travel, 0)
    start = rng.uniform(lo, np.maximum(hi, lo))
    return moving_object_scene(
        width, height, frames, tuple(size), tuple(start), tuple(vel), tuple(pan),
        seed=int(rng.integers(1 << 30)), grid_size=grid_size,
    )


__all__ = [
    "ACCEPTANCE",
    "SceneObject",
    "SyntheticScene",
    "grid_traces",
    "moving_object_scene",
    "object_seeds",
    "pan_scene",
    "project",
    "random_homography",
    "render_scene",
    "report",
]


# (criterion, passed, detail) lines gathered by the acceptance suite
ACCEPTANCE: list[tuple[int, bool, str]] = []


def report(criterion: int, passed: bool, detail: str) -> None:
    line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE.append((criterion, passed, line))
    print(line)
