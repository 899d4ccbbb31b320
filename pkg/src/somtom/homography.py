"""Projective transforms for removing camera motion from point traces.

For each future step ``i`` of a clip a homography is fit that maps the
positions at ``t + i`` back onto the positions at ``t``; applying it to every
trace leaves only motion relative to the (mostly static) background.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import (
    DegenerateConfigurationError,
    InsufficientDataError,
    PointAtInfinityError,
    RobustFitFailedError,
    StabilizationSkipped,
    ValidationError,
)
from .geometry import Point2, Trace, stack_traces

DEFAULT_INLIER_PX = 3.0
DEFAULT_MAX_ITERS = 500
# ratio of the 8th to the 1st singular value below which the solution is not unique
_RANK_TOL = 1e-10
_W_EPS = 1e-12
_RANSAC_BATCH = 64
_RANSAC_CONFIDENCE = 0.999


def _normalize_scale(m: np.ndarray) -> np.ndarray:
    if abs(m[2, 2]) > _W_EPS:
        return m / m[2, 2]
    return m / np.linalg.norm(m)


@dataclass(frozen=True, eq=False)
class Homography:
    m: np.ndarray
    residual: float | None = None

    def __post_init__(self):
        m = np.array(self.m, dtype=np.float64)
        if m.shape != (3, 3):
            raise ValidationError(f"homography must be 3x3, got {m.shape}")
        if not np.all(np.isfinite(m)):
            raise ValidationError("homography has non-finite entries")
        m = _normalize_scale(m)
        if abs(np.linalg.det(m)) <= 1e-12:
            raise DegenerateConfigurationError(f"homography is singular (det={np.linalg.det(m):.3e})")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @classmethod
    def identity(cls) -> Homography:
        return cls(np.eye(3))

    @classmethod
    def translation(cls, dx: float, dy: float) -> Homography:
        return cls(np.array([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]]))

    def inverse(self) -> Homography:
        return Homography(np.linalg.inv(self.m))

    def __matmul__(self, other: Homography) -> Homography:
        return Homography(self.m @ other.m)

    def to_json(self) -> list[float]:
        return [float(v) for v in self.m.ravel()]

    @classmethod
    def from_json(cls, data: Sequence[float]) -> Homography:
        if len(data) != 9:
            raise ValidationError(f"homography needs 9 values, got {len(data)}")
        return cls(np.asarray(data, dtype=np.float64).reshape(3, 3))


@dataclass(frozen=True, eq=False)
class Correspondences:
    """Matched points: ``src`` at step ``t+i`` and ``dst`` at step ``t``.

    ``image_size`` (width, height) converts normalized coordinates to pixels
    for error thresholds; when omitted the coordinates are taken as pixels.
    """

    src: np.ndarray
    dst: np.ndarray
    weights: np.ndarray | None = None
    image_size: tuple[int, int] | None = None

    def __post_init__(self):
        src = _as_points(self.src, "src")
        dst = _as_points(self.dst, "dst")
        if src.shape != dst.shape:
            raise ValidationError(f"src has {len(src)} points but dst has {len(dst)}")
        object.__setattr__(self, "src", src)
        object.__setattr__(self, "dst", dst)
        if self.weights is not None:
            w = np.asarray(self.weights, dtype=np.float64)
            if w.shape != (len(src),) or np.any(w < 0) or not np.all(np.isfinite(w)):
                raise ValidationError("weights must be one finite non-negative value per pair")
            object.__setattr__(self, "weights", w)

    def __len__(self) -> int:
        return len(self.src)

    @property
    def pixel_scale(self) -> np.ndarray:
        if self.image_size is None:
            return np.ones(2)
        return np.asarray(self.image_size, dtype=np.float64)

    def subset(self, mask: np.ndarray) -> Correspondences:
        w = None if self.weights is None else self.weights[mask]
        return Correspondences(self.src[mask], self.dst[mask], w, self.image_size)


def _as_points(pts, name: str) -> np.ndarray:
    if len(pts) and isinstance(pts[0], Point2):
        pts = [(p.x, p.y) for p in pts]
    arr = np.array(pts, dtype=np.float64).reshape(-1, 2)
    if not np.all(np.isfinite(arr)):
        raise ValidationError(f"{name} contains non-finite coordinates")
    return arr


def _similarity_normalizer(pts: np.ndarray) -> np.ndarray:
    """Batched isotropic normalization: centroid to origin, mean distance sqrt(2).

    ``pts`` has shape ``(..., n, 2)``; returns ``(..., 3, 3)`` matrices, with
    NaN entries where the points are coincident.
    """
    centroid = pts.mean(axis=-2)
    mean_dist = np.linalg.norm(pts - centroid[..., None, :], axis=-1).mean(axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = np.where(mean_dist > 1e-15, math.sqrt(2.0) / mean_dist, np.nan)
    t = np.zeros(pts.shape[:-2] + (3, 3))
    t[..., 0, 0] = scale
    t[..., 1, 1] = scale
    t[..., 0, 2] = -scale * centroid[..., 0]
    t[..., 1, 2] = -scale * centroid[..., 1]
    t[..., 2, 2] = 1.0
    return t


def _to_homogeneous(pts: np.ndarray) -> np.ndarray:
    return np.concatenate([pts, np.ones(pts.shape[:-1] + (1,))], axis=-1)


def _dlt_batch(src: np.ndarray, dst: np.ndarray, weights: np.ndarray | None = None):
    """Normalized DLT over a batch of correspondence sets.

    ``src``/``dst`` are ``(B, n, 2)``. Returns ``(H, ok)`` where ``H`` is
    ``(B, 3, 3)`` (scale-normalized where possible) and ``ok`` flags the
    batches whose solution is unique.
    """
    t_src = _similarity_normalizer(src)
    t_dst = _similarity_normalizer(dst)
    ok = np.isfinite(t_src).all(axis=(-2, -1)) & np.isfinite(t_dst).all(axis=(-2, -1))
    t_src = np.where(ok[:, None, None], t_src, np.eye(3))
    t_dst = np.where(ok[:, None, None], t_dst, np.eye(3))

    s = np.einsum("bij,bnj->bni", t_src, _to_homogeneous(src))[..., :2]
    d = np.einsum("bij,bnj->bni", t_dst, _to_homogeneous(dst))[..., :2]
    x, y = s[..., 0], s[..., 1]
    u, v = d[..., 0], d[..., 1]
    zero = np.zeros_like(x)
    one = np.ones_like(x)
    rows_u = np.stack([x, y, one, zero, zero, zero, -u * x, -u * y, -u], axis=-1)
    rows_v = np.stack([zero, zero, zero, x, y, one, -v * x, -v * y, -v], axis=-1)
    if weights is not None:
        sw = np.sqrt(weights)[..., None]
        rows_u = rows_u * sw
        rows_v = rows_v * sw
    a = np.concatenate([rows_u, rows_v], axis=-2)

    _, sv, vt = np.linalg.svd(a, full_matrices=True)
    ok &= sv[:, 7] > _RANK_TOL * sv[:, 0]
    hn = vt[:, -1, :].reshape(-1, 3, 3)

    t_dst_inv = np.linalg.inv(t_dst)
    h = t_dst_inv @ hn @ t_src
    h22 = h[:, 2, 2]
    scale = np.where(np.abs(h22) > _W_EPS, h22, np.linalg.norm(h, axis=(1, 2)))
    h = h / scale[:, None, None]
    det = np.linalg.det(h)
    ok &= np.isfinite(det) & (np.abs(det) > 1e-12)
    return h, ok


def _project(h: np.ndarray, pts: np.ndarray):
    """Apply ``(B, 3, 3)`` transforms to ``(n, 2)`` points -> ``(B, n, 2)`` and w."""
    ph = np.einsum("bij,nj->bni", h, _to_homogeneous(pts))
    w = ph[..., 2]
    safe = np.where(np.abs(w) < _W_EPS, np.nan, w)
    return ph[..., :2] / safe[..., None], w


def _transfer_errors(h: np.ndarray, c: Correspondences):
    """Forward and backward transfer error in pixels for each model and pair."""
    scale = c.pixel_scale
    fwd_pts, _ = _project(h, c.src)
    fwd = np.linalg.norm((fwd_pts - c.dst) * scale, axis=-1)
    h_inv = np.linalg.inv(h)
    bwd_pts, _ = _project(h_inv, c.dst)
    bwd = np.linalg.norm((bwd_pts - c.src) * scale, axis=-1)
    fwd = np.where(np.isfinite(fwd), fwd, np.inf)
    bwd = np.where(np.isfinite(bwd), bwd, np.inf)
    return fwd, bwd


def estimate_dlt(c: Correspondences) -> Homography:
    """Least-squares homography mapping ``c.src`` onto ``c.dst``.

    The returned object carries the RMS forward reprojection error (pixels
    when ``c.image_size`` is set) in ``residual``.
    """
    if len(c) < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {len(c)}")
    h, ok = _dlt_batch(c.src[None], c.dst[None], None if c.weights is None else c.weights[None])
    if not ok[0]:
        raise DegenerateConfigurationError(
            "correspondences do not determine a unique homography (coincident or collinear points)"
        )
    fwd_pts, _ = _project(h, c.src)
    err = np.linalg.norm((fwd_pts[0] - c.dst) * c.pixel_scale, axis=-1)
    return Homography(h[0], residual=float(np.sqrt(np.mean(err**2))))


def _required_iterations(inlier_ratio: float) -> float:
    if inlier_ratio <= 0:
        return math.inf
    p_good = inlier_ratio**4
    if p_good >= 1.0:
        return 1
    return math.log(1 - _RANSAC_CONFIDENCE) / math.log(1 - p_good)


def estimate_ransac(
    c: Correspondences,
    inlier_px: float = DEFAULT_INLIER_PX,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> tuple[Homography, np.ndarray]:
    """Robust homography fit; returns the model and a boolean inlier mask.

    Minimal 4-point hypotheses are drawn from ``numpy.random.default_rng(seed)``
    in fixed-size batches, so the result depends only on the inputs and seed.
    A pair is an inlier when both its forward and backward transfer errors are
    within ``inlier_px``. Sampling stops early once the best consensus makes
    a better one unlikely at 99.9% confidence.
    """
    n = len(c)
    if n < 4:
        raise InsufficientDataError(f"need at least 4 correspondences, got {n}")
    if not inlier_px > 0:
        raise ValidationError(f"inlier_px must be positive, got {inlier_px}")
    if max_iters < 1:
        raise ValidationError(f"max_iters must be positive, got {max_iters}")

    rng = np.random.default_rng(seed)
    best_count = -1
    best_cost = math.inf
    best_h = None
    any_valid = False
    done = 0
    needed = float(max_iters)
    while done < min(max_iters, needed):
        b = min(_RANSAC_BATCH, max_iters - done)
        idx = np.argsort(rng.random((b, n)), axis=1)[:, :4]
        done += b
        h, ok = _dlt_batch(c.src[idx], c.dst[idx])
        if not ok.any():
            continue
        any_valid = True
        h = h[ok]
        fwd, bwd = _transfer_errors(h, c)
        inl = (fwd <= inlier_px) & (bwd <= inlier_px)
        counts = inl.sum(axis=1)
        cost = np.where(inl, fwd**2 + bwd**2, 0.0).sum(axis=1)
        for j in range(len(h)):
            if counts[j] > best_count or (counts[j] == best_count and cost[j] < best_cost):
                best_count, best_cost, best_h = int(counts[j]), float(cost[j]), h[j]
        needed = _required_iterations(best_count / n)

    if not any_valid:
        raise DegenerateConfigurationError("every minimal sample was degenerate")
    if best_count < 4:
        raise RobustFitFailedError(f"best model has {best_count} inliers, need at least 4")

    model = best_h
    fwd, bwd = _transfer_errors(model[None], c)
    mask = (fwd[0] <= inlier_px) & (bwd[0] <= inlier_px)
    result = Homography(model)
    for _ in range(5):
        try:
            refit = estimate_dlt(c.subset(mask))
        except DegenerateConfigurationError:
            break
        fwd, bwd = _transfer_errors(refit.m[None], c)
        new_mask = (fwd[0] <= inlier_px) & (bwd[0] <= inlier_px)
        if new_mask.sum() < 4:
            break
        result = refit
        if np.array_equal(new_mask, mask):
            break
        mask = new_mask
    if result.residual is None:
        result = estimate_dlt(c.subset(mask)) if mask.sum() >= 4 else result
    return result, mask


def apply(h: Homography, p: Point2) -> Point2:
    """Projectively map ``p``; the result may leave [0, 1] and is not clamped."""
    x, y, w = h.m @ np.array([p.x, p.y, 1.0])
    if abs(w) < _W_EPS:
        raise PointAtInfinityError(f"point ({p.x}, {p.y}) maps to infinity")
    return Point2(float(x / w), float(y / w))


def apply_points(h: Homography, pts: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Vectorized `apply`. Returns mapped points and a mask of finite results."""
    out, w = _project(h.m[None], np.asarray(pts, dtype=np.float64).reshape(-1, 2))
    finite = np.abs(w[0]) >= _W_EPS
    return out[0], finite


@dataclass(frozen=True)
class StepReport:
    step: int
    points: int
    inliers: int
    residual_px: float | None
    skipped: bool
    homography: list[float] | None = None

    def to_json(self) -> dict:
        return {
            "step": self.step,
            "points": self.points,
            "inliers": self.inliers,
            "residual_px": self.residual_px,
            "skipped": self.skipped,
            "homography": self.homography,
        }


def stabilize_traces_report(
    traces: Sequence[Trace],
    image_size: tuple[int, int],
    inlier_px: float = DEFAULT_INLIER_PX,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> tuple[list[Trace], list[StepReport]]:
    """`stabilize_traces` plus one `StepReport` per future step."""
    if not traces:
        return [], []
    pts, occ = stack_traces(traces)
    length = pts.shape[1]

    def fit(i: int, candidates: np.ndarray):
        usable = candidates & ~occ[:, i] & ~occ[:, 0]
        if usable.sum() < 4:
            return None, usable, f"only {int(usable.sum())} visible points"
        corr = Correspondences(pts[usable, i], pts[usable, 0], image_size=image_size)
        try:
            h, mask = estimate_ransac(corr, inlier_px, max_iters, seed ^ i)
        except (DegenerateConfigurationError, RobustFitFailedError) as exc:
            return None, usable, str(exc)
        full = np.zeros(len(pts), bool)
        full[np.flatnonzero(usable)[mask]] = True
        return h, usable, full

    # pass 1: every visible point; a small mover that has barely moved can be
    # absorbed by the 8-dof warp at early steps, so the background candidates
    # are the points RANSAC kept at every step where they were visible
    everyone = np.ones(len(pts), bool)
    candidates = everyone.copy()
    first = {}
    for i in range(1, length):
        h, usable, inl = fit(i, everyone)
        first[i] = (h, usable, inl)
        if h is not None:
            candidates &= inl | ~usable

    out = pts.copy()
    reports = []
    for i in range(1, length):
        h, usable, inl = fit(i, candidates)
        if h is None:
            h, usable, inl = first[i]
        if h is None:
            warnings.warn(f"step {i}: {inl}; stabilization skipped", StabilizationSkipped, stacklevel=2)
            reports.append(StepReport(i, int(usable.sum()), 0, None, True))
            continue
        mapped, finite = apply_points(h, pts[:, i])
        out[:, i] = np.where(finite[:, None], mapped, pts[:, i])
        reports.append(StepReport(i, int(usable.sum()), int(inl.sum()), h.residual, False, h.to_json()))
    stabilized = [
        Trace(out[k], t.occluded, t.seed_index) for k, t in enumerate(traces)
    ]
    return stabilized, reports


def stabilize_traces(
    traces: Sequence[Trace],
    image_size: tuple[int, int],
    inlier_px: float = DEFAULT_INLIER_PX,
    max_iters: int = DEFAULT_MAX_ITERS,
    seed: int = 0,
) -> list[Trace]:
    """Map every trace into the coordinate frame of its first step.

    Each future step gets its own homography fit against step 0, not
    chained. A first RANSAC pass over all visible points finds the
    background candidates: points that are inliers at every step where they
    are visible. Each step is then refit on the candidates visible at that
    step, falling back to the first-pass model when fewer than 4 remain.
    Occlusion flags are passed through unchanged.
    """
    return stabilize_traces_report(traces, image_size, inlier_px, max_iters, seed)[0]
