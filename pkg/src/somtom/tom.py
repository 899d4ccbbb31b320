"""Trace-of-Mark extraction for a single clip.

Runs the clip through tracking, removes camera motion when the scene moves as
a whole, splits traces into moving (foreground) and static (background)
sets, clusters each set, keeps one representative per cluster and marks the
representatives' start points on the first frame. The foreground traces are
the planning targets.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ClusterCountClamped, NoForeground, ValidationError
from .geometry import Point2, Trace, motion_magnitudes, stack_traces
from .homography import DEFAULT_INLIER_PX, DEFAULT_MAX_ITERS, stabilize_traces_report
from .som import MarkSet, apply_som_points
from .tracking import FrameSequence, LKTracker, Tracker, TrackerConfig

OCCLUSION_DROP_FRACTION = 0.5
# magnitudes go through normalized coordinates, so a step of exactly 2 px
# can come back as 1.9999999999999998
_PX_TOL = 1e-9


@dataclass(frozen=True)
class TomConfig:
    s: int = 15
    eta: float = 2.0
    epsilon: float = 2.0
    max_fg_clusters: int = 5
    seed: int = 0
    deterministic_selection: bool = True
    inlier_px: float = DEFAULT_INLIER_PX
    ransac_iters: int = DEFAULT_MAX_ITERS

    def __post_init__(self):
        if self.s < 2:
            raise ValidationError(f"grid size s must be >= 2, got {self.s}")
        if not (self.eta > 0 and self.epsilon > 0):
            raise ValidationError("eta and epsilon must be positive")
        if self.max_fg_clusters < 1:
            raise ValidationError("max_fg_clusters must be >= 1")


def _magnitudes(traces: Sequence[Trace], image_size: tuple[int, int]) -> np.ndarray:
    pts, occ = stack_traces(traces)
    return motion_magnitudes(pts, occ, *image_size)


def has_global_motion(traces: Sequence[Trace], eta: float, image_size: tuple[int, int]) -> bool:
    """True when the median trace moves more than ``eta`` pixels per frame.

    The median ignores a minority of moving foreground points, so only a
    moving camera (most of the grid moving) trips it.
    """
    if not traces:
        return False
    return bool(np.median(_magnitudes(traces, image_size)) > eta + _PX_TOL)


def classify_traces(
    traces: Sequence[Trace], epsilon: float, image_size: tuple[int, int]
) -> tuple[list[Trace], list[Trace]]:
    """Split into (foreground, background) at ``epsilon`` px/frame, boundary inclusive.

    Traces occluded in more than half of their frames belong to neither set.
    """
    if not traces:
        return [], []
    mags = _magnitudes(traces, image_size)
    fg, bg = [], []
    for t, m in zip(traces, mags):
        if t.occluded.mean() > OCCLUSION_DROP_FRACTION:
            continue
        (fg if m >= epsilon - _PX_TOL else bg).append(t)
    return fg, bg


def trace_features(traces: Sequence[Trace]) -> np.ndarray:
    """Concatenated normalized (x, y) per step, one row per trace."""
    pts, _ = stack_traces(traces)
    return pts.reshape(len(traces), -1)


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    # objective after every assignment and every update step
    history: list[float] = field(default_factory=list)
    iterations: int = 0


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    return ((x[:, None, :] - c[None, :, :]) ** 2).sum(axis=-1)


def _objective(x: np.ndarray, c: np.ndarray, labels: np.ndarray) -> float:
    return float(((x - c[labels]) ** 2).sum())


def kmeans_plusplus(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    chosen = [int(rng.integers(n))]
    d2 = ((x - x[chosen[0]]) ** 2).sum(axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            nxt = next(i for i in range(n) if i not in chosen)
        chosen.append(nxt)
        d2 = np.minimum(d2, ((x - x[nxt]) ** 2).sum(axis=1))
    return x[chosen].copy()


def lloyd(x: np.ndarray, k: int, seed: int = 0, max_iter: int = 100, tol: float = 1e-9) -> KMeansResult:
    """Lloyd's algorithm from a seeded k-means++ start.

    An empty cluster takes over the point farthest from its centroid among
    clusters that have points to spare.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if k < 1 or k > n:
        raise ValidationError(f"k must be in [1, {n}], got {k}")
    rng = np.random.default_rng(seed)
    centroids = kmeans_plusplus(x, k, rng)
    history = []
    labels = np.zeros(n, dtype=np.int64)
    it = 0
    for it in range(1, max_iter + 1):
        d = _sq_dists(x, centroids)
        labels = np.argmin(d, axis=1)
        counts = np.bincount(labels, minlength=k)
        for j in np.flatnonzero(counts == 0):
            own = d[np.arange(n), labels]
            spare = counts[labels] > 1
            p = int(np.argmax(np.where(spare, own, -1.0)))
            counts[labels[p]] -= 1
            labels[p] = j
            counts[j] = 1
            centroids[j] = x[p]
            d[:, j] = ((x - x[p]) ** 2).sum(axis=1)
        history.append(_objective(x, centroids, labels))
        new = np.stack([x[labels == j].mean(axis=0) for j in range(k)])
        shift = float(np.abs(new - centroids).max())
        centroids = new
        history.append(_objective(x, centroids, labels))
        if shift < tol:
            break
    return KMeansResult(labels, centroids, history, it)


def kmeans(traces: Sequence[Trace], k: int, seed: int = 0) -> np.ndarray:
    """Cluster id per trace; features are the traces' raw coordinates over time."""
    if not traces:
        raise ValidationError("cannot cluster an empty trace set")
    if k < 1 or k > len(traces):
        raise ValidationError(f"k must be in [1, {len(traces)}], got {k}")
    return lloyd(trace_features(traces), k, seed).labels


def select_representatives(
    traces: Sequence[Trace],
    assignments: Sequence[int],
    mode: str = "deterministic",
    seed: int = 0,
) -> list[Trace]:
    """One trace per cluster, in cluster-id order.

    ``deterministic`` takes the trace closest to its cluster centroid (ties to
    the lowest seed index); ``random`` draws one uniformly with a seeded
    generator.
    """
    if mode not in ("deterministic", "random"):
        raise ValidationError(f"unknown selection mode {mode!r}")
    labels = np.asarray(assignments)
    if len(labels) != len(traces):
        raise ValidationError("one assignment per trace required")
    feats = trace_features(traces) if traces else np.zeros((0, 0))
    rng = np.random.default_rng(seed)
    reps = []
    for j in np.unique(labels):
        members = sorted(np.flatnonzero(labels == j), key=lambda i: traces[i].seed_index)
        if mode == "random":
            reps.append(traces[members[int(rng.integers(len(members)))]])
            continue
        centroid = feats[members].mean(axis=0)
        d = ((feats[members] - centroid) ** 2).sum(axis=1)
        reps.append(traces[members[int(np.argmin(d))]])
    return reps


def choose_k(n_fg: int, cfg: TomConfig) -> int:
    cap = min(cfg.max_fg_clusters, n_fg)
    if cap < 1:
        return 0
    if cfg.deterministic_selection:
        return math.ceil((1 + cap) / 2)
    return int(np.random.default_rng(cfg.seed).integers(1, cap + 1))


@dataclass
class TomResult:
    marked_first_frame: np.ndarray
    marks: MarkSet
    fg_marks: MarkSet
    bg_marks: MarkSet
    fg_traces: list[Trace]
    bg_traces: list[Trace]
    diagnostics: dict

    @property
    def has_supervision(self) -> bool:
        return bool(self.fg_traces)

    def to_json(self) -> dict:
        return {
            "marks": self.marks.to_json(),
            "fg_marks": self.fg_marks.to_json(),
            "bg_marks": self.bg_marks.to_json(),
            "fg_traces": [t.to_json() for t in self.fg_traces],
            "diagnostics": self.diagnostics,
        }


def run_tom(
    seq: FrameSequence,
    cfg: TomConfig | None = None,
    tracker: Tracker | None = None,
    image_ref: str = "",
) -> TomResult:
    cfg = cfg or TomConfig()
    tracker = tracker or LKTracker(TrackerConfig(grid_size=cfg.s))
    size = seq.size
    notes: list[str] = []

    traces = tracker.track(seq)
    global_motion = has_global_motion(traces, cfg.eta, size)
    reports = []
    if global_motion:
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            traces, reports = stabilize_traces_report(
                traces, size, cfg.inlier_px, cfg.ransac_iters, cfg.seed
            )
        notes.extend(str(w.message) for w in caught)

    fg, bg = classify_traces(traces, cfg.epsilon, size)
    k = choose_k(len(fg), cfg)
    k_bg = 0
    fg_reps: list[Trace] = []
    bg_reps: list[Trace] = []
    if k == 0:
        msg = "no foreground traces; clip yields no supervision"
        warnings.warn(msg, NoForeground, stacklevel=2)
        notes.append(msg)
    else:
        mode = "deterministic" if cfg.deterministic_selection else "random"
        fg_reps = select_representatives(fg, kmeans(fg, k, cfg.seed), mode, cfg.seed)
        k_bg = min(2 * k, len(bg))
        if k_bg < 2 * k:
            msg = f"only {len(bg)} background traces; using {k_bg} background clusters instead of {2 * k}"
            warnings.warn(msg, ClusterCountClamped, stacklevel=2)
            notes.append(msg)
        if k_bg > 0:
            bg_reps = select_representatives(bg, kmeans(bg, k_bg, cfg.seed + 1), mode, cfg.seed + 1)

    # labels follow reading order of the start points, so label values do not
    # reveal which marks are foreground
    tagged = [(t, True) for t in fg_reps] + [(t, False) for t in bg_reps]
    tagged.sort(key=lambda it: (it[0].points[0, 1], it[0].points[0, 0], it[0].seed_index))
    points = [Point2(*np.clip(t.points[0], 0.0, 1.0)) for t, _ in tagged]
    marked, marks, _ = apply_som_points(seq.first_frame_rgb(), points, image_ref)
    fg_labels = [i + 1 for i, (_, is_fg) in enumerate(tagged) if is_fg]
    bg_labels = [i + 1 for i, (_, is_fg) in enumerate(tagged) if not is_fg]
    fg_traces = [tagged[i - 1][0] for i in fg_labels]
    bg_traces = [tagged[i - 1][0] for i in bg_labels]

    diagnostics = {
        "global_motion_detected": global_motion,
        "homography_residuals": [r.residual_px for r in reports],
        "homography_steps": [r.to_json() for r in reports],
        "n_traces": len(traces),
        "n_foreground": len(fg),
        "n_background": len(bg),
        "n_dropped": len(traces) - len(fg) - len(bg),
        "k_foreground": k,
        "k_background": k_bg,
        "warnings": notes,
    }
    return TomResult(
        marked,
        marks,
        marks.subset(fg_labels),
        marks.subset(bg_labels),
        fg_traces,
        bg_traces,
        diagnostics,
    )
