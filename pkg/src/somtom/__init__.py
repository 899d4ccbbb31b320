"""Set-of-Mark and Trace-of-Mark supervision from screenshots, videos and robot logs."""

from .codec import (
    ActionStats,
    RobotAction,
    TokenRecord,
    UiAction,
    decode_robot,
    encode_grounding,
    encode_robot,
    encode_tom,
    fit_stats,
    parse_grounding,
    parse_tom,
)
from .errors import SomTomError, ValidationError
from .evalkit import BoxAnnotation, SyntheticScene, precision_report, render_scene, trace_precision
from .geometry import BBox, Point2, Trace, dequantize, quantize
from .homography import Correspondences, Homography, estimate_dlt, estimate_ransac, stabilize_traces
from .segmentation import Clip, Segment, detect_shots, filter_by_similarity
from .som import MarkSet, apply_som, apply_som_points, find_optimal_corner, get_mark_size
from .tom import TomConfig, TomResult, classify_traces, has_global_motion, kmeans, run_tom
from .tracking import FrameSequence, LKTracker, TrackerConfig, load_external_traces, track

__version__ = "0.1.0"
