"""Command-line driver: manifests in, marked images and token records out.

Every stage writes under ``<out>/<stage>/``. Records are processed by a
bounded worker pool; each finished record leaves a small marker file with
content hashes of its artifacts, so an interrupted run picks up where it
stopped. Merged outputs follow manifest order, whatever the worker count.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import re
import sys
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import io
from .codec import (
    ACTION_DIMS,
    ActionStats,
    UiAction,
    encode_grounding,
    encode_robot_batch,
    encode_tom,
    fit_stats,
)
from .config import PipelineConfig, derive_seed, load_config
from .errors import ConfigError, SomTomError, UndefinedMetricError, ValidationError
from .evalkit import load_annotations, precision_report
from .geometry import NUM_BINS
from .segmentation import Clip, Segment, detect_shots, filter_by_similarity, load_scores
from .som import apply_som, load_boxes
from .tom import run_tom
from .tracking import LKTracker, PrecomputedTracker, load_external_traces

log = logging.getLogger("somtom")

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2
RECORD_TYPES = ("ui-image", "video-clip", "robot-trajectory")
PATH_KEYS = ("image", "boxes", "frames", "traces", "path", "annotations")


def safe_name(record_id: str) -> str:
    return re.sub(r"[^A-Za-z0-9._-]", "_", record_id)


def record_id(record: dict) -> str:
    if "id" in record:
        return str(record["id"])
    if "clip" in record:
        return str(record["clip"])
    if "video" in record:
        return f"{record['video']}:{record.get('start')}-{record.get('end')}"
    raise ValidationError("record has no id")


@dataclasses.dataclass(frozen=True)
class StageContext:
    cfg: PipelineConfig
    base: str  # directory that relative manifest paths are resolved against
    out: str  # stage output directory

    def resolve(self, p: str) -> Path:
        return Path(p) if os.path.isabs(p) else Path(self.base) / p


# ---------------------------------------------------------------- runner


def _write(ctx: StageContext, rel: str, data: bytes, artifacts: dict) -> None:
    path = Path(ctx.out) / rel
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)
    artifacts[rel] = io.sha256_bytes(data)


def _record_key(record: dict, cfg: PipelineConfig) -> str:
    return io.sha256_bytes((io.dumps(record) + cfg.hash).encode())


def _resume(ctx: StageContext, rid: str, key: str) -> dict | None:
    marker = Path(ctx.out) / "done" / f"{safe_name(rid)}.json"
    if not marker.exists():
        return None
    try:
        data = io.read_json(marker)
    except (ValidationError, OSError):
        return None
    if data.get("key") != key:
        return None
    for rel, digest in data["outcome"].get("artifacts", {}).items():
        p = Path(ctx.out) / rel
        if not p.exists() or io.sha256_file(p) != digest:
            return None
    return data["outcome"]


def _mark_done(ctx: StageContext, rid: str, key: str, outcome: dict) -> None:
    done = Path(ctx.out) / "done"
    done.mkdir(parents=True, exist_ok=True)
    tmp = done / f".{safe_name(rid)}.tmp"
    io.write_json(tmp, {"key": key, "outcome": outcome})
    os.replace(tmp, done / f"{safe_name(rid)}.json")


def _guarded(job):
    fn, record, ctx = job
    rid = record_id(record)
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            outcome = fn(record, ctx)
    except (SomTomError, OSError, KeyError, TypeError, ValueError) as exc:
        return {"id": rid, "status": "fail", "error": f"{type(exc).__name__}: {exc}"}
    outcome.setdefault("status", "ok")
    outcome["id"] = rid
    return outcome


def run_records(
    records: Sequence[dict],
    fn: Callable[[dict, StageContext], dict],
    ctx: StageContext,
) -> list[dict]:
    """Apply ``fn`` to every record, reusing outcomes of records already done."""
    Path(ctx.out).mkdir(parents=True, exist_ok=True)
    outcomes: list[dict | None] = [None] * len(records)
    keys = [_record_key(r, ctx.cfg) for r in records]
    todo = []
    for i, r in enumerate(records):
        prev = _resume(ctx, record_id(r), keys[i])
        if prev is None:
            todo.append(i)
        else:
            outcomes[i] = prev
    if len(records) > len(todo):
        log.info("resuming: %d of %d records already done", len(records) - len(todo), len(records))
    jobs = [(fn, records[i], ctx) for i in todo]
    if ctx.cfg.workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=ctx.cfg.workers) as pool:
            results = pool.map(_guarded, jobs)
            for i, res in zip(todo, results):
                outcomes[i] = res
                _finish(ctx, keys[i], res)
    else:
        for i, job in zip(todo, jobs):
            outcomes[i] = _guarded(job)
            _finish(ctx, keys[i], outcomes[i])
    return outcomes  # type: ignore[return-value]


def _finish(ctx: StageContext, key: str, outcome: dict) -> None:
    if outcome["status"] == "fail":
        log.warning("skipped record %s: %s", outcome["id"], outcome["error"])
    else:
        _mark_done(ctx, outcome["id"], key, outcome)


def _summarize(stage: str, outcomes: list[dict], cfg: PipelineConfig) -> dict:
    counts = {s: sum(o["status"] == s for o in outcomes) for s in ("ok", "skip", "fail")}
    entries = []
    for o in outcomes:
        e = {"id": o["id"], "status": o["status"]}
        if "error" in o:
            e["error"] = o["error"]
        if o.get("artifacts"):
            e["artifacts"] = o["artifacts"]
        entries.append(e)
    return {"stage": stage, "config_hash": cfg.hash, "counts": counts, "records": entries}


def _check_budget(counts: dict, total: int, budget: float) -> int:
    rate = counts["fail"] / total if total else 0.0
    if rate > budget:
        log.error("failure rate %.4f exceeds budget %.4f", rate, budget)
        return EXIT_FAILED
    return EXIT_OK


def _print_counts(stage: str, counts: dict, extra: str = "") -> None:
    print(f"{stage}: {counts['ok']} ok, {counts['skip']} skipped, {counts['fail']} failed{extra}")


def _load_manifest(path: str) -> list[dict]:
    records = io.read_jsonl(path)
    seen = set()
    for lineno, r in enumerate(records, start=1):
        if not isinstance(r, dict):
            raise ValidationError(f"{path}: record {lineno} is not an object")
        rid = record_id(r)
        if rid in seen:
            raise ValidationError(f"{path}: duplicate record id {rid!r}")
        seen.add(rid)
    return records


# ---------------------------------------------------------------- som-ui


def _som_ui_record(record: dict, ctx: StageContext) -> dict:
    if record.get("type", "ui-image") != "ui-image":
        raise ValidationError(f"expected a ui-image record, got {record.get('type')!r}")
    rid = record_id(record)
    name = safe_name(rid)
    img = io.read_rgb(ctx.resolve(record["image"]))
    boxes = load_boxes(ctx.resolve(record["boxes"]))
    raster, marks, placements = apply_som(img, boxes, image_ref=str(record["image"]))
    tokens = []
    for i, a in enumerate(record.get("actions", [])):
        rec = encode_grounding(UiAction.from_json(a), marks).to_json()
        rec.update(id=rid, action=i, image=f"images/{name}.png")
        tokens.append(rec)
    artifacts: dict = {}
    _write(ctx, f"images/{name}.png", io.encode_png(raster), artifacts)
    _write(ctx, f"marks/{name}.json", (io.dumps(marks.to_json()) + "\n").encode(), artifacts)
    _write(ctx, f"placements/{name}.jsonl", "".join(io.dumps(p.to_json()) + "\n" for p in placements).encode(), artifacts)
    return {"artifacts": artifacts, "tokens": tokens}


def cmd_som_ui(manifest: str, cfg: PipelineConfig) -> int:
    records = _load_manifest(manifest)
    ctx = StageContext(cfg, str(Path(manifest).parent), str(Path(cfg.out) / "som-ui"))
    outcomes = run_records(records, _som_ui_record, ctx)
    io.write_jsonl(Path(ctx.out) / "records.jsonl", [t for o in outcomes for t in o.get("tokens", [])])
    summary = _summarize("som-ui", outcomes, cfg)
    io.write_json(Path(ctx.out) / "manifest.json", summary)
    _print_counts("som-ui", summary["counts"])
    return _check_budget(summary["counts"], len(records), cfg.fail_budget)


# ---------------------------------------------------------------- segment


def _segment_record(record: dict, ctx: StageContext) -> dict:
    seg = Segment.from_json(record)
    frames = record.get("frames")
    if frames is None:
        root = ctx.cfg.segmentation.video_root
        if root is None:
            raise ValidationError(f"record {record_id(record)} has no frames directory")
        frames = os.path.join(root, seg.video_id)
    frames_dir = ctx.resolve(frames)
    sc = ctx.cfg.segmentation
    clips = detect_shots(io.iter_luma(frames_dir, seg.start_frame, seg.end_frame), sc.threshold, sc.min_len, seg)
    fps = io.read_fps(frames_dir)
    out = []
    for c in clips:
        rec = c.to_json()
        rec.update(frames=os.path.relpath(frames_dir, ctx.out), fps=fps)
        out.append(rec)
    return {"clips": out}


def cmd_segment(manifest: str, cfg: PipelineConfig, scores_path: str | None = None) -> int:
    sc = cfg.segmentation
    scores_path = scores_path or sc.scores
    if sc.filter and scores_path is None:
        raise ConfigError("similarity filtering requested but no score file given")
    if scores_path is not None and not os.path.exists(scores_path):
        raise ConfigError(f"score file {scores_path} does not exist")
    records = _load_manifest(manifest)
    ctx = StageContext(cfg, str(Path(manifest).parent), str(Path(cfg.out) / "segment"))
    outcomes = run_records(records, _segment_record, ctx)
    clips = [c for o in outcomes for c in o.get("clips", [])]
    n_detected = len(clips)
    if scores_path is not None:
        scores = load_scores(scores_path)
        objs = [
            Clip(Segment.from_json(c), c["clip_start"], c["clip_end"])
            for c in clips
        ]
        keep = {c.clip_id for c in filter_by_similarity(objs, scores, sc.similarity_threshold)}
        clips = [c for c in clips if c["clip"] in keep]
        if not clips:
            log.warning("no clip reached similarity %.2f; clip manifest is empty", sc.similarity_threshold)
    io.write_jsonl(Path(ctx.out) / "clips.jsonl", clips)
    summary = _summarize("segment", outcomes, cfg)
    summary.update(clips_detected=n_detected, clips_kept=len(clips))
    io.write_json(Path(ctx.out) / "manifest.json", summary)
    _print_counts("segment", summary["counts"], f"; {len(clips)} of {n_detected} clips kept")
    return _check_budget(summary["counts"], len(records), cfg.fail_budget)


# ---------------------------------------------------------------- tom


def _tom_record(record: dict, ctx: StageContext) -> dict:
    if record.get("type", "video-clip") != "video-clip":
        raise ValidationError(f"expected a video-clip record, got {record.get('type')!r}")
    rid = record_id(record)
    name = safe_name(rid)
    start = int(record.get("clip_start", record.get("start", 0)))
    end = record.get("clip_end", record.get("end"))
    seq = io.load_frames(ctx.resolve(record["frames"]), start, None if end is None else int(end))
    if "traces" in record:
        tracker = PrecomputedTracker(load_external_traces(ctx.resolve(record["traces"])))
    else:
        tracker = LKTracker(ctx.cfg.tracker)
    tom_cfg = dataclasses.replace(ctx.cfg.tom, seed=derive_seed(ctx.cfg.seed, rid))
    result = run_tom(seq, tom_cfg, tracker, image_ref=f"marked/{name}.png")
    tokens = []
    if result.has_supervision:
        horizon = ctx.cfg.codec.tom_horizon or len(seq) - 1
        rec = encode_tom(str(record.get("text", "")), result.fg_marks, result.fg_traces, horizon).to_json()
        rec.update(id=rid, image=f"marked/{name}.png")
        tokens.append(rec)
    artifacts: dict = {}
    _write(ctx, f"marked/{name}.png", io.encode_png(result.marked_first_frame), artifacts)
    body = result.to_json()
    body.update(clip=rid, frames=len(seq), seed=tom_cfg.seed)
    _write(ctx, f"results/{name}.json", (io.dumps(body) + "\n").encode(), artifacts)
    return {
        "status": "ok" if result.has_supervision else "skip",
        "artifacts": artifacts,
        "tokens": tokens,
        "global_motion": result.diagnostics["global_motion_detected"],
    }


def cmd_tom(manifest: str, cfg: PipelineConfig) -> int:
    records = _load_manifest(manifest)
    ctx = StageContext(cfg, str(Path(manifest).parent), str(Path(cfg.out) / "tom"))
    outcomes = run_records(records, _tom_record, ctx)
    tokens = [t for o in outcomes for t in o.get("tokens", [])]
    io.write_jsonl(Path(ctx.out) / "records.jsonl", tokens)
    summary = _summarize("tom", outcomes, cfg)
    processed = [o for o in outcomes if o["status"] != "fail"]
    report = {
        "config_hash": cfg.hash,
        "clips": len(records),
        "processed": len(processed),
        "records": len(tokens),
        "yield": len(tokens) / len(processed) if processed else 0.0,
        "global_motion_rate": (
            sum(bool(o.get("global_motion")) for o in processed) / len(processed) if processed else 0.0
        ),
    }
    io.write_json(Path(ctx.out) / "manifest.json", summary)
    io.write_json(Path(ctx.out) / "report.json", report)
    _print_counts(
        "tom",
        summary["counts"],
        f"; {report['records']} records, yield {100 * report['yield']:.1f}%, "
        f"global motion {100 * report['global_motion_rate']:.1f}%",
    )
    return _check_budget(summary["counts"], len(records), cfg.fail_budget)


# ---------------------------------------------------------------- encode-robot


def load_trajectory(path: str | os.PathLike) -> np.ndarray:
    """``(N, 7)`` float array from a .npy file or a CSV / whitespace table."""
    p = Path(path)
    if not p.exists():
        raise ValidationError(f"trajectory {p} does not exist")
    if p.suffix == ".npy":
        a = np.load(p, allow_pickle=False)
    else:
        delim = "," if p.suffix == ".csv" else None
        try:
            a = np.loadtxt(p, delimiter=delim, ndmin=2)
        except ValueError:
            # one header row is allowed
            a = np.loadtxt(p, delimiter=delim, ndmin=2, skiprows=1)
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != ACTION_DIMS:
        raise ValidationError(f"{p}: actions need {ACTION_DIMS} columns, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise ValidationError(f"{p}: non-finite action values")
    return a


def _trajectory_paths(inputs: Sequence[str]) -> list[tuple[str, Path]]:
    out = []
    for arg in inputs:
        if arg.endswith(".jsonl"):
            base = Path(arg).parent
            for r in _load_manifest(arg):
                if r.get("type") != "robot-trajectory":
                    raise ValidationError(f"{arg}: expected robot-trajectory records")
                p = Path(r["path"])
                out.append((record_id(r), p if p.is_absolute() else base / p))
        else:
            out.append((Path(arg).name, Path(arg)))
    names = [n for n, _ in out]
    if len(set(names)) != len(names):
        raise ValidationError("trajectory names must be unique")
    return out


def cmd_encode_robot(inputs: Sequence[str], cfg: PipelineConfig, stats_path: str | None = None) -> int:
    vocab = cfg.codec.vocab
    if int(vocab) != vocab or vocab <= NUM_BINS:
        raise ConfigError(f"vocabulary size must be an integer > {NUM_BINS}, got {vocab}")
    trajs = [(name, load_trajectory(p)) for name, p in _trajectory_paths(inputs)]
    stats_path = stats_path or cfg.codec.stats
    if stats_path is not None:
        try:
            stats = ActionStats.from_json(io.read_json(stats_path))
        except (OSError, KeyError, TypeError, ValidationError) as exc:
            raise ConfigError(f"cannot load stats {stats_path}: {exc}") from None
    else:
        stats = fit_stats(np.concatenate([a for _, a in trajs]) if trajs else np.zeros((0, ACTION_DIMS)))
    out = Path(cfg.out) / "encode-robot"
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    for name, a in trajs:
        ids = encode_robot_batch(a, stats, vocab)
        for step, row in enumerate(ids):
            bins = row - (vocab - NUM_BINS)
            lines.append(
                {
                    "trajectory": name,
                    "step": step,
                    "text": "robot : [" + ",".join(str(int(b)) for b in bins) + "]",
                    "ids": [int(i) for i in row],
                    "kind": "robot",
                }
            )
    io.write_jsonl(out / "tokens.jsonl", lines)
    io.write_json(out / "action_stats.json", stats.to_json())
    io.write_json(
        out / "manifest.json",
        {
            "stage": "encode-robot",
            "config_hash": cfg.hash,
            "vocab": vocab,
            "trajectories": [{"id": n, "actions": len(a)} for n, a in trajs],
            "records": len(lines),
        },
    )
    print(f"encode-robot: {len(lines)} actions from {len(trajs)} trajectories")
    return EXIT_OK


# ---------------------------------------------------------------- eval-traces


def cmd_eval_traces(
    traces: Sequence[str],
    annotations: Sequence[str],
    cfg: PipelineConfig,
) -> int:
    if len(traces) != len(annotations):
        raise ConfigError(f"{len(traces)} trace files but {len(annotations)} annotation files")
    ev = cfg.eval
    clips = [(load_external_traces(t), load_annotations(a)) for t, a in zip(traces, annotations)]
    fps = ev.fps if ev.fps is not None else 30.0
    try:
        report = precision_report(clips, ev.horizon_s, fps, ev.per_clip)
    except UndefinedMetricError as exc:
        log.error("precision undefined: %s", exc)
        return EXIT_FAILED
    report["config_hash"] = cfg.hash
    out = Path(cfg.out) / "eval-traces"
    out.mkdir(parents=True, exist_ok=True)
    io.write_json(out / "report.json", report)
    print(f"precision {report['precision']:.4f} over {report['n_traces']} traces "
          f"(horizon {report['horizon_frames']} frames)")
    return EXIT_OK


# ---------------------------------------------------------------- validate


def validate_manifest(path: str) -> list[str]:
    problems = []
    try:
        records = io.read_jsonl(path)
    except (OSError, ValidationError) as exc:
        return [str(exc)]
    base = Path(path).parent
    seen = set()
    for lineno, r in enumerate(records, start=1):
        where = f"record {lineno}"
        if not isinstance(r, dict):
            problems.append(f"{where}: not an object")
            continue
        try:
            rid = record_id(r)
        except ValidationError as exc:
            problems.append(f"{where}: {exc}")
            continue
        if rid in seen:
            problems.append(f"{where}: duplicate id {rid!r}")
        seen.add(rid)
        kind = r.get("type")
        if kind is not None and kind not in RECORD_TYPES:
            problems.append(f"{where}: unknown type {kind!r}")
        if kind == "ui-image":
            problems += [f"{where}: missing {k!r}" for k in ("image", "boxes") if k not in r]
        for k in PATH_KEYS:
            if k in r:
                p = Path(r[k])
                if not (p if p.is_absolute() else base / p).exists():
                    problems.append(f"{where}: {k} path {r[k]} does not exist")
    return problems


def cmd_validate(manifest: str) -> int:
    problems = validate_manifest(manifest)
    for p in problems:
        print(p)
    if problems:
        print(f"{manifest}: {len(problems)} problems")
        return EXIT_FAILED
    print(f"{manifest}: ok")
    return EXIT_OK


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int)
    common.add_argument("--workers", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("--fail-budget", type=float, dest="fail_budget", help="tolerated failure fraction")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="somtom", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("som-ui", parents=[common], help="mark UI screenshots")
    p.add_argument("manifest")
    p = sub.add_parser("segment", parents=[common], help="split segments into shot-consistent clips")
    p.add_argument("manifest")
    p.add_argument("--scores", help="clip similarity scores (JSONL or CSV)")
    p = sub.add_parser("tom", parents=[common], help="extract marks and traces from clips")
    p.add_argument("manifest")
    p = sub.add_parser("encode-robot", parents=[common], help="tokenize robot trajectories")
    p.add_argument("trajectories", nargs="+")
    p.add_argument("--stats", help="ActionStats JSON to reuse")
    p.add_argument("--vocab", type=int)
    p = sub.add_parser("eval-traces", parents=[common], help="trace precision against box annotations")
    p.add_argument("--traces", action="append", required=True)
    p.add_argument("--annotations", action="append", required=True)
    p.add_argument("--fps", type=float)
    p.add_argument("--horizon", type=float, help="horizon in seconds")
    p.add_argument("--per-clip", action="store_true", dest="per_clip")
    p = sub.add_parser("validate", parents=[common], help="check a manifest")
    p.add_argument("manifest")
    return parser


def _config_from_args(args) -> PipelineConfig:
    cfg = load_config(args.config, seed=args.seed, workers=args.workers, out=args.out, fail_budget=args.fail_budget)
    if getattr(args, "vocab", None) is not None:
        cfg = dataclasses.replace(cfg, codec=dataclasses.replace(cfg.codec, vocab=args.vocab))
    if args.command == "eval-traces":
        ev = cfg.eval
        ev = dataclasses.replace(
            ev,
            fps=args.fps if args.fps is not None else ev.fps,
            horizon_s=args.horizon if args.horizon is not None else ev.horizon_s,
            per_clip=args.per_clip or ev.per_clip,
        )
        cfg = dataclasses.replace(cfg, eval=ev)
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "validate":
            return cmd_validate(args.manifest)
        cfg = _config_from_args(args)
        if args.command == "som-ui":
            return cmd_som_ui(args.manifest, cfg)
        if args.command == "segment":
            return cmd_segment(args.manifest, cfg, args.scores)
        if args.command == "tom":
            return cmd_tom(args.manifest, cfg)
        if args.command == "encode-robot":
            return cmd_encode_robot(args.trajectories, cfg, args.stats)
        if args.command == "eval-traces":
            return cmd_eval_traces(args.traces, args.annotations, cfg)
    except ConfigError as exc:
        log.error("configuration error: %s", exc)
        return EXIT_USAGE
    except (SomTomError, OSError) as exc:
        log.error("%s", exc)
        return EXIT_USAGE
    return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
