"""Command-line entry point: ``raycull {run,eval,synth,inspect}``.

Exit codes: 0 success, 1 internal error, 2 usage or input error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from raycull import __version__
from raycull.azel import build_grid
from raycull.core import transform
from raycull.dataset_io import SequenceSource, read_pred, write_point_cloud, write_pred
from raycull.evaluation import VoxelEvaluator
from raycull.pipeline import Pipeline, PipelineConfig, run_metadata, run_sequence, set_threads
from raycull.synth import generate, load_script, write_sequence

log = logging.getLogger("raycull")


class InputError(Exception):
    """Bad user input; reported on one line with exit code 2."""


def _frame_range(text: str | None) -> tuple[int, int] | None:
    if text is None:
        return None
    a, sep, b = text.partition(":")
    try:
        lo, hi = int(a), int(b)
    except ValueError:
        raise InputError(f"--range must look like A:B, got {text!r}") from None
    if not sep or lo > hi:
        raise InputError(f"--range {text} is empty")
    return lo, hi


def _require(path: str | None, what: str) -> Path | None:
    if path is None:
        return None
    p = Path(path)
    if not p.exists():
        raise InputError(f"{what} not found: {p}")
    return p


def _source(args, labels: bool = False) -> SequenceSource:
    return SequenceSource(
        scan_dir=_require(args.scans, "scan directory"),
        pose_file=_require(args.poses, "pose file"),
        calib_file=_require(args.calib, "calib file"),
        label_dir=_require(args.labels, "label directory") if labels else None,
        frame_range=_frame_range(args.range),
    )


def cmd_run(args) -> int:
    source = _source(args)
    config = PipelineConfig.load(_require(args.config, "config file"))
    frames = source.frames()
    source.poses  # fail on a frame/pose mismatch before writing anything
    out = Path(args.out)
    (out / "pred").mkdir(parents=True, exist_ok=True)
    threads = set_threads(args.threads)
    result = run_sequence(source, config)
    for k, lab in zip(result.frame_ids, result.labels):
        write_pred(lab.dynamic, out / "pred" / f"{source.frame_name(k)}.pred")
    write_point_cloud(result.static_map, out / "static_map.ply")
    summary = result.summary() if any(not t.bootstrap for t in result.timings) else None
    with open(out / "timing.csv", "w") as fh:
        fh.write("frame,scan_binning,raycasting_cache,classification,no_return_evidence,validation,total,bootstrap\n")
        for k, t in zip(result.frame_ids, result.timings):
            fh.write(f"{source.frame_name(k)},{t.scan_binning:.3f},{t.raycasting_cache:.3f},{t.classification:.3f},"
                     f"{t.no_return_evidence:.3f},{t.validation:.3f},{t.total:.3f},{int(t.bootstrap)}\n")
    meta = run_metadata(config, {
        "frames": f"{frames[0]}:{frames[-1]}",
        "frame_count": len(frames),
        "threads": threads,
        "scans": source.scan_dir,
        "poses": source.pose_file,
        "calib": source.calib_file or "none",
    })
    (out / "run_meta.txt").write_text(meta)
    if summary is not None:
        (out / "timing_summary.txt").write_text(summary.to_text())
        print(summary.to_text(), end="")
    print(f"processed {len(frames)} frames; static map has {len(result.static_map)} points -> {out}")
    return 0


def cmd_eval(args) -> int:
    source = _source(args, labels=True)
    poses = source.poses
    pred_dir = _require(args.pred, "prediction directory")
    frames = source.frames()
    missing = [source.frame_name(k) for k in frames if not (pred_dir / f"{source.frame_name(k)}.pred").exists()]
    if missing:
        raise InputError(f"missing predictions for {len(missing)} frames: {' '.join(missing)}")
    ev = VoxelEvaluator(args.voxel)
    for k in frames:
        pts = source.load_points(k)
        gt = source.load_labels(k, len(pts))
        pred = read_pred(pred_dir / f"{source.frame_name(k)}.pred")
        if len(pred) != len(pts):
            raise InputError(f"frame {source.frame_name(k)}: {len(pred)} predictions for {len(pts)} points")
        keep = np.ones(len(pts), dtype=bool)
        if args.max_range is not None:
            keep = np.linalg.norm(pts, axis=1) <= args.max_range
        world = transform(poses[k], pts[keep])
        ev.add_frame(world, gt.moving[keep], pred[keep])
    report = ev.report()
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json() + "\n")
    table = report.to_table()
    out.with_suffix(".txt").write_text(table)
    print(table, end="")
    return 0


def cmd_synth(args) -> int:
    script = load_script(_require(args.script, "script"))
    frames = generate(script)
    out = write_sequence(frames, args.out)
    print(f"wrote {len(frames)} frames to {out}")
    return 0


def cmd_inspect(args) -> int:
    source = _source(args)
    config = PipelineConfig.load(_require(args.config, "config file")) if args.config else PipelineConfig()
    poses = source.poses
    frames = source.frames()
    target = frames[-1]
    pipe = Pipeline(config)
    for k in frames[:-1]:
        pipe.process(source.load_points(k), poses[k], k)
    if args.map_dump:
        pipe.process(source.load_points(target), poses[target], target)
        pipe.map.dump(args.map_dump)
        print(f"{len(pipe.map)} voxels -> {args.map_dump}")
    else:
        scan, _ = pipe._prepare(source.load_points(target), poses[target], target)
        grid = build_grid(scan, scan.pose, pipe.map, config.grid, window=config.consistency.r_n)
        grid.dump_cast_csv(args.grid_dump)
        print(f"{int(grid.cast_mask.sum())} bins -> {args.grid_dump}")
    return 0


def _add_sequence_args(p, labels: bool = False):
    p.add_argument("--scans", required=True, help="directory of <frame>.bin scans")
    p.add_argument("--poses", required=True, help="pose file, one 3x4 row-major matrix per line")
    p.add_argument("--calib", help="KITTI calib file; conjugates poses into the LiDAR frame")
    p.add_argument("--range", help="inclusive frame range A:B")
    if labels:
        p.add_argument("--labels", required=True, help="directory of <frame>.label files")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="raycull", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="label a sequence and build its static map")
    _add_sequence_args(p)
    p.add_argument("--config", required=True, help="key = value parameter file")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--threads", type=int, default=None, help="cap on intra-frame worker threads")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", help="voxel-level PR / RR / F1 of predictions")
    _add_sequence_args(p, labels=True)
    p.add_argument("--pred", required=True, help="directory of <frame>.pred files")
    p.add_argument("--voxel", type=float, default=0.2, help="evaluation voxel size in meters")
    p.add_argument("--max-range", type=float, default=None, help="ignore points farther than this")
    p.add_argument("--out", required=True, help="report JSON path (a .txt table is written next to it)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="render a synthetic sequence from a scene script")
    p.add_argument("--script", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("inspect", help="dump the raycast cache or the voxel map at the last frame of --range")
    _add_sequence_args(p)
    p.add_argument("--config", help="parameter file (defaults if omitted)")
    dump = p.add_mutually_exclusive_group(required=True)
    dump.add_argument("--grid-dump", metavar="CSV", help="write i,j,r_cast for the last frame")
    dump.add_argument("--map-dump", metavar="TXT", help="write 'ix iy iz' per occupied voxel")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (InputError, ValueError, FileNotFoundError) as exc:
        print(f"raycull {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001
        log.debug("internal error", exc_info=True)
        print(f"raycull {args.command}: internal error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
