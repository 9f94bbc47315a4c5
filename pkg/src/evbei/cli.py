"""Command-line pipeline orchestration.

Subcommands: synth, flow, render, superevents, eval, and pipeline (all
stages). A flat key=value config file reproduces a run; flags override
single keys. Exit codes: 0 on success, 2 for missing/invalid inputs,
1 for stage failures. Outputs written before a failure are renamed to
``<name>.partial`` so partial runs are never mistaken for complete ones.
"""

from __future__ import annotations

import argparse
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from evbei.config import ConfigError, PipelineConfig, load_config, save_config
from evbei.events import EventError, EventStream, load_event_stream, save_event_stream
from evbei.evaluate import align_frame, boundary_pr, canny
from evbei.imgio import (
    bei_to_u8,
    label_color_image,
    orientation_overlay,
    read_gray,
    read_image_manifest,
    read_pgm,
    write_pgm,
    write_pgm16,
    write_png,
)
from evbei.bei import BEI
from evbei.pipeline import FlowPipeline, FlowRecords, RenderOutput
from evbei.superevents import extract_boundaries, segment_bei
from evbei.synth import SyntheticSceneConfig, boxes_scene, synth_generate

__all__ = ["main"]


class CLIError(Exception):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _warm_kernels() -> None:
    """Compile/load the optional numba kernels outside any timed section."""
    from evbei import _kernel
    from evbei.superevents import warm_kernels

    _kernel.warm()
    warm_kernels()


class OutputTracker:
    """Records written files; marks them .partial if the run fails."""

    def __init__(self):
        self.paths: list[Path] = []

    def add(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def mark_partial(self) -> None:
        for p in self.paths:
            if p.exists():
                p.rename(p.with_name(p.name + ".partial"))


def _load_run_config(args) -> PipelineConfig:
    cfg = PipelineConfig()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise CLIError(f"config file not found: {path}", code=2)
        try:
            cfg = load_config(path)
        except ConfigError as exc:
            raise CLIError(f"{path}: {exc}", code=2)
    if args.out:
        cfg.out_dir = args.out
    if args.seed is not None:
        cfg.seed = args.seed
    if args.limit is not None:
        cfg.limit = args.limit
    if getattr(args, "events", None):
        cfg.events_path = args.events
    if getattr(args, "images", None):
        cfg.images_manifest = args.images
    try:
        cfg.validate()
    except ConfigError as exc:
        raise CLIError(str(exc), code=2)
    return cfg


def _require_events(cfg: PipelineConfig) -> EventStream:
    if not cfg.events_path:
        raise CLIError("no events file configured (set events_path or pass --events)", code=2)
    path = Path(cfg.events_path)
    if not path.exists():
        raise CLIError(f"events file not found: {path}", code=2)
    try:
        limit = cfg.limit if cfg.limit > 0 else None
        return load_event_stream(path, (cfg.sensor_width, cfg.sensor_height), limit=limit)
    except EventError as exc:
        raise CLIError(str(exc), code=2)


def _out_dir(cfg: PipelineConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_flow_csv(path, stream: EventStream, records: FlowRecords, accepted_only: bool) -> None:
    acc = records.accepted
    n = len(records.status)
    keep = acc if accepted_only else np.ones(n, dtype=bool)
    table = np.column_stack(
        [
            stream.ts[:n][keep],
            stream.xs[:n][keep],
            stream.ys[:n][keep],
            stream.ps[:n][keep],
            records.gx[keep],
            records.gy[keep],
            records.speed[keep],
            records.orientation[keep],
            acc[keep].astype(np.float64),
        ]
    )
    # %.17g round-trips float64 exactly and prints integers compactly.
    with open(path, "w") as fh:
        fh.write("t,x,y,p,gx,gy,speed,orientation,accepted\n")
        np.savetxt(fh, table, fmt="%.17g", delimiter=",")


def _write_stats_csv(path, stats: np.ndarray) -> None:
    with open(path, "w") as fh:
        fh.write("label,pixels,active,ratio,cx,cy\n")
        for row in stats:
            fh.write(
                f"{row['label']},{row['pixels']},{row['active']},"
                f"{float(row['ratio'])!r},{float(row['cx'])!r},{float(row['cy'])!r}\n"
            )


# -- subcommands ---------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    width, height = cfg.sensor_width, cfg.sensor_height
    speed = args.speed
    duration = args.duration if args.duration is not None else (width + 40.0) / speed
    if args.scene == "boxes":
        stream, gt = boxes_scene(
            width=width,
            height=height,
            duration=args.duration if args.duration is not None else 2.0,
            seed=cfg.seed,
            noise_rate_hz=args.noise_rate,
        )
    else:
        if args.edge:
            vals = [float(v) for v in args.edge.split(",")]
            if len(vals) < 4 or len(vals) % 2:
                raise CLIError("--edge needs an even number of >= 4 comma-separated floats", code=2)
            edge = tuple((vals[i], vals[i + 1]) for i in range(0, len(vals), 2))
        else:
            # Slightly tilted full-height edge starting left of the sensor.
            edge = ((-10.0, 0.0), (-10.0 - 0.05 * height, float(height - 1)))
        scene = SyntheticSceneConfig(
            width=width,
            height=height,
            speed=speed,
            direction=math.radians(args.direction),
            duration=duration,
            edge=edge,
            noise_rate_hz=args.noise_rate,
            seed=cfg.seed,
        )
        stream, gt = synth_generate(scene)
    try:
        events_path = tracker.add(out / "events.txt")
        save_event_stream(stream, events_path)
        gt_path = tracker.add(out / "ground_truth.csv")
        with open(gt_path, "w") as fh:
            fh.write("t,x,y,p,vx,vy,is_noise\n")
            for i in range(len(stream)):
                fh.write(
                    f"{float(stream.ts[i])!r},{stream.xs[i]},{stream.ys[i]},{stream.ps[i]},"
                    f"{float(gt.vx[i])!r},{float(gt.vy[i])!r},{1 if gt.is_noise[i] else 0}\n"
                )
        save_config(cfg, tracker.add(out / "run.cfg"))
    except Exception:
        tracker.mark_partial()
        raise
    if args.verbose:
        print(f"wrote {len(stream)} events to {events_path}")
    return 0


def cmd_flow(args) -> int:
    cfg = _load_run_config(args)
    stream = _require_events(cfg)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    pipe = FlowPipeline(cfg.sensor_width, cfg.sensor_height, cfg.to_pipeline_params())
    t0 = time.perf_counter()
    records = pipe.run(stream)
    elapsed = time.perf_counter() - t0
    try:
        path = tracker.add(out / "flow.csv")
        _write_flow_csv(path, stream, records, accepted_only=not args.all_events)
    except Exception:
        tracker.mark_partial()
        raise
    if args.verbose:
        n = len(stream)
        rate = n / elapsed if elapsed > 0 else float("inf")
        print(
            f"{n} events in {elapsed:.3f}s ({rate:.0f} ev/s), "
            f"{int(records.accepted.sum())} accepted -> {path}"
        )
    return 0


def _emit_render(out: Path, tracker: OutputTracker, cfg: PipelineConfig, render) -> dict:
    stem = f"bei_{render.index:05d}"
    pgm = tracker.add(out / f"{stem}.pgm")
    write_pgm(pgm, bei_to_u8(render.bei.active))
    write_png(tracker.add(out / f"{stem}.png"), bei_to_u8(render.bei.active))
    if cfg.orientation_png and render.bei.orientation is not None:
        write_png(
            tracker.add(out / f"orient_{render.index:05d}.png"),
            orientation_overlay(render.bei.active, render.bei.orientation),
        )
    return {"stem": stem, "pgm": pgm}


def cmd_render(args) -> int:
    cfg = _load_run_config(args)
    if args.fixed_interval is not None:
        cfg.fixed_interval = args.fixed_interval
    cfg.validate()
    stream = _require_events(cfg)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    pipe = FlowPipeline(cfg.sensor_width, cfg.sensor_height, cfg.to_pipeline_params())
    try:
        manifest = tracker.add(out / "render_manifest.csv")
        count = 0
        with open(manifest, "w") as fh:
            fh.write("index,t_render,interval,f_hat,c_tilde\n")
            for render in pipe.schedule_renders(stream):
                _emit_render(out, tracker, cfg, render)
                fh.write(
                    f"{render.index},{render.t!r},{render.interval!r},"
                    f"{render.f_hat!r},{render.c_tilde}\n"
                )
                count += 1
    except Exception:
        tracker.mark_partial()
        raise
    if args.verbose:
        print(f"{count} BEI renders -> {out}")
    return 0


def _segment_to_files(out: Path, tracker: OutputTracker, stem: str, bei: BEI, cfg: PipelineConfig):
    seg = segment_bei(bei, cfg.to_cluster_config())
    if seg.labels.max() > 65535:
        raise CLIError(f"{stem}: more than 65535 labels cannot be stored in 16-bit PGM")
    write_pgm16(tracker.add(out / f"labels_{stem}.pgm"), seg.labels.astype(np.uint16))
    write_png(tracker.add(out / f"labels_{stem}.png"), label_color_image(seg.labels))
    _write_stats_csv(tracker.add(out / f"labels_{stem}_stats.csv"), seg.stats)
    return seg


# Per-process cache of APS Canny edge maps, keyed by path and parameters.
_WORKER_EDGE_CACHE: dict[tuple, np.ndarray] = {}


def _render_worker(payload) -> tuple[int, tuple | None]:
    """Heavy per-render work: emission, segmentation, optional PR scoring.

    Runs in worker processes; outputs depend only on the payload, so results
    are identical however the work is scheduled. Output paths are registered
    by the parent before submission.
    """
    out, cfg, index, t, active, orientation, frames = payload
    out = Path(out)
    bei = BEI(active=active, t=t, orientation=orientation)
    tracker = OutputTracker()  # paths already registered by the parent
    _emit_render(out, tracker, cfg, RenderOutput(index, t, 0.0, 0.0, 0, bei))
    if not cfg.do_superevents:
        return (index, None)
    seg = _segment_to_files(out, tracker, f"{index:05d}", bei, cfg)
    if frames is None:
        return (index, None)
    times, names, img_dir = frames
    frame_i = align_frame(times, t)
    key = (str(Path(img_dir) / names[frame_i]), cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
    if key not in _WORKER_EDGE_CACHE:
        img = read_gray(Path(img_dir) / names[frame_i])
        _WORKER_EDGE_CACHE[key] = canny(img, cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
    pr = boundary_pr(extract_boundaries(seg.labels), _WORKER_EDGE_CACHE[key], tol=cfg.pr_tolerance)
    return (index, (index, t, pr.precision, pr.recall))


def cmd_superevents(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    beis: list[tuple[str, BEI]] = []
    if args.bei:
        for p in args.bei:
            path = Path(p)
            if not path.exists():
                raise CLIError(f"BEI image not found: {path}", code=2)
            active = read_pgm(path) > 0
            beis.append((path.stem, BEI(active=active, t=0.0)))
    else:
        render_dir = Path(args.render_dir or cfg.out_dir)
        found = sorted(render_dir.glob("bei_*.pgm"))
        if not found:
            raise CLIError(f"no bei_*.pgm files under {render_dir}", code=2)
        for path in found:
            beis.append((path.stem.removeprefix("bei_"), BEI(active=read_pgm(path) > 0, t=0.0)))
    try:
        for stem, bei in beis:
            _segment_to_files(out, tracker, stem, bei, cfg)
    except Exception:
        tracker.mark_partial()
        raise
    if args.verbose:
        print(f"segmented {len(beis)} BEI(s) -> {out}")
    return 0


def _load_manifest_frames(cfg: PipelineConfig):
    if not cfg.images_manifest:
        raise CLIError("no images manifest configured (set images_manifest or pass --images)", code=2)
    manifest = Path(cfg.images_manifest)
    if not manifest.exists():
        raise CLIError(f"images manifest not found: {manifest}", code=2)
    times, names = read_image_manifest(manifest)
    if len(names) == 0:
        raise CLIError(f"images manifest is empty: {manifest}", code=2)
    return times, names, manifest.parent


def _read_render_manifest(path: Path):
    rows = []
    for line in path.read_text().splitlines()[1:]:
        if not line.strip():
            continue
        idx, t, interval, f_hat, c_tilde = line.split(",")
        rows.append((int(idx), float(t)))
    return rows


def cmd_eval(args) -> int:
    cfg = _load_run_config(args)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    times, names, img_dir = _load_manifest_frames(cfg)
    label_dir = Path(args.labels_dir or cfg.out_dir)
    manifest_path = Path(args.render_manifest or (label_dir / "render_manifest.csv"))
    if not manifest_path.exists():
        raise CLIError(f"render manifest not found: {manifest_path}", code=2)
    renders = _read_render_manifest(manifest_path)
    edge_cache: dict[int, np.ndarray] = {}
    try:
        pr_path = tracker.add(out / "pr_results.csv")
        with open(pr_path, "w") as fh:
            fh.write("render_index,t,precision,recall\n")
            for idx, t in renders:
                label_path = label_dir / f"labels_{idx:05d}.pgm"
                if not label_path.exists():
                    raise CLIError(f"label map not found: {label_path}", code=2)
                labels = read_pgm(label_path).astype(np.int32)
                frame_i = align_frame(times, t)
                if frame_i not in edge_cache:
                    img = read_gray(img_dir / names[frame_i])
                    edge_cache[frame_i] = canny(img, cfg.canny_low, cfg.canny_high, cfg.canny_sigma)
                pred = extract_boundaries(labels)
                pr = boundary_pr(pred, edge_cache[frame_i], tol=cfg.pr_tolerance)
                fh.write(f"{idx},{t!r},{pr.precision!r},{pr.recall!r}\n")
    except Exception:
        tracker.mark_partial()
        raise
    if args.verbose:
        print(f"{len(renders)} renders scored -> {pr_path}")
    return 0


def cmd_pipeline(args) -> int:
    cfg = _load_run_config(args)
    _warm_kernels()
    t0 = time.perf_counter()
    stream = _require_events(cfg)
    out = _out_dir(cfg)
    tracker = OutputTracker()
    pipe = FlowPipeline(cfg.sensor_width, cfg.sensor_height, cfg.to_pipeline_params())
    frames = None
    if cfg.do_eval and cfg.images_manifest:
        frames = _load_manifest_frames(cfg)
    jobs = args.jobs if args.jobs is not None else 1
    if jobs == 0:
        jobs = os.cpu_count() or 1

    def register_render_paths(index: int, has_orientation: bool) -> None:
        tracker.add(out / f"bei_{index:05d}.pgm")
        tracker.add(out / f"bei_{index:05d}.png")
        if cfg.orientation_png and has_orientation:
            tracker.add(out / f"orient_{index:05d}.png")
        if cfg.do_superevents:
            tracker.add(out / f"labels_{index:05d}.pgm")
            tracker.add(out / f"labels_{index:05d}.png")
            tracker.add(out / f"labels_{index:05d}_stats.csv")

    chunks: list[FlowRecords] = []
    n_renders = 0
    executor = ProcessPoolExecutor(max_workers=jobs) if jobs > 1 else None
    try:
        manifest = tracker.add(out / "render_manifest.csv")
        pr_rows: list[tuple] = []
        futures = []
        with open(manifest, "w") as fh:
            fh.write("index,t_render,interval,f_hat,c_tilde\n")
            for render in pipe.schedule_renders(stream, collect_records=chunks):
                fh.write(
                    f"{render.index},{render.t!r},{render.interval!r},"
                    f"{render.f_hat!r},{render.c_tilde}\n"
                )
                n_renders += 1
                register_render_paths(render.index, render.bei.orientation is not None)
                payload = (
                    str(out),
                    cfg,
                    render.index,
                    render.t,
                    render.bei.active,
                    render.bei.orientation,
                    frames,
                )
                if executor is not None:
                    futures.append(executor.submit(_render_worker, payload))
                else:
                    _, row = _render_worker(payload)
                    if row is not None:
                        pr_rows.append(row)
        if args.flow_csv:
            # Heavy CSV formatting overlaps the worker tail.
            records = FlowRecords.concatenate(chunks)
            _write_flow_csv(tracker.add(out / "flow.csv"), stream, records, accepted_only=True)
        for fut in futures:
            _, row = fut.result()
            if row is not None:
                pr_rows.append(row)
        if frames is not None:
            pr_rows.sort(key=lambda r: r[0])
            with open(tracker.add(out / "pr_results.csv"), "w") as fh:
                fh.write("render_index,t,precision,recall\n")
                for idx, t, precision, recall in pr_rows:
                    fh.write(f"{idx},{t!r},{precision!r},{recall!r}\n")
    except Exception:
        if executor is not None:
            executor.shutdown(wait=False, cancel_futures=True)
        tracker.mark_partial()
        raise
    finally:
        if executor is not None:
            executor.shutdown(wait=True)
    elapsed = time.perf_counter() - t0
    if args.verbose:
        rate = len(stream) / elapsed if elapsed > 0 else float("inf")
        print(
            f"pipeline: {len(stream)} events, {n_renders} renders "
            f"in {elapsed:.2f}s ({rate:.0f} ev/s) -> {out}"
        )
    return 0


# -- parser ----------------------------------------------------------------------


def _add_common(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", metavar="PATH", help="key = value config file")
    sub.add_argument("--out", metavar="DIR", help="output directory (overrides config)")
    sub.add_argument("--seed", type=int, metavar="N", help="seed override")
    sub.add_argument("--limit", type=int, metavar="N", help="process only the first N events")
    sub.add_argument("--verbose", action="store_true", help="print progress")
    sub.add_argument("--events", metavar="PATH", help="events text file override")
    sub.add_argument("--images", metavar="PATH", help="APS images manifest override")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evbei",
        description="Event stream to binary event images, superevents, and boundary scores.",
    )
    subs = parser.add_subparsers(dest="command", required=True)

    p = subs.add_parser("synth", help="generate a synthetic scene with ground truth")
    _add_common(p)
    p.add_argument("--scene", choices=("edge", "boxes"), default="edge", help="scene preset")
    p.add_argument("--speed", type=float, default=300.0, help="edge speed, px/s")
    p.add_argument("--direction", type=float, default=0.0, help="motion direction, degrees")
    p.add_argument("--duration", type=float, default=None, help="scene duration, s")
    p.add_argument("--noise-rate", type=float, default=0.0, help="noise events /s /pixel")
    p.add_argument("--edge", help="edge vertices x0,y0,x1,y1[,...] (polygon when >= 3)")
    p.set_defaults(func=cmd_synth)

    p = subs.add_parser("flow", help="per-event normal flow to CSV")
    _add_common(p)
    p.add_argument("--all-events", action="store_true", help="dump rejected events too")
    p.set_defaults(func=cmd_flow)

    p = subs.add_parser("render", help="scene-adaptive BEI rendering")
    _add_common(p)
    p.add_argument(
        "--fixed-interval",
        type=float,
        default=None,
        help="debug: render at exact multiples of this period (s)",
    )
    p.set_defaults(func=cmd_render)

    p = subs.add_parser("superevents", help="segment BEIs into superevents")
    _add_common(p)
    p.add_argument("--bei", nargs="*", help="BEI PGM file(s); default: bei_*.pgm in --render-dir")
    p.add_argument("--render-dir", help="directory holding bei_*.pgm (default: out dir)")
    p.set_defaults(func=cmd_superevents)

    p = subs.add_parser("eval", help="boundary precision/recall against APS Canny edges")
    _add_common(p)
    p.add_argument("--labels-dir", help="directory holding labels_*.pgm (default: out dir)")
    p.add_argument("--render-manifest", help="render manifest CSV (default: labels dir)")
    p.set_defaults(func=cmd_eval)

    p = subs.add_parser("pipeline", help="flow + render + superevents + eval in one run")
    _add_common(p)
    p.add_argument(
        "--jobs",
        type=int,
        default=None,
        help="worker processes for per-render segmentation/writes (0 = one per CPU)",
    )
    p.add_argument(
        "--flow-csv",
        action="store_true",
        help="also write the per-event flow dump (flow.csv)",
    )
    p.set_defaults(func=cmd_pipeline)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CLIError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (EventError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # stage failure
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
