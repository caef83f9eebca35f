"""
Command-line entry points: stabilize, metrics, bench and synth.

Exit codes: 0 success, 1 processing failure, 2 configuration error,
3 input/output error, 4 sequence length mismatch.
"""

import argparse
import json
import logging
import os
import sys
from contextlib import ExitStack
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import Settings, load_settings
from evaluation.metrics import evaluate_sequences
from evaluation.synthetic import SynthConfig, gen_trajectory, render_sequence, scene_for
from stabilizer.errors import (
    ConfigError, FlowFormatError, SinkError, SourceError, StabilizerError, StageError,
)
from stabilizer.observer import Frame
from stabilizer.pipeline import (
    SleepStages, StabilizerStages, StageOutput, benchmark_pipeline, run_pipeline,
)
from storage.flo import flow_loader, write_flo
from storage.frames import load_frames, open_frame_sink, open_frame_source, write_frames
from storage.reports import (
    FRAME_METRIC_FIELDS, MOTION_FIELDS, SPECTRUM_FIELDS, TRAJECTORY_FIELDS, load_keypoints,
    open_grid_dump, write_csv, write_json,
)


logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_LENGTH = 4


def _parse_size(text: str) -> Tuple[int, int]:
    try:
        width, height = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected WIDTHxHEIGHT, got '{text}'")
    return width, height


def _parse_floats(text: str) -> List[float]:
    try:
        return [float(v) for v in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got '{text}'")


def _common_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON configuration file")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE", help="override a config key, e.g. smoother.window=9")
    common.add_argument("--seed", type=int, help="seed for every randomized step")
    common.add_argument("--mode", choices=["pipeline", "sequential"])
    common.add_argument("--log-level", default="INFO",
                        choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    return common


def build_parser() -> argparse.ArgumentParser:
    common = _common_parser()
    parser = argparse.ArgumentParser(prog="stabilizer",
                                     description="Online grid-based video stabilization")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("stabilize", parents=[common], help="stabilize a frame sequence")
    p.add_argument("--input", required=True, help="frame directory or raw gray8 file")
    p.add_argument("--output", required=True, help="output directory (or raw file)")
    p.add_argument("--raw-size", type=_parse_size, help="WIDTHxHEIGHT of a raw input stream")
    p.add_argument("--format", dest="frame_format", choices=["png", "pgm"])
    p.add_argument("--report", help="pipeline report path (default OUTPUT/report.json)")
    p.add_argument("--dump-trajectories", help="CSV of raw and smoothed vertex paths")
    p.add_argument("--dump-motion", help="CSV of per-frame grid motion")
    p.add_argument("--dump-flow", help="directory for the fused flow as .flo files")
    p.add_argument("--flow-dir", help="directory of <t>.flo files to import")
    p.add_argument("--keypoints", help="keypoint file to import")
    p.set_defaults(handler=cmd_stabilize)

    p = sub.add_parser("metrics", parents=[common], help="score a stabilized sequence")
    p.add_argument("--input", required=True, help="original frames")
    p.add_argument("--output", required=True, help="stabilized frames")
    p.add_argument("--raw-size", type=_parse_size)
    p.add_argument("--report", help="metrics JSON path")
    p.add_argument("--frames-csv", help="per-frame CSV frame,Ct,Dt,psnr")
    p.add_argument("--spectrum-csv", help="trajectory spectrum CSV channel,bin,energy")
    p.set_defaults(handler=cmd_metrics)

    p = sub.add_parser("bench", parents=[common], help="measure pipeline throughput")
    p.add_argument("--stage-sleep", type=_parse_floats,
                   help="per-stage delays in ms, e.g. 10,10,10 (omit for the real stages)")
    p.add_argument("--frames", type=int, default=300)
    p.add_argument("--size", type=_parse_size, default=(320, 240),
                   help="frame size of the synthetic workload")
    p.add_argument("--report", help="bench report path")
    p.set_defaults(handler=cmd_bench)

    p = sub.add_parser("synth", parents=[common], help="render a synthetic jittered sequence")
    p.add_argument("--output", required=True)
    p.add_argument("--frames", type=int, default=120)
    p.add_argument("--size", type=_parse_size, default=(320, 240))
    p.add_argument("--jitter", type=float, default=2.0, help="jitter amplitude in pixels")
    p.add_argument("--profile", choices=["alternating", "highband"], default="alternating")
    p.add_argument("--cycles", type=int, default=2, help="cycles of the smooth path")
    p.add_argument("--amplitude", type=_parse_floats, default=[3.0, 2.0],
                   help="smooth path amplitude x,y in pixels")
    p.add_argument("--rotation", type=float, default=0.0, help="rotation amplitude in radians")
    p.add_argument("--scale", type=float, default=0.0, help="zoom amplitude")
    p.add_argument("--disparity", type=_parse_floats,
                   help="second plane drift dx,dy per frame for a two-plane scene")
    p.set_defaults(handler=cmd_synth)
    return parser


def _load_settings(args) -> Settings:
    return load_settings(args.config, args.overrides, args.seed, args.mode)


def _apply_io_flags(settings: Settings, args) -> Settings:
    io = settings.io
    io.input = args.input
    io.output = args.output
    if args.raw_size:
        io.raw_width, io.raw_height = args.raw_size
    for name in ("frame_format", "report", "dump_trajectories", "dump_motion", "dump_flow",
                 "flow_dir", "keypoints"):
        value = getattr(args, name, None)
        if value is not None:
            setattr(io, name, value)
    if args.flow_dir:
        settings.observer.flow_source = "import"
    if args.keypoints and "import" not in settings.observer.detectors:
        settings.observer.detectors = list(settings.observer.detectors) + ["import"]
    return settings.validate()


def _raw_size(settings: Settings) -> Optional[Tuple[int, int]]:
    if settings.io.raw_width:
        return settings.io.raw_width, settings.io.raw_height
    return None


def cmd_stabilize(args) -> int:
    settings = _apply_io_flags(_load_settings(args), args)
    io = settings.io
    if not os.path.exists(io.input):
        logger.error(f"Input {io.input} does not exist")
        return EXIT_IO

    keypoints = load_keypoints(io.keypoints) if io.keypoints else None
    loader = flow_loader(io.flow_dir) if io.flow_dir else None
    stages = StabilizerStages(settings, keypoints, loader)
    raw = _raw_size(settings)

    with ExitStack() as stack:
        frames = stack.enter_context(open_frame_source(io.input, raw))
        sink = stack.enter_context(open_frame_sink(io.output, io.frame_format, raw is not None))
        trajectories = (stack.enter_context(open_grid_dump(io.dump_trajectories, TRAJECTORY_FIELDS))
                        if io.dump_trajectories else None)
        motion = (stack.enter_context(open_grid_dump(io.dump_motion, MOTION_FIELDS))
                  if io.dump_motion else None)
        if io.dump_flow:
            os.makedirs(io.dump_flow, exist_ok=True)

        def deliver(out: StageOutput) -> None:
            sink.write(out.frame)
            index = out.frame.index
            if trajectories is not None:
                trajectories.write_frame(index, out.raw, out.smoothed)
            if motion is not None:
                motion.write_frame(index, out.field.vectors)
            if io.dump_flow and out.flow is not None:
                write_flo(os.path.join(io.dump_flow, f"{index}.flo"), out.flow)

        report = run_pipeline(frames, deliver, stages, settings.queues, settings.mode)

    report.config = settings.to_dict()
    report_path = io.report or (os.path.join(io.output, "report.json") if raw is None
                                else f"{io.output}.report.json")
    write_json(report_path, report.to_dict())
    print(json.dumps({k: v for k, v in report.to_dict().items() if k != "config"}, indent=2))
    return EXIT_OK


def cmd_metrics(args) -> int:
    settings = _load_settings(args)
    raw = args.raw_size
    inputs = load_frames(args.input, raw)
    outputs = load_frames(args.output, raw)
    if len(inputs) != len(outputs):
        logger.error(f"Sequence lengths differ: {len(inputs)} input vs {len(outputs)} output frames")
        return EXIT_LENGTH

    report = evaluate_sequences(inputs, outputs, settings.metrics, settings.observer,
                                settings.ransac)
    doc = report.to_dict()
    if args.report:
        write_json(args.report, doc)
    if args.frames_csv:
        write_csv(args.frames_csv, FRAME_METRIC_FIELDS, report.frame_rows())
    if args.spectrum_csv:
        write_csv(args.spectrum_csv, SPECTRUM_FIELDS, report.spectrum_rows())
    print(json.dumps(doc, indent=2))
    return EXIT_OK


def _bench_workload(args, settings: Settings):
    if args.stage_sleep:
        if len(args.stage_sleep) != 3:
            raise ConfigError("stage-sleep", "expected three delays: estimate,propagate,compensate")
        delays = [ms / 1000.0 for ms in args.stage_sleep]
        frames = [Frame(i, np.zeros((8, 8), dtype=np.uint8)) for i in range(args.frames)]
        return lambda: SleepStages(*delays), frames
    traj = gen_trajectory(SynthConfig(seed=settings.seed), args.frames)
    seq = render_sequence(scene_for(traj, args.size, settings.seed), traj, args.size,
                          (settings.grid.rows, settings.grid.cols))
    return lambda: StabilizerStages(settings), seq.frames


def cmd_bench(args) -> int:
    settings = _load_settings(args)
    if args.frames < 2:
        raise ConfigError("frames", "bench needs at least 2 frames")
    make_stages, frames = _bench_workload(args, settings)
    if settings.mode == "sequential":
        report = run_pipeline(iter(frames), lambda out: None, make_stages(), settings.queues,
                              "sequential")
    else:
        report = benchmark_pipeline(lambda: iter(frames), make_stages, settings.queues)
    report.config = settings.to_dict()
    doc = report.to_dict()
    if args.report:
        write_json(args.report, doc)
    print(json.dumps({k: v for k, v in doc.items() if k != "config"}, indent=2))
    return EXIT_OK


def cmd_synth(args) -> int:
    settings = _load_settings(args)
    if len(args.amplitude) != 2:
        raise ConfigError("amplitude", "expected x,y")
    if args.disparity is not None and len(args.disparity) != 2:
        raise ConfigError("disparity", "expected dx,dy")
    try:
        cfg = SynthConfig(smooth_amplitude=tuple(args.amplitude), smooth_cycles=args.cycles,
                          rotation_amplitude=args.rotation, scale_amplitude=args.scale,
                          jitter_amplitude=args.jitter, jitter_profile=args.profile,
                          seed=settings.seed)
        traj = gen_trajectory(cfg, args.frames)
    except ValueError as e:
        raise ConfigError("synth", str(e)) from e
    disparity = tuple(args.disparity) if args.disparity else None
    scene = scene_for(traj, args.size, settings.seed, disparity)
    seq = render_sequence(scene, traj, args.size, (settings.grid.rows, settings.grid.cols))
    written = write_frames(args.output, seq.frames)
    doc = traj.to_dict()
    doc["size"] = list(args.size)
    if disparity:
        doc["disparity"] = list(disparity)
    write_json(os.path.join(args.output, "trajectory.json"), doc)
    print(f"Wrote {written} frames to {args.output}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=getattr(logging, args.log_level),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.handler(args)
    except ConfigError as e:
        logger.error(f"Configuration error: {e}")
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (SourceError, SinkError, FlowFormatError, OSError) as e:
        logger.error(f"I/O error: {e}")
        print(f"i/o error: {e}", file=sys.stderr)
        return EXIT_IO
    except StageError as e:
        logger.error(f"Stabilization failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        io_failure = isinstance(e.cause, (SourceError, SinkError, FlowFormatError, OSError))
        return EXIT_IO if io_failure else EXIT_FAILURE
    except StabilizerError as e:
        logger.error(f"Stabilization failed: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_FAILURE
