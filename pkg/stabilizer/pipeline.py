"""
Three-stage execution engine.

T_ME (motion estimation) reads the source and emits motion samples, T_MP
(propagation) turns them into grid motion fields and T_MC (compensation)
smooths, renders and hands frames to the sink. Stages talk through two bounded
FIFO queues, so a slow stage blocks its producer. Sequential mode runs the same
stage objects in one loop and is the reference for pipeline output.
"""

import logging
import queue
import threading
import time
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Tuple

import numpy as np

from config.settings import QueueConfig, Settings
from stabilizer.errors import SinkError, SourceError, StabilizerError, StageError
from stabilizer.observer import FlowField, Frame, MotionObserver, MotionSample, Observation
from stabilizer.propagation import GridMotionField, GridSpec, MotionPropagator
from stabilizer.renderer import BorderReport, FrameRenderer
from stabilizer.smoother import OnlineSmoother


logger = logging.getLogger(__name__)

END = object()
POLL_S = 0.05
STAGES = ("estimate", "propagate", "compensate")
HISTOGRAM_BINS = 10


@dataclass(frozen=True)
class FrameMeta:
    """Carried alongside every message: index, source-read time and the raw frame"""
    index: int
    read_time: float
    frame: Frame


@dataclass(frozen=True)
class MotionMessage:
    meta: FrameMeta
    observation: Observation


@dataclass(frozen=True)
class GridMessage:
    meta: FrameMeta
    observation: Observation
    field: GridMotionField


@dataclass(eq=False)
class StageOutput:
    frame: Frame
    field: Optional[GridMotionField] = None
    smoothed: Optional[np.ndarray] = None
    raw: Optional[np.ndarray] = None
    borders: Optional[BorderReport] = None
    flow: Optional[FlowField] = None


class StabilizerStages:
    """The three stage computations over one Settings tree"""

    def __init__(self, settings: Settings, imported_keypoints=None, flow_loader=None):
        self.settings = settings
        self.observer = MotionObserver(settings.observer, imported_keypoints, flow_loader)
        self.propagator = MotionPropagator(settings.grid.rows, settings.grid.cols,
                                           settings.propagation, settings.ransac)
        self.smoother = OnlineSmoother(settings.smoother)
        self.renderer = FrameRenderer(settings.renderer)

    def estimate(self, prev: Optional[Frame], cur: Frame) -> Observation:
        return self.observer.observe_full(prev, cur)

    def propagate(self, observation: Observation) -> GridMotionField:
        return self.propagator.step(observation.sample).field

    def compensate(self, frame: Frame, observation: Observation,
                   dg: GridMotionField) -> StageOutput:
        s_t, o_t = self.smoother.step(dg, observation.sample)
        out, borders = self.renderer.render(frame, dg.spec, s_t, o_t)
        return StageOutput(out, dg, s_t, o_t, borders, observation.flow)

    def message_sizes(self) -> Tuple[int, int]:
        obs = self.settings.observer
        max_keypoints = obs.grid_gx * obs.grid_gy * obs.per_cell_k
        return message_sizes(max_keypoints, self.settings.grid.rows, self.settings.grid.cols)


class SleepStages:
    """Stand-in workload with fixed per-stage delays, for throughput checks"""

    def __init__(self, t_est: float, t_prop: float, t_smooth: float):
        self.delays = (t_est, t_prop, t_smooth)
        self._spec = GridSpec(2, 2, 2, 2)

    def estimate(self, prev: Optional[Frame], cur: Frame) -> Observation:
        time.sleep(self.delays[0])
        sample = MotionSample.empty(cur.index, cur.size)
        return Observation(sample, None, None)

    def propagate(self, observation: Observation) -> GridMotionField:
        time.sleep(self.delays[1])
        return GridMotionField.zeros(self._spec, observation.sample.frame_index)

    def compensate(self, frame: Frame, observation: Observation,
                   dg: GridMotionField) -> StageOutput:
        time.sleep(self.delays[2])
        return StageOutput(frame, dg)

    def message_sizes(self) -> Tuple[int, int]:
        return 0, 0


def message_sizes(max_keypoints: int, rows: int, cols: int) -> Tuple[int, int]:
    """Bytes of one motion sample (4 floats per keypoint) and one grid field (2 floats per vertex)"""
    return 16 * max_keypoints, 8 * rows * cols


@dataclass
class StageTimings:
    t_est: float
    t_prop: float
    t_smooth: float

    def __post_init__(self):
        if min(self.t_est, self.t_prop, self.t_smooth) < 0:
            raise ValueError("stage timings must be nonnegative")

    @property
    def as_tuple(self) -> Tuple[float, float, float]:
        return self.t_est, self.t_prop, self.t_smooth


@dataclass(frozen=True)
class PerformancePrediction:
    fps_max: float
    speedup: float
    mem_overhead: int


def predict_performance(t: StageTimings, q: QueueConfig, motion_bytes: int,
                        grid_bytes: int) -> PerformancePrediction:
    slowest = max(t.as_tuple)
    if slowest <= 0:
        raise ValueError("at least one stage time must be positive")
    return PerformancePrediction(
        fps_max=1.0 / slowest,
        speedup=sum(t.as_tuple) / slowest,
        mem_overhead=q.capacity_me_mp * motion_bytes + q.capacity_mp_mc * grid_bytes,
    )


@dataclass
class PipelineReport:
    mode: str
    frames: int
    wall_time: float
    measured_fps: float
    predicted_fps: float
    speedup_predicted: float
    speedup_measured: Optional[float]
    parallel_utilisation: float
    latency_p50: float
    latency_p95: float
    stage_occupancy: Dict[str, float]
    stage_mean_ms: Dict[str, float]
    stage_histograms: Dict[str, Dict[str, List[float]]]
    max_in_flight: int
    memory_overhead_bytes: int
    config: Optional[dict] = None
    sequential_wall_time: Optional[float] = None

    def to_dict(self) -> dict:
        doc = {
            "mode": self.mode,
            "frames": self.frames,
            "wall_time_s": self.wall_time,
            "measured_fps": self.measured_fps,
            "predicted_fps": self.predicted_fps,
            "speedup_predicted": self.speedup_predicted,
            "speedup_measured": self.speedup_measured,
            "parallel_utilisation": self.parallel_utilisation,
            "latency_p50_ms": self.latency_p50 * 1000.0,
            "latency_p95_ms": self.latency_p95 * 1000.0,
            "stage_occupancy": self.stage_occupancy,
            "stage_mean_ms": self.stage_mean_ms,
            "stage_histograms": self.stage_histograms,
            "max_in_flight": self.max_in_flight,
            "memory_overhead_bytes": self.memory_overhead_bytes,
        }
        if self.sequential_wall_time is not None:
            doc["sequential_wall_time_s"] = self.sequential_wall_time
        if self.config is not None:
            doc["config"] = self.config
        return doc


class _RunState:
    """Counters shared by the workers; the lock guards only the in-flight count"""

    def __init__(self):
        self.lock = threading.Lock()
        self.abort = threading.Event()
        self.errors: List[BaseException] = []
        self.in_flight = 0
        self.max_in_flight = 0
        self.busy: Dict[str, List[float]] = {name: [] for name in STAGES}
        self.latencies: List[float] = []
        self.frames = 0

    def frame_read(self):
        with self.lock:
            self.in_flight += 1
            self.max_in_flight = max(self.max_in_flight, self.in_flight)

    def frame_done(self, meta: FrameMeta):
        with self.lock:
            self.in_flight -= 1
        self.latencies.append(time.perf_counter() - meta.read_time)
        self.frames += 1

    def fail(self, error: BaseException, abort: bool = True):
        with self.lock:
            self.errors.append(error)
        if abort:
            self.abort.set()


def _put(q: queue.Queue, item, state: _RunState) -> bool:
    while not state.abort.is_set():
        try:
            q.put(item, timeout=POLL_S)
            return True
        except queue.Full:
            continue
    return False


def _get(q: queue.Queue, state: _RunState):
    while True:
        try:
            return q.get(timeout=POLL_S)
        except queue.Empty:
            if state.abort.is_set():
                return END


def _timed(state: _RunState, stage: str, fn, *args):
    start = time.perf_counter()
    try:
        return fn(*args)
    finally:
        state.busy[stage].append(time.perf_counter() - start)


def _read_frames(source: Iterable[Frame]):
    it = iter(source)
    while True:
        try:
            frame = next(it)
        except StopIteration:
            return
        except SourceError:
            raise
        except Exception as e:
            raise SourceError(f"reading frame failed: {e}") from e
        yield frame


def _emit(sink: Callable[[StageOutput], None], out: StageOutput):
    try:
        sink(out)
    except SinkError:
        raise
    except Exception as e:
        raise SinkError(f"writing frame {out.frame.index} failed: {e}") from e


def _estimate_worker(source, stages, q_out: queue.Queue, state: _RunState):
    prev = None
    try:
        for frame in _read_frames(source):
            if state.abort.is_set():
                return
            meta = FrameMeta(frame.index, time.perf_counter(), frame)
            state.frame_read()
            try:
                observation = _timed(state, "estimate", stages.estimate, prev, frame)
            except Exception as e:
                state.fail(StageError("estimate", e))
                return
            if not _put(q_out, MotionMessage(meta, observation), state):
                return
            prev = frame
    except SourceError as e:
        logger.error(f"source failed, draining frames already read: {e}")
        state.fail(e, abort=False)
    _put(q_out, END, state)


def _propagate_worker(stages, q_in: queue.Queue, q_out: queue.Queue, state: _RunState):
    while True:
        msg = _get(q_in, state)
        if msg is END:
            _put(q_out, END, state)
            return
        try:
            dg = _timed(state, "propagate", stages.propagate, msg.observation)
        except Exception as e:
            state.fail(StageError("propagate", e))
            return
        if not _put(q_out, GridMessage(msg.meta, msg.observation, dg), state):
            return


def _compensate_worker(stages, sink, q_in: queue.Queue, state: _RunState):
    while True:
        msg = _get(q_in, state)
        if msg is END:
            return
        try:
            out = _timed(state, "compensate", stages.compensate,
                         msg.meta.frame, msg.observation, msg.field)
        except Exception as e:
            state.fail(StageError("compensate", e))
            return
        try:
            _emit(sink, out)
        except SinkError as e:
            state.fail(e)
            return
        state.frame_done(msg.meta)


def _run_threads(source, sink, stages, queues: QueueConfig, state: _RunState):
    q_me = queue.Queue(maxsize=queues.capacity_me_mp)
    q_mp = queue.Queue(maxsize=queues.capacity_mp_mc)
    workers = [
        threading.Thread(target=_estimate_worker, args=(source, stages, q_me, state),
                         name="T_ME", daemon=True),
        threading.Thread(target=_propagate_worker, args=(stages, q_me, q_mp, state),
                         name="T_MP", daemon=True),
        threading.Thread(target=_compensate_worker, args=(stages, sink, q_mp, state),
                         name="T_MC", daemon=True),
    ]
    for w in workers:
        w.start()
    for w in workers:
        w.join()


def _run_sequential(source, sink, stages, state: _RunState):
    prev = None
    try:
        for frame in _read_frames(source):
            meta = FrameMeta(frame.index, time.perf_counter(), frame)
            state.frame_read()
            stage = "estimate"
            try:
                observation = _timed(state, stage, stages.estimate, prev, frame)
                stage = "propagate"
                dg = _timed(state, stage, stages.propagate, observation)
                stage = "compensate"
                out = _timed(state, stage, stages.compensate, frame, observation, dg)
            except Exception as e:
                state.fail(StageError(stage, e))
                return
            try:
                _emit(sink, out)
            except SinkError as e:
                state.fail(e)
                return
            state.frame_done(meta)
            prev = frame
    except SourceError as e:
        logger.error(f"source failed after {state.frames} frames: {e}")
        state.fail(e, abort=False)


def _histogram(samples: List[float]) -> Dict[str, List[float]]:
    if not samples:
        return {"edges_ms": [], "counts": []}
    counts, edges = np.histogram(np.asarray(samples) * 1000.0, bins=HISTOGRAM_BINS)
    return {"edges_ms": edges.tolist(), "counts": counts.tolist()}


def _build_report(mode: str, state: _RunState, wall: float, stages,
                  queues: QueueConfig) -> PipelineReport:
    means = {name: float(np.mean(state.busy[name])) if state.busy[name] else 0.0
             for name in STAGES}
    totals = {name: float(np.sum(state.busy[name])) for name in STAGES}
    timings = StageTimings(means["estimate"], means["propagate"], means["compensate"])
    motion_bytes, grid_bytes = stages.message_sizes()
    if max(timings.as_tuple) > 0:
        prediction = predict_performance(timings, queues, motion_bytes, grid_bytes)
    else:
        prediction = PerformancePrediction(0.0, 0.0, queues.capacity_me_mp * motion_bytes
                                           + queues.capacity_mp_mc * grid_bytes)
    wall = max(wall, 1e-12)
    latencies = np.asarray(state.latencies) if state.latencies else np.zeros(1)
    return PipelineReport(
        mode=mode,
        frames=state.frames,
        wall_time=wall,
        measured_fps=state.frames / wall,
        predicted_fps=prediction.fps_max,
        speedup_predicted=prediction.speedup,
        speedup_measured=1.0 if mode == "sequential" else None,
        parallel_utilisation=sum(totals.values()) / wall,
        latency_p50=float(np.percentile(latencies, 50)),
        latency_p95=float(np.percentile(latencies, 95)),
        stage_occupancy={name: totals[name] / wall for name in STAGES},
        stage_mean_ms={name: means[name] * 1000.0 for name in STAGES},
        stage_histograms={name: _histogram(state.busy[name]) for name in STAGES},
        max_in_flight=state.max_in_flight,
        memory_overhead_bytes=prediction.mem_overhead,
    )


def run_pipeline(source: Iterable[Frame], sink: Callable[[StageOutput], None], stages,
                 queues: Optional[QueueConfig] = None, mode: str = "pipeline") -> PipelineReport:
    """Run the three stages over source, calling sink once per frame in input order.

    Source failures drain the frames already read before being raised; a stage or
    sink failure stops every worker. Output delivered before a failure stays delivered.
    """
    queues = queues or QueueConfig()
    state = _RunState()
    start = time.perf_counter()
    if mode == "sequential":
        _run_sequential(source, sink, stages, state)
    else:
        _run_threads(source, sink, stages, queues, state)
    wall = time.perf_counter() - start

    if state.errors:
        error = state.errors[0]
        logger.error(f"{mode} run stopped after {state.frames} frames: {error}")
        if isinstance(error, StabilizerError):
            raise error
        raise StageError("pipeline", error)

    report = _build_report(mode, state, wall, stages, queues)
    logger.info(f"{mode} run: {report.frames} frames in {report.wall_time:.2f}s "
                f"({report.measured_fps:.1f} fps, predicted {report.predicted_fps:.1f})")
    return report


def benchmark_pipeline(make_source: Callable[[], Iterable[Frame]], make_stages: Callable[[], object],
                       queues: Optional[QueueConfig] = None,
                       sink: Optional[Callable[[StageOutput], None]] = None) -> PipelineReport:
    """Sequential run, then pipelined run on fresh stages over the same input;
    speedup_measured is the ratio of their wall times"""
    sink = sink or (lambda out: None)
    baseline = run_pipeline(make_source(), sink, make_stages(), queues, mode="sequential")
    report = run_pipeline(make_source(), sink, make_stages(), queues, mode="pipeline")
    report.sequential_wall_time = baseline.wall_time
    report.speedup_measured = baseline.wall_time / report.wall_time
    logger.info(f"speedup over sequential: {report.speedup_measured:.2f} "
                f"(predicted {report.speedup_predicted:.2f})")
    return report
