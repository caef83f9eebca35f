"""
Stage 1: keypoints, displacements and the reweighted backward flow of frame t,
computed from frames t-1 and t only.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import cv2
import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from config.settings import ObserverConfig
from stabilizer.errors import DimensionMismatch, EmptyFrame
from stabilizer.geometry import bilinear_sample_many


logger = logging.getLogger(__name__)

MIN_RESPONSE = 1e-7
IDW_CHUNK = 65536
LK_CRITERIA = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, 30, 0.01)


@dataclass(eq=False)
class Frame:
    index: int
    data: np.ndarray

    def __post_init__(self):
        self.data = np.asarray(self.data)
        if self.data.dtype != np.uint8:
            raise ValueError(f"frame {self.index}: expected 8-bit samples, got {self.data.dtype}")
        if self.data.ndim not in (2, 3) or (self.data.ndim == 3 and self.data.shape[2] != 3):
            raise ValueError(f"frame {self.index}: expected HxW or HxWx3 data")

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return 1 if self.data.ndim == 2 else 3

    @property
    def size(self) -> Tuple[int, int]:
        return self.width, self.height

    def gray(self) -> np.ndarray:
        if self.data.size == 0:
            raise EmptyFrame(f"frame {self.index} has no pixels")
        if self.channels == 1:
            return self.data
        return cv2.cvtColor(self.data, cv2.COLOR_BGR2GRAY)


@dataclass(frozen=True)
class ScoredKeypoint:
    x: float
    y: float
    score: float
    detector_id: str


@dataclass(eq=False)
class KeypointSet:
    xy: np.ndarray
    scores: np.ndarray
    detector_ids: np.ndarray
    frame_index: int
    frame_size: Tuple[int, int]

    @classmethod
    def empty(cls, frame_index: int, frame_size: Tuple[int, int]) -> "KeypointSet":
        return cls(np.zeros((0, 2)), np.zeros(0), np.array([], dtype=object),
                   frame_index, frame_size)

    @classmethod
    def from_points(cls, points: Sequence[ScoredKeypoint], frame_index: int,
                    frame_size: Tuple[int, int]) -> "KeypointSet":
        if not points:
            return cls.empty(frame_index, frame_size)
        return cls(np.array([[p.x, p.y] for p in points], dtype=np.float64),
                   np.array([p.score for p in points], dtype=np.float64),
                   np.array([p.detector_id for p in points], dtype=object),
                   frame_index, frame_size)

    def __len__(self) -> int:
        return len(self.xy)

    @property
    def points(self) -> List[ScoredKeypoint]:
        return [ScoredKeypoint(float(x), float(y), float(s), str(d))
                for (x, y), s, d in zip(self.xy, self.scores, self.detector_ids)]

    def subset(self, idx) -> "KeypointSet":
        return KeypointSet(self.xy[idx], self.scores[idx], self.detector_ids[idx],
                           self.frame_index, self.frame_size)


@dataclass(eq=False)
class FlowField:
    """Backward flow: the content at pixel x of frame t sat at x - vectors[y, x] in frame t-1"""
    vectors: np.ndarray

    @property
    def height(self) -> int:
        return self.vectors.shape[0]

    @property
    def width(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def zeros(cls, width: int, height: int) -> "FlowField":
        return cls(np.zeros((height, width, 2), dtype=np.float32))


@dataclass(eq=False)
class GuidanceMask:
    bits: np.ndarray

    @property
    def height(self) -> int:
        return self.bits.shape[0]

    @property
    def width(self) -> int:
        return self.bits.shape[1]


@dataclass(eq=False)
class MotionSample:
    positions: np.ndarray
    displacements: np.ndarray
    confidences: np.ndarray
    frame_index: int = 0
    frame_size: Tuple[int, int] = (0, 0)

    def __post_init__(self):
        n = len(self.positions)
        if len(self.displacements) != n or len(self.confidences) != n:
            raise ValueError("positions, displacements and confidences differ in length")

    @classmethod
    def empty(cls, frame_index: int = 0, frame_size: Tuple[int, int] = (0, 0)) -> "MotionSample":
        return cls(np.zeros((0, 2)), np.zeros((0, 2)), np.zeros(0), frame_index, frame_size)

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def nbytes(self) -> int:
        return 16 * len(self)


@dataclass(eq=False)
class Observation:
    sample: MotionSample
    candidates: KeypointSet
    keypoints: KeypointSet
    flow: Optional[FlowField] = None


def _greedy_nms(xy: np.ndarray, scores: np.ndarray, radius: float) -> np.ndarray:
    """Indices kept by greedy suppression in descending score order"""
    if len(xy) == 0:
        return np.zeros(0, dtype=np.intp)
    order = np.argsort(-scores, kind="stable")
    tree = cKDTree(xy)
    suppressed = np.zeros(len(xy), dtype=bool)
    keep = []
    for i in order:
        if suppressed[i]:
            continue
        keep.append(i)
        suppressed[tree.query_ball_point(xy[i], radius)] = True
    return np.array(keep, dtype=np.intp)


def _check_same_size(prev: Frame, cur: Frame) -> None:
    if prev.size != cur.size:
        raise DimensionMismatch(f"frame {prev.index} is {prev.size}, frame {cur.index} is {cur.size}")


def detect_keypoints(frame: Frame, detector: str,
                     cfg: Optional[ObserverConfig] = None) -> KeypointSet:
    """Builtin corner detectors with per-frame max-normalized scores"""
    cfg = cfg or ObserverConfig()
    gray = frame.gray()

    if detector == "shi_tomasi":
        response = cv2.cornerMinEigenVal(gray, blockSize=3, ksize=3)
        peak = float(response.max())
        if peak <= MIN_RESPONSE:
            return KeypointSet.empty(frame.index, frame.size)
        local_max = cv2.dilate(response, np.ones((3, 3), np.uint8))
        ys, xs = np.nonzero((response >= local_max) & (response > cfg.quality_level * peak))
        xy = np.stack([xs, ys], axis=1).astype(np.float64)
        scores = response[ys, xs].astype(np.float64)
    elif detector == "fast":
        fast = cv2.FastFeatureDetector_create(threshold=int(cfg.fast_threshold),
                                              nonmaxSuppression=True)
        found = fast.detect(gray, None)
        if not found:
            return KeypointSet.empty(frame.index, frame.size)
        xy = np.array([kp.pt for kp in found], dtype=np.float64)
        scores = np.array([kp.response for kp in found], dtype=np.float64)
    else:
        raise ValueError(f"unknown builtin detector '{detector}'")

    keep = _greedy_nms(xy, scores, cfg.nms_radius)[:cfg.max_candidates]
    xy, scores = xy[keep], scores[keep]
    if len(scores) == 0 or scores.max() <= 0:
        return KeypointSet.empty(frame.index, frame.size)
    scores = scores / scores.max()
    return KeypointSet(xy, scores, np.array([detector] * len(xy), dtype=object),
                       frame.index, frame.size)


def fuse_detections(sets: Sequence[KeypointSet], cfg: ObserverConfig) -> KeypointSet:
    """Weight each source, merge coincident proposals of different sources, suppress the rest"""
    sets = [s for s in sets if len(s)]
    if not sets:
        return KeypointSet.empty(0, (0, 0))
    frame_index, frame_size = sets[0].frame_index, sets[0].frame_size

    xy = np.concatenate([s.xy for s in sets])
    scores = np.concatenate([s.scores * cfg.weight(str(s.detector_ids[0])) for s in sets])
    ids = np.concatenate([s.detector_ids for s in sets])

    order = np.argsort(-scores, kind="stable")
    tree = cKDTree(xy)
    used = np.zeros(len(xy), dtype=bool)
    out_xy, out_scores, out_ids = [], [], []
    for i in order:
        if used[i]:
            continue
        members = [j for j in tree.query_ball_point(xy[i], cfg.nms_radius) if not used[j]]
        used[members] = True
        merged = [i]
        for det in set(ids[members]) - {ids[i]}:
            from_det = [j for j in members if ids[j] == det]
            merged.append(max(from_det, key=lambda j: scores[j]))
        w = scores[merged]
        if w.sum() > 0:
            pos = (xy[merged] * w[:, None]).sum(axis=0) / w.sum()
        else:
            pos = xy[i]
        out_xy.append(pos)
        out_scores.append(min(float(scores[i]), 1.0))
        out_ids.append(ids[i])

    fused = KeypointSet(np.array(out_xy), np.array(out_scores),
                        np.array(out_ids, dtype=object), frame_index, frame_size)
    return fused.subset(np.sort(_greedy_nms(fused.xy, fused.scores, cfg.nms_radius)))


def homogenize(kps: KeypointSet, cfg: ObserverConfig) -> KeypointSet:
    """Per grid cell, keep the top-k keypoints that are at least min_separation apart"""
    if len(kps) == 0:
        return kps
    width, height = kps.frame_size
    cx = np.clip((kps.xy[:, 0] * cfg.grid_gx / max(width, 1)).astype(int), 0, cfg.grid_gx - 1)
    cy = np.clip((kps.xy[:, 1] * cfg.grid_gy / max(height, 1)).astype(int), 0, cfg.grid_gy - 1)
    cells = cy * cfg.grid_gx + cx

    kept: Dict[int, List[int]] = {}
    for i in np.argsort(-kps.scores, kind="stable"):
        bucket = kept.setdefault(int(cells[i]), [])
        if len(bucket) >= cfg.per_cell_k:
            continue
        if all(np.hypot(*(kps.xy[i] - kps.xy[j])) >= cfg.min_separation for j in bucket):
            bucket.append(int(i))
    keep = np.sort(np.array([i for bucket in kept.values() for i in bucket], dtype=np.intp))
    return kps.subset(keep)


def _track_backward(prev_gray: np.ndarray, cur_gray: np.ndarray, pts: np.ndarray,
                    cfg: ObserverConfig):
    """LK from frame t into frame t-1, plus the forward re-track for a consistency check"""
    lk = dict(winSize=(cfg.lk_window, cfg.lk_window), maxLevel=max(cfg.pyramid_levels - 1, 0),
              criteria=LK_CRITERIA)
    p = pts.astype(np.float32).reshape(-1, 1, 2)
    q, st, _ = cv2.calcOpticalFlowPyrLK(cur_gray, prev_gray, p, None, **lk)
    p_back, st_back, _ = cv2.calcOpticalFlowPyrLK(prev_gray, cur_gray, q, None, **lk)
    q = q.reshape(-1, 2).astype(np.float64)
    fb = np.linalg.norm(p_back.reshape(-1, 2).astype(np.float64) - pts, axis=1)
    h, w = cur_gray.shape
    inside = (q[:, 0] >= 0) & (q[:, 0] <= w - 1) & (q[:, 1] >= 0) & (q[:, 1] <= h - 1)
    ok = st.reshape(-1).astype(bool) & st_back.reshape(-1).astype(bool) & inside & np.isfinite(fb)
    return q, fb, ok


def track_points(src_gray: np.ndarray, dst_gray: np.ndarray, pts: np.ndarray,
                 cfg: ObserverConfig):
    """Positions in dst of points given in src, forward-backward error and validity"""
    return _track_backward(dst_gray, src_gray, pts, cfg)


def estimate_sparse_flow(prev: Frame, cur: Frame, pts: KeypointSet,
                         cfg: ObserverConfig) -> MotionSample:
    _check_same_size(prev, cur)
    if len(pts) == 0:
        return MotionSample.empty(cur.index, cur.size)
    q, fb, ok = _track_backward(prev.gray(), cur.gray(), pts.xy, cfg)
    displacements = np.where(ok[:, None], pts.xy - q, 0.0)
    confidences = np.where(ok, np.clip(pts.scores * np.exp(-fb), 0.0, 1.0), 0.0)
    return MotionSample(pts.xy.copy(), displacements, confidences, cur.index, cur.size)


def _lattice_axis(length: int, stride: int) -> np.ndarray:
    axis = np.arange(0, length, stride, dtype=np.float64)
    if axis[-1] != length - 1:
        axis = np.append(axis, length - 1)
    return axis


def estimate_dense_flow(prev: Frame, cur: Frame, cfg: ObserverConfig) -> FlowField:
    """Coarse LK on a stride lattice, bilinearly upsampled to every pixel"""
    _check_same_size(prev, cur)
    xs = _lattice_axis(cur.width, cfg.dense_stride)
    ys = _lattice_axis(cur.height, cfg.dense_stride)
    gx, gy = np.meshgrid(xs, ys)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)

    q, _, ok = _track_backward(prev.gray(), cur.gray(), pts, cfg)
    u = pts - q
    if ok.any():
        fill = np.median(u[ok], axis=0)
    else:
        fill = np.zeros(2)
    u[~ok] = fill
    lattice = u.reshape(len(ys), len(xs), 2)

    iy = np.interp(np.arange(cur.height), ys, np.arange(len(ys)))
    ix = np.interp(np.arange(cur.width), xs, np.arange(len(xs)))
    coords = np.meshgrid(iy, ix, indexing="ij")
    vectors = np.stack([ndimage.map_coordinates(lattice[..., c], coords, order=1, mode="nearest")
                        for c in range(2)], axis=-1)
    return FlowField(vectors.astype(np.float32))


def _pixel_grid(width: int, height: int) -> np.ndarray:
    gy, gx = np.mgrid[0:height, 0:width]
    return np.stack([gx.ravel(), gy.ravel()], axis=1).astype(np.float64)


def build_guidance_mask(candidates: KeypointSet, r: float, dims: Tuple[int, int]) -> GuidanceMask:
    """Bit set within distance r of any candidate; empty candidates give an all-zero mask"""
    width, height = dims
    if len(candidates) == 0:
        return GuidanceMask(np.zeros((height, width), dtype=bool))
    tree = cKDTree(candidates.xy)
    dist, _ = tree.query(_pixel_grid(width, height), k=1, distance_upper_bound=r + 1e-9)
    return GuidanceMask((dist <= r + 1e-9).reshape(height, width))


def fuse_flow(dense: FlowField, candidates: KeypointSet, mask: GuidanceMask,
              neighbors: int = 16, power: float = 2.0) -> FlowField:
    """Dense flow inside the mask, IDW interpolation of candidate flows outside"""
    if (dense.width, dense.height) != (mask.width, mask.height):
        raise DimensionMismatch(f"flow is {dense.width}x{dense.height}, "
                                f"mask is {mask.width}x{mask.height}")
    if len(candidates) == 0 or mask.bits.all():
        return FlowField(dense.vectors.copy())

    samples = bilinear_sample_many(dense.vectors.astype(np.float64),
                                   candidates.xy[:, 0], candidates.xy[:, 1])
    tree = cKDTree(candidates.xy)
    k = min(neighbors, len(candidates))
    out = dense.vectors.astype(np.float64).reshape(-1, 2)
    outside = np.flatnonzero(~mask.bits.ravel())
    pix = _pixel_grid(dense.width, dense.height)
    for start in range(0, len(outside), IDW_CHUNK):
        idx = outside[start:start + IDW_CHUNK]
        dist, nn = tree.query(pix[idx], k=k)
        dist = dist.reshape(len(idx), k)
        nn = nn.reshape(len(idx), k)
        exact = dist[:, 0] <= 0.0
        w = 1.0 / np.maximum(dist, 1e-12) ** power
        values = (samples[nn] * w[..., None]).sum(axis=1) / w.sum(axis=1)[:, None]
        values[exact] = samples[nn[exact, 0]]
        out[idx] = values
    return FlowField(out.reshape(dense.height, dense.width, 2).astype(np.float32))


def sample_motion(fused: FlowField, kp: KeypointSet,
                  confidences: Optional[np.ndarray] = None) -> MotionSample:
    if len(kp) == 0:
        return MotionSample.empty(kp.frame_index, kp.frame_size)
    u = bilinear_sample_many(fused.vectors.astype(np.float64), kp.xy[:, 0], kp.xy[:, 1])
    weights = kp.scores if confidences is None else confidences
    return MotionSample(kp.xy.copy(), u, np.clip(np.asarray(weights, dtype=np.float64), 0.0, 1.0),
                        kp.frame_index, kp.frame_size)


class MotionObserver:
    """Stage 1 worker state: config plus optional imported keypoints and flows"""

    def __init__(self, cfg: ObserverConfig,
                 imported_keypoints: Optional[Dict[int, KeypointSet]] = None,
                 flow_loader: Optional[Callable[[int], FlowField]] = None):
        self.cfg = cfg
        self.imported_keypoints = imported_keypoints or {}
        self.flow_loader = flow_loader

    def candidates(self, frame: Frame) -> KeypointSet:
        sets = []
        for det in self.cfg.detectors:
            if det == "import":
                found = self.imported_keypoints.get(frame.index)
                if found is not None:
                    sets.append(found)
            else:
                sets.append(detect_keypoints(frame, det, self.cfg))
        if not self.cfg.keypoint_collaboration:
            first = sets[0] if sets else KeypointSet.empty(frame.index, frame.size)
            return first
        fused = fuse_detections(sets, self.cfg)
        fused.frame_index, fused.frame_size = frame.index, frame.size
        return fused

    def dense_flow(self, prev: Frame, cur: Frame) -> FlowField:
        if self.cfg.flow_source == "import":
            if self.flow_loader is None:
                raise ValueError("flow_source 'import' needs a flow loader")
            flow = self.flow_loader(cur.index)
            if (flow.width, flow.height) != cur.size:
                raise DimensionMismatch(f"imported flow {cur.index} is {flow.width}x{flow.height}, "
                                        f"frame is {cur.width}x{cur.height}")
            return flow
        return estimate_dense_flow(prev, cur, self.cfg)

    def observe_full(self, prev: Optional[Frame], cur: Frame) -> Observation:
        if prev is None:
            empty = KeypointSet.empty(cur.index, cur.size)
            return Observation(MotionSample.empty(cur.index, cur.size), empty, empty)
        _check_same_size(prev, cur)

        candidates = self.candidates(cur)
        if self.cfg.keypoint_collaboration:
            keypoints = homogenize(candidates, self.cfg)
        else:
            keypoints = candidates
        sparse = estimate_sparse_flow(prev, cur, keypoints, self.cfg)
        if self.cfg.flow_source == "sparse":
            return Observation(sparse, candidates, keypoints)

        dense = self.dense_flow(prev, cur)
        mask = build_guidance_mask(candidates, self.cfg.mask_radius, cur.size)
        fused = fuse_flow(dense, candidates, mask, self.cfg.idw_neighbors, self.cfg.idw_power)
        sample = sample_motion(fused, keypoints, sparse.confidences)
        logger.debug(f"frame {cur.index}: {len(candidates)} candidates, {len(keypoints)} keypoints")
        return Observation(sample, candidates, keypoints, fused)

    def observe(self, prev: Optional[Frame], cur: Frame) -> MotionSample:
        return self.observe_full(prev, cur).sample
