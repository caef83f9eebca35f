"""
Synthetic camera paths, rendered textured sequences with exact motion, and a
brute-force tap search used to bound the kernel solver.
"""

import logging
from dataclasses import dataclass, field, replace
from itertools import product
from typing import List, Optional, Tuple

import cv2
import numpy as np

from config.settings import SmootherConfig
from stabilizer.errors import ViewportUnderflow
from stabilizer.observer import Frame, MotionSample
from stabilizer.propagation import GridMotionField, GridSpec
from stabilizer.smoother import (
    KernelSet, TrajectoryBuffer, append_and_integrate, evaluate_taps, smooth_step,
)


logger = logging.getLogger(__name__)

JITTER_PROFILES = ("alternating", "highband")
ORACLE_TAPS = np.arange(0.0, 2.0 + 1e-9, 0.25)
ORACLE_GRID = GridSpec(2, 2, 64, 64)


@dataclass
class SynthConfig:
    smooth_amplitude: Tuple[float, float] = (3.0, 2.0)
    smooth_cycles: int = 2
    rotation_amplitude: float = 0.0
    scale_amplitude: float = 0.0
    jitter_amplitude: float = 2.0
    jitter_profile: str = "alternating"
    seed: int = 0

    def __post_init__(self):
        if self.jitter_profile not in JITTER_PROFILES:
            raise ValueError(f"unknown jitter profile '{self.jitter_profile}'")
        if not 0 <= self.smooth_cycles <= 5:
            raise ValueError("smooth_cycles must stay in 0..5 to keep the path low-band")


@dataclass(eq=False)
class SynthTrajectory:
    """Per-frame smooth pose (tx, ty, rotation, scale) and translation jitter"""
    smooth: np.ndarray
    jitter: np.ndarray
    config: SynthConfig

    def __len__(self) -> int:
        return len(self.smooth)

    @property
    def total(self) -> np.ndarray:
        out = self.smooth.copy()
        out[:, :2] += self.jitter
        return out

    def to_dict(self) -> dict:
        return {
            "seed": self.config.seed,
            "jitter_profile": self.config.jitter_profile,
            "frames": [
                {"frame": t, "smooth": s.tolist(), "jitter": j.tolist(), "total": a.tolist()}
                for t, (s, j, a) in enumerate(zip(self.smooth, self.jitter, self.total))
            ],
        }


def _alternating_jitter(frames: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    sign = rng.choice([-1.0, 1.0], size=2)
    modulation = 1.0 + 0.1 * rng.uniform(-1.0, 1.0, size=(frames, 2))
    alternation = np.where(np.arange(frames) % 2 == 0, 1.0, -1.0)[:, None]
    return amplitude * sign * alternation * modulation


def _highband_jitter(frames: int, amplitude: float, rng: np.random.Generator) -> np.ndarray:
    n_bins = frames // 2 + 1
    cutoff = int(np.ceil(0.75 * (n_bins - 1)))
    out = np.zeros((frames, 2))
    for axis in range(2):
        spectrum = rng.normal(size=n_bins) + 1j * rng.normal(size=n_bins)
        spectrum[:cutoff] = 0.0
        signal = np.fft.irfft(spectrum, n=frames)
        peak = np.abs(signal).max()
        out[:, axis] = amplitude * signal / peak if peak > 0 else 0.0
    return out


def gen_trajectory(cfg: SynthConfig, frames: int) -> SynthTrajectory:
    if frames < 16:
        raise ValueError(f"need at least 16 frames, got {frames}")
    t = np.arange(frames)
    phase = 2.0 * np.pi * cfg.smooth_cycles * t / frames
    smooth = np.column_stack([
        cfg.smooth_amplitude[0] * np.sin(phase),
        cfg.smooth_amplitude[1] * (1.0 - np.cos(phase)),
        cfg.rotation_amplitude * np.sin(phase),
        1.0 + cfg.scale_amplitude * np.sin(phase),
    ])
    rng = np.random.default_rng(cfg.seed)
    if cfg.jitter_amplitude == 0:
        jitter = np.zeros((frames, 2))
    elif cfg.jitter_profile == "alternating":
        jitter = _alternating_jitter(frames, cfg.jitter_amplitude, rng)
    else:
        jitter = _highband_jitter(frames, cfg.jitter_amplitude, rng)
    return SynthTrajectory(smooth, jitter, cfg)


def make_texture(width: int, height: int, seed: int = 0, block: int = 6) -> np.ndarray:
    """Blurred random blocks: dense, well-spread corners"""
    rng = np.random.default_rng(seed)
    coarse = rng.integers(0, 256, size=(height // block + 1, width // block + 1)).astype(np.uint8)
    tex = cv2.resize(coarse, (coarse.shape[1] * block, coarse.shape[0] * block),
                     interpolation=cv2.INTER_NEAREST)[:height, :width]
    return cv2.GaussianBlur(tex, (3, 3), 0)


@dataclass(eq=False)
class SynthScene:
    texture: np.ndarray
    second_texture: Optional[np.ndarray] = None
    boundary: float = 0.5
    disparity: Tuple[float, float] = (0.0, 0.0)

    @classmethod
    def textured(cls, width: int, height: int, seed: int = 0) -> "SynthScene":
        return cls(make_texture(width, height, seed))

    @classmethod
    def two_plane(cls, width: int, height: int, disparity: Tuple[float, float],
                  seed: int = 0, boundary: float = 0.5) -> "SynthScene":
        return cls(make_texture(width, height, seed), make_texture(width, height, seed + 1),
                   boundary, disparity)


def scene_for(traj: SynthTrajectory, dims: Tuple[int, int], seed: int = 0,
              disparity: Optional[Tuple[float, float]] = None) -> SynthScene:
    """Texture large enough to cover the viewport along the whole trajectory"""
    width, height = dims
    total = traj.total
    reach = np.abs(total[:, :2]).max()
    if disparity is not None:
        reach += len(traj) * max(abs(disparity[0]), abs(disparity[1]))
    size = max(width, height)
    reach += size * (np.abs(total[:, 2]).max() + np.abs(total[:, 3] - 1.0).max()) + 8
    margin = int(np.ceil(reach))
    tex_w, tex_h = width + 2 * margin, height + 2 * margin
    if disparity is None:
        return SynthScene.textured(tex_w, tex_h, seed)
    return SynthScene.two_plane(tex_w, tex_h, disparity, seed)


@dataclass(eq=False)
class SynthSequence:
    frames: List[Frame]
    absolute: List[np.ndarray]
    relative: List[np.ndarray]
    fields: List[GridMotionField]
    plane_absolute: List[np.ndarray] = field(default_factory=list)


def pose_matrix(pose: np.ndarray, dims: Tuple[int, int]) -> np.ndarray:
    """Frame-0 pixel -> frame-t pixel for pose (tx, ty, rotation, scale) about the centre"""
    tx, ty, theta, scale = pose
    cx, cy = (dims[0] - 1) / 2.0, (dims[1] - 1) / 2.0
    c, s = np.cos(theta) * scale, np.sin(theta) * scale
    return np.array([
        [c, -s, cx - c * cx + s * cy + tx],
        [s, c, cy - s * cx - c * cy + ty],
        [0.0, 0.0, 1.0],
    ])


def _translation(dx: float, dy: float) -> np.ndarray:
    m = np.eye(3)
    m[0, 2], m[1, 2] = dx, dy
    return m


def _render(texture: np.ndarray, absolute: np.ndarray, origin: np.ndarray,
            dims: Tuple[int, int]) -> np.ndarray:
    to_texture = _translation(*origin) @ np.linalg.inv(absolute)
    width, height = dims
    corners = np.array([[0, 0, 1], [width - 1, 0, 1], [width - 1, height - 1, 1],
                        [0, height - 1, 1]], dtype=np.float64) @ to_texture.T
    corners = corners[:, :2] / corners[:, 2:]
    tex_h, tex_w = texture.shape[:2]
    if corners.min() < 0 or np.any(corners[:, 0] > tex_w - 1) or np.any(corners[:, 1] > tex_h - 1):
        raise ViewportUnderflow("viewport leaves the scene texture; enlarge the texture "
                                "or reduce the motion")
    return cv2.warpPerspective(texture, to_texture, dims,
                               flags=cv2.INTER_LINEAR | cv2.WARP_INVERSE_MAP,
                               borderMode=cv2.BORDER_REPLICATE)


def _true_field(spec: GridSpec, relative: np.ndarray, frame_index: int) -> np.ndarray:
    rest = spec.rest().reshape(-1, 2)
    prev = np.column_stack([rest, np.ones(len(rest))]) @ relative.T
    prev = prev[:, :2] / prev[:, 2:]
    return (rest - prev).reshape(spec.rows, spec.cols, 2)


def render_sequence(scene: SynthScene, traj: SynthTrajectory, dims: Tuple[int, int],
                    grid: Tuple[int, int] = (16, 16)) -> SynthSequence:
    """Frames, content transforms (frame 0 -> frame t), frame-t -> frame-(t-1) transforms
    and the exact per-vertex motion fields"""
    width, height = dims
    tex_h, tex_w = scene.texture.shape[:2]
    origin = np.array([(tex_w - width) / 2.0, (tex_h - height) / 2.0])
    spec = GridSpec(grid[0], grid[1], width, height)
    band_start = int(round(scene.boundary * height))
    rest_y = spec.rest()[..., 1]

    frames, absolute, relative, fields, plane_absolute = [], [], [], [], []
    for t, pose in enumerate(traj.total):
        a = pose_matrix(pose, dims)
        image = _render(scene.texture, a, origin, dims)
        if scene.second_texture is not None:
            a2 = _translation(scene.disparity[0] * t, scene.disparity[1] * t) @ a
            image[band_start:] = _render(scene.second_texture, a2, origin, dims)[band_start:]
            plane_absolute.append(a2)
        frames.append(Frame(t, image))
        absolute.append(a)

        if t == 0:
            relative.append(np.eye(3))
            fields.append(GridMotionField.zeros(spec, 0))
            continue
        rel = absolute[t - 1] @ np.linalg.inv(a)
        relative.append(rel)
        vectors = _true_field(spec, rel, t)
        if scene.second_texture is not None:
            rel2 = plane_absolute[t - 1] @ np.linalg.inv(plane_absolute[t])
            lower = rest_y >= band_start
            vectors[lower] = _true_field(spec, rel2, t)[lower]
        fields.append(GridMotionField(spec, vectors, t))
    logger.debug(f"rendered {len(frames)} synthetic frames at {width}x{height}")
    return SynthSequence(frames, absolute, relative, fields, plane_absolute)


def true_motion_sample(seq: SynthSequence, t: int, positions: np.ndarray,
                       scene: SynthScene) -> MotionSample:
    """Exact displacements of given frame-t positions, unit confidence"""
    width, height = seq.frames[t].size
    pts = np.column_stack([positions, np.ones(len(positions))])
    prev = pts @ seq.relative[t].T
    prev = prev[:, :2] / prev[:, 2:]
    if scene.second_texture is not None and t > 0:
        rel2 = seq.plane_absolute[t - 1] @ np.linalg.inv(seq.plane_absolute[t])
        lower = positions[:, 1] >= int(round(scene.boundary * height))
        prev2 = pts[lower] @ rel2.T
        prev[lower] = prev2[:, :2] / prev2[:, 2:]
    return MotionSample(positions.copy(), positions - prev, np.ones(len(positions)),
                        t, (width, height))


# Tap-lattice oracle over a 1D series

def series_field(delta: float, frame_index: int = 0, spec: GridSpec = ORACLE_GRID) -> GridMotionField:
    vectors = np.zeros((spec.rows, spec.cols, 2))
    vectors[..., 0] = delta
    return GridMotionField(spec, vectors, frame_index)


def oracle_lattice() -> np.ndarray:
    """Every (k1, k2, k3) on the lattice, shared by both axes, as (B, 2, 1, 1, 3) params"""
    taps = np.array(list(product(ORACLE_TAPS, repeat=3)))
    return np.repeat(taps[:, None, None, None, :], 2, axis=1)


def oracle_kernels(buf: TrajectoryBuffer, m: Optional[MotionSample],
                   cfg: SmootherConfig) -> Tuple[KernelSet, float]:
    """Lattice taps with the lowest objective on the buffer's current frame"""
    params = oracle_lattice()
    values, _, _ = evaluate_taps(params, buf, m, cfg, cfg.beta)
    best = int(np.argmin(values))
    return KernelSet.from_params(params[best], "global", cfg.beta), float(values[best])


def oracle_smooth(raw: np.ndarray, window: Optional[int] = None,
                  cfg: Optional[SmootherConfig] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Smooth a 1D series with lattice-optimal taps at every frame.

    An explicit window overrides the one in cfg; with neither given the window is 7.
    Returns the smoothed series and the per-frame objective of the chosen taps.
    """
    raw = np.asarray(raw, dtype=np.float64)
    if cfg is None:
        cfg = SmootherConfig(window=window or 7)
    elif window is not None and window != cfg.window:
        cfg = replace(cfg, window=window)
    buf = TrajectoryBuffer(ORACLE_GRID, cfg.window)
    smoothed, objective = [], []
    for t, x in enumerate(raw):
        delta = 0.0 if t == 0 else x - raw[t - 1]
        append_and_integrate(buf, series_field(delta, t))
        kernels, value = oracle_kernels(buf, None, cfg)
        s_t = smooth_step(buf, kernels, cfg.lambda_blend)
        buf.smoothed.append(s_t)
        buf.kernels = kernels
        smoothed.append(raw[0] + s_t[0, 0, 0] - buf.rest[0, 0, 0])
        objective.append(value)
    return np.array(smoothed), np.array(objective)
