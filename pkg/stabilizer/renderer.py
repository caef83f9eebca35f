"""
Stage 3b: compensation field, backward mesh warp and crop-and-zoom border handling.
"""

import logging
from collections import deque
from dataclasses import dataclass
from typing import Tuple

import numpy as np
from scipy import ndimage

from config.settings import RendererConfig
from stabilizer.errors import SpecMismatch
from stabilizer.observer import Frame
from stabilizer.propagation import GridSpec


logger = logging.getLogger(__name__)

# Borders never eat more than this share of a side, so C stays positive.
MAX_BORDER_FRACTION = 0.45


@dataclass(eq=False)
class CompensationField:
    spec: GridSpec
    vectors: np.ndarray

    def __post_init__(self):
        if self.vectors.shape != (self.spec.rows, self.spec.cols, 2):
            raise SpecMismatch(f"compensation shape {self.vectors.shape} does not match "
                               f"{self.spec.rows}x{self.spec.cols} grid")
        if not np.all(np.isfinite(self.vectors)):
            raise ValueError("compensation field has non-finite entries")

    def is_zero(self) -> bool:
        return not np.any(self.vectors)


@dataclass(frozen=True)
class BorderReport:
    b_hor: float
    b_ver: float
    crop_ratio: float
    scale_w: float
    scale_h: float
    scale_iso: float

    @classmethod
    def from_borders(cls, b_hor: float, b_ver: float, width: int, height: int) -> "BorderReport":
        cap_w, cap_h = MAX_BORDER_FRACTION * width, MAX_BORDER_FRACTION * height
        if b_hor > cap_w or b_ver > cap_h:
            logger.warning(f"border ({b_hor:.1f}, {b_ver:.1f}) px exceeds the "
                           f"{MAX_BORDER_FRACTION:.0%} cap of a {width}x{height} frame; crop is limited")
        b_hor = float(min(max(b_hor, 0.0), cap_w))
        b_ver = float(min(max(b_ver, 0.0), cap_h))
        inner_w = width - 2.0 * b_hor
        inner_h = height - 2.0 * b_ver
        scale_w = width / inner_w
        scale_h = height / inner_h
        return cls(b_hor, b_ver, inner_w * inner_h / (width * height),
                   scale_w, scale_h, max(scale_w, scale_h))

    @classmethod
    def none(cls) -> "BorderReport":
        return cls(0.0, 0.0, 1.0, 1.0, 1.0, 1.0)


def compensation_field(spec: GridSpec, s_t: np.ndarray, o_t: np.ndarray) -> CompensationField:
    if s_t.shape != o_t.shape:
        raise SpecMismatch(f"smoothed grid {s_t.shape} and raw grid {o_t.shape} differ")
    return CompensationField(spec, s_t - o_t)


def dense_compensation(m: CompensationField, width: int, height: int) -> np.ndarray:
    """Per-pixel M(x) as an (H, W, 2) array, bilinear over the vertex lattice"""
    sx, sy = m.spec.spacing
    ly, lx = np.mgrid[0:height, 0:width].astype(np.float64)
    coords = np.stack([ly / sy, lx / sx])
    return np.stack([ndimage.map_coordinates(m.vectors[..., k], coords, order=1, mode="nearest")
                     for k in range(2)], axis=-1)


def remap_bilinear(image: np.ndarray, map_x: np.ndarray, map_y: np.ndarray) -> np.ndarray:
    """Float bilinear samples of image at (map_x, map_y), replicating the border"""
    image = np.asarray(image, dtype=np.float64)
    coords = np.stack([map_y, map_x])
    if image.ndim == 2:
        return ndimage.map_coordinates(image, coords, order=1, mode="nearest")
    return np.stack([ndimage.map_coordinates(image[..., ch], coords, order=1, mode="nearest")
                     for ch in range(image.shape[2])], axis=-1)


def _to_uint8(values: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(values), 0, 255).astype(np.uint8)


def warp_frame(frame: Frame, m: CompensationField) -> Frame:
    """Backward warp: output(x) = input(x - M(x))"""
    if m.is_zero():
        return Frame(frame.index, frame.data.copy())
    shift = dense_compensation(m, frame.width, frame.height)
    ys, xs = np.mgrid[0:frame.height, 0:frame.width].astype(np.float64)
    out = remap_bilinear(frame.data, xs - shift[..., 0], ys - shift[..., 1])
    return Frame(frame.index, _to_uint8(out))


def frame_excursions(m: CompensationField) -> Tuple[float, float]:
    """Widest uncovered band per axis, from the boundary vertices of the warp"""
    v = m.vectors
    left = v[:, 0, 0].max()
    right = -v[:, -1, 0].min()
    top = v[0, :, 1].max()
    bottom = -v[-1, :, 1].min()
    return float(max(left, right, 0.0)), float(max(top, bottom, 0.0))


def measure_borders(m: CompensationField, dims: Tuple[int, int]) -> BorderReport:
    width, height = dims
    b_hor, b_ver = frame_excursions(m)
    return BorderReport.from_borders(b_hor, b_ver, width, height)


class BorderAccumulator:
    """Causal sliding-window maximum of the per-axis border widths"""

    def __init__(self, window: int = 30):
        self.history = deque(maxlen=window)

    def update(self, report: BorderReport, dims: Tuple[int, int]) -> BorderReport:
        self.history.append((report.b_hor, report.b_ver))
        b_hor = max(b for b, _ in self.history)
        b_ver = max(b for _, b in self.history)
        return BorderReport.from_borders(b_hor, b_ver, dims[0], dims[1])


def crop_zoom_maps(width: int, height: int, scale: float) -> Tuple[np.ndarray, np.ndarray]:
    cx, cy = (width - 1) / 2.0, (height - 1) / 2.0
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    return cx + (xs - cx) / scale, cy + (ys - cy) / scale


def apply_crop_zoom(frame: Frame, report: BorderReport) -> Frame:
    """Central crop of size (W/s, H/s) resampled back to (W, H)"""
    if report.scale_iso <= 1.0:
        return Frame(frame.index, frame.data.copy())
    map_x, map_y = crop_zoom_maps(frame.width, frame.height, report.scale_iso)
    return Frame(frame.index, _to_uint8(remap_bilinear(frame.data, map_x, map_y)))


class FrameRenderer:
    """Stage 3b worker state: warps each frame and applies the border policy"""

    def __init__(self, cfg: RendererConfig):
        self.cfg = cfg
        self.borders = BorderAccumulator(cfg.border_window)

    def render(self, frame: Frame, spec: GridSpec, s_t: np.ndarray,
               o_t: np.ndarray) -> Tuple[Frame, BorderReport]:
        m = compensation_field(spec, s_t, o_t)
        warped = warp_frame(frame, m)
        report = self.borders.update(measure_borders(m, frame.size), frame.size)
        if self.cfg.border_policy == "no-crop":
            return warped, report
        logger.debug(f"frame {frame.index}: crop ratio {report.crop_ratio:.3f}, "
                     f"zoom {report.scale_iso:.3f}")
        return apply_crop_zoom(warped, report), report
