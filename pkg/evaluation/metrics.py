"""
Stabilization quality metrics: cropping ratio, distortion, stability score and PSNR.

C and D come from the input -> output homography of every frame. Stability is
measured on the output's own inter-frame motion, accumulated into a camera path
and split into translation and rotation channels.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Union

import numpy as np

from config.settings import MetricsConfig, ObserverConfig, RansacConfig
from stabilizer.errors import (
    AllFramesInvalid, DegenerateConfiguration, DimensionMismatch, NoConsensus, TooFewPoints,
    TooShort,
)
from stabilizer.geometry import Homography, project_points, ransac_homography
from stabilizer.observer import Frame, detect_keypoints, track_points


logger = logging.getLogger(__name__)

MAX_INTENSITY = 255.0
CHANNELS = ("tx", "ty", "rotation")
LOW_BAND_BINS = 5


@dataclass(eq=False)
class FrameTransformSeries:
    """One homography per frame; None where estimation failed"""
    homographies: List[Optional[Homography]]

    def __len__(self) -> int:
        return len(self.homographies)

    @property
    def valid(self) -> np.ndarray:
        return np.array([h is not None for h in self.homographies], dtype=bool)

    @property
    def valid_homographies(self) -> List[Homography]:
        return [h for h in self.homographies if h is not None]


def _require_valid(series: FrameTransformSeries) -> List[Homography]:
    valid = series.valid_homographies
    if not valid:
        raise AllFramesInvalid("no frame has a valid transform")
    return valid


def estimate_pair_transform(src: Frame, dst: Frame, observer: ObserverConfig,
                            ransac: RansacConfig, max_keypoints: int = 500) -> Optional[Homography]:
    """Homography taking src pixel positions to dst, or None without enough support"""
    kps = detect_keypoints(src, "shi_tomasi", observer)
    if len(kps) < 4:
        return None
    pts = kps.xy[:max_keypoints]
    q, fb, ok = track_points(src.gray(), dst.gray(), pts, observer)
    ok &= fb < 1.0
    if ok.sum() < 4:
        return None
    try:
        h, _ = ransac_homography(pts[ok], q[ok], ransac)
    except (TooFewPoints, NoConsensus, DegenerateConfiguration) as e:
        logger.debug(f"frame {src.index}: no transform ({e})")
        return None
    return h


def estimate_frame_transforms(inputs: Sequence[Frame], outputs: Sequence[Frame],
                              observer: Optional[ObserverConfig] = None,
                              ransac: Optional[RansacConfig] = None,
                              max_keypoints: int = 500) -> FrameTransformSeries:
    if len(inputs) != len(outputs):
        raise DimensionMismatch(f"{len(inputs)} input frames vs {len(outputs)} output frames")
    observer = observer or ObserverConfig()
    ransac = ransac or RansacConfig()
    homographies = []
    for src, dst in zip(inputs, outputs):
        if src.size != dst.size:
            raise DimensionMismatch(f"frame {src.index}: {src.size} vs {dst.size}")
        homographies.append(estimate_pair_transform(src, dst, observer, ransac, max_keypoints))
    series = FrameTransformSeries(homographies)
    invalid = int((~series.valid).sum())
    if invalid:
        logger.warning(f"{invalid}/{len(series)} frames have no valid transform")
    _require_valid(series)
    return series


def frame_crop_ratio(h: Homography, dims) -> float:
    """min(width ratio, height ratio) of the axis-aligned box inside the projected frame"""
    width, height = dims
    corners = np.array([[0.0, 0.0], [width, 0.0], [width, height], [0.0, height]])
    tl, tr, br, bl = project_points(h, corners)
    left = max(tl[0], bl[0], 0.0)
    right = min(tr[0], br[0], float(width))
    top = max(tl[1], tr[1], 0.0)
    bottom = min(bl[1], br[1], float(height))
    ratio = min((right - left) / width, (bottom - top) / height)
    return float(np.clip(ratio, 0.0, 1.0))


def cropping_ratio(series: FrameTransformSeries, dims) -> float:
    return float(np.mean([frame_crop_ratio(h, dims) for h in _require_valid(series)]))


def frame_distortion(h: Homography) -> float:
    m = h.m / h.m[2, 2]
    sv = np.linalg.svd(m[:2, :2], compute_uv=False)
    return float(sv[-1] / sv[0])


def distortion_value(series: FrameTransformSeries) -> float:
    return min(frame_distortion(h) for h in _require_valid(series))


def trajectory_channels(series: FrameTransformSeries) -> Dict[str, np.ndarray]:
    """Accumulated path of the relative transforms; invalid frames hold the last pose.
    The rotation channel is the arctan of the affine column-scale ratio sx / sy."""
    path = np.eye(3)
    tx, ty, rot = [], [], []
    for h in series.homographies:
        if h is not None:
            path = h.m @ path
            path = path / path[2, 2]
        tx.append(path[0, 2])
        ty.append(path[1, 2])
        sx = math.hypot(path[0, 0], path[1, 0])
        sy = math.hypot(path[0, 1], path[1, 1])
        rot.append(math.atan(sx / sy))
    return {"tx": np.array(tx), "ty": np.array(ty), "rotation": np.array(rot)}


def channel_spectrum(signal: np.ndarray) -> np.ndarray:
    return np.abs(np.fft.rfft(np.asarray(signal, dtype=np.float64))) ** 2


def channel_stability(signal: np.ndarray, band_offset: int = 0,
                      energy_floor: float = 1e-12) -> float:
    """Share of non-DC energy in the lowest five bins after DC"""
    energy = channel_spectrum(signal)
    total = float(energy[1:].sum())
    if total <= energy_floor:
        return 1.0
    low = float(energy[1 + band_offset:1 + band_offset + LOW_BAND_BINS].sum())
    return float(np.clip(low / total, 0.0, 1.0))


def stability_of_channels(channels: Dict[str, np.ndarray], band_offset: int = 0,
                          energy_floor: float = 1e-12) -> float:
    return min(channel_stability(v, band_offset, energy_floor) for v in channels.values())


def stability_score(series: FrameTransformSeries, band_offset: int = 0,
                    energy_floor: float = 1e-12, min_frames: int = 12) -> float:
    n_valid = int(series.valid.sum())
    if n_valid < min_frames:
        raise TooShort(f"stability needs {min_frames} valid frames, got {n_valid}")
    return stability_of_channels(trajectory_channels(series), band_offset, energy_floor)


def _pixels(frame: Union[Frame, np.ndarray]) -> np.ndarray:
    data = frame.data if isinstance(frame, Frame) else np.asarray(frame)
    return data.astype(np.float64)


def psnr(reference: Union[Frame, np.ndarray], test: Union[Frame, np.ndarray]) -> float:
    a, b = _pixels(reference), _pixels(test)
    if a.shape != b.shape:
        raise DimensionMismatch(f"psnr of {a.shape} against {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(MAX_INTENSITY ** 2 / mse)


def _json_number(x: float):
    return "inf" if math.isinf(x) else x


@dataclass
class MetricsReport:
    cropping: float
    distortion: float
    stability: float
    psnr_mean: float
    frame_crop: List[Optional[float]] = field(default_factory=list)
    frame_distortion: List[Optional[float]] = field(default_factory=list)
    frame_psnr: List[float] = field(default_factory=list)
    spectra: Dict[str, List[float]] = field(default_factory=dict)
    valid_frames: int = 0

    def to_dict(self) -> dict:
        return {
            "cropping": self.cropping,
            "distortion": self.distortion,
            "stability": self.stability,
            "psnr_mean": _json_number(self.psnr_mean),
            "valid_frames": self.valid_frames,
            "frames": len(self.frame_psnr),
        }

    def frame_rows(self) -> List[dict]:
        return [{"frame": i, "Ct": c, "Dt": d, "psnr": _json_number(p)}
                for i, (c, d, p) in enumerate(zip(self.frame_crop, self.frame_distortion,
                                                   self.frame_psnr))]

    def spectrum_rows(self) -> List[dict]:
        return [{"channel": name, "bin": k, "energy": e}
                for name, values in self.spectra.items() for k, e in enumerate(values)]


def mean_psnr(values: Sequence[float]) -> float:
    """Mean over unsaturated frames; infinite only when every frame is identical"""
    finite = [v for v in values if not math.isinf(v)]
    return float(np.mean(finite)) if finite else math.inf


def evaluate_sequences(inputs: Sequence[Frame], outputs: Sequence[Frame],
                       cfg: Optional[MetricsConfig] = None,
                       observer: Optional[ObserverConfig] = None,
                       ransac: Optional[RansacConfig] = None) -> MetricsReport:
    cfg = cfg or MetricsConfig()
    observer = observer or ObserverConfig()
    ransac = ransac or RansacConfig()
    series = estimate_frame_transforms(inputs, outputs, observer, ransac, cfg.max_keypoints)
    dims = inputs[0].size

    motion = FrameTransformSeries([Homography.identity()] + [
        estimate_pair_transform(prev, cur, observer, ransac, cfg.max_keypoints)
        for prev, cur in zip(outputs[:-1], outputs[1:])
    ])
    stability = stability_score(motion, cfg.stability_band_offset, cfg.energy_floor,
                                cfg.min_stability_frames)
    frame_psnr = [psnr(a, b) for a, b in zip(inputs, outputs)]
    report = MetricsReport(
        cropping=cropping_ratio(series, dims),
        distortion=distortion_value(series),
        stability=stability,
        psnr_mean=mean_psnr(frame_psnr),
        frame_crop=[frame_crop_ratio(h, dims) if h is not None else None
                    for h in series.homographies],
        frame_distortion=[frame_distortion(h) if h is not None else None
                          for h in series.homographies],
        frame_psnr=frame_psnr,
        spectra={name: channel_spectrum(v).tolist()
                 for name, v in trajectory_channels(motion).items()},
        valid_frames=int(series.valid.sum()),
    )
    logger.info(f"C={report.cropping:.3f} D={report.distortion:.3f} S={report.stability:.3f} "
                f"over {len(inputs)} frames")
    return report
