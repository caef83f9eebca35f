"""
Run configuration: every stage config plus run mode, seed and I/O paths.

Values are resolved from built-in defaults, then an optional JSON file, then
`section.key=value` overrides. Unknown keys and broken invariants raise
ConfigError naming the dotted key.
"""

import json
import logging
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence

from stabilizer.errors import ConfigError


logger = logging.getLogger(__name__)

DETECTORS = ("shi_tomasi", "fast", "import")
FLOW_SOURCES = ("dense", "sparse", "import")
MODES = ("pipeline", "sequential")
BORDER_POLICIES = ("crop-zoom", "no-crop")
SMOOTHER_PROFILES = {
    "appendix": {"gamma0": 1.0, "lambda_time": 20.0, "lambda_freq": 1.0,
                 "lambda_spatial": 10.0, "lambda_proj": 5.0},
    "core": {"gamma0": 0.1, "lambda_time": 1.0, "lambda_freq": 0.1,
             "lambda_spatial": 0.0, "lambda_proj": 0.0},
}


def _require(ok: bool, key: str, message: str) -> None:
    if not ok:
        raise ConfigError(key, message)


@dataclass
class ObserverConfig:
    detectors: List[str] = field(default_factory=lambda: ["shi_tomasi", "fast"])
    detector_weights: Dict[str, float] = field(
        default_factory=lambda: {"shi_tomasi": 1.0, "fast": 0.5, "import": 1.0})
    max_candidates: int = 2000
    quality_level: float = 0.01
    fast_threshold: int = 20
    nms_radius: float = 4.0
    grid_gx: int = 16
    grid_gy: int = 16
    per_cell_k: int = 2
    min_separation: float = 8.0
    mask_radius: float = 16.0
    pyramid_levels: int = 3
    lk_window: int = 21
    dense_stride: int = 8
    idw_neighbors: int = 16
    idw_power: float = 2.0
    flow_source: str = "dense"
    keypoint_collaboration: bool = True

    def validate(self, prefix: str = "observer") -> None:
        _require(len(self.detectors) >= 1, f"{prefix}.detectors", "at least one detector required")
        for det in self.detectors:
            _require(det in DETECTORS, f"{prefix}.detectors", f"unknown detector '{det}'")
        for det, weight in self.detector_weights.items():
            _require(det in DETECTORS, f"{prefix}.detector_weights.{det}", "unknown detector")
            _require(weight >= 0, f"{prefix}.detector_weights.{det}", "weight must be >= 0")
        for name in ("max_candidates", "fast_threshold", "grid_gx", "grid_gy", "per_cell_k",
                     "pyramid_levels", "lk_window", "dense_stride", "idw_neighbors"):
            _require(int(getattr(self, name)) >= 1, f"{prefix}.{name}", "must be >= 1")
        for name in ("quality_level", "nms_radius", "min_separation", "mask_radius", "idw_power"):
            _require(getattr(self, name) > 0, f"{prefix}.{name}", "must be > 0")
        _require(self.flow_source in FLOW_SOURCES, f"{prefix}.flow_source",
                 f"expected one of {', '.join(FLOW_SOURCES)}")

    def weight(self, detector: str) -> float:
        return float(self.detector_weights.get(detector, self.detector_weights.get("import", 1.0)))


@dataclass
class RansacConfig:
    max_iters: int = 1000
    inlier_threshold: float = 1.5
    min_inlier_fraction: float = 0.3
    seed: int = 0

    def validate(self, prefix: str = "ransac") -> None:
        _require(self.max_iters >= 1, f"{prefix}.max_iters", "must be >= 1")
        _require(self.inlier_threshold > 0, f"{prefix}.inlier_threshold", "must be > 0")
        _require(0 <= self.min_inlier_fraction <= 1, f"{prefix}.min_inlier_fraction",
                 "must be in [0, 1]")


@dataclass
class GridConfig:
    rows: int = 16
    cols: int = 16

    def validate(self, prefix: str = "grid") -> None:
        _require(self.rows >= 2, f"{prefix}.rows", "must be >= 2")
        _require(self.cols >= 2, f"{prefix}.cols", "must be >= 2")


@dataclass
class PropagationConfig:
    k_homo: int = 2
    kmeans_iters: int = 20
    kmeans_restarts: int = 10
    motion_feature_scale: float = 1.0
    fusion_temperature: Optional[float] = None
    residual_iters: int = 30
    residual_step: float = 0.5
    loss_weights: List[float] = field(default_factory=lambda: [10.0, 40.0, 40.0])
    charbonnier_eps: float = 1e-3
    literal_struct: bool = False
    seed: int = 0

    def validate(self, prefix: str = "propagation") -> None:
        _require(self.k_homo >= 1, f"{prefix}.k_homo", "must be >= 1")
        _require(self.kmeans_iters >= 1, f"{prefix}.kmeans_iters", "must be >= 1")
        _require(self.kmeans_restarts >= 1, f"{prefix}.kmeans_restarts", "must be >= 1")
        _require(self.motion_feature_scale > 0, f"{prefix}.motion_feature_scale", "must be > 0")
        _require(self.fusion_temperature is None or self.fusion_temperature > 0,
                 f"{prefix}.fusion_temperature", "must be > 0")
        _require(self.residual_iters >= 0, f"{prefix}.residual_iters", "must be >= 0")
        _require(self.residual_step > 0, f"{prefix}.residual_step", "must be > 0")
        _require(len(self.loss_weights) == 3, f"{prefix}.loss_weights", "expected three weights")
        _require(all(w >= 0 for w in self.loss_weights), f"{prefix}.loss_weights",
                 "weights must be >= 0")
        _require(self.charbonnier_eps > 0, f"{prefix}.charbonnier_eps", "must be > 0")


@dataclass
class SmootherConfig:
    profile: str = "appendix"
    lambda_blend: float = 100.0
    window: int = 7
    tau_time: float = 2.0
    beta: float = 0.02
    learn_beta: bool = False
    beta_max: float = 0.2
    gamma0: Optional[float] = None
    lambda_time: Optional[float] = None
    lambda_freq: Optional[float] = None
    lambda_spatial: Optional[float] = None
    lambda_proj: Optional[float] = None
    charbonnier_eps: float = 1e-3
    kernel_iters: int = 20
    lambda_edge: float = 1.0
    lambda_angle: float = 1.0
    tap_bound: float = 2.0
    tap_floor: float = 0.0
    kernel_scope: str = "global"
    detrend: bool = False
    max_compensation: Optional[float] = None

    def __post_init__(self):
        defaults = SMOOTHER_PROFILES.get(self.profile)
        if defaults is None:
            raise ConfigError("smoother.profile",
                              f"expected one of {', '.join(SMOOTHER_PROFILES)}")
        for name, value in defaults.items():
            if getattr(self, name) is None:
                setattr(self, name, value)

    @property
    def delta_max(self) -> int:
        return (self.window - 1) // 2

    def validate(self, prefix: str = "smoother") -> None:
        _require(self.lambda_blend > 0, f"{prefix}.lambda_blend", "must be > 0")
        _require(self.window >= 3, f"{prefix}.window", "must be >= 3")
        _require(self.tau_time > 0, f"{prefix}.tau_time", "must be > 0")
        _require(self.beta >= 0, f"{prefix}.beta", "must be >= 0")
        _require(self.beta_max >= self.beta, f"{prefix}.beta_max", "must be >= beta")
        for name in ("gamma0", "lambda_time", "lambda_freq", "lambda_spatial", "lambda_proj",
                     "lambda_edge", "lambda_angle"):
            _require(getattr(self, name) >= 0, f"{prefix}.{name}", "must be >= 0")
        _require(self.charbonnier_eps > 0, f"{prefix}.charbonnier_eps", "must be > 0")
        _require(self.kernel_iters >= 0, f"{prefix}.kernel_iters", "must be >= 0")
        _require(self.tap_bound > 0, f"{prefix}.tap_bound", "must be > 0")
        _require(-self.tap_bound <= self.tap_floor <= 0, f"{prefix}.tap_floor",
                 "must be in [-tap_bound, 0]")
        _require(self.max_compensation is None or self.max_compensation > 0,
                 f"{prefix}.max_compensation", "must be > 0")
        _require(self.kernel_scope in ("global", "per_vertex"), f"{prefix}.kernel_scope",
                 "expected global or per_vertex")


@dataclass
class RendererConfig:
    border_policy: str = "crop-zoom"
    border_window: int = 30

    def validate(self, prefix: str = "renderer") -> None:
        _require(self.border_policy in BORDER_POLICIES, f"{prefix}.border_policy",
                 f"expected one of {', '.join(BORDER_POLICIES)}")
        _require(self.border_window >= 1, f"{prefix}.border_window", "must be >= 1")


@dataclass
class QueueConfig:
    capacity_me_mp: int = 8
    capacity_mp_mc: int = 8

    def validate(self, prefix: str = "queues") -> None:
        _require(self.capacity_me_mp >= 1, f"{prefix}.capacity_me_mp", "must be >= 1")
        _require(self.capacity_mp_mc >= 1, f"{prefix}.capacity_mp_mc", "must be >= 1")


@dataclass
class IOConfig:
    input: Optional[str] = None
    output: Optional[str] = None
    raw_width: Optional[int] = None
    raw_height: Optional[int] = None
    frame_format: str = "png"
    report: Optional[str] = None
    dump_trajectories: Optional[str] = None
    dump_motion: Optional[str] = None
    dump_flow: Optional[str] = None
    flow_dir: Optional[str] = None
    keypoints: Optional[str] = None

    def validate(self, prefix: str = "io") -> None:
        _require(self.frame_format in ("png", "pgm"), f"{prefix}.frame_format",
                 "expected png or pgm")
        if self.raw_width is not None or self.raw_height is not None:
            _require(bool(self.raw_width) and bool(self.raw_height), f"{prefix}.raw_width",
                     "raw streams need both raw_width and raw_height")


@dataclass
class MetricsConfig:
    stability_band_offset: int = 0
    energy_floor: float = 1e-12
    min_stability_frames: int = 12
    max_keypoints: int = 500

    def validate(self, prefix: str = "metrics") -> None:
        _require(self.stability_band_offset in (0, 1), f"{prefix}.stability_band_offset",
                 "expected 0 (bins 1..5) or 1 (bins 2..6)")
        _require(self.energy_floor >= 0, f"{prefix}.energy_floor", "must be >= 0")
        _require(self.min_stability_frames >= 2, f"{prefix}.min_stability_frames", "must be >= 2")
        _require(self.max_keypoints >= 4, f"{prefix}.max_keypoints", "must be >= 4")


SECTIONS = {
    "observer": ObserverConfig,
    "ransac": RansacConfig,
    "grid": GridConfig,
    "propagation": PropagationConfig,
    "smoother": SmootherConfig,
    "renderer": RendererConfig,
    "queues": QueueConfig,
    "io": IOConfig,
    "metrics": MetricsConfig,
}


@dataclass
class Settings:
    mode: str = "pipeline"
    seed: int = 0
    observer: ObserverConfig = field(default_factory=ObserverConfig)
    ransac: RansacConfig = field(default_factory=RansacConfig)
    grid: GridConfig = field(default_factory=GridConfig)
    propagation: PropagationConfig = field(default_factory=PropagationConfig)
    smoother: SmootherConfig = field(default_factory=SmootherConfig)
    renderer: RendererConfig = field(default_factory=RendererConfig)
    queues: QueueConfig = field(default_factory=QueueConfig)
    io: IOConfig = field(default_factory=IOConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def validate(self) -> "Settings":
        _require(self.mode in MODES, "mode", f"expected one of {', '.join(MODES)}")
        for name in SECTIONS:
            getattr(self, name).validate(name)
        if self.observer.flow_source == "import":
            _require(bool(self.io.flow_dir), "io.flow_dir",
                     "flow_source 'import' needs a flow directory")
        if "import" in self.observer.detectors:
            _require(bool(self.io.keypoints), "io.keypoints",
                     "detector 'import' needs a keypoint file")
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Settings":
        known = {f.name for f in fields(cls)}
        for key in data:
            if key not in known:
                raise ConfigError(key, "unknown configuration key")
        kwargs: Dict[str, Any] = {}
        for key, value in data.items():
            section = SECTIONS.get(key)
            if section is None:
                kwargs[key] = value
                continue
            if not isinstance(value, dict):
                raise ConfigError(key, "expected an object")
            section_keys = {f.name for f in fields(section)}
            for sub in value:
                if sub not in section_keys:
                    raise ConfigError(f"{key}.{sub}", "unknown configuration key")
            try:
                kwargs[key] = section(**value)
            except TypeError as e:
                raise ConfigError(key, str(e)) from e
        settings = cls(**kwargs)
        return settings.validate()


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], assignment: str) -> None:
    """Apply one `section.key=value` assignment to a raw config dict"""
    if "=" not in assignment:
        raise ConfigError(assignment, "override must look like key=value")
    key, raw = assignment.split("=", 1)
    path = key.strip().split(".")
    if not all(path):
        raise ConfigError(key, "empty key segment")
    node = data
    for part in path[:-1]:
        child = node.setdefault(part, {})
        if not isinstance(child, dict):
            raise ConfigError(key, f"'{part}' is not a section")
        node = child
    node[path[-1]] = _parse_value(raw)


def load_settings(path: Optional[str] = None, overrides: Sequence[str] = (),
                  seed: Optional[int] = None, mode: Optional[str] = None) -> Settings:
    """Resolve defaults, then the JSON file, then overrides and flags"""
    data: Dict[str, Any] = {}
    if path:
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except OSError as e:
            raise ConfigError("config", f"cannot read {path}: {e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError("config", f"{path} is not valid JSON: {e}") from e
        if not isinstance(data, dict):
            raise ConfigError("config", "top level must be an object")
        logger.info(f"Loaded config from {path}")

    for assignment in overrides:
        apply_override(data, assignment)

    if mode is not None:
        data["mode"] = mode
    if seed is not None:
        data["seed"] = seed
        for section in ("ransac", "propagation"):
            data.setdefault(section, {})["seed"] = seed
    elif "seed" in data:
        for section in ("ransac", "propagation"):
            data.setdefault(section, {}).setdefault("seed", data["seed"])

    return Settings.from_dict(data)
