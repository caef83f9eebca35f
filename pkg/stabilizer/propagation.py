"""
Stage 2: turn the sparse motion sample into a per-vertex grid motion field.

The base field blends per-cluster homographies at the grid vertices; a residual
field is then found by descending the keypoint, projection and structure losses.
"""

import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from scipy.cluster.vq import kmeans2
from scipy.spatial import cKDTree

from config.settings import PropagationConfig, RansacConfig
from stabilizer.errors import (
    DegenerateConfiguration, EmptySample, NoConsensus, SpecMismatch, TooFewPoints,
)
from stabilizer.geometry import (
    Homography, Point2, QuadWarp, bilinear_sample_many, bilinear_scatter,
    project_points, ransac_homography,
)
from stabilizer.observer import MotionSample


logger = logging.getLogger(__name__)

GRAD_TOL = 1e-10
DEGENERATE_EDGE = 1e-12


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    frame_width: int
    frame_height: int

    def __post_init__(self):
        if self.rows < 2 or self.cols < 2:
            raise ValueError(f"grid needs at least 2x2 vertices, got {self.rows}x{self.cols}")

    @property
    def spacing(self) -> Tuple[float, float]:
        return ((self.frame_width - 1) / (self.cols - 1),
                (self.frame_height - 1) / (self.rows - 1))

    @property
    def cell_diagonal(self) -> float:
        sx, sy = self.spacing
        return float(np.hypot(sx, sy))

    @property
    def n_cells(self) -> int:
        return (self.rows - 1) * (self.cols - 1)

    def rest(self) -> np.ndarray:
        sx, sy = self.spacing
        gy, gx = np.mgrid[0:self.rows, 0:self.cols].astype(np.float64)
        return np.stack([gx * sx, gy * sy], axis=-1)

    def to_lattice(self, xy: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
        sx, sy = self.spacing
        return xy[:, 0] / sx, xy[:, 1] / sy

    def locate(self, xy: np.ndarray):
        """Enclosing cell (row, col) and unit-square coordinates of each point"""
        lx, ly = self.to_lattice(xy)
        lx = np.clip(lx, 0.0, self.cols - 1)
        ly = np.clip(ly, 0.0, self.rows - 1)
        c = np.minimum(np.floor(lx).astype(np.intp), self.cols - 2)
        r = np.minimum(np.floor(ly).astype(np.intp), self.rows - 2)
        return r, c, np.stack([lx - c, ly - r], axis=1)

    def quads(self, positions: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
        """Cell corners in unit-square order (0,0), (1,0), (1,1), (0,1)"""
        return np.stack([positions[r, c], positions[r, c + 1],
                         positions[r + 1, c + 1], positions[r + 1, c]], axis=1)

    def scatter_quads(self, grad_quads: np.ndarray, r: np.ndarray, c: np.ndarray) -> np.ndarray:
        grad = np.zeros((self.rows, self.cols, 2))
        for k, (dr, dc) in enumerate(((0, 0), (0, 1), (1, 1), (1, 0))):
            np.add.at(grad, (r + dr, c + dc), grad_quads[:, k])
        return grad


@dataclass(eq=False)
class GridMotionField:
    spec: GridSpec
    vectors: np.ndarray
    frame_index: int = 0

    def __post_init__(self):
        if self.vectors.shape != (self.spec.rows, self.spec.cols, 2):
            raise SpecMismatch(f"field shape {self.vectors.shape} does not match "
                               f"{self.spec.rows}x{self.spec.cols} grid")

    @classmethod
    def zeros(cls, spec: GridSpec, frame_index: int = 0) -> "GridMotionField":
        return cls(spec, np.zeros((spec.rows, spec.cols, 2)), frame_index)

    @property
    def nbytes(self) -> int:
        return 8 * self.spec.rows * self.spec.cols

    def at(self, xy: np.ndarray) -> np.ndarray:
        lx, ly = self.spec.to_lattice(xy)
        return bilinear_sample_many(self.vectors, lx, ly)


@dataclass(eq=False)
class HomographyCluster:
    member_indices: np.ndarray
    centroid: Point2
    member_positions: np.ndarray
    homography: Optional[Homography] = None
    inlier_fraction: float = 0.0


def cluster_displacements(m: MotionSample, cfg: PropagationConfig) -> List[HomographyCluster]:
    """K-means over (x, y, u, v): positions scaled to the unit frame, displacements so that
    motion_feature_scale pixels of motion weigh as much as the whole frame extent"""
    n = len(m)
    if n == 0:
        raise EmptySample("no keypoints to cluster")
    width, height = m.frame_size
    width, height = max(width, 1), max(height, 1)
    features = np.column_stack([m.positions[:, 0] / width, m.positions[:, 1] / height,
                                m.displacements / cfg.motion_feature_scale])

    k = min(cfg.k_homo, len(np.unique(m.displacements, axis=0)))
    if k <= 1:
        labels = np.zeros(n, dtype=int)
    else:
        labels = _best_kmeans(features, k, cfg)

    clusters = []
    for label in np.unique(labels):
        idx = np.flatnonzero(labels == label)
        pos = m.positions[idx]
        centroid = pos.mean(axis=0)
        clusters.append(HomographyCluster(idx, Point2(float(centroid[0]), float(centroid[1])), pos))
    return clusters


def _best_kmeans(features: np.ndarray, k: int, cfg: PropagationConfig) -> np.ndarray:
    """Seeded k-means++ restarts, keeping the lowest within-cluster energy"""
    rng = np.random.default_rng(cfg.seed)
    best_labels, best_energy = None, np.inf
    for _ in range(cfg.kmeans_restarts):
        centers, labels = kmeans2(features, k, iter=cfg.kmeans_iters, minit="++",
                                  missing="warn", seed=int(rng.integers(2 ** 32)))
        energy = float(((features - centers[labels]) ** 2).sum())
        if energy < best_energy:
            best_labels, best_energy = labels, energy
    return best_labels


def _translation_fallback(u: np.ndarray, threshold: float) -> Tuple[Homography, float]:
    median = np.median(u, axis=0)
    fraction = float(np.mean(np.linalg.norm(u - median, axis=1) <= threshold))
    return Homography.translation(-median[0], -median[1]), fraction


def fit_cluster_homographies(m: MotionSample, clusters: List[HomographyCluster],
                             ransac: RansacConfig) -> List[HomographyCluster]:
    """Per cluster, the homography taking frame-t positions to their frame t-1 positions"""
    fitted = []
    for cluster in clusters:
        idx = cluster.member_indices
        src = m.positions[idx]
        u = m.displacements[idx]
        try:
            h, mask = ransac_homography(src, src - u, ransac)
            fraction = float(mask.mean())
        except (TooFewPoints, NoConsensus, DegenerateConfiguration) as e:
            logger.debug(f"cluster of {len(idx)} points falls back to translation: {e}")
            h, fraction = _translation_fallback(u, ransac.inlier_threshold)
        fitted.append(HomographyCluster(idx, cluster.centroid, cluster.member_positions,
                                        h, fraction))
    return fitted


def fusion_weights(clusters: List[HomographyCluster], points: np.ndarray,
                   sigma: float) -> np.ndarray:
    """Softmax over clusters of -d^2 / (2 sigma^2), d = distance to the nearest member"""
    logits = np.empty((len(points), len(clusters)))
    for k, cluster in enumerate(clusters):
        members = cluster.member_positions
        if len(members) == 0:
            members = np.array([[cluster.centroid.x, cluster.centroid.y]])
        dist, _ = cKDTree(members).query(points, k=1)
        logits[:, k] = -dist ** 2 / (2.0 * sigma ** 2)
    logits -= logits.max(axis=1, keepdims=True)
    weights = np.exp(logits)
    return weights / weights.sum(axis=1, keepdims=True)


def fuse_grid_prior(clusters: List[HomographyCluster], spec: GridSpec,
                    cfg: PropagationConfig, frame_index: int = 0) -> GridMotionField:
    rest = spec.rest().reshape(-1, 2)
    sigma = cfg.fusion_temperature or 2.0 * spec.cell_diagonal
    alpha = fusion_weights(clusters, rest, sigma)
    projected = np.zeros_like(rest)
    for k, cluster in enumerate(clusters):
        projected += alpha[:, k:k + 1] * project_points(cluster.homography, rest)
    base = (rest - projected).reshape(spec.rows, spec.cols, 2)
    return GridMotionField(spec, base, frame_index)


# Losses over the grid motion field. Each *_and_grad returns (value, d value / d field).

def _charbonnier(res: np.ndarray, eps: float) -> np.ndarray:
    return np.sqrt((res ** 2).sum(axis=1) + eps ** 2)


def loss_kp_and_grad(dg: GridMotionField, m: MotionSample, eps: float) -> Tuple[float, np.ndarray]:
    spec = dg.spec
    if len(m) == 0:
        return 0.0, np.zeros_like(dg.vectors)
    lx, ly = spec.to_lattice(m.positions)
    res = m.displacements - bilinear_sample_many(dg.vectors, lx, ly)
    rho = _charbonnier(res, eps)
    n = len(m)
    value = float(np.sum(m.confidences * rho) / n)
    grad_at = -(m.confidences / rho)[:, None] * res / n
    return value, bilinear_scatter(grad_at, lx, ly, spec.rows, spec.cols)


def loss_kp(dg: GridMotionField, m: MotionSample, eps: float = 1e-3) -> float:
    return loss_kp_and_grad(dg, m, eps)[0]


def loss_proj_and_grad(dg: GridMotionField, m: MotionSample, eps: float) -> Tuple[float, np.ndarray]:
    spec = dg.spec
    if len(m) == 0:
        return 0.0, np.zeros_like(dg.vectors)
    r, c, local = spec.locate(m.positions)
    warp = QuadWarp(spec.quads(spec.rest() + dg.vectors, r, c), local)
    res = m.displacements - (warp.points - m.positions)
    rho = _charbonnier(res, eps)
    n = len(m)
    value = float(np.sum(m.confidences * rho) / n)
    grad_points = -(m.confidences / rho)[:, None] * res / n
    return value, spec.scatter_quads(warp.backprop(grad_points), r, c)


def loss_proj(dg: GridMotionField, m: MotionSample, eps: float = 1e-3) -> float:
    return loss_proj_and_grad(dg, m, eps)[0]


def loss_struct_and_grad(spec: GridSpec, dg: GridMotionField,
                         literal: bool = False) -> Tuple[float, np.ndarray]:
    """Mean over cells of (e1.e2)^2 / (|e1|^2 |e2|^2) at each cell's anchor vertex.

    literal=True evaluates the rotated-edge form, i.e. the squared sine, which is 1
    on an undeformed grid.
    """
    if dg.spec != spec:
        raise SpecMismatch("field grid differs from the requested grid")
    v = spec.rest() + dg.vectors
    anchor = v[:-1, :-1]
    e1 = v[:-1, 1:] - anchor
    e2 = v[1:, :-1] - anchor
    dot = (e1 * e2).sum(axis=-1)
    a = (e1 ** 2).sum(axis=-1)
    b = (e2 ** 2).sum(axis=-1)
    degenerate = (a < DEGENERATE_EDGE) | (b < DEGENERATE_EDGE)
    a_safe = np.where(degenerate, 1.0, a)
    b_safe = np.where(degenerate, 1.0, b)
    cos2 = np.where(degenerate, 1.0, dot ** 2 / (a_safe * b_safe))

    d_e1 = 2 * dot[..., None] * e2 / (a_safe * b_safe)[..., None] \
        - 2 * (dot ** 2)[..., None] * e1 / (a_safe ** 2 * b_safe)[..., None]
    d_e2 = 2 * dot[..., None] * e1 / (a_safe * b_safe)[..., None] \
        - 2 * (dot ** 2)[..., None] * e2 / (a_safe * b_safe ** 2)[..., None]
    d_e1[degenerate] = 0.0
    d_e2[degenerate] = 0.0

    n = spec.n_cells
    if literal:
        values = np.where(degenerate, 1.0, 1.0 - cos2)
        d_e1, d_e2 = -d_e1, -d_e2
    else:
        values = cos2
    grad = np.zeros((spec.rows, spec.cols, 2))
    grad[:-1, 1:] += d_e1 / n
    grad[1:, :-1] += d_e2 / n
    grad[:-1, :-1] -= (d_e1 + d_e2) / n
    return float(values.sum() / n), grad


def loss_struct(spec: GridSpec, dg: GridMotionField, literal: bool = False) -> float:
    return loss_struct_and_grad(spec, dg, literal)[0]


def propagation_loss_and_grad(dg: GridMotionField, m: MotionSample,
                              cfg: PropagationConfig) -> Tuple[float, np.ndarray]:
    w_kp, w_proj, w_struct = cfg.loss_weights
    eps = cfg.charbonnier_eps
    value, grad = 0.0, np.zeros_like(dg.vectors)
    if w_kp:
        v, g = loss_kp_and_grad(dg, m, eps)
        value, grad = value + w_kp * v, grad + w_kp * g
    if w_proj:
        v, g = loss_proj_and_grad(dg, m, eps)
        value, grad = value + w_proj * v, grad + w_proj * g
    if w_struct:
        v, g = loss_struct_and_grad(dg.spec, dg, cfg.literal_struct)
        value, grad = value + w_struct * v, grad + w_struct * g
    return value, grad


def solve_residual(m: MotionSample, base: GridMotionField,
                   cfg: PropagationConfig) -> GridMotionField:
    """Descend the weighted loss from a zero residual; the objective never increases"""
    spec = base.spec
    residual = np.zeros_like(base.vectors)
    if cfg.residual_iters == 0 or len(m) == 0:
        return GridMotionField(spec, residual, base.frame_index)

    current, grad = propagation_loss_and_grad(
        GridMotionField(spec, base.vectors + residual), m, cfg)
    step = cfg.residual_step
    for _ in range(cfg.residual_iters):
        largest = float(np.linalg.norm(grad, axis=-1).max())
        if largest < GRAD_TOL:
            break
        candidate = residual - step * grad / largest
        value, cand_grad = propagation_loss_and_grad(
            GridMotionField(spec, base.vectors + candidate), m, cfg)
        if value < current:
            residual, current, grad = candidate, value, cand_grad
        else:
            step *= 0.5
    return GridMotionField(spec, residual, base.frame_index)


@dataclass(eq=False)
class PropagationResult:
    field: GridMotionField
    base: GridMotionField
    residual: GridMotionField
    clusters: List[HomographyCluster] = field(default_factory=list)


def propagate_full(m: MotionSample, spec: GridSpec, cfg: PropagationConfig,
                   ransac: RansacConfig) -> PropagationResult:
    if len(m) == 0:
        zero = GridMotionField.zeros(spec, m.frame_index)
        return PropagationResult(zero, zero, zero)
    clusters = fit_cluster_homographies(m, cluster_displacements(m, cfg), ransac)
    base = fuse_grid_prior(clusters, spec, cfg, m.frame_index)
    residual = solve_residual(m, base, cfg)
    total = GridMotionField(spec, base.vectors + residual.vectors, m.frame_index)
    return PropagationResult(total, base, residual, clusters)


def propagate(m: MotionSample, spec: GridSpec, cfg: PropagationConfig,
              ransac: RansacConfig) -> GridMotionField:
    return propagate_full(m, spec, cfg, ransac).field


class MotionPropagator:
    """Stage 2 worker state; the grid is fixed by the first frame size seen"""

    def __init__(self, rows: int, cols: int, cfg: PropagationConfig, ransac: RansacConfig):
        self.rows = rows
        self.cols = cols
        self.cfg = cfg
        self.ransac = ransac
        self.spec: Optional[GridSpec] = None

    def grid_for(self, frame_size: Tuple[int, int]) -> GridSpec:
        if self.spec is None:
            self.spec = GridSpec(self.rows, self.cols, frame_size[0], frame_size[1])
        elif (self.spec.frame_width, self.spec.frame_height) != tuple(frame_size):
            raise SpecMismatch(f"frame size changed from {self.spec.frame_width}x"
                               f"{self.spec.frame_height} to {frame_size[0]}x{frame_size[1]}")
        return self.spec

    def step(self, m: MotionSample) -> PropagationResult:
        result = propagate_full(m, self.grid_for(m.frame_size), self.cfg, self.ransac)
        logger.debug(f"frame {m.frame_index}: {len(result.clusters)} clusters, "
                     f"max residual {np.abs(result.residual.vectors).max():.3f} px")
        return result
