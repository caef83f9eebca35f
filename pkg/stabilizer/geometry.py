"""
Projective geometry shared by every stage: homography estimation (normalized
DLT and seeded RANSAC), point projection, bilinear lattice sampling and batched
four-point cell homographies with their Jacobians.
"""

import logging
from dataclasses import dataclass
from itertools import combinations
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import RansacConfig
from stabilizer.errors import DegenerateConfiguration, NoConsensus, PointAtInfinity, TooFewPoints


logger = logging.getLogger(__name__)

INFINITY_EPS = 1e-12
COLLINEAR_TOL = 1e-6
RANK_TOL = 1e-10


@dataclass(frozen=True)
class Point2:
    x: float
    y: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y)):
            raise ValueError(f"non-finite point ({self.x}, {self.y})")


@dataclass(frozen=True)
class Correspondence:
    src: Point2
    dst: Point2
    weight: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"correspondence weight {self.weight} outside [0, 1]")


@dataclass(frozen=True, eq=False)
class Homography:
    m: np.ndarray
    normalized: bool = True

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "Homography":
        m = np.asarray(m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) > INFINITY_EPS:
            return cls(m / m[2, 2], True)
        return cls(m / np.linalg.norm(m), False)

    @classmethod
    def identity(cls) -> "Homography":
        return cls(np.eye(3), True)

    @classmethod
    def translation(cls, tx: float, ty: float) -> "Homography":
        m = np.eye(3)
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m, True)

    def __post_init__(self):
        if abs(np.linalg.det(self.m)) < INFINITY_EPS:
            raise DegenerateConfiguration("homography is not invertible")

    def inverse(self) -> "Homography":
        return Homography.from_matrix(np.linalg.inv(self.m))

    def compose(self, other: "Homography") -> "Homography":
        """self after other"""
        return Homography.from_matrix(self.m @ other.m)

    def apply(self, pts: np.ndarray) -> np.ndarray:
        return project_points(self, pts)


def project(h: Homography, p: Point2) -> Point2:
    v = h.m @ np.array([p.x, p.y, 1.0])
    if abs(v[2]) < INFINITY_EPS:
        raise PointAtInfinity(f"({p.x}, {p.y}) maps to infinity")
    return Point2(float(v[0] / v[2]), float(v[1] / v[2]))


def project_points(h: Homography, pts: np.ndarray) -> np.ndarray:
    """Vectorized project() over an (N, 2) array"""
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    v = pts @ h.m[:, :2].T + h.m[:, 2]
    w = v[:, 2]
    if np.any(np.abs(w) < INFINITY_EPS):
        raise PointAtInfinity("point set contains a point mapped to infinity")
    return v[:, :2] / w[:, None]


def _as_arrays(corrs: Sequence[Correspondence]) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    src = np.array([[c.src.x, c.src.y] for c in corrs], dtype=np.float64).reshape(-1, 2)
    dst = np.array([[c.dst.x, c.dst.y] for c in corrs], dtype=np.float64).reshape(-1, 2)
    weights = np.array([c.weight for c in corrs], dtype=np.float64)
    return src, dst, weights


def _normalizing_transform(pts: np.ndarray) -> np.ndarray:
    centroid = pts.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(pts - centroid, axis=1))
    if mean_dist < INFINITY_EPS:
        raise DegenerateConfiguration("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def _check_collinear(src: np.ndarray) -> None:
    span = src.max(axis=0) - src.min(axis=0)
    bbox = span[0] * span[1]
    if bbox <= 0.0:
        raise DegenerateConfiguration("source points are collinear")
    for i, j, k in combinations(range(len(src)), 3):
        a, b, c = src[i], src[j], src[k]
        area = 0.5 * abs((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0]))
        if area < COLLINEAR_TOL * bbox:
            raise DegenerateConfiguration(f"source points {i}, {j}, {k} are collinear")


def fit_homography(src: np.ndarray, dst: np.ndarray,
                   weights: Optional[np.ndarray] = None) -> Homography:
    """Hartley-normalized DLT on (N, 2) arrays mapping src onto dst"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")
    if n == 4:
        _check_collinear(src)

    t_src = _normalizing_transform(src)
    t_dst = _normalizing_transform(dst)
    a = src @ t_src[:2, :2].T + t_src[:2, 2]
    b = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    zeros = np.zeros(n)
    ones = np.ones(n)
    rows_u = np.stack([-a[:, 0], -a[:, 1], -ones, zeros, zeros, zeros,
                       b[:, 0] * a[:, 0], b[:, 0] * a[:, 1], b[:, 0]], axis=1)
    rows_v = np.stack([zeros, zeros, zeros, -a[:, 0], -a[:, 1], -ones,
                       b[:, 1] * a[:, 0], b[:, 1] * a[:, 1], b[:, 1]], axis=1)
    if weights is not None:
        w = np.asarray(weights, dtype=np.float64)[:, None]
        rows_u = rows_u * w
        rows_v = rows_v * w
    system = np.empty((2 * n, 9))
    system[0::2] = rows_u
    system[1::2] = rows_v

    _, sv, vt = np.linalg.svd(system)
    if n > 4 and sv[7] < RANK_TOL * sv[0]:
        raise DegenerateConfiguration("rank-deficient DLT system")
    hn = vt[-1].reshape(3, 3)
    m = np.linalg.inv(t_dst) @ hn @ t_src
    if abs(np.linalg.det(m / np.abs(m).max())) < RANK_TOL:
        raise DegenerateConfiguration("estimated homography is singular")
    return Homography.from_matrix(m)


def estimate_homography_dlt(corrs: Sequence[Correspondence]) -> Homography:
    if len(corrs) < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {len(corrs)}")
    src, dst, weights = _as_arrays(corrs)
    if np.all(weights == 1.0):
        weights = None
    return fit_homography(src, dst, weights)


def reprojection_errors(h: Homography, src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    v = src @ h.m[:, :2].T + h.m[:, 2]
    w = v[:, 2]
    safe = np.where(np.abs(w) < INFINITY_EPS, np.nan, w)
    err = np.linalg.norm(v[:, :2] / safe[:, None] - dst, axis=1)
    return np.where(np.isnan(err), np.inf, err)


def ransac_homography(src: np.ndarray, dst: np.ndarray,
                      cfg: RansacConfig) -> Tuple[Homography, np.ndarray]:
    """Seeded 4-point RANSAC with a final refit on the consensus set"""
    src = np.asarray(src, dtype=np.float64).reshape(-1, 2)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 2)
    n = len(src)
    if n < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {n}")

    rng = np.random.default_rng(cfg.seed)
    best_mask = None
    best_count = 0
    for _ in range(cfg.max_iters):
        sample = rng.choice(n, size=4, replace=False)
        try:
            h = fit_homography(src[sample], dst[sample])
        except DegenerateConfiguration:
            continue
        mask = reprojection_errors(h, src, dst) <= cfg.inlier_threshold
        count = int(mask.sum())
        if count > best_count:
            best_count, best_mask = count, mask
            if count == n:
                break

    if best_mask is None or best_count < 4 or best_count < cfg.min_inlier_fraction * n:
        raise NoConsensus(f"best consensus {best_count}/{n} below "
                          f"{cfg.min_inlier_fraction:.2f}")

    mask = best_mask
    h = fit_homography(src[mask], dst[mask])
    for _ in range(5):
        refined = reprojection_errors(h, src, dst) <= cfg.inlier_threshold
        if refined.sum() < 4 or np.array_equal(refined, mask):
            break
        mask = refined
        h = fit_homography(src[mask], dst[mask])
    mask = reprojection_errors(h, src, dst) <= cfg.inlier_threshold
    logger.debug(f"RANSAC consensus {int(mask.sum())}/{n}")
    return h, mask


def estimate_homography_ransac(corrs: Sequence[Correspondence],
                               cfg: RansacConfig) -> Tuple[Homography, List[bool]]:
    if len(corrs) < 4:
        raise TooFewPoints(f"need at least 4 correspondences, got {len(corrs)}")
    src, dst, _ = _as_arrays(corrs)
    h, mask = ransac_homography(src, dst, cfg)
    return h, mask.tolist()


# Lattice sampling

def bilinear_weights(xs: np.ndarray, ys: np.ndarray, rows: int, cols: int):
    """Corner indices and weights of bilinear interpolation on a rows x cols lattice.

    Coordinates are in lattice units (node (r, c) sits at x=c, y=r) and are
    clamped to the lattice, which replicates the border.
    """
    xs = np.clip(np.asarray(xs, dtype=np.float64), 0.0, cols - 1)
    ys = np.clip(np.asarray(ys, dtype=np.float64), 0.0, rows - 1)
    c0 = np.minimum(np.floor(xs).astype(np.intp), cols - 2) if cols > 1 else np.zeros_like(xs, np.intp)
    r0 = np.minimum(np.floor(ys).astype(np.intp), rows - 2) if rows > 1 else np.zeros_like(ys, np.intp)
    fx = xs - c0
    fy = ys - r0
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    idx = (r0, c0, r0, c1, r1, c0, r1, c1)
    w = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    return idx, w


def bilinear_sample_many(field: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
    field = np.asarray(field)
    (r00, c00, r01, c01, r10, c10, r11, c11), (w00, w01, w10, w11) = \
        bilinear_weights(xs, ys, field.shape[0], field.shape[1])
    extra = (slice(None),) + (None,) * (field.ndim - 2)
    return (field[r00, c00] * w00[extra] + field[r01, c01] * w01[extra]
            + field[r10, c10] * w10[extra] + field[r11, c11] * w11[extra])


def bilinear_sample(field: np.ndarray, p: Point2) -> np.ndarray:
    """Sample a (rows, cols, ...) field at lattice coordinates p"""
    return bilinear_sample_many(field, np.array([p.x]), np.array([p.y]))[0]


def bilinear_scatter(grad_out: np.ndarray, xs: np.ndarray, ys: np.ndarray,
                     rows: int, cols: int) -> np.ndarray:
    """Adjoint of bilinear_sample_many: spreads per-sample gradients onto the lattice"""
    (r00, c00, r01, c01, r10, c10, r11, c11), (w00, w01, w10, w11) = \
        bilinear_weights(xs, ys, rows, cols)
    grad = np.zeros((rows, cols) + grad_out.shape[1:])
    extra = (slice(None),) + (None,) * (grad_out.ndim - 1)
    for r, c, w in ((r00, c00, w00), (r01, c01, w01), (r10, c10, w10), (r11, c11, w11)):
        np.add.at(grad, (r, c), grad_out * w[extra])
    return grad


# Four-point cell homographies

UNIT_SQUARE = np.array([[0.0, 0.0], [1.0, 0.0], [1.0, 1.0], [0.0, 1.0]])


class QuadWarp:
    """Batched homographies taking the unit square onto quads, evaluated at local points.

    quads: (N, 4, 2) images of the unit square corners (0,0), (1,0), (1,1), (0,1).
    local: (N, 2) points in unit-square coordinates.
    """

    def __init__(self, quads: np.ndarray, local: np.ndarray):
        quads = np.asarray(quads, dtype=np.float64)
        local = np.asarray(local, dtype=np.float64)
        n = len(quads)
        system = np.zeros((n, 8, 8))
        rhs = np.zeros((n, 8))
        for k, (x, y) in enumerate(UNIT_SQUARE):
            u = quads[:, k, 0]
            v = quads[:, k, 1]
            system[:, 2 * k, 0] = x
            system[:, 2 * k, 1] = y
            system[:, 2 * k, 2] = 1.0
            system[:, 2 * k, 6] = -u * x
            system[:, 2 * k, 7] = -u * y
            system[:, 2 * k + 1, 3] = x
            system[:, 2 * k + 1, 4] = y
            system[:, 2 * k + 1, 5] = 1.0
            system[:, 2 * k + 1, 6] = -v * x
            system[:, 2 * k + 1, 7] = -v * y
            rhs[:, 2 * k] = u
            rhs[:, 2 * k + 1] = v
        try:
            self.inv = np.linalg.inv(system)
        except np.linalg.LinAlgError:
            self.inv = np.linalg.pinv(system)
        self.h = np.einsum("nij,nj->ni", self.inv, rhs)
        self.local = local

        a = local[:, 0]
        b = local[:, 1]
        h = self.h
        w = h[:, 6] * a + h[:, 7] * b + 1.0
        self.w = np.where(np.abs(w) < INFINITY_EPS, INFINITY_EPS, w)
        self.points = np.stack([(h[:, 0] * a + h[:, 1] * b + h[:, 2]) / self.w,
                                (h[:, 3] * a + h[:, 4] * b + h[:, 5]) / self.w], axis=1)

    def backprop(self, grad_points: np.ndarray) -> np.ndarray:
        """Gradient with respect to the quad corners, shape (N, 4, 2)"""
        a = self.local[:, 0]
        b = self.local[:, 1]
        gx = grad_points[:, 0] / self.w
        gy = grad_points[:, 1] / self.w
        qx = self.points[:, 0]
        qy = self.points[:, 1]
        grad_h = np.stack([gx * a, gx * b, gx, gy * a, gy * b, gy,
                           -(gx * qx + gy * qy) * a, -(gx * qx + gy * qy) * b], axis=1)
        cols = np.einsum("ni,nij->nj", grad_h, self.inv)
        grad = np.empty((len(a), 4, 2))
        for k, (x, y) in enumerate(UNIT_SQUARE):
            scale = 1.0 + self.h[:, 6] * x + self.h[:, 7] * y
            grad[:, k, 0] = cols[:, 2 * k] * scale
            grad[:, k, 1] = cols[:, 2 * k + 1] * scale
        return grad
