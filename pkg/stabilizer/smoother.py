"""
Stage 3a: causal per-vertex trajectories and the 3-tap kernel smoother.

O_t is the running integral of the grid motion, S_t blends the current O_t with
the last three smoothed states. The taps are chosen per frame by projected
gradient descent on the temporal, frequency, spatial and projection losses.
All losses accept a batch of candidate S_t arrays shaped (B, rows, cols, 2).
"""

import logging
from collections import deque
from dataclasses import dataclass
from functools import lru_cache
from itertools import product
from typing import List, Optional, Sequence, Tuple

import numpy as np

from config.settings import SmootherConfig
from stabilizer.errors import SpecMismatch
from stabilizer.geometry import QuadWarp
from stabilizer.observer import MotionSample
from stabilizer.propagation import GridMotionField, GridSpec


logger = logging.getLogger(__name__)

N_TAPS = 3
INIT_TAPS = (0.0, 0.5, 1.0)
INITIAL_TAP_STEP = 0.25
GRAD_TOL = 1e-12
TINY = 1e-12


@dataclass(eq=False)
class KernelSet:
    """Taps (k1, k2, k3) per axis; shape (3,) for one set per frame, (rows, cols, 3) per vertex"""
    taps_x: np.ndarray
    taps_y: np.ndarray
    scope: str = "global"
    beta: float = 0.02

    @classmethod
    def zeros(cls, scope: str = "global", spec: Optional[GridSpec] = None,
              beta: float = 0.02) -> "KernelSet":
        shape = (N_TAPS,) if scope == "global" else (spec.rows, spec.cols, N_TAPS)
        return cls(np.zeros(shape), np.zeros(shape), scope, beta)

    def params(self) -> np.ndarray:
        """Taps as one array shaped (2, r, c, 3), r = c = 1 for the global scope"""
        p = np.stack([self.taps_x, self.taps_y])
        return p.reshape(2, 1, 1, N_TAPS) if p.ndim == 2 else p

    @classmethod
    def from_params(cls, params: np.ndarray, scope: str, beta: float) -> "KernelSet":
        if scope == "global":
            return cls(params[0, 0, 0].copy(), params[1, 0, 0].copy(), scope, beta)
        return cls(params[0].copy(), params[1].copy(), scope, beta)


class TrajectoryBuffer:
    """Last L raw and smoothed vertex positions, oldest evicted first"""

    def __init__(self, spec: GridSpec, window: int = 7):
        self.spec = spec
        self.window = window
        self.rest = spec.rest()
        self.raw = deque(maxlen=window)
        self.smoothed = deque(maxlen=window)
        self.t = -1
        self.kernels: Optional[KernelSet] = None

    def history(self) -> List[np.ndarray]:
        """Smoothed states, most recent first"""
        return list(reversed(self.smoothed))

    @property
    def current_raw(self) -> np.ndarray:
        return self.raw[-1]


def append_and_integrate(buf: TrajectoryBuffer, dg: GridMotionField) -> TrajectoryBuffer:
    if dg.spec != buf.spec:
        raise SpecMismatch(f"motion field grid {dg.spec} differs from buffer grid {buf.spec}")
    if buf.t < 0:
        raw = buf.rest.copy()
    else:
        raw = buf.raw[-1] + dg.vectors
    buf.raw.append(raw)
    buf.t += 1
    return buf


def _blend(params: np.ndarray, history: Sequence[np.ndarray], raw: np.ndarray, lam: float):
    """Causal blend for a batch of tap params (B, 2, r, c, 3); returns S (B, R, C, 2) and
    the pieces needed for d S / d taps. Unavailable lags are dropped from both sums."""
    n = min(N_TAPS, len(history))
    batch = len(params)
    if n == 0:
        return np.broadcast_to(raw, (batch,) + raw.shape).copy(), None
    hist = np.moveaxis(np.stack(history[:n], axis=-1), 2, 0)  # (2, R, C, n)
    k = params[..., :n]
    num = lam * (k * hist).sum(axis=-1) + np.moveaxis(raw, -1, 0)
    den = 1.0 + lam * np.abs(k).sum(axis=-1)
    s_axis = num / den  # (B, 2, R, C)
    return np.moveaxis(s_axis, 1, -1), (hist, den, s_axis, n)


def _blend_backprop(params: np.ndarray, grad_s: np.ndarray, cache, lam: float) -> np.ndarray:
    grad = np.zeros_like(params)
    if cache is None:
        return grad
    hist, den, s_axis, n = cache
    k = params[..., :n]
    sign = np.where(k >= 0, 1.0, -1.0)
    ds_dk = lam * (hist[None] - s_axis[..., None] * sign) / den[..., None]
    g = np.moveaxis(grad_s, -1, 1)[..., None] * ds_dk  # (B, 2, R, C, n)
    if params.shape[2] == 1 and params.shape[3] == 1:
        g = g.sum(axis=(2, 3), keepdims=True)
    grad[..., :n] = g
    return grad


def smooth_step(buf: TrajectoryBuffer, kernels: KernelSet, lam: float) -> np.ndarray:
    s, _ = _blend(kernels.params()[None], buf.history(), buf.current_raw, lam)
    return s[0]


# Loss weights

def time_weights(delta_max: int, tau_time: float) -> np.ndarray:
    """Normalized distance-decaying weights alpha_1..alpha_delta_max"""
    if delta_max < 1:
        return np.zeros(0)
    w = np.exp(-np.arange(1, delta_max + 1) / tau_time)
    return w / w.sum()


def freq_weights(window: int, gamma0: float) -> np.ndarray:
    """gamma0 * (omega_m / omega_N)^2 for m = 1..floor(L/2)"""
    m = np.arange(1, window // 2 + 1)
    return gamma0 * (2.0 * m / window) ** 2


@lru_cache(maxsize=8)
def _detrend_projector(window: int) -> np.ndarray:
    basis = np.column_stack([np.ones(window), np.arange(window, dtype=np.float64)])
    return np.eye(window) - basis @ np.linalg.pinv(basis)


def _batched(s_t: np.ndarray) -> np.ndarray:
    s_t = np.asarray(s_t, dtype=np.float64)
    return s_t[None] if s_t.ndim == 3 else s_t


def _time_batch(s: np.ndarray, history: Sequence[np.ndarray], cfg: SmootherConfig, beta: float):
    batch = len(s)
    n_vertices = s.shape[1] * s.shape[2]
    value = np.zeros(batch)
    grad = np.zeros_like(s)
    dbeta = np.zeros(batch)
    delta_eff = min(cfg.delta_max, len(history) // 2)
    alphas = time_weights(delta_eff, cfg.tau_time)
    eps = cfg.charbonnier_eps
    for delta in range(1, delta_eff + 1):
        prev = history[delta - 1]
        prev2 = history[2 * delta - 1]
        d = s - prev
        q = s - 2.0 * prev + prev2
        d2 = (d ** 2).sum(axis=-1)
        decay = np.exp(-beta * d2)
        c = np.sqrt((q ** 2).sum(axis=-1) + eps ** 2)
        w = alphas[delta - 1] / delta ** 2
        value += (w * decay * c).sum(axis=(1, 2))
        grad += (w * decay)[..., None] * (-2.0 * beta * d * c[..., None] + q / c[..., None])
        dbeta += (-w * d2 * decay * c).sum(axis=(1, 2))
    return value / n_vertices, grad / n_vertices, dbeta / n_vertices


def _freq_batch(s: np.ndarray, history: Sequence[np.ndarray], rest: np.ndarray,
                cfg: SmootherConfig):
    window = cfg.window
    batch = len(s)
    n_vertices = s.shape[1] * s.shape[2]
    seq = np.zeros((batch, window) + s.shape[1:])
    seq[:, window - 1] = s - rest
    for d, past in enumerate(history[:window - 1], start=1):
        seq[:, window - 1 - d] = past - rest
    if cfg.detrend:
        proj = _detrend_projector(window)
        seq = np.einsum("nk,bk...->bn...", proj, seq)

    m = np.arange(1, window // 2 + 1)
    z = np.exp(-2j * np.pi * np.outer(m, np.arange(window)) / window)  # (M, L)
    spectrum = np.einsum("mn,bn...->bm...", z, seq)
    gamma = freq_weights(window, cfg.gamma0)
    energy = np.abs(spectrum) ** 2
    value = np.einsum("m,bm...->b...", gamma, energy).reshape(batch, -1).sum(axis=1) / n_vertices

    weighted = gamma[None, :, None, None, None] * spectrum
    if cfg.detrend:
        g_all = 2.0 * np.real(np.einsum("mn,bm...->bn...", np.conj(z), weighted))
        grad = np.einsum("n,bn...->b...", proj[:, window - 1], g_all)
    else:
        grad = 2.0 * np.real(np.einsum("m,bm...->b...", np.conj(z[:, window - 1]), weighted))
    return value, grad / n_vertices


@dataclass(frozen=True, eq=False)
class MeshTopology:
    """Eight triangles per cell over vertices plus cell centres, with undeformed references"""
    triangles: np.ndarray
    corners: np.ndarray
    ref_lengths: np.ndarray
    ref_angles: np.ndarray
    n_vertices: int
    n_cells: int

    def extend(self, pts: np.ndarray) -> np.ndarray:
        flat = pts.reshape(len(pts), self.n_vertices, 2)
        centres = flat[:, self.corners].mean(axis=2)
        return np.concatenate([flat, centres], axis=1)


EDGES = ((0, 1), (1, 2), (2, 0))


def _edges_and_angles(ext: np.ndarray, triangles: np.ndarray):
    lengths = np.stack([np.linalg.norm(ext[:, triangles[:, j]] - ext[:, triangles[:, i]], axis=-1)
                        for i, j in EDGES], axis=-1)
    angles = []
    for k in range(3):
        u = ext[:, triangles[:, (k + 1) % 3]] - ext[:, triangles[:, k]]
        w = ext[:, triangles[:, (k + 2) % 3]] - ext[:, triangles[:, k]]
        cross = u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]
        dot = (u * w).sum(axis=-1)
        angles.append(np.abs(np.arctan2(cross, dot)))
    return lengths, np.stack(angles, axis=-1)


@lru_cache(maxsize=8)
def mesh_topology(spec: GridSpec) -> MeshTopology:
    rows, cols = spec.rows, spec.cols
    n_vertices = rows * cols
    triangles, corners = [], []
    for r in range(rows - 1):
        for c in range(cols - 1):
            a, b = r * cols + c, r * cols + c + 1
            cc, d = (r + 1) * cols + c + 1, (r + 1) * cols + c
            e = n_vertices + r * (cols - 1) + c
            corners.append((a, b, cc, d))
            triangles += [(a, b, d), (b, cc, a), (cc, d, b), (d, a, cc),
                          (a, b, e), (b, cc, e), (cc, d, e), (d, a, e)]
    topo = MeshTopology(np.array(triangles, dtype=np.intp), np.array(corners, dtype=np.intp),
                        np.zeros(0), np.zeros(0), n_vertices, spec.n_cells)
    lengths, angles = _edges_and_angles(topo.extend(spec.rest()[None]), topo.triangles)
    return MeshTopology(topo.triangles, topo.corners, lengths[0], angles[0],
                        n_vertices, spec.n_cells)


def _spatial_batch(s: np.ndarray, spec: GridSpec, cfg: SmootherConfig):
    topo = mesh_topology(spec)
    tri = topo.triangles
    eps = cfg.charbonnier_eps
    ext = topo.extend(s)
    batch = len(s)
    grad_ext = np.zeros_like(ext)
    value = np.zeros(batch)
    every = slice(None)

    for e_idx, (i, j) in enumerate(EDGES):
        vec = ext[:, tri[:, j]] - ext[:, tri[:, i]]
        length = np.linalg.norm(vec, axis=-1)
        ref = topo.ref_lengths[:, e_idx]
        ratio = length / ref
        term = np.sqrt((ratio - 1.0) ** 2 + eps ** 2)
        value += cfg.lambda_edge * term.sum(axis=1)
        unit = vec / np.maximum(length, TINY)[..., None]
        g = (cfg.lambda_edge * (ratio - 1.0) / (term * ref))[..., None] * unit
        np.add.at(grad_ext, (every, tri[:, j]), g)
        np.add.at(grad_ext, (every, tri[:, i]), -g)

    for k in range(3):
        v_idx, u_idx, w_idx = tri[:, k], tri[:, (k + 1) % 3], tri[:, (k + 2) % 3]
        u = ext[:, u_idx] - ext[:, v_idx]
        w = ext[:, w_idx] - ext[:, v_idx]
        cross = u[..., 0] * w[..., 1] - u[..., 1] * w[..., 0]
        dot = (u * w).sum(axis=-1)
        signed = np.arctan2(cross, dot)
        ref = topo.ref_angles[:, k]
        ratio = np.abs(signed) / ref
        term = np.sqrt((ratio - 1.0) ** 2 + eps ** 2)
        value += cfg.lambda_angle * term.sum(axis=1)

        den = cross ** 2 + dot ** 2
        ok = den > TINY ** 2
        coef = np.where(ok, cfg.lambda_angle * (ratio - 1.0) / (term * ref) * np.sign(signed)
                        / np.where(ok, den, 1.0), 0.0)
        g_u = coef[..., None] * (dot[..., None] * np.stack([w[..., 1], -w[..., 0]], axis=-1)
                                 - cross[..., None] * w)
        g_w = coef[..., None] * (dot[..., None] * np.stack([-u[..., 1], u[..., 0]], axis=-1)
                                 - cross[..., None] * u)
        np.add.at(grad_ext, (every, u_idx), g_u)
        np.add.at(grad_ext, (every, w_idx), g_w)
        np.add.at(grad_ext, (every, v_idx), -(g_u + g_w))

    grad = grad_ext[:, :topo.n_vertices].copy()
    centre_grad = grad_ext[:, topo.n_vertices:]
    for corner in range(4):
        np.add.at(grad, (every, topo.corners[:, corner]), 0.25 * centre_grad)
    n = topo.n_cells
    return value / n, grad.reshape(s.shape) / n


def _proj_batch(s: np.ndarray, raw: np.ndarray, m: Optional[MotionSample], spec: GridSpec,
                eps: float):
    batch = len(s)
    if m is None or len(m) == 0:
        return np.zeros(batch), np.zeros_like(s)
    r, c, local = spec.locate(m.positions)
    target = QuadWarp(spec.quads(raw, r, c), local).points
    n = len(m)
    value = np.zeros(batch)
    grad = np.zeros_like(s)
    for b in range(batch):
        warp = QuadWarp(spec.quads(s[b], r, c), local)
        diff = warp.points - target
        rho = np.sqrt((diff ** 2).sum(axis=1) + eps ** 2)
        value[b] = np.sum(m.confidences * rho) / n
        g_points = (m.confidences / rho)[:, None] * diff / n
        grad[b] = spec.scatter_quads(warp.backprop(g_points), r, c)
    return value, grad


# Single-candidate entry points

def loss_time_and_grad(s_t: np.ndarray, history: Sequence[np.ndarray],
                       cfg: SmootherConfig, beta: Optional[float] = None):
    value, grad, _ = _time_batch(_batched(s_t), history, cfg,
                                 cfg.beta if beta is None else beta)
    return float(value[0]), grad[0]


def loss_time(s_t: np.ndarray, history: Sequence[np.ndarray], cfg: SmootherConfig) -> float:
    return loss_time_and_grad(s_t, history, cfg)[0]


def loss_freq_and_grad(s_t: np.ndarray, history: Sequence[np.ndarray], rest: np.ndarray,
                       cfg: SmootherConfig):
    value, grad = _freq_batch(_batched(s_t), history, rest, cfg)
    return float(value[0]), grad[0]


def loss_freq(s_t: np.ndarray, history: Sequence[np.ndarray], rest: np.ndarray,
              cfg: SmootherConfig) -> float:
    return loss_freq_and_grad(s_t, history, rest, cfg)[0]


def loss_spatial_and_grad(spec: GridSpec, s_t: np.ndarray, cfg: SmootherConfig):
    value, grad = _spatial_batch(_batched(s_t), spec, cfg)
    return float(value[0]), grad[0]


def loss_spatial(spec: GridSpec, s_t: np.ndarray, cfg: SmootherConfig) -> float:
    return loss_spatial_and_grad(spec, s_t, cfg)[0]


def loss_proj_smooth_and_grad(spec: GridSpec, s_t: np.ndarray, o_t: np.ndarray,
                              m: MotionSample, cfg: SmootherConfig):
    value, grad = _proj_batch(_batched(s_t), o_t, m, spec, cfg.charbonnier_eps)
    return float(value[0]), grad[0]


def loss_proj_smooth(spec: GridSpec, s_t: np.ndarray, o_t: np.ndarray, m: MotionSample,
                     cfg: SmootherConfig) -> float:
    return loss_proj_smooth_and_grad(spec, s_t, o_t, m, cfg)[0]


def objective_batch(s: np.ndarray, buf: TrajectoryBuffer, m: Optional[MotionSample],
                    cfg: SmootherConfig, beta: float):
    """Weighted total over candidate smoothed states; returns values, d/dS and d/d beta"""
    history = buf.history()
    value, grad, dbeta = _time_batch(s, history, cfg, beta)
    value, grad, dbeta = cfg.lambda_time * value, cfg.lambda_time * grad, cfg.lambda_time * dbeta
    if cfg.lambda_freq:
        v, g = _freq_batch(s, history, buf.rest, cfg)
        value, grad = value + cfg.lambda_freq * v, grad + cfg.lambda_freq * g
    if cfg.lambda_spatial:
        v, g = _spatial_batch(s, buf.spec, cfg)
        value, grad = value + cfg.lambda_spatial * v, grad + cfg.lambda_spatial * g
    if cfg.lambda_proj:
        v, g = _proj_batch(s, buf.current_raw, m, buf.spec, cfg.charbonnier_eps)
        value, grad = value + cfg.lambda_proj * v, grad + cfg.lambda_proj * g
    return value, grad, dbeta


def evaluate_taps(params: np.ndarray, buf: TrajectoryBuffer, m: Optional[MotionSample],
                  cfg: SmootherConfig, beta: float):
    """Objective of tap candidates (B, 2, r, c, 3) with gradients through the blend"""
    s, cache = _blend(params, buf.history(), buf.current_raw, cfg.lambda_blend)
    value, grad_s, dbeta = objective_batch(s, buf, m, cfg, beta)
    return value, _blend_backprop(params, grad_s, cache, cfg.lambda_blend), dbeta


def _initial_candidates(prev: np.ndarray, cfg: SmootherConfig) -> np.ndarray:
    starts = [prev]
    for taps in product(INIT_TAPS, repeat=N_TAPS):
        starts.append(np.broadcast_to(np.array(taps), prev.shape))
    return np.clip(np.stack(starts), cfg.tap_floor, cfg.tap_bound)


def solve_kernels(buf: TrajectoryBuffer, m: Optional[MotionSample],
                  cfg: SmootherConfig) -> KernelSet:
    """Projected descent on the taps from the best of the previous solution and a coarse
    set of starts; the objective never rises above that of the previous taps"""
    prev = buf.kernels or KernelSet.zeros(cfg.kernel_scope, buf.spec, cfg.beta)
    if cfg.kernel_iters == 0 or not buf.smoothed:
        return prev

    beta = prev.beta
    starts = _initial_candidates(prev.params(), cfg)
    values, _, _ = evaluate_taps(starts, buf, m, cfg, beta)
    best = int(np.argmin(values))
    params = starts[best]
    value, grad, dbeta = evaluate_taps(params[None], buf, m, cfg, beta)
    value, grad, dbeta = float(value[0]), grad[0], float(dbeta[0])

    step = INITIAL_TAP_STEP
    beta_scale = cfg.beta_max / cfg.tap_bound
    for _ in range(cfg.kernel_iters):
        largest = float(np.abs(grad).max())
        if cfg.learn_beta:
            largest = max(largest, abs(dbeta) * beta_scale)
        if largest < GRAD_TOL:
            break
        candidate = np.clip(params - step * grad / largest, cfg.tap_floor, cfg.tap_bound)
        cand_beta = beta
        if cfg.learn_beta:
            cand_beta = float(np.clip(beta - step * beta_scale * dbeta / largest, 0.0, cfg.beta_max))
        v, g, db = evaluate_taps(candidate[None], buf, m, cfg, cand_beta)
        if v[0] < value:
            params, beta, value, grad, dbeta = candidate, cand_beta, float(v[0]), g[0], float(db[0])
        else:
            step *= 0.5
    return KernelSet.from_params(params, cfg.kernel_scope, beta)


def clamp_compensation(s_t: np.ndarray, o_t: np.ndarray, spec: GridSpec,
                       fraction: Optional[float]) -> np.ndarray:
    """Keep S_t inside a crop window of fraction * min(width, height) around O_t"""
    if fraction is None:
        return s_t
    margin = fraction * min(spec.frame_width, spec.frame_height)
    return o_t + np.clip(s_t - o_t, -margin, margin)


def smooth_frame(buf: TrajectoryBuffer, dg: GridMotionField, m: Optional[MotionSample],
                 cfg: SmootherConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Returns the rendered S_t and O_t; the history keeps the unclamped S_t"""
    append_and_integrate(buf, dg)
    kernels = solve_kernels(buf, m, cfg)
    s_t = smooth_step(buf, kernels, cfg.lambda_blend)
    buf.smoothed.append(s_t)
    buf.kernels = kernels
    return clamp_compensation(s_t, buf.current_raw, buf.spec, cfg.max_compensation), buf.current_raw


class OnlineSmoother:
    """Stage 3a worker state; the buffer is created from the first motion field"""

    def __init__(self, cfg: SmootherConfig):
        self.cfg = cfg
        self.buffer: Optional[TrajectoryBuffer] = None

    def step(self, dg: GridMotionField, m: Optional[MotionSample] = None):
        if self.buffer is None:
            self.buffer = TrajectoryBuffer(dg.spec, self.cfg.window)
        s_t, o_t = smooth_frame(self.buffer, dg, m, self.cfg)
        kernels = self.buffer.kernels
        logger.debug(f"frame {self.buffer.t}: taps x={np.round(kernels.params()[0].mean(axis=(0, 1)), 3)}")
        return s_t, o_t
