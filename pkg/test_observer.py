#!/usr/bin/env python3
"""
Tests for keypoint detection, fusion, flow estimation and motion sampling
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.settings import ObserverConfig
from evaluation.synthetic import make_texture
from stabilizer.errors import DimensionMismatch, EmptyFrame
from stabilizer.observer import (
    FlowField, Frame, KeypointSet, MotionObserver, MotionSample, ScoredKeypoint,
    build_guidance_mask, detect_keypoints, estimate_dense_flow, estimate_sparse_flow,
    fuse_detections, fuse_flow, homogenize, sample_motion, track_points,
)


def _shifted_pair(dx: int = 3, dy: int = 0):
    """Frames t-1 and t of a scene whose content moves by (dx, dy)"""
    tex = make_texture(220, 180, seed=4)
    prev = Frame(0, tex[20:140, 20:180])
    cur = Frame(1, tex[20 - dy:140 - dy, 20 - dx:180 - dx])
    return prev, cur


def test_frame_validation():
    """Only 8-bit gray or three-channel data is accepted"""
    with pytest.raises(ValueError):
        Frame(0, np.zeros((4, 4), dtype=np.float32))
    with pytest.raises(ValueError):
        Frame(0, np.zeros((4, 4, 2), dtype=np.uint8))
    with pytest.raises(EmptyFrame):
        Frame(0, np.zeros((0, 0), dtype=np.uint8)).gray()
    color = Frame(3, np.zeros((5, 7, 3), dtype=np.uint8))
    assert color.size == (7, 5)
    assert color.gray().shape == (5, 7)


def test_motion_sample_lengths_must_agree():
    with pytest.raises(ValueError):
        MotionSample(np.zeros((3, 2)), np.zeros((2, 2)), np.ones(3))
    assert MotionSample.empty().nbytes == 0
    assert MotionSample(np.zeros((4, 2)), np.zeros((4, 2)), np.ones(4)).nbytes == 64


def test_detectors_on_texture():
    """Both builtin detectors find normalized corners on a textured frame"""
    frame, _ = _shifted_pair()
    cfg = ObserverConfig()
    for detector in ("shi_tomasi", "fast"):
        kps = detect_keypoints(frame, detector, cfg)
        assert len(kps) > 20
        assert kps.scores.max() == pytest.approx(1.0)
        assert kps.scores.min() >= 0.0
        assert set(kps.detector_ids) == {detector}
        assert np.all(kps.xy[:, 0] < frame.width) and np.all(kps.xy[:, 1] < frame.height)


def test_detectors_on_blank_frame():
    blank = Frame(0, np.full((32, 32), 128, dtype=np.uint8))
    assert len(detect_keypoints(blank, "shi_tomasi")) == 0
    assert len(detect_keypoints(blank, "fast")) == 0
    with pytest.raises(ValueError):
        detect_keypoints(blank, "sift")


def test_fuse_detections_merges_coincident_points():
    """Nearby proposals of different detectors merge at the score-weighted position"""
    cfg = ObserverConfig()
    a = KeypointSet.from_points([ScoredKeypoint(10, 10, 1.0, "shi_tomasi"),
                                 ScoredKeypoint(40, 40, 0.8, "shi_tomasi")], 5, (64, 64))
    b = KeypointSet.from_points([ScoredKeypoint(11, 10, 1.0, "fast")], 5, (64, 64))
    fused = fuse_detections([a, b], cfg)

    assert len(fused) == 2
    assert fused.frame_index == 5
    first = fused.points[0]
    assert first.x == pytest.approx((10 * 1.0 + 11 * 0.5) / 1.5)
    assert first.y == pytest.approx(10.0)
    assert first.detector_id == "shi_tomasi"
    assert len(fuse_detections([], cfg)) == 0


def test_homogenize_respects_cell_budget_and_separation():
    rng = np.random.default_rng(0)
    xy = rng.uniform(0, 64, (300, 2))
    kps = KeypointSet(xy, rng.uniform(0, 1, 300), np.array(["fast"] * 300, dtype=object),
                      0, (64, 64))
    cfg = ObserverConfig(grid_gx=4, grid_gy=4, per_cell_k=2, min_separation=5.0)
    kept = homogenize(kps, cfg)

    cells = (kept.xy // 16).astype(int)
    ids = cells[:, 1] * 4 + cells[:, 0]
    _, counts = np.unique(ids, return_counts=True)
    assert counts.max() <= 2
    assert len(kept) == 32
    for cell in np.unique(ids):
        pts = kept.xy[ids == cell]
        if len(pts) == 2:
            assert np.hypot(*(pts[0] - pts[1])) >= 5.0


def test_sparse_flow_recovers_shift():
    """Displacement is position in t minus position in t-1"""
    prev, cur = _shifted_pair(3, 0)
    cfg = ObserverConfig()
    kps = homogenize(detect_keypoints(cur, "shi_tomasi", cfg), cfg)
    sample = estimate_sparse_flow(prev, cur, kps, cfg)
    good = sample.confidences > 0
    assert good.mean() > 0.8
    assert np.allclose(np.median(sample.displacements[good], axis=0), [3.0, 0.0], atol=0.2)
    assert np.all((sample.confidences >= 0) & (sample.confidences <= 1))


def test_track_points_forward():
    """Points of frame t-1 land at the shifted positions in frame t"""
    prev, cur = _shifted_pair(2, 1)
    pts = np.array([[60.0, 50.0], [100.0, 70.0], [80.0, 40.0]])
    q, fb, ok = track_points(prev.gray(), cur.gray(), pts, ObserverConfig())
    assert ok.all()
    assert np.allclose(q - pts, [[2.0, 1.0]] * 3, atol=0.2)
    assert np.all(fb < 0.5)


def test_dense_flow_recovers_shift():
    prev, cur = _shifted_pair(0, 2)
    flow = estimate_dense_flow(prev, cur, ObserverConfig())
    assert flow.vectors.shape == (cur.height, cur.width, 2)
    assert flow.vectors.dtype == np.float32
    assert np.allclose(np.median(flow.vectors.reshape(-1, 2), axis=0), [0.0, 2.0], atol=0.2)


def test_dense_flow_size_mismatch():
    a = Frame(0, np.zeros((10, 10), dtype=np.uint8))
    b = Frame(1, np.zeros((10, 12), dtype=np.uint8))
    with pytest.raises(DimensionMismatch):
        estimate_dense_flow(a, b, ObserverConfig())


def test_guidance_mask():
    """Bits within the radius of a candidate, none without candidates"""
    kps = KeypointSet.from_points([ScoredKeypoint(5, 5, 1.0, "fast")], 0, (10, 10))
    mask = build_guidance_mask(kps, 2.0, (10, 10))
    assert mask.bits.shape == (10, 10)
    assert mask.bits[5, 5] and mask.bits[5, 7] and mask.bits[3, 5]
    assert not mask.bits[5, 8]
    assert not mask.bits[0, 0]
    empty = build_guidance_mask(KeypointSet.empty(0, (10, 10)), 2.0, (10, 10))
    assert not empty.bits.any()


def test_fuse_flow_keeps_dense_inside_and_interpolates_outside():
    dense = FlowField.zeros(20, 20)
    dense.vectors[:10, :10] = (1.0, 2.0)
    kps = KeypointSet.from_points([ScoredKeypoint(3, 3, 1.0, "fast"),
                                   ScoredKeypoint(6, 6, 0.5, "fast")], 0, (20, 20))
    mask = build_guidance_mask(kps, 3.0, (20, 20))
    fused = fuse_flow(dense, kps, mask)

    assert np.allclose(fused.vectors[3, 3], (1.0, 2.0))
    assert np.allclose(fused.vectors[19, 19], (1.0, 2.0), atol=1e-5)
    assert np.allclose(fused.vectors[15, 2], (1.0, 2.0), atol=1e-5)
    # inside the mask the dense field is kept even where it differs
    mask.bits[:] = True
    assert np.allclose(fuse_flow(dense, kps, mask).vectors, dense.vectors)

    with pytest.raises(DimensionMismatch):
        fuse_flow(FlowField.zeros(8, 8), kps, mask)


def test_sample_motion_uses_confidences():
    flow = FlowField.zeros(16, 16)
    flow.vectors[...] = (0.5, -1.0)
    kps = KeypointSet.from_points([ScoredKeypoint(4, 4, 0.7, "fast"),
                                   ScoredKeypoint(10.5, 3.5, 0.2, "fast")], 1, (16, 16))
    sample = sample_motion(flow, kps)
    assert np.allclose(sample.displacements, [[0.5, -1.0], [0.5, -1.0]])
    assert np.allclose(sample.confidences, [0.7, 0.2])
    sample = sample_motion(flow, kps, np.array([1.5, 0.3]))
    assert np.allclose(sample.confidences, [1.0, 0.3])


def test_observer_first_frame_is_empty():
    _, cur = _shifted_pair()
    obs = MotionObserver(ObserverConfig()).observe_full(None, cur)
    assert len(obs.sample) == 0
    assert obs.sample.frame_size == cur.size


def test_observer_recovers_shift():
    """Full stage on a pure translation"""
    prev, cur = _shifted_pair(-2, 1)
    obs = MotionObserver(ObserverConfig()).observe_full(prev, cur)
    assert len(obs.keypoints) > 20
    assert len(obs.keypoints) <= 16 * 16 * 2
    assert obs.flow is not None
    assert np.allclose(np.median(obs.sample.displacements, axis=0), [-2.0, 1.0], atol=0.25)
    assert obs.sample.frame_index == 1

    sparse = MotionObserver(ObserverConfig(flow_source="sparse")).observe_full(prev, cur)
    assert sparse.flow is None


def test_observer_with_imported_flow_and_keypoints():
    prev, cur = _shifted_pair()
    imported = {1: KeypointSet.from_points([ScoredKeypoint(50, 50, 1.0, "import"),
                                            ScoredKeypoint(90, 60, 0.9, "import")], 1, (0, 0))}

    def loader(index):
        flow = FlowField.zeros(cur.width, cur.height)
        flow.vectors[...] = (4.0, -1.0)
        return flow

    cfg = ObserverConfig(detectors=["import"], flow_source="import")
    sample = MotionObserver(cfg, imported, loader).observe(prev, cur)
    assert len(sample) == 2
    assert np.allclose(sample.displacements, [[4.0, -1.0], [4.0, -1.0]], atol=1e-5)

    def bad_loader(index):
        return FlowField.zeros(8, 8)

    with pytest.raises(DimensionMismatch):
        MotionObserver(cfg, imported, bad_loader).observe(prev, cur)


def test_white_square_corners():
    """Shi-Tomasi finds the four corners of a bright square"""
    data = np.zeros((64, 64), dtype=np.uint8)
    data[20:40, 20:40] = 255
    kps = detect_keypoints(Frame(0, data), "shi_tomasi", ObserverConfig())
    corners = np.array([[20, 20], [39, 20], [39, 39], [20, 39]], dtype=np.float64)
    assert len(kps) == 4
    for p in kps.xy:
        assert np.min(np.linalg.norm(corners - p, axis=1)) <= 2.0


def test_checkerboard_corners():
    board = (np.indices((64, 64)) // 8).sum(axis=0) % 2
    kps = detect_keypoints(Frame(0, (board * 255).astype(np.uint8)), "shi_tomasi",
                           ObserverConfig())
    assert len(kps) >= 40


def test_guidance_mask_disc_size():
    kps = KeypointSet.from_points([ScoredKeypoint(10, 10, 1.0, "fast")], 0, (21, 21))
    assert build_guidance_mask(kps, 3.0, (21, 21)).bits.sum() == 29
    assert build_guidance_mask(kps, 40.0, (21, 21)).bits.all()


def test_fuse_flow_symmetric_interpolation():
    """A query equidistant from two candidates gets the mean of their flows"""
    dense = FlowField.zeros(11, 11)
    dense.vectors[5, 2] = (1.0, 0.0)
    dense.vectors[5, 8] = (3.0, 0.0)
    kps = KeypointSet.from_points([ScoredKeypoint(2, 5, 1.0, "fast"),
                                   ScoredKeypoint(8, 5, 1.0, "fast")], 0, (11, 11))
    mask = build_guidance_mask(kps, 0.5, (11, 11))
    fused = fuse_flow(dense, kps, mask)
    assert np.allclose(fused.vectors[5, 5], (2.0, 0.0), atol=1e-6)


def test_sample_motion_linear_field():
    flow = FlowField.zeros(10, 10)
    flow.vectors[..., 0] = 0.5 * np.arange(10)[None, :]
    kps = KeypointSet.from_points([ScoredKeypoint(3.25, 6.0, 1.0, "fast")], 0, (10, 10))
    assert sample_motion(flow, kps).displacements[0, 0] == pytest.approx(1.625, abs=1e-6)


def test_identical_frames_give_zero_motion():
    frame, _ = _shifted_pair()
    cfg = ObserverConfig()
    kps = homogenize(detect_keypoints(frame, "shi_tomasi", cfg), cfg)
    sample = estimate_sparse_flow(frame, Frame(1, frame.data.copy()), kps, cfg)
    assert np.allclose(sample.displacements, 0.0, atol=1e-3)
    assert np.allclose(sample.confidences, kps.scores, atol=1e-3)
