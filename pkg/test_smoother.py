#!/usr/bin/env python3
"""
Tests for trajectory integration, the causal 3-tap smoother and its losses
"""

import os
import sys

import numpy as np
import pytest

# Add project root to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config.settings import SmootherConfig
from evaluation.metrics import channel_stability
from evaluation.synthetic import (
    ORACLE_GRID, SynthConfig, gen_trajectory, oracle_kernels, oracle_smooth, series_field,
)
from stabilizer.errors import SpecMismatch
from stabilizer.observer import MotionSample
from stabilizer.propagation import GridMotionField, GridSpec
from stabilizer.smoother import (
    KernelSet, OnlineSmoother, TrajectoryBuffer, append_and_integrate, clamp_compensation,
    evaluate_taps, freq_weights, loss_freq, loss_proj_smooth, loss_spatial, loss_time,
    smooth_frame, smooth_step, solve_kernels, time_weights,
)


EPS = 1e-3


def _taps(k1, k2, k3):
    taps = np.array([k1, k2, k3], dtype=np.float64)
    return KernelSet(taps.copy(), taps.copy())


def _run_series(raw, cfg):
    """Feed a 1D x-series through the smoother; returns the smoothed series"""
    smoother = OnlineSmoother(cfg)
    out = []
    for t, x in enumerate(raw):
        delta = 0.0 if t == 0 else x - raw[t - 1]
        s_t, _ = smoother.step(series_field(delta, t))
        out.append(raw[0] + s_t[0, 0, 0] - ORACLE_GRID.rest()[0, 0, 0])
    return np.array(out)


def _top_quartile_energy(signal):
    energy = np.abs(np.fft.rfft(signal - signal.mean())) ** 2
    start = int(np.ceil(0.75 * (len(energy) - 1)))
    return float(energy[start:].sum())


def test_time_weights():
    """Distance-decaying weights at tau = 2 over three lags"""
    alphas = time_weights(3, 2.0)
    assert np.allclose(alphas, [0.5065, 0.3072, 0.1863], atol=1e-4)
    assert alphas.sum() == pytest.approx(1.0, abs=1e-9)
    for delta_max, tau in [(1, 0.5), (4, 10.0), (7, 1.0)]:
        assert time_weights(delta_max, tau).sum() == pytest.approx(1.0, abs=1e-9)


def test_freq_weights():
    assert np.allclose(freq_weights(7, 0.1), [0.008163, 0.032653, 0.073469], atol=1e-6)
    assert len(freq_weights(9, 1.0)) == 4


def test_profiles():
    appendix = SmootherConfig()
    assert (appendix.lambda_time, appendix.lambda_freq, appendix.lambda_spatial,
            appendix.lambda_proj, appendix.gamma0) == (20.0, 1.0, 10.0, 5.0, 1.0)
    core = SmootherConfig(profile="core")
    assert (core.lambda_time, core.lambda_freq, core.lambda_spatial, core.lambda_proj,
            core.gamma0) == (1.0, 0.1, 0.0, 0.0, 0.1)
    assert SmootherConfig(window=9).delta_max == 4


def test_integration_of_motion():
    """O_0 is the rest grid; later frames add their motion"""
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    rest = ORACLE_GRID.rest()
    for t in range(10):
        append_and_integrate(buf, series_field(1.0, t))
    assert len(buf.raw) == 7
    assert np.allclose(buf.current_raw[..., 0], rest[..., 0] + 9)
    assert np.allclose(buf.current_raw[..., 1], rest[..., 1])

    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    for t in range(6):
        append_and_integrate(buf, series_field(1.0 if t % 2 else -1.0, t))
    xs = [o[0, 0, 0] for o in buf.raw]
    assert xs == pytest.approx([0.0, 1.0, 0.0, 1.0, 0.0, 1.0])

    with pytest.raises(SpecMismatch):
        append_and_integrate(buf, GridMotionField.zeros(GridSpec(3, 3, 64, 64)))


def test_smooth_step_examples():
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    buf.smoothed.append(np.zeros((2, 2, 2)))
    buf.raw.append(np.ones((2, 2, 2)))
    assert np.allclose(smooth_step(buf, _taps(0, 0, 0), 100.0), 1.0)
    assert np.allclose(smooth_step(buf, _taps(1, 0, 0), 100.0), 1.0 / 101.0)
    # the missing lags are dropped from numerator and denominator
    assert np.allclose(smooth_step(buf, _taps(1, 2, 2), 100.0), 1.0 / 101.0)

    const = TrajectoryBuffer(ORACLE_GRID, 7)
    for _ in range(4):
        const.smoothed.append(np.full((2, 2, 2), 3.5))
    const.raw.append(np.full((2, 2, 2), 3.5))
    assert np.allclose(smooth_step(const, _taps(0.3, 1.7, 0.9), 100.0), 3.5)

    empty = TrajectoryBuffer(ORACLE_GRID, 7)
    append_and_integrate(empty, series_field(0.0))
    assert np.allclose(smooth_step(empty, _taps(1, 1, 1), 100.0), ORACLE_GRID.rest())


def test_loss_time_floor():
    """Constant and (without decay) linear paths sit at the Charbonnier floor"""
    alphas = time_weights(3, 2.0)
    floor = EPS * (alphas[0] + alphas[1] / 4 + alphas[2] / 9)
    assert floor == pytest.approx(6.04e-4, abs=1e-6)

    rest = ORACLE_GRID.rest()
    history = [rest.copy() for _ in range(6)]
    assert loss_time(rest, history, SmootherConfig()) == pytest.approx(floor, rel=1e-9)

    v = np.array([1.0, -0.5])
    linear = [rest - d * v for d in range(1, 7)]
    assert loss_time(rest, linear, SmootherConfig(beta=0.0)) == pytest.approx(floor, rel=1e-6)
    assert loss_time(rest, linear, SmootherConfig(beta=0.02)) < floor


def test_loss_time_warm_up():
    """Short histories reduce the number of lags"""
    rest = ORACLE_GRID.rest()
    assert loss_time(rest, [], SmootherConfig()) == 0.0
    one_lag = loss_time(rest, [rest, rest], SmootherConfig())
    assert one_lag == pytest.approx(EPS * time_weights(1, 2.0)[0])


def test_loss_freq():
    cfg = SmootherConfig(profile="core")
    rest = ORACLE_GRID.rest()
    assert loss_freq(rest + 2.0, [rest + 2.0] * 6, rest, cfg) == pytest.approx(0.0, abs=1e-20)

    # alternating +-1 on every vertex and axis, oldest first
    seq = np.array([(-1.0) ** n for n in range(7)])
    history = [rest + seq[6 - d] for d in range(1, 7)]
    value = loss_freq(rest + seq[6], history, rest, cfg)
    gamma = freq_weights(7, cfg.gamma0)
    spectrum = np.fft.fft(seq)
    expected = 2 * np.sum(gamma * np.abs(spectrum[1:4]) ** 2)
    assert value == pytest.approx(expected, rel=1e-9)
    assert np.argmax(gamma * np.abs(spectrum[1:4]) ** 2) == 2


def test_loss_freq_matches_brute_force_dft():
    rng = np.random.default_rng(4)
    spec = GridSpec(3, 4, 40, 30)
    rest = spec.rest()
    cfg = SmootherConfig(window=7)
    states = [rest + rng.normal(0, 1, rest.shape) for _ in range(7)]
    value = loss_freq(states[-1], list(reversed(states[:-1])), rest, cfg)

    seq = np.stack(states) - rest
    gamma = freq_weights(7, cfg.gamma0)
    spectrum = np.fft.fft(seq, axis=0)[1:4]
    expected = np.einsum("m,m...->", gamma, np.abs(spectrum) ** 2) / (3 * 4)
    assert value == pytest.approx(expected, rel=1e-9)


def test_loss_spatial_examples():
    spec = GridSpec(4, 5, 81, 61)
    cfg = SmootherConfig()
    rest = spec.rest()
    assert loss_spatial(spec, rest, cfg) == pytest.approx(48 * EPS, rel=1e-6)

    scaled = 1.1 * rest
    expected = 24 * np.sqrt(0.01 + EPS ** 2) + 24 * EPS
    assert loss_spatial(spec, scaled, cfg) == pytest.approx(expected, rel=1e-6)

    theta = 0.4
    rot = np.array([[np.cos(theta), -np.sin(theta)], [np.sin(theta), np.cos(theta)]])
    assert loss_spatial(spec, rest @ rot.T + 7.0, cfg) == pytest.approx(48 * EPS, rel=1e-6)


def test_loss_proj_smooth_examples():
    spec = GridSpec(3, 3, 41, 41)
    cfg = SmootherConfig()
    rng = np.random.default_rng(0)
    o_t = spec.rest() + rng.normal(0, 0.5, (3, 3, 2))
    pts = rng.uniform(1, 39, (12, 2))
    m = MotionSample(pts, np.zeros((12, 2)), np.ones(12), 1, (41, 41))
    assert loss_proj_smooth(spec, o_t, o_t, m, cfg) == pytest.approx(EPS, rel=1e-6)
    shifted = o_t + np.array([1.0, 0.0])
    assert loss_proj_smooth(spec, shifted, o_t, m, cfg) == pytest.approx(np.sqrt(1 + EPS ** 2),
                                                                         rel=1e-6)
    blind = MotionSample(pts, np.zeros((12, 2)), np.zeros(12), 1, (41, 41))
    assert loss_proj_smooth(spec, shifted, o_t, blind, cfg) == 0.0


def test_solve_kernels_without_iterations_keeps_previous():
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    cfg = SmootherConfig(kernel_iters=0)
    for t in range(5):
        s_t, o_t = smooth_frame(buf, series_field(1.0 if t % 2 else -1.0, t), None, cfg)
        assert np.array_equal(s_t, o_t)
    assert np.all(buf.kernels.params() == 0.0)


def test_solve_kernels_on_constant_stream():
    """Every tap choice is a fixed point, so the initial taps are kept"""
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    cfg = SmootherConfig()
    for t in range(8):
        s_t, o_t = smooth_frame(buf, series_field(0.0, t), None, cfg)
        assert np.allclose(s_t, ORACLE_GRID.rest())
        assert np.allclose(o_t, ORACLE_GRID.rest())
    assert np.all(buf.kernels.params() == 0.0)


def test_solve_kernels_never_worse_than_previous_taps():
    rng = np.random.default_rng(9)
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    cfg = SmootherConfig()
    for t in range(15):
        append_and_integrate(buf, series_field(float(rng.normal(0, 2)), t))
        prev = buf.kernels or KernelSet.zeros()
        kernels = solve_kernels(buf, None, cfg)
        before, _, _ = evaluate_taps(prev.params()[None], buf, None, cfg, prev.beta)
        after, _, _ = evaluate_taps(kernels.params()[None], buf, None, cfg, kernels.beta)
        assert after[0] <= before[0] + 1e-12
        assert np.all(kernels.params() >= cfg.tap_floor)
        assert np.all(kernels.params() <= cfg.tap_bound)
        buf.smoothed.append(smooth_step(buf, kernels, cfg.lambda_blend))
        buf.kernels = kernels


def test_learned_beta_stays_in_range():
    rng = np.random.default_rng(2)
    cfg = SmootherConfig(learn_beta=True)
    smoother = OnlineSmoother(cfg)
    for t in range(12):
        smoother.step(series_field(float(rng.normal(0, 3)), t))
        assert 0.0 <= smoother.buffer.kernels.beta <= cfg.beta_max


def test_smoothing_removes_jitter():
    """Smooth path plus alternating jitter: high band cut by 80%, low-band share up by 0.25"""
    traj = gen_trajectory(SynthConfig(smooth_amplitude=(3.0, 0.0), smooth_cycles=2,
                                      jitter_amplitude=2.0, seed=0), 120)
    raw = traj.total[:, 0]
    smoothed = _run_series(raw, SmootherConfig(window=7))

    assert _top_quartile_energy(smoothed) <= 0.2 * _top_quartile_energy(raw)
    assert channel_stability(smoothed) >= channel_stability(raw) + 0.25


def test_smoothing_step_response():
    """Under the default blend weight a step is held near the old level: no overshoot, no dip"""
    raw = np.where(np.arange(40) < 10, 0.0, 1.0)
    smoothed = _run_series(raw, SmootherConfig())
    assert np.all(smoothed <= 1.05)
    assert np.all(smoothed >= -1e-9)
    assert np.allclose(smoothed[:10], 0.0)


def test_fixed_tap_step_response_settles_within_window():
    """With one unit tap and blend weight 1 the step is reached monotonically within L frames"""
    raw = np.where(np.arange(30) < 10, 0.0, 1.0)
    buf = TrajectoryBuffer(ORACLE_GRID, 7)
    rest_x = ORACLE_GRID.rest()[0, 0, 0]
    out = []
    for t, x in enumerate(raw):
        append_and_integrate(buf, series_field(0.0 if t == 0 else x - raw[t - 1], t))
        s_t = smooth_step(buf, _taps(1, 0, 0), 1.0)
        buf.smoothed.append(s_t)
        out.append(s_t[0, 0, 0] - rest_x)
    out = np.array(out)

    assert np.allclose(out[:10], 0.0)
    assert np.all(np.diff(out[10:]) >= 0.0)
    assert np.all(out <= 1.0 + 1e-12)
    assert abs(out[10 + 6] - 1.0) <= 0.01


def test_smoother_is_causal():
    """Changing later motion leaves earlier smoothed states bit-identical"""
    rng = np.random.default_rng(11)
    deltas = rng.normal(0, 2, 30)
    altered = deltas.copy()
    altered[20:] = rng.normal(0, 5, 10)

    def run(ds):
        smoother = OnlineSmoother(SmootherConfig())
        return [smoother.step(series_field(float(d), t))[0].copy() for t, d in enumerate(ds)]

    a, b, c = run(deltas), run(altered), run(deltas)
    for t in range(20):
        assert np.array_equal(a[t], b[t])
    for t in range(30):
        assert np.array_equal(a[t], c[t])


def test_zero_motion_stream():
    spec = GridSpec(4, 4, 60, 60)
    smoother = OnlineSmoother(SmootherConfig())
    for t in range(10):
        s_t, o_t = smoother.step(GridMotionField.zeros(spec, t))
        assert np.allclose(s_t, spec.rest())
        assert np.allclose(o_t, spec.rest())


@pytest.mark.parametrize("window", [5, 7, 9])
def test_window_lengths_and_per_vertex_scope(window):
    rng = np.random.default_rng(window)
    spec = GridSpec(3, 3, 48, 48)
    cfg = SmootherConfig(window=window, kernel_scope="per_vertex", kernel_iters=5)
    smoother = OnlineSmoother(cfg)
    for t in range(12):
        s_t, _ = smoother.step(GridMotionField(spec, rng.normal(0, 1, (3, 3, 2)), t))
        assert np.all(np.isfinite(s_t))
    assert smoother.buffer.kernels.taps_x.shape == (3, 3, 3)
    assert len(smoother.buffer.smoothed) == window


def test_clamp_compensation():
    spec = GridSpec(2, 2, 100, 50)
    o_t = spec.rest()
    s_t = o_t + np.array([[[10.0, -2.0], [0.0, 0.0]], [[-9.0, 6.0], [3.0, 3.0]]])
    clamped = clamp_compensation(s_t, o_t, spec, 0.1)
    assert np.allclose(clamped - o_t, [[[5.0, -2.0], [0.0, 0.0]], [[-5.0, 5.0], [3.0, 3.0]]])
    assert clamp_compensation(s_t, o_t, spec, None) is s_t


def test_default_config_runs_every_loss():
    """The default profile enables the frequency loss; smoothing a jittered stream stays finite"""
    cfg = SmootherConfig()
    assert cfg.max_compensation is None
    rng = np.random.default_rng(5)
    buf = TrajectoryBuffer(ORACLE_GRID, cfg.window)
    for t in range(12):
        s_t, o_t = smooth_frame(buf, series_field(float(rng.normal(0, 2)), t), None, cfg)
        assert np.all(np.isfinite(s_t))
        # no clamp by default: the rendered state is the recursion state
        assert np.array_equal(s_t, buf.smoothed[-1])
        assert np.all(buf.kernels.params() >= cfg.tap_floor)
        assert np.all(buf.kernels.params() <= cfg.tap_bound)
    history = buf.history()
    value = loss_freq(history[0], history[1:], buf.rest, cfg)
    assert np.isfinite(value) and value >= 0.0


def test_clamp_applies_to_output_only():
    """A clamped frame is rendered inside the margin while the history keeps the free state"""
    cfg = SmootherConfig(kernel_iters=0, max_compensation=0.1)
    buf = TrajectoryBuffer(ORACLE_GRID, cfg.window)
    buf.kernels = _taps(1, 0, 0)
    margin = 0.1 * 64
    smooth_frame(buf, series_field(0.0, 0), None, cfg)
    s_t, o_t = smooth_frame(buf, series_field(40.0, 1), None, cfg)

    free = buf.smoothed[-1]
    assert np.allclose(free - o_t, -40.0 * 100.0 / 101.0 * np.array([1.0, 0.0]))
    assert np.allclose(s_t - o_t, [-margin, 0.0])
    assert not np.array_equal(s_t, free)

    # the next frame blends against the unclamped state
    s_next, o_next = smooth_frame(buf, series_field(0.0, 2), None, cfg)
    expected = (o_next + 100.0 * free) / 101.0
    assert np.allclose(buf.smoothed[-1], expected)
    assert np.allclose(s_next - o_next, [-margin, 0.0])


def test_solver_close_to_tap_lattice_oracle():
    """On 20 jittered series the solver's objective is within 10% of exhaustive lattice search"""
    cfg = SmootherConfig()
    for seed in range(20):
        traj = gen_trajectory(SynthConfig(smooth_amplitude=(2.0 + seed % 3, 0.0),
                                          jitter_amplitude=1.0 + 0.1 * seed, seed=seed), 24)
        raw = traj.total[:, 0]
        buf = TrajectoryBuffer(ORACLE_GRID, cfg.window)
        solver_total, oracle_total = 0.0, 0.0
        for t, x in enumerate(raw):
            append_and_integrate(buf, series_field(0.0 if t == 0 else x - raw[t - 1], t))
            kernels = solve_kernels(buf, None, cfg)
            if buf.smoothed:
                value, _, _ = evaluate_taps(kernels.params()[None], buf, None, cfg, kernels.beta)
                _, best = oracle_kernels(buf, None, cfg)
                solver_total += float(value[0])
                oracle_total += best
            buf.smoothed.append(smooth_step(buf, kernels, cfg.lambda_blend))
            buf.kernels = kernels
        assert solver_total <= 1.1 * oracle_total + 1e-9


def test_oracle_smooth_constant_series():
    """Constant input is reproduced and the objective sits at the loss floors"""
    smoothed, objective = oracle_smooth(np.full(12, 5.0))
    assert np.allclose(smoothed, 5.0)
    cfg = SmootherConfig()
    alphas = time_weights(3, 2.0)
    floor = (cfg.lambda_time * EPS * (alphas[0] + alphas[1] / 4 + alphas[2] / 9)
             + cfg.lambda_spatial * 48 * EPS)
    assert np.allclose(objective[6:], floor, rtol=1e-6)


def test_oracle_smooth_window_overrides_config():
    """An explicit window wins over the window carried by cfg"""
    _, objective = oracle_smooth(np.full(12, 5.0), window=5, cfg=SmootherConfig(window=9))
    cfg = SmootherConfig(window=5)
    alphas = time_weights(2, 2.0)
    floor = (cfg.lambda_time * EPS * (alphas[0] + alphas[1] / 4)
             + cfg.lambda_spatial * 48 * EPS)
    assert np.allclose(objective[6:], floor, rtol=1e-6)
