import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from anisoplan import pipeline
from anisoplan.kinosearch import plan
from anisoplan.obvp import State
from anisoplan.trajopt import MotionLimits, PolyTrajectory, optimize
from anisoplan.tracksim import (
    TRACE_HEADER,
    ClosedLoop,
    NoiseSpec,
    SafetyLimits,
    SimTrace,
    Tracker,
    TrackerConfig,
    reference_window,
    shooting_matrices,
    simulate,
    step_state,
)
from oracles import central_gradient, rel_error


def const_traj(p, v, T):
    c = np.zeros((1, 3, 6))
    c[0, :, 0] = p
    c[0, :, 1] = v
    return PolyTrajectory.from_durations(c, [T])


def rest_to_rest(d, T):
    """Quintic with zero velocity and acceleration at both ends."""
    c = np.zeros((1, 3, 6))
    for a in range(3):
        c[0, a, 3:] = d[a] * np.array([10.0, -15.0, 6.0]) / T ** np.array([3, 4, 5])
    return PolyTrajectory.from_durations(c, [T])


# --- model ----------------------------------------------------------------------------

def test_h_s_example():
    s = SafetyLimits()
    assert s.h_s([1.5, 0.0, 3.0]) == pytest.approx(2.25 + 2.25 - 2.5)
    # frame invariant: only the planar speed magnitude enters
    assert s.h_s([0.0, 1.5, 3.0]) == pytest.approx(s.h_s([1.5 / math.sqrt(2), 1.5 / math.sqrt(2), 3.0]))


@given(st.lists(st.floats(-2, 2), min_size=6, max_size=6), st.lists(st.floats(-2, 2), min_size=3, max_size=3))
def test_shooting_matrices_match_stepping(x0, u0):
    dt, H = 0.1, 5
    Phi, G = shooting_matrices(dt, H)
    rng = np.random.default_rng(0)
    U = np.concatenate([u0, rng.normal(size=3 * (H - 1))])
    x = np.array(x0)
    rows = []
    for k in range(H):
        x = step_state(x, U[3 * k: 3 * k + 3], dt)
        rows.append(x)
    np.testing.assert_allclose(Phi @ np.array(x0) + G @ U, np.concatenate(rows), atol=1e-12)


def test_config_validation():
    with pytest.raises(ValueError):
        TrackerConfig(horizon=1)
    with pytest.raises(ValueError):
        TrackerConfig(dt=0.0)
    with pytest.raises(ValueError):
        TrackerConfig(Q=(1.0,) * 5)
    with pytest.raises(ValueError):
        SafetyLimits(h_th=0.0)


# --- tracker objective ---------------------------------------------------------------------

def test_objective_gradient_matches_finite_differences():
    rng = np.random.default_rng(3)
    tracker = Tracker(TrackerConfig(safety_weight=50.0))
    H = tracker.config.horizon
    worst = 0.0
    for _ in range(20):
        x0 = rng.normal(0, 1.0, 6)
        x_ref = rng.normal(0, 1.5, (H, 6))
        u_ref = rng.normal(0, 1.0, (H, 3))
        U = rng.normal(0, 1.0, 3 * H)
        _, grad = tracker.objective(U, x0, x_ref, u_ref)
        fd = central_gradient(lambda v: tracker.objective(v, x0, x_ref, u_ref)[0], U)
        worst = max(worst, rel_error(grad, fd))
    assert worst <= 1e-5


def test_zero_error_fixed_point():
    cfg = TrackerConfig()
    tracker = Tracker(cfg)
    v = np.array([0.5, -0.2, 0.3])
    x0 = np.concatenate([[1.0, 2.0, 0.1], v])
    ts = cfg.dt * np.arange(1, cfg.horizon + 1)[:, None]
    x_ref = np.hstack([x0[:3] + v * ts, np.tile(v, (cfg.horizon, 1))])
    u, degraded = tracker.track_step(x0, x_ref, np.zeros((cfg.horizon, 3)))
    assert not degraded
    assert np.linalg.norm(u) <= 1e-6


def test_window_shape_checked():
    tracker = Tracker()
    with pytest.raises(ValueError):
        tracker.track_step(np.zeros(6), np.zeros((3, 6)), np.zeros((3, 3)))
    with pytest.raises(ValueError):
        tracker.track_step(np.full(6, np.nan), np.zeros((10, 6)), np.zeros((10, 3)))


def test_reference_window_holds_final_pose():
    traj = const_traj([0, 0, 0], [1.0, 0, 0], 1.0)
    x_ref, u_ref = reference_window(traj, 0.8, 0.1, 5)
    np.testing.assert_allclose(x_ref[:, 0], [0.9, 1.0, 1.0, 1.0, 1.0])
    np.testing.assert_allclose(x_ref[2:, 3:], 0.0)
    np.testing.assert_allclose(u_ref[:, 0], [0.0, 0.0, -10.0, 0.0, 0.0])


# --- closed loop ----------------------------------------------------------------------------

def test_static_reference_converges_monotonically():
    loop = ClosedLoop(np.array([1.5, 0.7, 0.2, 0.0, 0.0, 0.0]))
    loop.advance(const_traj([1.0, 1.0, 0.0], [0.0, 0.0, 0.0], 6.0), 0.0, 60)
    tr = loop.trace()
    err = np.linalg.norm(tr.state[:, :3] - tr.ref[:, :3], axis=1)
    assert err[0] == pytest.approx(math.sqrt(0.25 + 0.09 + 0.04))
    tail = err[5:]
    assert np.all(np.diff(tail) <= 1e-12)
    assert err[-1] < 1e-3


def test_safety_penalty_caps_h_s():
    # reference asks for v = 1.5 and w = 3 at once: h_s = 2.25 + 2.25 - 2.5 = 2 > 0
    traj = const_traj([0, 0, 0], [1.5, 0, 3.0], 5.0)
    loop = ClosedLoop(np.zeros(6))
    loop.advance(traj, 0.0, 50)
    tr = loop.trace()
    assert tr.max_h_s <= 0.01
    assert tr.rms_planar_error > 0.5  # tracking is sacrificed instead


def test_safety_weight_ladder_is_monotone():
    traj = const_traj([0, 0, 0], [1.5, 0, 3.0], 5.0)
    peaks = []
    for w in (0.0, 1e1, 1e2, 1e3, 1e4, 1e5):
        loop = ClosedLoop(np.zeros(6), TrackerConfig(safety_weight=w))
        loop.advance(traj, 0.0, 50)
        peaks.append(loop.trace().max_h_s)
    assert all(b <= a for a, b in zip(peaks, peaks[1:]))


def test_receding_horizon_consistency():
    tr = simulate(rest_to_rest([2.0, 1.0, 0.8], 5.0), settle=1.0)
    assert np.max(np.abs(tr.state - tr.ref)) <= 1e-3
    assert tr.degraded_steps == 0


@settings(max_examples=10)
@given(st.integers(0, 1000), st.floats(0.5, 6.0))
def test_inputs_respect_bounds(seed, sigma):
    cfg = TrackerConfig()
    noise = NoiseSpec(sigma=sigma, sigma_yaw=1.0, seed=seed, speed_scaled=False)
    tr = simulate(const_traj([0, 0, 0], [1.0, 0.5, 1.0], 3.0), cfg, noise)
    assert np.all(np.abs(tr.u) <= np.asarray(cfg.a_max))


def test_seeded_noise_is_reproducible():
    traj = rest_to_rest([2.0, 1.0, 0.8], 4.0)
    noise = NoiseSpec(sigma=2.0, sigma_yaw=0.5, correlation=0.3, seed=11)
    a = simulate(traj, noise=noise)
    b = simulate(traj, noise=noise)
    assert a.to_csv() == b.to_csv()
    c = simulate(traj, noise=dataclasses.replace(noise, seed=12))
    assert a.to_csv() != c.to_csv()


def test_noise_follows_reference_body_axes():
    lim = MotionLimits()
    draw = NoiseSpec(sigma=1.0, seed=0).sampler(lim, 0.1)
    # moving straight ahead along the body x axis: no lateral excitation
    for yaw in (0.0, 0.7, -2.0):
        w = draw(np.array([math.cos(yaw), math.sin(yaw), 0.0]), yaw)
        body_y = -math.sin(yaw) * w[0] + math.cos(yaw) * w[1]
        assert abs(body_y) < 1e-12
    assert np.all(draw(np.zeros(3), 0.3) == 0.0)
    assert np.all(NoiseSpec().sampler(lim, 0.1)(np.ones(3), 0.0) == 0.0)


def test_lateral_noise_gain():
    lim = MotionLimits()
    draws = NoiseSpec(sigma=1.0, speed_scaled=False, seed=1).sampler(lim, 0.1)
    w = np.array([draws(np.zeros(3), 0.0) for _ in range(4000)])
    ratio = w[:, 1].std() / w[:, 0].std()
    assert ratio == pytest.approx(lim.v_mx / lim.v_my, rel=0.08)


def test_trace_csv_and_invariants():
    tr = simulate(rest_to_rest([1.0, 0.0, 0.0], 1.0))
    lines = tr.to_csv().splitlines()
    assert tuple(lines[0].split(",")) == TRACE_HEADER
    assert len(lines) == tr.t.size + 1
    assert np.allclose(np.diff(tr.t), tr.dt)
    with pytest.raises(ValueError):
        SimTrace(0.1, np.zeros(3), np.zeros((3, 6)), np.zeros((2, 6)), np.zeros((3, 3)), np.zeros(3), 2.5)


def test_unsafe_flag_threshold():
    t = np.arange(3) * 0.1
    z = np.zeros((3, 6))
    def trace(h):
        return SimTrace(0.1, t, z, z, np.zeros((3, 3)), np.array(h), 2.5, 0.2)
    assert not trace([-1.0, 0.5, 0.0]).unsafe
    assert trace([-1.0, 0.51, 0.0]).unsafe


# --- doorway ---------------------------------------------------------------------------------

@pytest.fixture(scope="module")
def doorway_traj(doorway):
    scenario, grid, field = doorway
    coarse = plan(grid, field, State(scenario.start), scenario.goals[0], scenario.search_config())
    return optimize(coarse, field, scenario.opt).trajectory


def test_zero_noise_tracking_error(doorway, doorway_traj):
    scenario = doorway[0]
    tr = simulate(doorway_traj, scenario.tracker, NoiseSpec(), scenario.opt.limits)
    assert tr.rms_planar_error <= 0.05
    assert not tr.unsafe


def test_yaw_ignorant_plan_flagged_under_same_noise(doorway):
    scenario = doorway[0]
    yaw = pipeline.run(scenario.with_overrides(mode="NO-T", seed=0))
    frozen = pipeline.run(scenario.with_overrides(mode="NOY-T", seed=0))
    assert not yaw.metrics.unsafe
    assert frozen.metrics.unsafe
