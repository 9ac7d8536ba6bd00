import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gstcn.harness import (
    REGIMES,
    ScenarioConfig,
    cv_filter,
    cv_predict,
    dense_scene,
    generate_scenario,
    synthetic_dataset,
)


def test_single_vehicle_keep_lane_is_constant_velocity():
    cfg = ScenarioConfig(lanes=1, vehicles=1, duration=20.0, maneuver_mix=(1.0, 0.0, 0.0), noise_std=0.0)
    (track,) = generate_scenario(cfg)
    np.testing.assert_allclose(np.diff(track.y, 2), 0.0, atol=1e-9)
    np.testing.assert_array_equal(track.x, track.x[0])
    assert np.all(track.lanes == 1)


def test_follower_never_closer_than_min_gap():
    for seed in range(5):
        cfg = ScenarioConfig(lanes=1, vehicles=2, duration=60.0, maneuver_mix=(0.5, 0.0, 0.5), noise_std=0.0,
                             road_length=20.0, seed=seed)
        lead, follow = generate_scenario(cfg)
        assert np.all(lead.y - follow.y >= cfg.min_gap - 1e-9)


def test_same_seed_same_tracks():
    a = generate_scenario(ScenarioConfig(seed=4, duration=10.0))
    b = generate_scenario(ScenarioConfig(seed=4, duration=10.0))
    for ta, tb in zip(a, b):
        np.testing.assert_array_equal(ta.y, tb.y)
        np.testing.assert_array_equal(ta.x, tb.x)


def test_infeasible_density_raises():
    with pytest.raises(ValueError, match="infeasible"):
        generate_scenario(ScenarioConfig(lanes=1, vehicles=10, road_length=20.0))


def test_config_validation_and_json():
    with pytest.raises(ValueError):
        ScenarioConfig(maneuver_mix=(0.5, 0.5, 0.5))
    with pytest.raises(ValueError):
        ScenarioConfig(regime="gridlock")
    cfg = ScenarioConfig(seed=3, maneuver_mix=(0.2, 0.3, 0.5))
    assert ScenarioConfig.from_dict(json.loads(cfg.to_json())) == cfg


@pytest.mark.parametrize("regime", sorted(REGIMES))
def test_tracks_are_physically_bounded(regime):
    cfg = ScenarioConfig(regime=regime, duration=30.0, noise_std=0.0, seed=7, maneuver_mix=(0.3, 0.5, 0.2))
    for tr in generate_scenario(cfg):
        speed = np.abs(np.diff(tr.y)) * cfg.rate_hz
        assert speed.max() <= cfg.max_speed + 1e-9
        assert tr.lanes.min() >= 1 and tr.lanes.max() <= cfg.lanes


# constant-velocity Kalman baseline

def test_noiseless_constant_velocity_is_predicted_exactly():
    t = np.arange(15) * 0.2
    past = np.stack([1.0 + 0.3 * t, -4.0 + 20.0 * t])
    pred = cv_predict(past, 25)
    tf = (15 + np.arange(25)) * 0.2
    np.testing.assert_allclose(pred, np.stack([1.0 + 0.3 * tf, -4.0 + 20.0 * tf]), atol=1e-9)


def test_stationary_vehicle_stays_put():
    pred = cv_predict(np.tile([[2.0], [5.0]], (1, 15)), 25)
    np.testing.assert_allclose(pred, np.tile([[2.0], [5.0]], (1, 25)), atol=1e-12)


def test_constant_acceleration_bias_matches_kinematics():
    # A constant-velocity forecast from position p and velocity v misses y = a t^2 / 2
    # by a (k dt)^2 / 2 + (a t_T - v) k dt, so the error's second difference is a dt^2.
    a, dt = 2.0, 0.2
    t = np.arange(15) * dt
    past = np.stack([np.zeros(15), 0.5 * a * t**2])
    pred = cv_predict(past, 25, accel_std=1e4, meas_std=1e-6)
    tf = t[-1] + np.arange(0, 26) * dt
    err = 0.5 * a * tf**2 - np.concatenate([[past[1, -1]], pred[1]])
    np.testing.assert_allclose(np.diff(err, 2), a * dt * dt, rtol=1e-6)
    assert abs(err[0]) < 1e-9
    assert abs(err[1] - err[0] - 0.5 * a * dt * dt) <= a * dt * dt
    assert np.all(np.diff(err[1:]) > 0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000), st.floats(-500, 500), st.floats(-500, 500))
def test_cv_is_translation_equivariant(seed, dx, dy):
    past = np.random.default_rng(seed).standard_normal((2, 15)).cumsum(axis=1)
    shift = np.array([[dx], [dy]])
    np.testing.assert_allclose(cv_predict(past + shift, 25), cv_predict(past, 25) + shift, atol=1e-7)


def test_filter_covariance_stays_symmetric_psd():
    past = np.random.default_rng(0).standard_normal((2, 15)).cumsum(axis=1)
    cov = cv_filter(past).covariance
    np.testing.assert_allclose(cov, cov.T)
    assert np.linalg.eigvalsh(cov).min() >= -1e-12


# datasets

def test_synthetic_dataset_is_deterministic_and_valid():
    a = synthetic_dataset(n_segments=20, seed=2)
    b = synthetic_dataset(n_segments=20, seed=2)
    assert len(a) == 20
    for s, t in zip(a, b):
        s.validate()
        np.testing.assert_array_equal(s.past, t.past)
    with pytest.raises(ValueError):
        synthetic_dataset(n_segments=0)


def test_dense_scene_layout():
    s = dense_scene(120, seed=1)
    s.validate()
    assert s.num_vehicles == 120
    np.testing.assert_array_equal(s.past[:, -1, 0], 0.0)
    assert np.all(np.abs(s.past[1, -1]) <= 101.0)
