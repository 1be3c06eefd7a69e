"""Simulator checks against the tick-trace oracle and noise statistics."""

import numpy as np
import pytest

from ticksync import (
    EpochMode,
    GroundTruth,
    InvalidTruthError,
    ModelViolationError,
    NoiseConfig,
    SceneConfig,
    ScheduleViolationError,
    derive_rng,
    make_noise_schedule,
    noise_free_trace,
    simulate_campaign,
    simulate_epoch,
)
from ticksync.model import SPEED_OF_LIGHT_M_PER_NS

from conftest import random_scene_and_truth


def _rng(seed=0):
    return np.random.default_rng(seed)


def test_noise_free_first_epoch_offset(truth, scene):
    meas = simulate_epoch(truth, scene, EpochMode.WITH_TRANSCEIVERS, 1, 0.0, _rng())
    assert meas.y[0] == pytest.approx(5.0, abs=1e-9)


def test_noise_free_cycle_counts(truth, scene):
    for k in (1, 4, 250):
        meas = simulate_epoch(truth, scene, EpochMode.MASTER_ONLY, k, 0.0, _rng())
        assert meas.y[1] == pytest.approx(101 * 50.0)
        assert meas.y[2] == pytest.approx(100 * 50.0)


def test_noise_free_offset_recursion(truth, scene):
    """The signal-to-tick interval grows by N T_u - M T_m per epoch."""
    meas2 = simulate_epoch(truth, scene, EpochMode.WITH_TRANSCEIVERS, 2, 0.0, _rng())
    assert meas2.y[0] == pytest.approx(5.0 + (5050.0 - 5000.0), abs=1e-9)
    y_prev = None
    for k in range(1, 30):
        y = simulate_epoch(truth, scene, EpochMode.MASTER_ONLY, k, 0.0, _rng()).y[0]
        if y_prev is not None:
            assert y - y_prev == pytest.approx(50.0, abs=1e-9)
        y_prev = y


def test_campaign_determinism(truth, scene, noise):
    a = simulate_campaign(truth, scene, noise, EpochMode.WITH_TRANSCEIVERS, 3, seed=7)
    b = simulate_campaign(truth, scene, noise, EpochMode.WITH_TRANSCEIVERS, 3, seed=7)
    for ma, mb in zip(a, b):
        assert ma.y.tobytes() == mb.y.tobytes()


def test_campaign_epoch_data_independent_of_length(truth, scene, noise):
    short = simulate_campaign(truth, scene, noise, EpochMode.WITH_TRANSCEIVERS, 3, seed=7)
    long = simulate_campaign(truth, scene, noise, EpochMode.WITH_TRANSCEIVERS, 10, seed=7)
    for ma, mb in zip(short, long):
        assert np.array_equal(ma.y, mb.y)


def test_empirical_noise_covariance(truth, scene):
    """Sample covariance of 10^4 epochs converges to sigma^2 Q entrywise."""
    sigma = 2.0
    noise = NoiseConfig(sigma_nominal=sigma)
    stream = simulate_campaign(
        truth, scene, noise, EpochMode.WITH_TRANSCEIVERS, 10_000, seed=123
    )
    ys = np.stack([m.y for m in stream])
    # remove the deterministic k-dependence of the first component
    ys[:, 0] -= 50.0 * np.arange(10_000)
    sample_cov = np.cov(ys.T)
    from ticksync.model import noise_shape_template

    expected = sigma**2 * noise_shape_template(0.1)
    mask = expected != 0
    rel = np.abs(sample_cov[mask] - expected[mask]) / np.abs(expected[mask])
    assert rel.max() < 0.05
    # the y_m / y_1 block called out explicitly
    assert np.abs(sample_cov[2:4, 2:4] - expected[2:4, 2:4]).max() < 0.05 * 8.0


def test_outlier_fraction(truth, scene):
    noise = NoiseConfig(sigma_nominal=2.0, outlier_prob=0.1, outlier_factor=5.0)
    sigmas = make_noise_schedule(noise, 10_000, _rng(5))
    frac = np.mean(sigmas > 2.0)
    assert frac == pytest.approx(0.1, abs=0.02)


def test_noise_schedule_edge_cases():
    base = NoiseConfig(sigma_nominal=2.0)
    assert np.array_equal(make_noise_schedule(base, 4, _rng()), [2, 2, 2, 2])
    p0 = NoiseConfig(sigma_nominal=2.0, outlier_prob=0.0, outlier_factor=9.0)
    assert np.array_equal(make_noise_schedule(p0, 6, _rng()), np.full(6, 2.0))
    p1 = NoiseConfig(sigma_nominal=2.0, outlier_prob=1.0, outlier_factor=5.0)
    assert np.array_equal(make_noise_schedule(p1, 6, _rng()), np.full(6, 10.0))


def test_trace_collinear_toy():
    """Node one light-ns from the master: first interval is phi_u - 1."""
    scene = SceneConfig(x_m=[0.0, 0.0], M=100, N=101)
    truth = GroundTruth.from_delta1(
        5.0, 50.0, 50.0, [SPEED_OF_LIGHT_M_PER_NS, 0.0], scene
    )
    trace = noise_free_trace(truth, scene, 1)
    y = trace.intervals(1, EpochMode.MASTER_ONLY)
    assert y[0] == pytest.approx(truth.clock.phi_u - 1.0, abs=1e-12)


def test_trace_matches_model_prediction(truth, scene):
    """Trace intervals equal the closed-form model to 1e-9 relative."""
    trace = noise_free_trace(truth, scene, 5)
    for k in range(1, 6):
        for mode in EpochMode:
            predicted = simulate_epoch(truth, scene, mode, k, 0.0, _rng()).y
            read = trace.intervals(k, mode)
            assert np.abs(read - predicted).max() <= 1e-9 * np.abs(predicted).max()


def test_trace_oracle_equivalence_random_scenes():
    """50 random scenes: trace and closed-form agree to 1e-6 ns up to k=100."""
    rng = np.random.default_rng(2024)
    for _ in range(50):
        scene, truth = random_scene_and_truth(rng)
        trace = noise_free_trace(truth, scene, 100)
        for k in (1, 3, 37, 100):
            y_model = simulate_epoch(
                truth, scene, EpochMode.WITH_TRANSCEIVERS, k, 0.0, _rng()
            ).y
            assert np.abs(trace.intervals(k, EpochMode.WITH_TRANSCEIVERS) - y_model).max() < 1e-6


def test_schedule_violation(truth):
    tight = SceneConfig(
        x_m=[1.0, 1.0], x_1=[11.0, 11.0], x_2=[1.0, 11.0], x_3=[11.0, 1.0],
        M=100, N=101, delta_0=10.0,  # smaller than the worst flight time
    )
    truth2 = GroundTruth.from_delta1(5.0, 50.0, 50.0, [9.0, 8.0], tight)
    with pytest.raises(ScheduleViolationError):
        noise_free_trace(truth2, tight, 1)


def test_model_violation():
    scene = SceneConfig(x_m=[1.0, 1.0], M=101, N=100)  # N T_u < M T_m
    truth = GroundTruth.from_delta1(5.0, 50.0, 50.0, [9.0, 8.0], scene)
    with pytest.raises(ModelViolationError):
        simulate_epoch(truth, scene, EpochMode.MASTER_ONLY, 1, 1.0, _rng())


def test_invalid_truth(scene):
    with pytest.raises(InvalidTruthError):
        GroundTruth.from_delta1(51.0, 50.0, 50.0, [9.0, 8.0], scene)
    with pytest.raises(InvalidTruthError):
        GroundTruth.from_delta1(-0.5, 50.0, 50.0, [9.0, 8.0], scene)
    # phi_u smaller than the flight time makes delta_1 negative
    from ticksync import ClockParams

    with pytest.raises(InvalidTruthError):
        GroundTruth.from_clock(
            ClockParams(phi_u=1.0, T_u=50.0, T_m=50.0), [9.0, 8.0], scene
        )


def test_sigma_validation(truth, scene):
    with pytest.raises(ValueError):
        simulate_epoch(truth, scene, EpochMode.MASTER_ONLY, 1, -1.0, _rng())


def test_derive_rng_streams_are_stable():
    a = derive_rng(9, 1, 4).standard_normal(3)
    b = derive_rng(9, 1, 4).standard_normal(3)
    c = derive_rng(9, 1, 5).standard_normal(3)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
