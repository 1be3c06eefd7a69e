"""Shared fixtures: the benchmark scene and ground truth used throughout."""

import numpy as np
import pytest

from ticksync import GroundTruth, NoiseConfig, PositionPrior, SceneConfig


@pytest.fixture
def scene() -> SceneConfig:
    """Square benchmark layout: master and three transceivers at the corners."""
    return SceneConfig(
        x_m=[1.0, 1.0], x_1=[11.0, 11.0], x_2=[1.0, 11.0], x_3=[11.0, 1.0],
        M=100, N=101, delta_0=100.0,
    )


@pytest.fixture
def master_only_scene() -> SceneConfig:
    return SceneConfig(x_m=[1.0, 1.0], M=100, N=101)


@pytest.fixture
def truth(scene) -> GroundTruth:
    """Node at [9, 8] with a 5 ns tick offset and 50 ns periods."""
    return GroundTruth.from_delta1(5.0, 50.0, 50.0, [9.0, 8.0], scene)


@pytest.fixture
def noise() -> NoiseConfig:
    return NoiseConfig(sigma_nominal=2.0)


@pytest.fixture
def prior() -> PositionPrior:
    return PositionPrior.isotropic([9.0, 8.0], 0.2)


def random_scene_and_truth(rng: np.random.Generator):
    """A random valid transceiver scene plus consistent ground truth."""
    span = rng.uniform(8.0, 20.0)
    corners = np.array([[0.0, 0.0], [span, span], [0.0, span], [span, 0.0]])
    jitter = rng.uniform(-0.15 * span, 0.15 * span, size=(4, 2))
    pts = corners + jitter
    t_m = rng.uniform(30.0, 70.0)
    m = int(rng.integers(60, 140))
    n = int(rng.integers(m + 1, m + 10))
    t_u = t_m * m / n * rng.uniform(1.0, 1.02)
    if n * t_u < m * t_m:
        t_u = m * t_m / n
    scene = SceneConfig(
        x_m=pts[0], x_1=pts[1], x_2=pts[2], x_3=pts[3], M=m, N=n,
        delta_0=rng.uniform(7.0 * span, 8.0 * span),  # above any flight time
    )
    position = rng.uniform(0.1 * span, 0.9 * span, size=2)
    delta_1 = rng.uniform(0.0, 0.9 * t_u)
    truth = GroundTruth.from_delta1(delta_1, t_u, t_m, position, scene)
    return scene, truth
