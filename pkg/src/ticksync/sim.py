"""Synthetic measurement generation and a tick-level event-time oracle.

`simulate_epoch` draws interval vectors from the closed-form mean model with
correlated Gaussian noise. `noise_free_trace` builds the actual event
timeline (master ticks, node ticks, relay transmissions, receptions) and
reads the intervals off it, serving as an independent cross-check of the
closed-form model.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .model import (
    DEFAULT_ALPHA,
    ClockParams,
    EpochMode,
    NoiseConfig,
    SceneConfig,
    build_system_matrices,
    noise_shape_template,
    range_term,
    selection_matrix,
)


class ModelViolationError(ValueError):
    """N T_u < M T_m: the node's observation window misses epoch boundaries."""


class InvalidTruthError(ValueError):
    """Ground truth inconsistent with its scene (delta_1 out of [0, T_u))."""


class ScheduleViolationError(ValueError):
    """Relay delay or geometry lets scheduled signals overlap."""


# Sub-stream labels hung off the root seed, so that epoch k's noise draw
# never depends on how many epochs a campaign generates.
_STREAM_SCHEDULE = 0
_STREAM_EPOCH = 1


def derive_seed(base: int | np.random.SeedSequence, *key: int) -> np.random.SeedSequence:
    """Child seed identified by an integer path below a root seed."""
    if isinstance(base, np.random.SeedSequence):
        return np.random.SeedSequence(
            entropy=base.entropy, spawn_key=tuple(base.spawn_key) + key
        )
    return np.random.SeedSequence(entropy=base, spawn_key=key)


def derive_rng(base: int | np.random.SeedSequence, *key: int) -> np.random.Generator:
    return np.random.default_rng(derive_seed(base, *key))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    """True clock parameters and node position, with the derived delta_1.

    delta_1 is the interval between the first received master signal and the
    node's next tick; it ties phi_u to the master range:
    delta_1 = phi_u - ||x - x_m|| / prop_speed, and must lie in [0, T_u).
    """

    clock: ClockParams
    position: np.ndarray
    delta_1: float

    @classmethod
    def from_clock(cls, clock: ClockParams, position, scene: SceneConfig) -> "GroundTruth":
        position = np.asarray(position, dtype=float)
        tof = np.linalg.norm(position - scene.x_m) / scene.prop_speed
        delta_1 = clock.phi_u - tof
        _check_delta1(delta_1, clock.T_u)
        return cls(clock=clock, position=position, delta_1=delta_1)

    @classmethod
    def from_delta1(
        cls, delta_1: float, T_u: float, T_m: float, position, scene: SceneConfig
    ) -> "GroundTruth":
        """Build truth from the offset-to-next-tick, deriving phi_u."""
        position = np.asarray(position, dtype=float)
        _check_delta1(delta_1, T_u)
        tof = np.linalg.norm(position - scene.x_m) / scene.prop_speed
        clock = ClockParams(phi_u=delta_1 + tof, T_u=T_u, T_m=T_m)
        return cls(clock=clock, position=position, delta_1=delta_1)

    def theta(self) -> np.ndarray:
        """Full parameter vector [phi_u, T_u, T_m, x]."""
        return np.concatenate([self.clock.as_array(), self.position])


def _check_delta1(delta_1: float, T_u: float) -> None:
    if not (0.0 <= delta_1 < T_u):
        raise InvalidTruthError(
            f"delta_1 = {delta_1} ns must lie in [0, T_u = {T_u} ns)"
        )


@dataclass(frozen=True, eq=False)
class EpochMeasurement:
    """One epoch's observed interval vector."""

    k: int
    mode: EpochMode
    y: np.ndarray
    sigma_true: float


@dataclass(frozen=True, eq=False)
class TickTrace:
    """Explicit event times (ns) for K epochs, plus one extra master signal.

    master_ticks[n] = n * T_m; node_ticks[n] = phi_u + n * T_u;
    reception_times[k-1, j] = arrival at the node of epoch k's j-th
    scheduled signal (master, then the relays when present).
    """

    master_ticks: np.ndarray
    node_ticks: np.ndarray
    reception_times: np.ndarray
    M: int
    N: int

    @property
    def epochs(self) -> int:
        return self.reception_times.shape[0] - 1

    def intervals(self, k: int, mode: EpochMode) -> np.ndarray:
        """Read epoch k's interval vector off the recorded event times."""
        if not 1 <= k <= self.epochs:
            raise ValueError(f"epoch {k} outside traced range 1..{self.epochs}")
        arrivals = self.reception_times[k - 1]
        y_phi = self.node_ticks[(k - 1) * self.N] - arrivals[0]
        y_u = self.node_ticks[k * self.N] - self.node_ticks[(k - 1) * self.N]
        y_m = self.reception_times[k, 0] - arrivals[0]
        if mode is EpochMode.MASTER_ONLY:
            return np.array([y_phi, y_u, y_m])
        if arrivals.size < 4:
            raise ValueError("trace was generated without transceiver relays")
        return np.array(
            [y_phi, y_u, y_m, arrivals[1] - arrivals[0],
             arrivals[2] - arrivals[1], arrivals[3] - arrivals[2]]
        )


@lru_cache(maxsize=None)
def _noise_factor(mode: EpochMode, alpha: float) -> np.ndarray:
    """Cholesky factor of the selected noise shape Q, cached per mode."""
    s = selection_matrix(mode)
    q = s @ noise_shape_template(alpha) @ s.T
    factor = np.linalg.cholesky(q)
    factor.setflags(write=False)
    return factor


def _validate_truth(truth: GroundTruth, scene: SceneConfig) -> None:
    clock = truth.clock
    if scene.N * clock.T_u < scene.M * clock.T_m:
        raise ModelViolationError(
            f"N T_u = {scene.N * clock.T_u} ns < M T_m = {scene.M * clock.T_m} ns"
        )
    tof = np.linalg.norm(truth.position - scene.x_m) / scene.prop_speed
    if not math.isclose(truth.delta_1, clock.phi_u - tof, abs_tol=1e-9):
        raise InvalidTruthError(
            "stored delta_1 inconsistent with phi_u and the master range"
        )
    _check_delta1(truth.delta_1, clock.T_u)


def simulate_epoch(
    truth: GroundTruth,
    scene: SceneConfig,
    mode: EpochMode,
    k: int,
    sigma_k: float,
    rng: np.random.Generator,
    alpha: float = DEFAULT_ALPHA,
) -> EpochMeasurement:
    """Draw epoch k's interval vector: mean model plus correlated noise.

    sigma_k = 0 produces the noise-free mean (no random draw is consumed).
    """
    _validate_truth(truth, scene)
    if sigma_k < 0:
        raise ValueError("sigma_k must be non-negative")
    mats = build_system_matrices(k, mode, scene, alpha)
    y = mats.mu + mats.H @ truth.clock.as_array() + range_term(truth.position, scene, mats)
    if sigma_k > 0:
        y = y + sigma_k * (_noise_factor(mode, alpha) @ rng.standard_normal(mats.n))
    return EpochMeasurement(k=k, mode=mode, y=y, sigma_true=sigma_k)


def make_noise_schedule(
    noise: NoiseConfig, K: int, rng: np.random.Generator
) -> np.ndarray:
    """Per-epoch sigma_k: the nominal level with Bernoulli outlier epochs."""
    if K < 1:
        raise ValueError("K must be >= 1")
    sigmas = np.full(K, noise.sigma_nominal)
    if noise.outlier_prob > 0.0:
        hits = rng.random(K) < noise.outlier_prob
        sigmas[hits] *= noise.outlier_factor
    return sigmas


def simulate_campaign(
    truth: GroundTruth,
    scene: SceneConfig,
    noise: NoiseConfig,
    modes: EpochMode | Sequence[EpochMode],
    K: int,
    seed: int | np.random.SeedSequence,
    alpha: float | None = None,
) -> list[EpochMeasurement]:
    """Generate K epochs with independent noise, reproducible from the seed.

    Each epoch draws from its own counter-derived sub-stream, so the data
    for epoch k does not depend on K. `alpha` defaults to the noise config's
    device fraction.
    """
    if K < 1:
        raise ValueError("K must be >= 1")
    mode_seq = _normalize_modes(modes, K)
    if alpha is None:
        alpha = noise.alpha
    sigmas = make_noise_schedule(noise, K, derive_rng(seed, _STREAM_SCHEDULE))
    return [
        simulate_epoch(
            truth, scene, mode_seq[k - 1], k, sigmas[k - 1],
            derive_rng(seed, _STREAM_EPOCH, k), alpha,
        )
        for k in range(1, K + 1)
    ]


def _normalize_modes(modes, K: int) -> list[EpochMode]:
    if isinstance(modes, EpochMode):
        return [modes] * K
    mode_seq = list(modes)
    if len(mode_seq) != K:
        raise ValueError(f"need {K} per-epoch modes, got {len(mode_seq)}")
    return mode_seq


def noise_free_trace(truth: GroundTruth, scene: SceneConfig, K: int) -> TickTrace:
    """Build the explicit event timeline for K epochs.

    Master transmissions occur at its every M-th tick; each transceiver
    relays the preceding signal delta_0 after receiving it, in the fixed
    order (m, 1, 2, 3). The trace spans K+1 master transmissions so epoch
    K's duration can still be read off.
    """
    _validate_truth(truth, scene)
    if K < 1:
        raise ValueError("K must be >= 1")
    clock = truth.clock
    cp = scene.prop_speed

    if scene.has_transceivers:
        _check_schedule(truth, scene)

    master_ticks = clock.T_m * np.arange(scene.M * K + 1)
    node_ticks = clock.phi_u + clock.T_u * np.arange(scene.N * K + 1)

    n_signals = 4 if scene.has_transceivers else 1
    receptions = np.zeros((K + 1, n_signals))
    tof_to_node = np.linalg.norm(truth.position - scene.x_m) / cp
    for k in range(1, K + 2):
        t_tx = (k - 1) * scene.M * clock.T_m
        receptions[k - 1, 0] = t_tx + tof_to_node
        if scene.has_transceivers:
            a = scene.anchors
            t_prev = t_tx
            prev_pos = scene.x_m
            for j, tx_pos in enumerate((a[1], a[2], a[3]), start=1):
                arrive = t_prev + np.linalg.norm(tx_pos - prev_pos) / cp
                t_prev = arrive + scene.delta_0
                prev_pos = tx_pos
                receptions[k - 1, j] = (
                    t_prev + np.linalg.norm(truth.position - tx_pos) / cp
                )
    return TickTrace(
        master_ticks=master_ticks,
        node_ticks=node_ticks,
        reception_times=receptions,
        M=scene.M,
        N=scene.N,
    )


def _check_schedule(truth: GroundTruth, scene: SceneConfig) -> None:
    """Relay delay must exceed every flight time and the chain must fit."""
    cp = scene.prop_speed
    pts = list(scene.anchors) + [truth.position]
    max_tof = max(
        np.linalg.norm(pts[i] - pts[j]) / cp
        for i in range(len(pts))
        for j in range(i + 1, len(pts))
    )
    if scene.delta_0 <= max_tof:
        raise ScheduleViolationError(
            f"delta_0 = {scene.delta_0} ns must exceed the largest flight "
            f"time {max_tof:.3f} ns"
        )
    a = scene.anchors
    chain = (
        sum(np.linalg.norm(a[i] - a[i + 1]) for i in range(3)) / cp
        + 3 * scene.delta_0
        + max_tof
    )
    epoch_len = scene.M * truth.clock.T_m
    if chain >= epoch_len:
        raise ScheduleViolationError(
            f"relay chain spans {chain:.3f} ns, not within the epoch "
            f"({epoch_len} ns)"
        )
