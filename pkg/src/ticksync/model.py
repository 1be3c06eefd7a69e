"""Core measurement model: domain types and per-epoch system matrices.

A master clock broadcasts once per epoch (every M of its cycles). A passive
node counts its own ticks (N per epoch) and measures time intervals between
received signals and local ticks. Three optional transceivers relay the
master signal in a fixed order, each after a known delay, which turns the
inter-reception intervals into TDOA constraints on the node position.

Units are nanoseconds and meters throughout; signal propagation speed is
expressed in m/ns so clock and range quantities stay near unity.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

# Propagation speed of light in vacuum, meters per nanosecond.
SPEED_OF_LIGHT_M_PER_NS = 0.299792458

# Fraction of the interval-measurement noise contributed by the timing
# device itself (the rest comes from the RF reception events). 0.1 is a
# realistic figure for current TDC/ADC hardware.
DEFAULT_ALPHA = 0.1

# Interval slots per epoch, in fixed order:
#   [phi, u, m, 1, 2, 3] = [signal-to-tick, N local ticks, epoch duration,
#   and the three inter-reception intervals from the transceiver relays].
FULL_INTERVAL_COUNT = 6

# Range slots, in fixed transmitter order (master, tx1, tx2, tx3).
RANGE_SLOTS = 4


class SingularGeometryError(ValueError):
    """Evaluation position coincides with an anchor; direction undefined."""


class MissingTransceiversError(ValueError):
    """The requested operation needs transceivers the scene does not have."""


class EpochMode(enum.Enum):
    """Which intervals are observed in an epoch."""

    MASTER_ONLY = "master_only"
    WITH_TRANSCEIVERS = "with_transceivers"

    @property
    def n_intervals(self) -> int:
        return 3 if self is EpochMode.MASTER_ONLY else FULL_INTERVAL_COUNT


@dataclass(frozen=True)
class ClockParams:
    """The estimated clock triple, all in nanoseconds.

    phi_u: offset of the node clock's initial tick relative to the master
        transmission event (includes the propagation delay).
    T_u: node clock period.
    T_m: master clock period.
    """

    phi_u: float
    T_u: float
    T_m: float

    def __post_init__(self):
        if not (self.T_u > 0 and self.T_m > 0):
            raise ValueError("clock periods must be positive")
        if self.phi_u < 0:
            raise ValueError("phi_u must be non-negative")

    def as_array(self) -> np.ndarray:
        return np.array([self.phi_u, self.T_u, self.T_m])


@dataclass(frozen=True, eq=False)
class SceneConfig:
    """Static geometry and protocol constants.

    x_m is the master position; x_1..x_3 are the transceiver positions
    (all present or all absent). M and N are master/node cycles per epoch,
    delta_0 the transceiver relay delay in ns, prop_speed in m/ns.
    """

    x_m: np.ndarray
    x_1: np.ndarray | None = None
    x_2: np.ndarray | None = None
    x_3: np.ndarray | None = None
    M: int = 100
    N: int = 101
    delta_0: float = 100.0
    prop_speed: float = SPEED_OF_LIGHT_M_PER_NS

    def __post_init__(self):
        object.__setattr__(self, "x_m", np.asarray(self.x_m, dtype=float))
        txs = [self.x_1, self.x_2, self.x_3]
        present = [t is not None for t in txs]
        if any(present) and not all(present):
            raise ValueError("transceivers must be all present or all absent")
        if self.x_m.ndim != 1 or self.x_m.size not in (2, 3):
            raise ValueError("positions must be 2- or 3-vectors")
        if all(present):
            for name in ("x_1", "x_2", "x_3"):
                arr = np.asarray(getattr(self, name), dtype=float)
                if arr.shape != self.x_m.shape:
                    raise ValueError("all anchor positions must share one dimension")
                object.__setattr__(self, name, arr)
            pts = self.anchors
            for i in range(len(pts)):
                for j in range(i + 1, len(pts)):
                    if np.array_equal(pts[i], pts[j]):
                        raise ValueError("anchor positions must be pairwise distinct")
        if not (self.M >= 1 and self.N >= 1):
            raise ValueError("cycle counts M, N must be positive integers")
        if not self.prop_speed > 0:
            raise ValueError("prop_speed must be positive")
        if self.delta_0 < 0:
            raise ValueError("delta_0 must be non-negative")

    @property
    def dim(self) -> int:
        return self.x_m.size

    @property
    def has_transceivers(self) -> bool:
        return self.x_1 is not None

    @property
    def anchors(self) -> np.ndarray:
        """All four transmitter positions, shape (4, dim), in the fixed order."""
        if not self.has_transceivers:
            raise MissingTransceiversError("scene has no transceivers")
        return np.stack([self.x_m, self.x_1, self.x_2, self.x_3])

    @property
    def anchor_centroid(self) -> np.ndarray:
        if self.has_transceivers:
            return self.anchors.mean(axis=0)
        return self.x_m.copy()


@dataclass(frozen=True, eq=False)
class PositionPrior:
    """Gaussian prior on the node position: mean (m) and precision (m^-2).

    A zero precision matrix encodes "no prior".
    """

    mean: np.ndarray
    precision: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        prec = np.asarray(self.precision, dtype=float)
        d = self.mean.size
        if prec.shape != (d, d):
            raise ValueError("precision must be d x d for a d-vector mean")
        if not np.allclose(prec, prec.T, atol=1e-12):
            raise ValueError("precision must be symmetric")
        if prec.size and np.min(np.linalg.eigvalsh(prec)) < -1e-10:
            raise ValueError("precision must be positive semidefinite")
        object.__setattr__(self, "precision", 0.5 * (prec + prec.T))

    @classmethod
    def isotropic(cls, mean, sigma: float) -> "PositionPrior":
        """Prior with standard deviation sigma (m) in every direction."""
        mean = np.asarray(mean, dtype=float)
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        return cls(mean, np.eye(mean.size) / sigma**2)

    @classmethod
    def uninformative(cls, dim: int) -> "PositionPrior":
        return cls(np.zeros(dim), np.zeros((dim, dim)))

    @property
    def is_informative(self) -> bool:
        return bool(np.any(self.precision != 0.0))

    def covariance(self) -> np.ndarray:
        """Inverse of the precision; only valid for an informative prior."""
        if not self.is_informative:
            raise ValueError("uninformative prior has no covariance")
        return np.linalg.inv(self.precision)


@dataclass(frozen=True)
class NoiseConfig:
    """Interval-measurement noise model.

    sigma_nominal is the baseline per-event RF noise level sigma_0 (ns).
    Epochs independently become outliers with probability outlier_prob, in
    which case sigma_k = outlier_factor * sigma_nominal.
    """

    sigma_nominal: float
    alpha: float = DEFAULT_ALPHA
    outlier_prob: float = 0.0
    outlier_factor: float = 1.0

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ValueError("alpha must lie in (0, 1)")
        if not self.sigma_nominal > 0:
            raise ValueError("sigma_nominal must be positive")
        if not 0.0 <= self.outlier_prob <= 1.0:
            raise ValueError("outlier_prob must lie in [0, 1]")
        if not self.outlier_factor > 0:
            raise ValueError("outlier_factor must be positive")


@dataclass(frozen=True, eq=False)
class SystemMatrices:
    """Deterministic per-epoch model pieces, already reduced by selection.

    The observed interval vector obeys
        y = mu + H c + (1/prop_speed) G rho(x) + w,   cov(w) = sigma_k^2 Q,
    with c the clock triple and rho(x) the four transmitter ranges.
    """

    S: np.ndarray
    H: np.ndarray
    G: np.ndarray
    mu: np.ndarray
    Q: np.ndarray
    k: int
    mode: EpochMode

    @property
    def n(self) -> int:
        return self.mu.size


@dataclass(frozen=True, eq=False)
class RangeModel:
    """Ranges to the four transmitters and the unit-direction Jacobian."""

    rho: np.ndarray       # (4,) meters
    jacobian: np.ndarray  # (4, dim), row i = (x - x_i)^T / ||x - x_i||


# Mixing of the four ranges into the six interval slots. Row 0 carries the
# master time-of-flight inside the signal-to-tick interval; rows 3-5 are the
# consecutive TDOA differences created by the relay order (m, 1, 2, 3).
_G_TEMPLATE = np.array(
    [
        [-1.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [0.0, 0.0, 0.0, 0.0],
        [-1.0, 1.0, 0.0, 0.0],
        [0.0, -1.0, 1.0, 0.0],
        [0.0, 0.0, -1.0, 1.0],
    ]
)


@lru_cache(maxsize=None)
def noise_shape_template(alpha: float) -> np.ndarray:
    """Unit-variance noise shape Q for the full six-interval epoch.

    Every RF reception event contributes unit variance and every local tick
    contributes alpha^2. Intervals bounded by two RF events have variance 2
    and share one event with their neighbours (covariance 1); the N-tick
    interval uses two ticks (2 alpha^2); the signal-to-tick interval mixes
    one of each (1 + alpha^2) and shares its RF event with the epoch
    duration.
    """
    a2 = alpha * alpha
    q = np.array(
        [
            [1.0 + a2, 0.0, 1.0, 0.0, 0.0, 0.0],
            [0.0, 2.0 * a2, 0.0, 0.0, 0.0, 0.0],
            [1.0, 0.0, 2.0, 1.0, 0.0, 0.0],
            [0.0, 0.0, 1.0, 2.0, 1.0, 0.0],
            [0.0, 0.0, 0.0, 1.0, 2.0, 1.0],
            [0.0, 0.0, 0.0, 0.0, 1.0, 2.0],
        ]
    )
    q.setflags(write=False)
    return q


def selection_matrix(mode: EpochMode) -> np.ndarray:
    """Row selector mapping the full six-slot model onto the observed slots."""
    if mode is EpochMode.WITH_TRANSCEIVERS:
        return np.eye(FULL_INTERVAL_COUNT)
    return np.eye(FULL_INTERVAL_COUNT)[:3]


def build_system_matrices(
    k: int,
    mode: EpochMode,
    scene: SceneConfig,
    alpha: float = DEFAULT_ALPHA,
) -> SystemMatrices:
    """Construct S, H, G, mu and Q for epoch k.

    The clock regressor H maps (phi_u, T_u, T_m) onto the interval means:
    the signal-to-tick interval drifts by (N T_u - M T_m) per epoch, hence
    the (k-1)-scaled entries in its row. mu holds the known relay offsets
    (consecutive inter-anchor flight times plus the relay delay).
    """
    if k < 1:
        raise ValueError(f"epoch index must be >= 1, got {k}")
    if mode is EpochMode.WITH_TRANSCEIVERS and not scene.has_transceivers:
        raise MissingTransceiversError(
            "WithTransceivers epoch requested but the scene has no transceivers"
        )

    h_full = np.zeros((FULL_INTERVAL_COUNT, 3))
    h_full[0] = [1.0, (k - 1) * scene.N, -(k - 1) * scene.M]
    h_full[1, 1] = scene.N
    h_full[2, 2] = scene.M

    mu_full = np.zeros(FULL_INTERVAL_COUNT)
    if scene.has_transceivers:
        a = scene.anchors
        for row, (i, j) in zip((3, 4, 5), ((0, 1), (1, 2), (2, 3))):
            mu_full[row] = (
                np.linalg.norm(a[i] - a[j]) / scene.prop_speed + scene.delta_0
            )

    s = selection_matrix(mode)
    return SystemMatrices(
        S=s,
        H=s @ h_full,
        G=s @ _G_TEMPLATE,
        mu=s @ mu_full,
        Q=s @ noise_shape_template(alpha) @ s.T,
        k=k,
        mode=mode,
    )


def range_model(x, scene: SceneConfig) -> RangeModel:
    """Ranges from x to the four transmitters and their Jacobian rows."""
    x = np.asarray(x, dtype=float)
    diffs = x[None, :] - scene.anchors
    rho = np.linalg.norm(diffs, axis=1)
    if np.any(rho < 1e-12):
        raise SingularGeometryError("position coincides with an anchor")
    return RangeModel(rho=rho, jacobian=diffs / rho[:, None])


def _master_offset(x, scene: SceneConfig) -> tuple[float, np.ndarray]:
    """Range and unit direction from x to the master only."""
    x = np.asarray(x, dtype=float)
    diff = x - scene.x_m
    rho = float(np.linalg.norm(diff))
    if rho < 1e-12:
        raise SingularGeometryError("position coincides with the master")
    return rho, diff / rho


def range_term(x, scene: SceneConfig, mats: SystemMatrices) -> np.ndarray:
    """The position-dependent mean contribution (1/prop_speed) G rho(x).

    Works for scenes without transceivers too: there only the master range
    can enter (G columns for the transceiver ranges are zero by selection).
    """
    if scene.has_transceivers:
        return mats.G @ range_model(x, scene).rho / scene.prop_speed
    rho_m, _ = _master_offset(x, scene)
    return mats.G[:, 0] * (rho_m / scene.prop_speed)


def range_term_jacobian(x, scene: SceneConfig, mats: SystemMatrices) -> np.ndarray:
    """Derivative of range_term with respect to x: (1/prop_speed) G Gamma(x)."""
    if scene.has_transceivers:
        return mats.G @ range_model(x, scene).jacobian / scene.prop_speed
    _, gamma_m = _master_offset(x, scene)
    return np.outer(mats.G[:, 0], gamma_m) / scene.prop_speed
