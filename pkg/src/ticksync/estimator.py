"""Per-epoch profiled maximum likelihood and the recursive combiner.

Each epoch, the clock triple and the noise level are eliminated from the
likelihood in closed form, leaving a cost over position only, which is
minimized by normalized gradient descent with a golden-section line search.
Per-epoch estimates are then fused recursively, weighted by their estimated
information matrices, with a robust noise floor guarding against outlier
epochs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Iterable

import numpy as np

from .bounds import RCOND_GATE, InfoMatrix, NotIdentifiableError, fisher_info
from .model import (
    DEFAULT_ALPHA,
    EpochMode,
    PositionPrior,
    SceneConfig,
    SystemMatrices,
    build_system_matrices,
    noise_shape_template,
    range_term,
    selection_matrix,
)
from .sim import EpochMeasurement

# Floor applied to the profiled noise power inside the logarithm; keeps the
# cost finite on noise-free data and in master-only epochs where the
# residual space is empty.
V0_FLOOR = 1e-12

_INV_PHI = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True, eq=False)
class EpochEstimate:
    """One epoch's profiled ML solution [clock; position] and noise power."""

    theta: np.ndarray
    sigma_sq: float
    iterations: int
    converged: bool


@dataclass(frozen=True, eq=False)
class CombinerState:
    """Running information matrix and weighted sum for the fused estimate."""

    lambda_hat: np.ndarray
    s: np.ndarray
    k: int

    @classmethod
    def initial(cls, prior: PositionPrior | None, dim: int) -> "CombinerState":
        """Prior-only state: zero clock information, prior position block."""
        n = 3 + dim
        lam = np.zeros((n, n))
        s = np.zeros(n)
        if prior is not None and prior.is_informative:
            lam[3:, 3:] = prior.precision
            s[3:] = prior.precision @ prior.mean
        return cls(lambda_hat=lam, s=s, k=0)


@dataclass(frozen=True)
class SolverOptions:
    """Knobs for the per-epoch position descent.

    epsilon is the stopping threshold on the accepted step length (meters);
    eta caps each line-search interval at eta times the previous step.
    initial_step_cap bounds the very first step (None picks half the scene
    diagonal). sigma_nominal (ns) is the robust noise floor sigma_0.
    """

    eta: float = 1.2
    epsilon: float = 1e-7
    max_iters: int = 200
    initial_step_cap: float | None = None
    sigma_nominal: float = 10.0
    line_search_evals: int = 32

    def __post_init__(self):
        if not (self.eta > 0 and self.epsilon > 0 and self.max_iters >= 1):
            raise ValueError("eta, epsilon must be positive and max_iters >= 1")
        if self.sigma_nominal < 0:
            raise ValueError("sigma_nominal must be non-negative")
        if self.line_search_evals < 3:
            raise ValueError("line_search_evals must be at least 3")


@dataclass(frozen=True, eq=False)
class OnlineRecord:
    """Fused state after one epoch of the online loop."""

    k: int
    theta_hat: np.ndarray
    clock_bound: np.ndarray  # sqrt diag of the fused clock covariance, ns
    sigma_hat: float         # robust per-epoch noise level actually used, ns
    provisional: bool        # fused information still rank-deficient


@lru_cache(maxsize=None)
def _projection_pieces(
    mode: EpochMode, alpha: float
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Q^-1, the clock-annihilating weight M = Q^-1 P, and chol(Q).

    P = I - H (H^T Q^-1 H)^+ H^T Q^-1 projects out the clock column space.
    That column space is span{e1, e2, e3} for every epoch index (only the
    first three interval slots carry clock terms), so the projector is
    epoch-independent and is built from the canonical basis; this stays
    exact at large k where forming it from H_k directly would lose the
    annihilation property to roundoff. The first three rows/columns of M
    vanish identically and are pinned to zero.
    """
    s = selection_matrix(mode)
    q = s @ noise_shape_template(alpha) @ s.T
    q_inv = np.linalg.inv(q)
    n = q.shape[0]
    h_cols = np.eye(n)[:, :3]
    a = np.linalg.solve(h_cols.T @ q_inv @ h_cols, h_cols.T @ q_inv)
    proj = np.eye(n) - h_cols @ a
    m_mat = q_inv @ proj
    m_mat = 0.5 * (m_mat + m_mat.T)
    m_mat[:3, :] = 0.0
    m_mat[:, :3] = 0.0
    chol = np.linalg.cholesky(q)
    for arr in (q_inv, m_mat, chol):
        arr.setflags(write=False)
    return q_inv, m_mat, chol


def clock_projector(mats: SystemMatrices, alpha: float = DEFAULT_ALPHA) -> np.ndarray:
    """The oblique projector that annihilates the clock regressor.

    Built from the (epoch-independent) clock column space rather than from
    H_k itself, so idempotence and H-annihilation hold to roundoff for any
    epoch index.
    """
    s = selection_matrix(mats.mode)
    q = s @ noise_shape_template(alpha) @ s.T
    return q @ _projection_pieces(mats.mode, alpha)[1]


class _ProfiledCost:
    """Profiled negative log-likelihood over position for one epoch.

    With the clock triple and noise power eliminated, the data part reduces
    to V0(x) = rho^T W rho - 2 w^T rho + c0, a quadratic in the four ranges,
    plus the prior part V1(x) = ||x - xbar||^2_prec / n.
    """

    def __init__(
        self,
        y: np.ndarray,
        mats: SystemMatrices,
        scene: SceneConfig,
        prior: PositionPrior | None,
        alpha: float = DEFAULT_ALPHA,
    ):
        self.n = mats.n
        self.scene = scene
        m_mat = _projection_pieces(mats.mode, alpha)[1]
        b = y - mats.mu
        mb = m_mat @ b
        cp = scene.prop_speed
        self.has_data_term = bool(m_mat.any())
        if self.has_data_term:
            self.anchors = scene.anchors
            self.w_quad = mats.G.T @ m_mat @ mats.G / cp**2
            self.w_lin = mats.G.T @ mb / cp
            self.c0 = float(b @ mb)
        if prior is not None and prior.is_informative:
            self.prec = prior.precision
            self.xbar = prior.mean
        else:
            self.prec = None
            self.xbar = None

    def _v0(self, rho: np.ndarray) -> float:
        return max(float(rho @ self.w_quad @ rho - 2.0 * self.w_lin @ rho + self.c0), 0.0)

    def _v1(self, x: np.ndarray) -> tuple[float, np.ndarray | None]:
        if self.prec is None:
            return 0.0, None
        diff = x - self.xbar
        pd = self.prec @ diff
        return float(diff @ pd) / self.n, 2.0 * pd / self.n

    def cost(self, x: np.ndarray) -> float:
        v0 = 0.0
        if self.has_data_term:
            diffs = x - self.anchors
            rho = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
            v0 = self._v0(rho)
        v1, _ = self._v1(x)
        return math.log(max(v0, V0_FLOOR)) + v1

    def cost_along(self, x: np.ndarray, p: np.ndarray) -> Callable[[float], float]:
        """Specialized 1-D cost a -> V(x + a p) for the line-search hot path.

        The prior part is an exact quadratic in the step; the data part
        unrolls the quadratic form in the four ranges into scalar
        arithmetic, avoiding array temporaries inside the search loop.
        """
        qa = qb = qc = 0.0
        if self.prec is not None:
            diff = x - self.xbar
            pp = self.prec @ p
            qa = float(p @ pp) / self.n
            qb = 2.0 * float(diff @ pp) / self.n
            qc = float(diff @ (self.prec @ diff)) / self.n
        if not self.has_data_term:
            log_floor = math.log(V0_FLOOR)

            def prior_only(a: float) -> float:
                return log_floor + (qa * a + qb) * a + qc

            return prior_only

        dim = x.size
        (w00, w01, w02, w03), (_, w11, w12, w13), (_, _, w22, w23), (_, _, _, w33) = (
            tuple(row) for row in self.w_quad
        )
        l0, l1, l2, l3 = (2.0 * float(v) for v in self.w_lin)
        c0 = self.c0
        has_prior = self.prec is not None
        log, sqrt = math.log, math.sqrt

        if dim == 2:
            x0, y0 = (float(v) for v in x)
            px, py = (float(v) for v in p)
            (a0x, a0y), (a1x, a1y), (a2x, a2y), (a3x, a3y) = (
                tuple(row) for row in self.anchors
            )

            def along2(a: float) -> float:
                qx = x0 + a * px
                qy = y0 + a * py
                dx = qx - a0x
                dy = qy - a0y
                r0 = sqrt(dx * dx + dy * dy)
                dx = qx - a1x
                dy = qy - a1y
                r1 = sqrt(dx * dx + dy * dy)
                dx = qx - a2x
                dy = qy - a2y
                r2 = sqrt(dx * dx + dy * dy)
                dx = qx - a3x
                dy = qy - a3y
                r3 = sqrt(dx * dx + dy * dy)
                v0 = (
                    c0
                    + r0 * (w00 * r0 + w01 * r1 + w02 * r2 + w03 * r3 - l0)
                    + r1 * (w01 * r0 + w11 * r1 + w12 * r2 + w13 * r3 - l1)
                    + r2 * (w02 * r0 + w12 * r1 + w22 * r2 + w23 * r3 - l2)
                    + r3 * (w03 * r0 + w13 * r1 + w23 * r2 + w33 * r3 - l3)
                )
                if v0 < V0_FLOOR:
                    v0 = V0_FLOOR
                if has_prior:
                    return log(v0) + (qa * a + qb) * a + qc
                return log(v0)

            return along2

        x0 = [float(v) for v in x]
        pv = [float(v) for v in p]
        anchors = [tuple(row) for row in self.anchors]

        def along(a: float) -> float:
            q = [x0[c] + a * pv[c] for c in range(dim)]
            rho = []
            for anc in anchors:
                s = 0.0
                for c in range(dim):
                    t = q[c] - anc[c]
                    s += t * t
                rho.append(sqrt(s))
            r0, r1, r2, r3 = rho
            v0 = (
                c0
                + r0 * (w00 * r0 + w01 * r1 + w02 * r2 + w03 * r3 - l0)
                + r1 * (w01 * r0 + w11 * r1 + w12 * r2 + w13 * r3 - l1)
                + r2 * (w02 * r0 + w12 * r1 + w22 * r2 + w23 * r3 - l2)
                + r3 * (w03 * r0 + w13 * r1 + w23 * r2 + w33 * r3 - l3)
            )
            if v0 < V0_FLOOR:
                v0 = V0_FLOOR
            out = log(v0)
            if has_prior:
                out += (qa * a + qb) * a + qc
            return out

        return along

    def pieces(self, x: np.ndarray):
        """(V0, dV0, V1, dV1) at x, with V0 not yet floored."""
        d = x.size
        if self.has_data_term:
            diffs = x - self.anchors
            rho = np.sqrt(np.einsum("ij,ij->i", diffs, diffs))
            if np.any(rho < 1e-12):
                raise ValueError("cost evaluated exactly at an anchor")
            gamma = diffs / rho[:, None]
            v0 = self._v0(rho)
            dv0 = 2.0 * gamma.T @ (self.w_quad @ rho - self.w_lin)
        else:
            v0 = 0.0
            dv0 = np.zeros(d)
        v1, dv1 = self._v1(x)
        if dv1 is None:
            dv1 = np.zeros(d)
        return v0, dv0, v1, dv1


def profile_clock_and_noise(
    y: EpochMeasurement | np.ndarray,
    x,
    mats: SystemMatrices,
    scene: SceneConfig,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[np.ndarray, float]:
    """Closed-form clock estimate and profiled noise power at position x.

    Returns (c_hat, sigma_sq_hat): the generalized least-squares clock
    triple given the ranges at x, and the mean residual power left after
    projecting the clock subspace out.
    """
    y_vec = y.y if isinstance(y, EpochMeasurement) else np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    _, m_mat, chol = _projection_pieces(mats.mode, alpha)
    resid = y_vec - mats.mu - range_term(x, scene, mats)
    # generalized least squares in whitened coordinates; the H_k columns
    # span a growing numeric range with k, so avoid the normal equations
    c_hat = np.linalg.lstsq(
        np.linalg.solve(chol, mats.H),
        np.linalg.solve(chol, resid),
        rcond=RCOND_GATE,
    )[0]
    sigma_sq = max(float(resid @ m_mat @ resid), 0.0) / mats.n
    return c_hat, sigma_sq


def cost_and_gradient(
    x,
    y: EpochMeasurement | np.ndarray,
    mats: SystemMatrices,
    scene: SceneConfig,
    prior: PositionPrior | None,
    alpha: float = DEFAULT_ALPHA,
) -> tuple[float, np.ndarray]:
    """Profiled cost V = ln V0 + V1 and its gradient at x.

    V0 is the residual power (floored inside the logarithm), V1 the prior
    quadratic scaled by 1/n. The gradient combines the range-mediated data
    term with the prior pull.
    """
    y_vec = y.y if isinstance(y, EpochMeasurement) else np.asarray(y, dtype=float)
    x = np.asarray(x, dtype=float)
    problem = _ProfiledCost(y_vec, mats, scene, prior, alpha)
    v0, dv0, v1, dv1 = problem.pieces(x)
    v0f = max(v0, V0_FLOOR)
    return math.log(v0f) + v1, dv0 / v0f + dv1


def line_search(
    cost: Callable[[float], float], interval_cap: float, evals: int = 32
) -> float:
    """Golden-section minimization of a 1-D cost over [0, interval_cap].

    Uses at most `evals` cost evaluations (including the one at zero) and
    returns the minimizer the interval contracted to, or 0.0 when it does
    not beat the start. Non-finite cost values count as +inf.
    """

    def safe(a: float) -> float:
        v = cost(a)
        return v if math.isfinite(v) else math.inf

    f0 = safe(0.0)
    if interval_cap <= 0.0 or evals < 3:
        return 0.0
    lo, hi = 0.0, float(interval_cap)
    inner_lo = hi - _INV_PHI * (hi - lo)
    inner_hi = lo + _INV_PHI * (hi - lo)
    f_lo = safe(inner_lo)
    f_hi = safe(inner_hi)
    used = 3
    while used < evals:
        if f_lo < f_hi:
            hi, inner_hi, f_hi = inner_hi, inner_lo, f_lo
            inner_lo = hi - _INV_PHI * (hi - lo)
            f_lo = safe(inner_lo)
        else:
            lo, inner_lo, f_lo = inner_lo, inner_hi, f_hi
            inner_hi = lo + _INV_PHI * (hi - lo)
            f_hi = safe(inner_hi)
        used += 1
    best_a, best_f = (inner_lo, f_lo) if f_lo < f_hi else (inner_hi, f_hi)
    return best_a if best_f < f0 else 0.0


def default_step_cap(scene: SceneConfig, prior: PositionPrior | None) -> float:
    """Half the anchor-set diameter, or a prior-scaled span without anchors."""
    if scene.has_transceivers:
        pts = scene.anchors
        diam = max(
            np.linalg.norm(pts[i] - pts[j])
            for i in range(len(pts))
            for j in range(i + 1, len(pts))
        )
        if diam > 0:
            return 0.5 * float(diam)
    if prior is not None and prior.is_informative:
        cov = prior.covariance()
        return max(3.0 * math.sqrt(float(np.max(np.diag(cov)))), 1.0)
    return 1.0


def epoch_ml(
    y: EpochMeasurement,
    mats: SystemMatrices,
    scene: SceneConfig,
    prior: PositionPrior | None,
    x0,
    opts: SolverOptions = SolverOptions(),
    alpha: float = DEFAULT_ALPHA,
) -> EpochEstimate:
    """Single-epoch ML: descend the profiled cost, then fill the clock.

    Iterates x <- x + a p with p the normalized negative gradient and the
    step chosen by a line search capped at eta times the previous step,
    until the accepted step drops below epsilon or the iteration cap hits.
    """
    informative = prior is not None and prior.is_informative
    if mats.mode is EpochMode.MASTER_ONLY and not informative:
        raise NotIdentifiableError(
            "master-only epoch without a position prior cannot resolve x"
        )
    problem = _ProfiledCost(y.y, mats, scene, prior, alpha)
    x = np.asarray(x0, dtype=float).copy()
    cap0 = (
        opts.initial_step_cap
        if opts.initial_step_cap is not None
        else default_step_cap(scene, prior)
    )
    prev_step = None
    converged = False
    iterations = 0
    for i in range(opts.max_iters):
        v0, dv0, _, dv1 = problem.pieces(x)
        grad = dv0 / max(v0, V0_FLOOR) + dv1
        gnorm = float(np.linalg.norm(grad))
        if gnorm == 0.0:
            converged = True
            break
        direction = -grad / gnorm
        cap = cap0 if i == 0 else opts.eta * prev_step
        step = line_search(
            problem.cost_along(x, direction), cap, opts.line_search_evals
        )
        x = x + step * direction
        prev_step = step
        iterations = i + 1
        if step < opts.epsilon:
            converged = True
            break
    c_hat, sigma_sq = profile_clock_and_noise(y, x, mats, scene, alpha)
    return EpochEstimate(
        theta=np.concatenate([c_hat, x]),
        sigma_sq=sigma_sq,
        iterations=iterations,
        converged=converged,
    )


def robust_sigma(sigma_sq_profiled: float, sigma_sq_nominal: float) -> float:
    """Noise power used for weighting: never below the nominal floor."""
    if sigma_sq_profiled < 0 or sigma_sq_nominal < 0:
        raise ValueError("noise powers must be non-negative")
    return max(sigma_sq_profiled, sigma_sq_nominal)


def update_combiner(
    state: CombinerState,
    theta_check: EpochEstimate | np.ndarray,
    j_hat: InfoMatrix,
) -> tuple[CombinerState, np.ndarray, bool]:
    """Fold one epoch estimate into the running information-weighted sum.

    Returns the new state, the fused estimate, and a provisional flag that
    is set while the accumulated information is still rank-deficient (the
    fused estimate then comes from a pseudoinverse).
    """
    theta = theta_check.theta if isinstance(theta_check, EpochEstimate) else theta_check
    lam = state.lambda_hat + j_hat.matrix
    lam = 0.5 * (lam + lam.T)
    s = state.s + j_hat.matrix @ theta
    new_state = CombinerState(lambda_hat=lam, s=s, k=state.k + 1)
    solved, ok = _equilibrated_solve(lam, s)
    return new_state, solved, not ok


def _equilibrated_solve(lam: np.ndarray, s: np.ndarray) -> tuple[np.ndarray, bool]:
    """Solve lam x = s after Jacobi scaling; (pinv solution, False) when the
    scaled matrix fails the identifiability gate.

    The information matrix mixes offset (O(k)) and period (O(k^3 N^2))
    scales; equilibration makes the gate test intrinsic degeneracy rather
    than unit disparity.
    """
    d = np.sqrt(np.diag(lam))
    if np.any(d <= 0.0):
        return np.linalg.pinv(lam, rcond=RCOND_GATE) @ s, False
    scaled = lam / np.outer(d, d)
    svals = np.linalg.svd(scaled, compute_uv=False)
    if svals[-1] / svals[0] <= RCOND_GATE:
        return np.linalg.pinv(lam, rcond=RCOND_GATE) @ s, False
    return np.linalg.solve(scaled, s / d) / d, True


def _fused_covariance(lam: np.ndarray) -> np.ndarray:
    """Inverse of the fused information (pseudoinverse when rank-deficient)."""
    d = np.sqrt(np.diag(lam))
    if np.any(d <= 0.0):
        return np.linalg.pinv(lam, rcond=RCOND_GATE)
    scale = np.outer(d, d)
    scaled = lam / scale
    svals = np.linalg.svd(scaled, compute_uv=False)
    if svals[-1] / svals[0] <= RCOND_GATE:
        return np.linalg.pinv(lam, rcond=RCOND_GATE)
    return np.linalg.inv(scaled) / scale


def _fused_clock_bound(lam: np.ndarray) -> np.ndarray:
    """Root-diagonal of the fused clock covariance."""
    diag = np.diag(_fused_covariance(lam))[:3]
    return np.sqrt(np.maximum(diag, 0.0))


def run_online(
    stream: Iterable[EpochMeasurement],
    scene: SceneConfig,
    prior: PositionPrior | None,
    opts: SolverOptions = SolverOptions(),
    alpha: float = DEFAULT_ALPHA,
) -> list[OnlineRecord]:
    """Sequential estimator: per-epoch ML, robust weighting, fusion.

    Each epoch is solved warm-started at the previous fused position (the
    prior mean, or the anchor centroid, before any epoch has been fused),
    weighted by its information evaluated at its own ML position with the
    robustified noise power, and folded into the running combination.
    """
    state = CombinerState.initial(prior, scene.dim)
    if prior is not None and prior.is_informative:
        x_warm = prior.mean.copy()
    else:
        x_warm = scene.anchor_centroid
    sigma_sq_nominal = opts.sigma_nominal**2
    records: list[OnlineRecord] = []
    for meas in stream:
        mats = build_system_matrices(meas.k, meas.mode, scene, alpha)
        est = epoch_ml(meas, mats, scene, prior, x_warm, opts, alpha)
        sigma_sq_hat = robust_sigma(est.sigma_sq, sigma_sq_nominal)
        j_hat = fisher_info(est.theta[3:], sigma_sq_hat, meas.k, meas.mode, scene, alpha)
        state, theta_hat, provisional = update_combiner(state, est, j_hat)
        if not provisional:
            x_warm = theta_hat[3:]
        records.append(
            OnlineRecord(
                k=meas.k,
                theta_hat=theta_hat,
                clock_bound=_fused_clock_bound(state.lambda_hat),
                sigma_hat=math.sqrt(sigma_sq_hat),
                provisional=provisional,
            )
        )
    return records
