"""Experiment configuration, Monte-Carlo harness, and result emission.

Configs are JSON documents with the sections scene, truth, prior, noise,
solver, experiment, and optionally map. Unknown keys are rejected. Results
go out as CSV or JSON with fixed column orders; nanosecond values carry six
significant digits.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bounds import (
    DEFAULT_HCRB_SAMPLES,
    BoundMap,
    NotIdentifiableError,
    accumulated_fisher_info,
    crb_clock,
    hcrb_clock,
)
from .estimator import OnlineRecord, SolverOptions, run_online
from .model import (
    SPEED_OF_LIGHT_M_PER_NS,
    EpochMode,
    NoiseConfig,
    PositionPrior,
    SceneConfig,
)
from .sim import GroundTruth, derive_rng, derive_seed, simulate_campaign

# Sub-stream labels below the experiment root seed.
_STREAM_TRIAL = 10
_STREAM_BOUNDS = 11
_STREAM_TRUTH_DRAW = 12

DEFAULT_CHECKPOINTS = (1, 2, 5, 10, 20, 50, 100, 250, 500)

MC_COLUMNS = (
    "sweep_value", "k", "rmse_phi_ns", "rmse_Tu_ns", "rmse_Tm_ns",
    "rmse_x_m", "bound_phi_ns", "bound_Tu_ns", "bound_Tm_ns", "trials",
)
MAP_COLUMNS = ("x1_m", "x2_m", "sqrt_bound_phi_ns")

# Fraction of trials allowed to fail before the whole run is aborted.
MAX_FAILED_TRIAL_FRACTION = 0.01


class ConfigError(ValueError):
    """Configuration document failed to parse or validate."""


@dataclass(frozen=True, eq=False)
class TruthSpec:
    """Ground-truth recipe: clock periods, tick offset, optional position.

    A missing position means each trial draws one from the prior.
    """

    T_u: float = 50.0
    T_m: float = 50.0
    delta_1: float = 5.0
    position: np.ndarray | None = None


@dataclass(frozen=True)
class SweepSpec:
    param: str
    values: tuple[float, ...]


@dataclass(frozen=True, eq=False)
class MapSpec:
    kind: str
    x1: np.ndarray
    x2: np.ndarray
    n_samples: int
    prior_stds: tuple[float, ...] | None


@dataclass(frozen=True, eq=False)
class ExperimentConfig:
    scene: SceneConfig
    truth: TruthSpec
    prior: PositionPrior | None
    noise: NoiseConfig
    solver: SolverOptions
    epochs: int
    trials: int
    seed: int
    mode: EpochMode
    checkpoints: tuple[int, ...]
    sweep: SweepSpec | None
    jobs: int
    map_spec: MapSpec | None


def _section(doc: dict, name: str, allowed: Sequence[str]) -> dict:
    raw = doc.get(name, {})
    if not isinstance(raw, dict):
        raise ConfigError(f"section [{name}] must be an object")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"unknown key '{key}' in section [{name}]")
    return raw


def parse_config(source: str | Path) -> ExperimentConfig:
    """Parse and validate a config document (path to, or text of, JSON)."""
    if isinstance(source, Path) or (
        isinstance(source, str) and "{" not in source
    ):
        path = Path(source)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        text = path.read_text()
    else:
        text = source
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(
            f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}"
        ) from exc
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    for key in doc:
        if key not in ("scene", "truth", "prior", "noise", "solver", "experiment", "map"):
            raise ConfigError(f"unknown section [{key}]")
    return _build_config(doc)


def _build_config(doc: dict) -> ExperimentConfig:
    sc = _section(doc, "scene", (
        "x_m", "x_1", "x_2", "x_3", "M", "N", "delta_0_ns", "prop_speed_m_per_ns",
    ))
    tr = _section(doc, "truth", ("T_u_ns", "T_m_ns", "delta_1_ns", "position"))
    pr = _section(doc, "prior", ("mean", "sigma_m", "stds_m", "precision"))
    no = _section(doc, "noise", ("sigma_ns", "alpha", "outlier_prob", "outlier_factor"))
    so = _section(doc, "solver", (
        "eta", "epsilon_m", "max_iters", "initial_step_cap_m", "sigma0_ns",
        "line_search_evals",
    ))
    ex = _section(doc, "experiment", (
        "epochs", "trials", "seed", "mode", "checkpoints", "sweep", "jobs",
    ))
    mp = _section(doc, "map", (
        "kind", "x1_min", "x1_max", "x1_count", "x2_min", "x2_max", "x2_count",
        "n_samples", "prior_stds_m",
    ))

    try:
        scene = SceneConfig(
            x_m=np.asarray(sc.get("x_m", [1.0, 1.0]), dtype=float),
            x_1=_opt_vec(sc.get("x_1")),
            x_2=_opt_vec(sc.get("x_2")),
            x_3=_opt_vec(sc.get("x_3")),
            M=int(sc.get("M", 100)),
            N=int(sc.get("N", 101)),
            delta_0=float(sc.get("delta_0_ns", 100.0)),
            prop_speed=float(sc.get("prop_speed_m_per_ns", SPEED_OF_LIGHT_M_PER_NS)),
        )
        truth = TruthSpec(
            T_u=float(tr.get("T_u_ns", 50.0)),
            T_m=float(tr.get("T_m_ns", 50.0)),
            delta_1=float(tr.get("delta_1_ns", 5.0)),
            position=_opt_vec(tr.get("position")),
        )
        prior = _build_prior(pr, scene.dim) if pr else None
        noise = NoiseConfig(
            sigma_nominal=float(no.get("sigma_ns", 2.0)),
            alpha=float(no.get("alpha", 0.1)),
            outlier_prob=float(no.get("outlier_prob", 0.0)),
            outlier_factor=float(no.get("outlier_factor", 1.0)),
        )
        step_cap = so.get("initial_step_cap_m")
        solver = SolverOptions(
            eta=float(so.get("eta", 1.2)),
            epsilon=float(so.get("epsilon_m", 1e-7)),
            max_iters=int(so.get("max_iters", 200)),
            initial_step_cap=None if step_cap is None else float(step_cap),
            sigma_nominal=float(so.get("sigma0_ns", 10.0)),
            line_search_evals=int(so.get("line_search_evals", 32)),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    mode_name = ex.get("mode", "with_transceivers")
    try:
        mode = EpochMode(mode_name)
    except ValueError:
        raise ConfigError(f"unknown mode '{mode_name}' in [experiment]") from None

    epochs = int(ex.get("epochs", 500))
    if epochs < 1:
        raise ConfigError("experiment.epochs must be >= 1")
    trials = int(ex.get("trials", 300))
    if trials < 1:
        raise ConfigError("experiment.trials must be >= 1")
    checkpoints = tuple(
        int(k) for k in ex.get("checkpoints", DEFAULT_CHECKPOINTS) if int(k) <= epochs
    )
    if not checkpoints:
        raise ConfigError("no checkpoints at or below experiment.epochs")
    sweep = _build_sweep(ex.get("sweep"))
    jobs = int(ex.get("jobs", 1))
    if jobs < 1:
        raise ConfigError("experiment.jobs must be >= 1")

    config = ExperimentConfig(
        scene=scene,
        truth=truth,
        prior=prior,
        noise=noise,
        solver=solver,
        epochs=epochs,
        trials=trials,
        seed=int(ex.get("seed", 0)),
        mode=mode,
        checkpoints=checkpoints,
        sweep=sweep,
        jobs=jobs,
        map_spec=_build_map(mp) if mp else None,
    )
    _validate_config(config)
    return config


def _opt_vec(value) -> np.ndarray | None:
    return None if value is None else np.asarray(value, dtype=float)


def _build_prior(pr: dict, dim: int) -> PositionPrior:
    mean = np.asarray(pr.get("mean", np.zeros(dim)), dtype=float)
    given = [k for k in ("sigma_m", "stds_m", "precision") if k in pr]
    if len(given) > 1:
        raise ConfigError("prior accepts only one of sigma_m, stds_m, precision")
    if "sigma_m" in pr:
        return PositionPrior.isotropic(mean, float(pr["sigma_m"]))
    if "stds_m" in pr:
        stds = np.asarray(pr["stds_m"], dtype=float)
        if np.any(stds <= 0):
            raise ConfigError("prior.stds_m must be positive")
        return PositionPrior(mean, np.diag(1.0 / stds**2))
    if "precision" in pr:
        return PositionPrior(mean, np.asarray(pr["precision"], dtype=float))
    raise ConfigError("prior section needs one of sigma_m, stds_m, precision")


def _build_sweep(raw) -> SweepSpec | None:
    if raw is None:
        return None
    if not isinstance(raw, dict) or set(raw) != {"param", "values"}:
        raise ConfigError("sweep must be an object with keys 'param' and 'values'")
    param = raw["param"]
    if param not in ("sigma_ns", "sigma_x_m", "epochs"):
        raise ConfigError(f"unsupported sweep param '{param}'")
    values = tuple(float(v) for v in raw["values"])
    if not values or any(v <= 0 for v in values):
        raise ConfigError("sweep values must be positive and non-empty")
    return SweepSpec(param=param, values=values)


def _build_map(mp: dict) -> MapSpec:
    kind = mp.get("kind", "crb")
    if kind not in ("crb", "hcrb"):
        raise ConfigError("map.kind must be 'crb' or 'hcrb'")
    x1 = np.linspace(
        float(mp.get("x1_min", 0.0)), float(mp.get("x1_max", 12.0)),
        int(mp.get("x1_count", 25)),
    )
    x2 = np.linspace(
        float(mp.get("x2_min", 0.0)), float(mp.get("x2_max", 12.0)),
        int(mp.get("x2_count", 25)),
    )
    stds = mp.get("prior_stds_m")
    return MapSpec(
        kind=kind,
        x1=x1,
        x2=x2,
        n_samples=int(mp.get("n_samples", DEFAULT_HCRB_SAMPLES)),
        prior_stds=None if stds is None else tuple(float(s) for s in stds),
    )


def _validate_config(config: ExperimentConfig) -> None:
    scene, truth = config.scene, config.truth
    if scene.N * truth.T_u < scene.M * truth.T_m:
        raise ConfigError(
            f"N*T_u = {scene.N * truth.T_u} ns must be >= M*T_m "
            f"= {scene.M * truth.T_m} ns"
        )
    if not 0.0 <= truth.delta_1 < truth.T_u:
        raise ConfigError("truth.delta_1_ns must lie in [0, T_u)")
    if truth.position is not None and truth.position.size != scene.dim:
        raise ConfigError("truth.position dimension does not match the scene")
    if truth.position is None and (config.prior is None or not config.prior.is_informative):
        raise ConfigError(
            "truth.position missing: randomized trials need an informative prior"
        )
    if config.mode is EpochMode.WITH_TRANSCEIVERS and not scene.has_transceivers:
        raise ConfigError("mode with_transceivers needs scene transceivers")
    if config.mode is EpochMode.MASTER_ONLY and (
        config.prior is None or not config.prior.is_informative
    ):
        raise ConfigError("master_only runs need an informative prior")
    if config.sweep is not None and config.sweep.param == "sigma_x_m" and config.prior is None:
        raise ConfigError("sigma_x_m sweep needs a prior section")
    if config.map_spec is not None and config.map_spec.kind == "hcrb":
        if config.map_spec.prior_stds is None:
            raise ConfigError("hcrb map needs map.prior_stds_m")


def serialize_config(config: ExperimentConfig) -> str:
    """Canonical JSON form of a config; parse(serialize(c)) equals c."""
    scene, truth, prior = config.scene, config.truth, config.prior
    doc: dict = {
        "scene": {
            "x_m": scene.x_m.tolist(),
            "M": scene.M,
            "N": scene.N,
            "delta_0_ns": scene.delta_0,
            "prop_speed_m_per_ns": scene.prop_speed,
        },
        "truth": {
            "T_u_ns": truth.T_u,
            "T_m_ns": truth.T_m,
            "delta_1_ns": truth.delta_1,
        },
        "noise": {
            "sigma_ns": config.noise.sigma_nominal,
            "alpha": config.noise.alpha,
            "outlier_prob": config.noise.outlier_prob,
            "outlier_factor": config.noise.outlier_factor,
        },
        "solver": {
            "eta": config.solver.eta,
            "epsilon_m": config.solver.epsilon,
            "max_iters": config.solver.max_iters,
            "initial_step_cap_m": config.solver.initial_step_cap,
            "sigma0_ns": config.solver.sigma_nominal,
            "line_search_evals": config.solver.line_search_evals,
        },
        "experiment": {
            "epochs": config.epochs,
            "trials": config.trials,
            "seed": config.seed,
            "mode": config.mode.value,
            "checkpoints": list(config.checkpoints),
            "jobs": config.jobs,
        },
    }
    if scene.has_transceivers:
        for name in ("x_1", "x_2", "x_3"):
            doc["scene"][name] = getattr(scene, name).tolist()
    if truth.position is not None:
        doc["truth"]["position"] = truth.position.tolist()
    if prior is not None:
        doc["prior"] = {
            "mean": prior.mean.tolist(),
            "precision": prior.precision.tolist(),
        }
    if config.sweep is not None:
        doc["experiment"]["sweep"] = {
            "param": config.sweep.param,
            "values": list(config.sweep.values),
        }
    if config.map_spec is not None:
        ms = config.map_spec
        doc["map"] = {
            "kind": ms.kind,
            "x1_min": float(ms.x1[0]), "x1_max": float(ms.x1[-1]),
            "x1_count": int(ms.x1.size),
            "x2_min": float(ms.x2[0]), "x2_max": float(ms.x2[-1]),
            "x2_count": int(ms.x2.size),
            "n_samples": ms.n_samples,
        }
        if ms.prior_stds is not None:
            doc["map"]["prior_stds_m"] = list(ms.prior_stds)
    return json.dumps(doc, indent=2, sort_keys=True)


# ---------------------------------------------------------------------------
# Monte Carlo harness
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class McRow:
    sweep_value: float
    k: int
    rmse_phi_ns: float
    rmse_Tu_ns: float
    rmse_Tm_ns: float
    rmse_x_m: float
    bound_phi_ns: float
    bound_Tu_ns: float
    bound_Tm_ns: float
    trials: int


@dataclass(eq=False)
class ResultTable:
    """Monte-Carlo RMSE and bound table, rows keyed by (sweep value, k)."""

    rows: list[McRow]
    seed: int
    failed_trials: int = 0

    @property
    def column_names(self) -> tuple[str, ...]:
        return MC_COLUMNS

    def formatted_rows(self) -> list[dict]:
        return [
            {
                "sweep_value": _sig6(r.sweep_value),
                "k": r.k,
                "rmse_phi_ns": _sig6(r.rmse_phi_ns),
                "rmse_Tu_ns": _sig6(r.rmse_Tu_ns),
                "rmse_Tm_ns": _sig6(r.rmse_Tm_ns),
                "rmse_x_m": _sig6(r.rmse_x_m),
                "bound_phi_ns": _sig6(r.bound_phi_ns),
                "bound_Tu_ns": _sig6(r.bound_Tu_ns),
                "bound_Tm_ns": _sig6(r.bound_Tm_ns),
                "trials": r.trials,
            }
            for r in self.rows
        ]


@dataclass(eq=False)
class Table:
    """Generic emitted table: fixed column order plus row dictionaries."""

    column_names: tuple[str, ...]
    rows: list[dict]

    def formatted_rows(self) -> list[dict]:
        return [
            {name: _sig6(row.get(name)) for name in self.column_names}
            for row in self.rows
        ]


def _sig6(value):
    """Six-significant-digit rounding for floats; passthrough otherwise."""
    if isinstance(value, (bool, int, str)) or value is None:
        return value
    v = float(value)
    if math.isnan(v):
        return None
    return float(f"{v:.6g}")


def _apply_sweep(config: ExperimentConfig, value: float) -> ExperimentConfig:
    param = config.sweep.param if config.sweep else "sigma_ns"
    if param == "sigma_ns":
        return replace(config, noise=replace(config.noise, sigma_nominal=value))
    if param == "sigma_x_m":
        prior = PositionPrior.isotropic(config.prior.mean, value)
        return replace(config, prior=prior)
    if param == "epochs":
        epochs = int(value)
        cps = tuple(k for k in config.checkpoints if k <= epochs) or (epochs,)
        return replace(config, epochs=epochs, checkpoints=cps)
    raise ConfigError(f"unsupported sweep param '{param}'")


def _default_estimator(stream, scene, prior, opts, alpha, truth) -> list[OnlineRecord]:
    return run_online(stream, scene, prior, opts, alpha)


def trial_truth(config: ExperimentConfig, trial: int) -> GroundTruth:
    """Ground truth for one trial: fixed, or drawn from the prior."""
    if config.truth.position is None:
        rng = derive_rng(
            derive_seed(config.seed, _STREAM_TRIAL, trial), _STREAM_TRUTH_DRAW
        )
        chol = np.linalg.cholesky(config.prior.covariance())
        position = config.prior.mean + chol @ rng.standard_normal(config.scene.dim)
    else:
        position = config.truth.position
    return GroundTruth.from_delta1(
        config.truth.delta_1, config.truth.T_u, config.truth.T_m, position,
        config.scene,
    )


def trial_campaign(config: ExperimentConfig, trial: int) -> list:
    """The measurement stream trial `trial` of this experiment sees."""
    return simulate_campaign(
        trial_truth(config, trial), config.scene, config.noise, config.mode,
        config.epochs, derive_seed(config.seed, _STREAM_TRIAL, trial),
    )


def _trial_errors(args) -> tuple[int, np.ndarray | None]:
    """Worker: simulate one trial, estimate, collect errors at checkpoints."""
    (config, trial, estimator) = args
    truth = trial_truth(config, trial)
    stream = simulate_campaign(
        truth, config.scene, config.noise, config.mode, config.epochs,
        derive_seed(config.seed, _STREAM_TRIAL, trial),
    )
    try:
        records = estimator(
            stream, config.scene, config.prior, config.solver,
            config.noise.alpha, truth,
        )
    except (NotIdentifiableError, np.linalg.LinAlgError):
        return trial, None
    by_k = {rec.k: rec for rec in records}
    theta_true = truth.theta()
    out = np.empty((len(config.checkpoints), 4))
    for i, k in enumerate(config.checkpoints):
        delta = by_k[k].theta_hat - theta_true
        out[i, :3] = delta[:3]
        out[i, 3] = np.linalg.norm(delta[3:])
    return trial, out


def compute_bound_curve(
    config: ExperimentConfig, n_samples: int = DEFAULT_HCRB_SAMPLES
) -> dict[int, np.ndarray]:
    """Root clock bounds at every checkpoint for this configuration.

    Uses the deterministic bound at a fixed truth position, and the hybrid
    bound (position averaged over the prior) for master-only or randomized
    runs. Each checkpoint's hybrid draw stream is derived from the config
    seed and the checkpoint index. Bounds use the nominal noise level; an
    unidentifiable checkpoint yields NaNs.
    """
    hybrid = config.mode is EpochMode.MASTER_ONLY or config.truth.position is None
    out: dict[int, np.ndarray] = {}
    for i, k in enumerate(config.checkpoints):
        sigmas = np.full(k, config.noise.sigma_nominal)
        try:
            if hybrid:
                res = hcrb_clock(
                    config.prior, config.scene, config.mode, sigmas, k,
                    n_samples, derive_rng(config.seed, _STREAM_BOUNDS, i),
                    config.noise.alpha,
                )
            else:
                info = accumulated_fisher_info(
                    config.truth.position, sigmas, config.mode, config.scene,
                    config.noise.alpha,
                )
                res = crb_clock(info)
            out[k] = res.sqrt_diag
        except NotIdentifiableError:
            out[k] = np.full(3, np.nan)
    return out


def run_monte_carlo(
    config: ExperimentConfig,
    estimator: Callable[..., list[OnlineRecord]] | None = None,
) -> ResultTable:
    """RMSE-versus-bound table over seeded trials, optionally in parallel.

    Per trial: draw or fix the truth, simulate a campaign, run the online
    estimator, and record estimate errors at the checkpoints. Failed trials
    are excluded; more than MAX_FAILED_TRIAL_FRACTION of them aborts the
    run. `estimator` is an injection point for oracle tests; it receives
    (stream, scene, prior, solver, alpha, truth).
    """
    estimator = estimator or _default_estimator
    sweep_values = config.sweep.values if config.sweep else (config.noise.sigma_nominal,)
    rows: list[McRow] = []
    failed_total = 0
    for sweep_value in sweep_values:
        cfg = _apply_sweep(config, sweep_value)
        bound_curve = compute_bound_curve(cfg)
        args = [(cfg, trial, estimator) for trial in range(cfg.trials)]
        results: list[np.ndarray | None] = [None] * cfg.trials
        if cfg.jobs > 1:
            with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
                for trial, errs in pool.map(_trial_errors, args, chunksize=4):
                    results[trial] = errs
        else:
            for arg in args:
                trial, errs = _trial_errors(arg)
                results[trial] = errs
        kept = [r for r in results if r is not None]
        failed = cfg.trials - len(kept)
        failed_total += failed
        if failed > MAX_FAILED_TRIAL_FRACTION * cfg.trials:
            raise RuntimeError(
                f"{failed}/{cfg.trials} trials failed at sweep value {sweep_value}"
            )
        stacked = np.stack(kept)  # (trials, checkpoints, 4)
        rmse = np.sqrt(np.mean(stacked**2, axis=0))
        for i, k in enumerate(cfg.checkpoints):
            bound = bound_curve[k]
            rows.append(
                McRow(
                    sweep_value=float(sweep_value),
                    k=k,
                    rmse_phi_ns=float(rmse[i, 0]),
                    rmse_Tu_ns=float(rmse[i, 1]),
                    rmse_Tm_ns=float(rmse[i, 2]),
                    rmse_x_m=float(rmse[i, 3]),
                    bound_phi_ns=float(bound[0]),
                    bound_Tu_ns=float(bound[1]),
                    bound_Tm_ns=float(bound[2]),
                    trials=len(kept),
                )
            )
    return ResultTable(rows=rows, seed=config.seed, failed_trials=failed_total)


# ---------------------------------------------------------------------------
# Emission
# ---------------------------------------------------------------------------

def emit_results(table, fmt: str, path) -> None:
    """Write a table as CSV (fixed column order, header row) or JSON.

    Both formats carry identical numeric values: floats are rounded to six
    significant digits before writing; missing values become empty CSV
    cells / JSON nulls. `path` of "-" writes to stdout.
    """
    import csv
    import sys

    if fmt not in ("csv", "json"):
        raise ValueError(f"format must be 'csv' or 'json', got {fmt!r}")
    rows = table.formatted_rows()
    columns = list(table.column_names)

    def write(stream):
        if fmt == "csv":
            writer = csv.DictWriter(stream, fieldnames=columns, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({k: ("" if v is None else v) for k, v in row.items()})
        else:
            json.dump(rows, stream, indent=2)
            stream.write("\n")

    if path in (None, "-"):
        write(sys.stdout)
    else:
        with open(path, "w", newline="") as fh:
            write(fh)


def map_table(result: BoundMap) -> Table:
    """Bound-map rows in the documented (x1_m, x2_m, value) schema."""
    rows = [
        {
            "x1_m": float(p[0]),
            "x2_m": float(p[1]),
            "sqrt_bound_phi_ns": None if math.isnan(v) else float(v),
        }
        for p, v in zip(result.points, result.sqrt_bound_phi)
    ]
    return Table(column_names=MAP_COLUMNS, rows=rows)
