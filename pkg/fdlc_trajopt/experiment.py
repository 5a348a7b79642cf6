"""
Goal-angle sweep for both contact models: optimize, evaluate, compare and write
the run bundle (CSV/JSON artifacts, SVG plots, hashed manifest).
"""

import copy
import hashlib
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from fdlc_trajopt import plotting
from fdlc_trajopt.config import settings
from fdlc_trajopt.exceptions import SchemaMismatch, TrajOptError, UnknownConfigKey
from fdlc_trajopt.ilqr import (
    ContactDynamics,
    CostWeights,
    ILQRSettings,
    ILQRStats,
    Trajectory,
    initial_controls,
    optimize,
    rollout,
)
from fdlc_trajopt.lower_dynamics import LowerSettings
from fdlc_trajopt.metrics import (
    ComparisonRow,
    MetricsReport,
    comparisons_frame,
    compare,
    evaluate,
    force_frame,
    reports_frame,
)
from fdlc_trajopt.model import ContactKind, ContactModel, SystemParams, control_dim, initial_state, state_dim

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
MANIFEST_NAME = "manifest.json"


class WeightsConfig(BaseModel):
    """Diagonal cost weights for one contact model."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    q_position: List[float]
    q_velocity: float = Field(0.01, ge=0.0)
    r_diagonal: List[float]
    w: float = Field(10.0, ge=0.0)
    terminal_scale: float = Field(1.0, ge=0.0)

    @field_validator("q_position")
    @classmethod
    def _nonnegative(cls, v):
        if any(q < 0 for q in v):
            raise ValueError("Q entries must be nonnegative")
        return v

    @field_validator("r_diagonal")
    @classmethod
    def _positive(cls, v):
        if any(r <= 0 for r in v):
            raise ValueError("R entries must be positive")
        return v


class ModelWeights(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    # positional weights 1 : 0.1, scaled by 1e5 against R
    point: WeightsConfig = WeightsConfig(q_position=[1e5, 1e4, 1e4], r_diagonal=[0.1, 0.1])
    fdlc: WeightsConfig = WeightsConfig(
        q_position=[1e5, 1e4, 1e4, 1e4, 1e4], r_diagonal=[0.1, 0.1, 0.1, 0.1]
    )


def _default_models() -> List[ContactModel]:
    return [ContactModel(kind=ContactKind.POINT), ContactModel(kind=ContactKind.FDLC)]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    params: SystemParams = SystemParams()
    models: List[ContactModel] = Field(default_factory=_default_models)
    goals_deg: List[float] = [10.0, 20.0, 30.0, 40.0]
    horizon: int = Field(26, ge=2)
    step: float = Field(0.05, gt=0.0)
    weights: ModelWeights = ModelWeights()
    initial_gap: float = Field(0.005, ge=0.0)
    seed: int = 0
    output_dir: str = settings.OUTPUT_DIR
    max_workers: int = Field(settings.MAX_WORKERS, ge=1)
    lower: LowerSettings = LowerSettings()
    ilqr: ILQRSettings = ILQRSettings()

    @field_validator("goals_deg")
    @classmethod
    def _goal_range(cls, v):
        for goal in v:
            if not -180.0 < goal < 180.0:
                raise ValueError(f"goal {goal} deg is outside (-180, 180)")
        return v

    @model_validator(mode="after")
    def _check_models(self):
        names = [m.name for m in self.models]
        if len(set(names)) != len(names):
            raise ValueError(f"Contact models must be unique, got {names}")
        for model in self.models:
            w = self.weights_config(model.name)
            n = model.n_points
            if len(w.q_position) != 1 + 2 * n or len(w.r_diagonal) != control_dim(n):
                raise ValueError(
                    f"weights.{model.name} needs {1 + 2 * n} q_position and {control_dim(n)} r_diagonal entries"
                )
        return self

    def weights_config(self, model_name: str) -> WeightsConfig:
        return getattr(self.weights, model_name)

    def contact_model(self, name: str) -> ContactModel:
        for model in self.models:
            if model.name == name:
                return model
        raise KeyError(f"Model '{name}' is not part of this configuration")

    def cost_weights(self, model: ContactModel, theta_goal: float) -> CostWeights:
        x0 = initial_state(self.params, model, self.initial_gap)
        w = self.weights_config(model.name)
        return CostWeights.from_diagonals(
            x0, theta_goal, w.q_position, w.q_velocity, w.r_diagonal, w.w, w.terminal_scale
        )


# --- configuration loading ---


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_override(data: Dict[str, Any], reference: Dict[str, Any], assignment: str) -> None:
    """
    Applies one 'dotted.key=value' assignment to data in place. Keys are checked
    against reference (the fully populated config), so unknown keys raise.
    """
    if "=" not in assignment:
        raise UnknownConfigKey(assignment)
    key, raw = assignment.split("=", 1)
    parts = key.strip().split(".")
    node, ref = data, reference
    for depth, part in enumerate(parts):
        last = depth == len(parts) - 1
        if isinstance(ref, list):
            if not part.isdigit() or int(part) >= len(ref):
                raise UnknownConfigKey(key)
            index = int(part)
            if last:
                node[index] = _parse_value(raw)
                return
            ref = ref[index]
            if not isinstance(node[index], (dict, list)):
                node[index] = copy.deepcopy(ref)
            node = node[index]
            continue
        if not isinstance(ref, dict) or part not in ref:
            raise UnknownConfigKey(key)
        if last:
            node[part] = _parse_value(raw)
            return
        ref = ref[part]
        if part not in node or not isinstance(node[part], (dict, list)):
            node[part] = copy.deepcopy(ref)
        node = node[part]


def load_config(path: Optional[str] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    """Reads a JSON config (defaults when path is None) and applies --set overrides left to right."""
    data: Dict[str, Any] = {}
    if path:
        with open(path, "r") as f:
            data = json.load(f)
    for assignment in overrides:
        reference = ExperimentConfig.model_validate(data).model_dump(mode="json")
        apply_override(data, reference, assignment)
    return ExperimentConfig.model_validate(data)


# --- single runs ---


@dataclass
class RunResult:
    model: str
    goal_deg: float
    trajectory: Optional[Trajectory] = None
    report: Optional[MetricsReport] = None
    error: Optional[str] = None
    error_type: Optional[str] = None
    lower_records: List[Dict[str, Any]] = field(default_factory=list)

    @property
    def name(self) -> str:
        return run_name(self.model, self.goal_deg)

    @property
    def ok(self) -> bool:
        return self.error is None


def run_name(model: str, goal_deg: float) -> str:
    return f"{model}_{goal_deg:g}"


def run_single(config: ExperimentConfig, model_name: str, goal_deg: float, verbose: bool = False) -> RunResult:
    model = config.contact_model(model_name)
    theta_goal = math.radians(goal_deg)
    result = RunResult(model=model.name, goal_deg=goal_deg)
    logger.info(f"Optimizing {result.name}")
    dynamics = ContactDynamics(config.params, model, config.step, config.lower, record=verbose)
    x0 = initial_state(config.params, model, config.initial_gap)
    try:
        # seeding solves stay out of the recorded diagnostics
        seed = ContactDynamics(config.params, model, config.step, config.lower)
        traj = optimize(
            x0,
            config.cost_weights(model, theta_goal),
            initial_controls(x0, theta_goal, seed, config.horizon, config.ilqr),
            config.horizon,
            config.ilqr,
            dynamics,
        )
    except TrajOptError as e:
        logger.error(f"Run {result.name} failed: {e}", exc_info=True)
        result.error = str(e)
        result.error_type = type(e).__name__
        traj = getattr(e, "trajectory", None)
    if traj is not None:
        traj.steps = []  # lower-level handles stay in this process
        result.trajectory = traj
        result.report = evaluate(
            traj,
            theta_goal,
            R=config.cost_weights(model, theta_goal).R,
            model=model.name,
            goal_deg=goal_deg,
        )
    result.lower_records = list(dynamics.solver.records)
    return result


def _run_task(args: Tuple[ExperimentConfig, str, float, bool]) -> RunResult:
    return run_single(*args)


# --- artifacts ---


def trajectory_to_dict(traj: Trajectory, model: str, goal_deg: float) -> Dict[str, Any]:
    stats = traj.solver_stats
    return {
        "schema_version": SCHEMA_VERSION,
        "model": model,
        "goal_deg": goal_deg,
        "step": traj.step,
        "horizon": traj.horizon,
        "n_points": traj.n_points,
        "states": traj.states.tolist(),
        "controls": traj.controls.tolist(),
        "forces": traj.forces.tolist(),
        "ground_torques": traj.ground_torques.tolist(),
        "per_step_cost": traj.per_step_cost.tolist(),
        "cost": traj.cost,
        "solver_stats": {
            "iterations": stats.iterations,
            "reason": stats.reason,
            "costs": stats.costs,
            "alphas": stats.alphas,
            "regs": stats.regs,
            "gradient_norm": stats.gradient_norm if math.isfinite(stats.gradient_norm) else None,
        },
    }


class SolverStatsRecord(BaseModel):
    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    iterations: int
    reason: str
    costs: List[float]
    alphas: List[float]
    regs: List[float]
    gradient_norm: Optional[float] = None


class TrajectoryRecord(BaseModel):
    """On-disk trajectory.json schema; non-finite numbers are rejected."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)

    schema_version: int
    model: str
    goal_deg: float
    step: float = Field(gt=0.0)
    horizon: int = Field(ge=1)
    n_points: int = Field(ge=1, le=2)
    states: List[List[float]]
    controls: List[List[float]]
    forces: List[List[List[float]]]
    ground_torques: List[float]
    per_step_cost: List[List[float]]
    cost: float
    solver_stats: SolverStatsRecord

    @model_validator(mode="after")
    def _check_lengths(self):
        if len(self.states) != self.horizon + 1 or len(self.controls) != self.horizon:
            raise ValueError(
                f"horizon {self.horizon} needs {self.horizon + 1} states and {self.horizon} controls"
            )
        if any(len(x) != state_dim(self.n_points) for x in self.states):
            raise ValueError(f"every state needs {state_dim(self.n_points)} entries")
        if any(len(u) != control_dim(self.n_points) for u in self.controls):
            raise ValueError(f"every control needs {control_dim(self.n_points)} entries")
        return self


def _write_json(path: str, payload: Any) -> None:
    with open(path, "w") as f:
        json.dump(payload, f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")


def _controls_frame(traj: Trajectory, contact_ids: Sequence[str]) -> pd.DataFrame:
    data: Dict[str, Any] = {"step": list(range(traj.horizon))}
    for i, cid in enumerate(contact_ids):
        data[f"u_{cid}_x"] = traj.controls[:, 2 * i]
        data[f"u_{cid}_y"] = traj.controls[:, 2 * i + 1]
    return pd.DataFrame(data)


def _states_frame(traj: Trajectory, contact_ids: Sequence[str]) -> pd.DataFrame:
    n = traj.n_points
    nq = 1 + 2 * n
    positions = traj.states[:, 1:nq].reshape(-1, n, 2)
    segments = np.linalg.norm(np.diff(positions, axis=0), axis=2).mean(axis=1)
    data: Dict[str, Any] = {
        "step": list(range(traj.horizon + 1)),
        "theta": traj.states[:, 0],
        "omega": traj.states[:, nq],
    }
    for i, cid in enumerate(contact_ids):
        data[f"p_{cid}_x"] = positions[:, i, 0]
        data[f"p_{cid}_y"] = positions[:, i, 1]
        data[f"v_{cid}_x"] = traj.states[:, nq + 1 + 2 * i]
        data[f"v_{cid}_y"] = traj.states[:, nq + 2 + 2 * i]
    data["travel"] = np.concatenate(([0.0], np.cumsum(segments)))
    return pd.DataFrame(data)


def write_run_artifacts(out_dir: str, result: RunResult, contact_ids: Sequence[str], verbose: bool) -> None:
    run_dir = os.path.join(out_dir, result.name)
    os.makedirs(run_dir, exist_ok=True)
    traj, report = result.trajectory, result.report
    _write_json(os.path.join(run_dir, "trajectory.json"), trajectory_to_dict(traj, result.model, result.goal_deg))
    reports_frame([report]).to_csv(os.path.join(run_dir, "metrics.csv"), index=False)
    force_frame(report, traj.forces, contact_ids).to_csv(os.path.join(run_dir, "forces.csv"), index=False)
    _controls_frame(traj, contact_ids).to_csv(os.path.join(run_dir, "controls.csv"), index=False)
    _states_frame(traj, contact_ids).to_csv(os.path.join(run_dir, "states.csv"), index=False)
    if verbose:
        pd.DataFrame(result.lower_records).to_csv(os.path.join(run_dir, "lower_diagnostics.csv"), index=False)
        pd.DataFrame(traj.solver_stats.log_rows()).to_csv(os.path.join(run_dir, "ilqr_log.csv"), index=False)


def file_sha256(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_manifest(out_dir: str, config: ExperimentConfig, results: Sequence[RunResult]) -> str:
    files = {}
    for root, _, names in os.walk(out_dir):
        for name in names:
            path = os.path.join(root, name)
            rel = os.path.relpath(path, out_dir).replace(os.sep, "/")
            if rel != MANIFEST_NAME:
                files[rel] = file_sha256(path)
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": config.model_dump(mode="json"),
        "runs": [
            {
                "name": r.name,
                "model": r.model,
                "goal_deg": r.goal_deg,
                "status": "ok" if r.ok else "failed",
                "iterations": r.trajectory.solver_stats.iterations if r.trajectory is not None else 0,
            }
            for r in results
        ],
        "failures": [
            {"name": r.name, "error_type": r.error_type, "message": r.error} for r in results if not r.ok
        ],
        "files": dict(sorted(files.items())),
    }
    path = os.path.join(out_dir, MANIFEST_NAME)
    _write_json(path, manifest)
    return path


@dataclass
class RunBundle:
    out_dir: str
    results: List[RunResult]
    reports: List[MetricsReport]
    comparisons: List[ComparisonRow]
    manifest_path: str

    @property
    def failures(self) -> List[RunResult]:
        return [r for r in self.results if not r.ok]


def run(config: ExperimentConfig, out_dir: Optional[str] = None, verbose: bool = False) -> RunBundle:
    """Runs every (model, goal) pair, then compares point vs FDLC per goal and persists the bundle."""
    out_dir = out_dir or config.output_dir
    os.makedirs(out_dir, exist_ok=True)
    tasks = [(config, m.name, g, verbose) for g in config.goals_deg for m in config.models]
    logger.info(f"Running {len(tasks)} optimization(s) into {out_dir}")

    if config.max_workers > 1 and len(tasks) > 1:
        with ProcessPoolExecutor(max_workers=config.max_workers) as executor:
            results = list(executor.map(_run_task, tasks))
    else:
        results = [_run_task(task) for task in tasks]

    # single writer: everything below runs in this process
    reports = []
    for result in results:
        if result.trajectory is None:
            continue
        contact_ids = config.contact_model(result.model).contact_ids
        write_run_artifacts(out_dir, result, contact_ids, verbose)
        reports.append(result.report)

    comparisons = []
    by_key = {(r.model, r.goal_deg): r for r in results if r.ok}
    for goal in config.goals_deg:
        point, fdlc = by_key.get(("point", goal)), by_key.get(("fdlc", goal))
        if point is not None and fdlc is not None:
            comparisons.append(compare(point.report, fdlc.report))
    if comparisons:
        comparisons_frame(comparisons).to_csv(os.path.join(out_dir, "comparison.csv"), index=False)
    if reports:
        plotting.plot_bundle(out_dir)

    manifest_path = write_manifest(out_dir, config, results)
    failed = sum(not r.ok for r in results)
    logger.info(f"Finished {len(results)} run(s), {failed} failed; manifest at {manifest_path}")
    return RunBundle(out_dir, results, reports, comparisons, manifest_path)


# --- replay ---


@dataclass(frozen=True)
class ReplayResult:
    trajectory: Trajectory
    max_deviation: float
    record: TrajectoryRecord


def load_trajectory(path: str) -> TrajectoryRecord:
    try:
        with open(path, "r") as f:
            payload = json.load(f)
        return TrajectoryRecord.model_validate(payload)
    except (ValidationError, json.JSONDecodeError) as e:
        raise SchemaMismatch(f"{path} does not match the trajectory schema: {e}") from e


def replay(trajectory_file: str, config: ExperimentConfig) -> ReplayResult:
    """Re-simulates the stored controls open loop and reports the max state deviation (inf-norm)."""
    record = load_trajectory(trajectory_file)
    try:
        model = config.contact_model(record.model)
    except KeyError as e:
        raise SchemaMismatch(str(e)) from e
    if record.n_points != model.n_points:
        raise SchemaMismatch(
            f"Trajectory has {record.n_points} pusher point(s), model {model.name} has {model.n_points}"
        )
    stored = np.array(record.states)
    dynamics = ContactDynamics(config.params, model, record.step, config.lower)
    weights = config.cost_weights(model, math.radians(record.goal_deg))
    traj = rollout(stored[0], np.array(record.controls), dynamics, weights)
    traj.steps = []
    traj.solver_stats = ILQRStats(iterations=record.solver_stats.iterations, reason="replay")
    deviation = float(np.max(np.abs(traj.states - stored)))
    logger.info(f"Replayed {trajectory_file}: max state deviation {deviation:.3e}")
    return ReplayResult(trajectory=traj, max_deviation=deviation, record=record)
