"""Trajectory metrics: control effort, travel distance, goal tracking and contact persistence."""

import math
from dataclasses import asdict, dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from fdlc_trajopt.exceptions import GoalMismatch
from fdlc_trajopt.ilqr import Trajectory

REACH_TOLERANCE = math.radians(0.5)
MIN_CONTACT_FORCE = 0.01  # N

REPORT_COLUMNS = [
    "model",
    "goal_deg",
    "control_effort",
    "weighted_effort",
    "travel_distance",
    "tracking_error",
    "reach_step",
    "persistence_ratio",
]
COMPARISON_COLUMNS = [
    "goal_deg",
    "effort_point",
    "effort_fdlc",
    "effort_ratio",
    "distance_point",
    "distance_fdlc",
    "distance_ratio",
    "persistence_point",
    "persistence_fdlc",
    "persistence_ratio",
    "tracking_point",
    "tracking_fdlc",
    "effort_fdlc_lower",
    "distance_fdlc_lower",
    "persistence_fdlc_not_lower",
]


@dataclass(frozen=True)
class MetricsReport:
    model: str
    goal: float  # rad
    control_effort: float
    weighted_effort: float
    travel_distance: float
    tracking_error: float
    reach_step: Optional[int]
    persistence_ratio: float
    force_series: Tuple[float, ...]
    goal_deg: Optional[float] = None  # as configured; derived from goal when absent

    def __post_init__(self):
        if self.goal_deg is None:
            object.__setattr__(self, "goal_deg", math.degrees(self.goal))


@dataclass(frozen=True)
class ComparisonRow:
    goal_deg: float
    effort_point: float
    effort_fdlc: float
    effort_ratio: float
    distance_point: float
    distance_fdlc: float
    distance_ratio: float
    persistence_point: float
    persistence_fdlc: float
    persistence_ratio: float
    tracking_point: float
    tracking_fdlc: float
    effort_fdlc_lower: bool
    distance_fdlc_lower: bool
    persistence_fdlc_not_lower: bool


def control_effort(controls: np.ndarray, step: float, R: Optional[np.ndarray] = None) -> float:
    """sum_t ||u_t||^2 h, or sum_t u_t' R u_t h when R is given."""
    controls = np.asarray(controls, dtype=float)
    if R is None:
        return float(np.sum(controls**2) * step)
    return float(np.einsum("ti,ij,tj->", controls, R, controls) * step)


def travel_distance(positions: np.ndarray) -> float:
    """positions: (T+1, N_p, 2). Mean over points of the summed segment lengths."""
    positions = np.asarray(positions, dtype=float)
    if positions.shape[0] < 2:
        return 0.0
    segments = np.linalg.norm(np.diff(positions, axis=0), axis=2)
    return float(np.mean(np.sum(segments, axis=0)))


def reach_step(thetas: np.ndarray, goal: float, tolerance: float = REACH_TOLERANCE) -> Optional[int]:
    hits = np.flatnonzero(np.abs(np.asarray(thetas) - goal) <= tolerance)
    return int(hits[0]) if hits.size else None


def persistence_ratio(
    force_series: np.ndarray, reached: Optional[int], f_min: float = MIN_CONTACT_FORCE
) -> float:
    """Fraction of steps before the goal is reached whose total normal force is at least f_min."""
    limit = len(force_series) if reached is None else min(reached, len(force_series))
    if limit == 0:
        return 1.0
    return float(np.count_nonzero(np.asarray(force_series[:limit]) >= f_min) / limit)


def evaluate(
    traj: Trajectory,
    goal: float,
    R: Optional[np.ndarray] = None,
    model: str = "",
    reach_tolerance: float = REACH_TOLERANCE,
    f_min: float = MIN_CONTACT_FORCE,
    goal_deg: Optional[float] = None,
) -> MetricsReport:
    n = traj.n_points
    positions = traj.states[:, 1 : 1 + 2 * n].reshape(-1, n, 2)
    thetas = traj.states[:, 0]
    forces = np.sum(traj.forces[:, :, 0], axis=1)
    reached = reach_step(thetas, goal, reach_tolerance)
    return MetricsReport(
        model=model,
        goal=float(goal),
        control_effort=control_effort(traj.controls, traj.step),
        weighted_effort=control_effort(traj.controls, traj.step, R) if R is not None else math.nan,
        travel_distance=travel_distance(positions),
        tracking_error=float(abs(thetas[-1] - goal)),
        reach_step=reached,
        persistence_ratio=persistence_ratio(forces, reached, f_min),
        force_series=tuple(float(f) for f in forces),
        goal_deg=goal_deg,
    )


def _ratio(fdlc: float, point: float) -> float:
    if point == 0.0:
        return 1.0 if fdlc == 0.0 else math.inf
    return fdlc / point


def compare(report_point: MetricsReport, report_fdlc: MetricsReport) -> ComparisonRow:
    if not math.isclose(report_point.goal, report_fdlc.goal, rel_tol=0.0, abs_tol=1e-12):
        raise GoalMismatch(report_point.goal, report_fdlc.goal)
    return ComparisonRow(
        goal_deg=report_point.goal_deg,
        effort_point=report_point.control_effort,
        effort_fdlc=report_fdlc.control_effort,
        effort_ratio=_ratio(report_fdlc.control_effort, report_point.control_effort),
        distance_point=report_point.travel_distance,
        distance_fdlc=report_fdlc.travel_distance,
        distance_ratio=_ratio(report_fdlc.travel_distance, report_point.travel_distance),
        persistence_point=report_point.persistence_ratio,
        persistence_fdlc=report_fdlc.persistence_ratio,
        persistence_ratio=_ratio(report_fdlc.persistence_ratio, report_point.persistence_ratio),
        tracking_point=report_point.tracking_error,
        tracking_fdlc=report_fdlc.tracking_error,
        effort_fdlc_lower=report_fdlc.control_effort < report_point.control_effort,
        distance_fdlc_lower=report_fdlc.travel_distance < report_point.travel_distance,
        persistence_fdlc_not_lower=report_fdlc.persistence_ratio >= report_point.persistence_ratio,
    )


def report_to_row(report: MetricsReport) -> Dict[str, object]:
    row = asdict(report)
    row.pop("force_series")
    row.pop("goal")
    row["goal_deg"] = report.goal_deg
    row["reach_step"] = -1 if report.reach_step is None else report.reach_step
    return {column: row[column] for column in REPORT_COLUMNS}


def comparison_to_row(row: ComparisonRow) -> Dict[str, object]:
    data = asdict(row)
    return {column: data[column] for column in COMPARISON_COLUMNS}


def reports_frame(reports: Sequence[MetricsReport]) -> pd.DataFrame:
    return pd.DataFrame([report_to_row(r) for r in reports], columns=REPORT_COLUMNS)


def comparisons_frame(rows: Sequence[ComparisonRow]) -> pd.DataFrame:
    return pd.DataFrame([comparison_to_row(r) for r in rows], columns=COMPARISON_COLUMNS)


def force_frame(report: MetricsReport, forces: np.ndarray, contact_ids: Sequence[str]) -> pd.DataFrame:
    """Per-step normal/tangential force per contact plus the total normal force."""
    data: Dict[str, List[float]] = {"step": list(range(len(report.force_series)))}
    for i, cid in enumerate(contact_ids):
        data[f"f_n_{cid}"] = [float(f) for f in forces[:, i, 0]]
        data[f"f_t_{cid}"] = [float(f) for f in forces[:, i, 1]]
    data["f_n_total"] = list(report.force_series)
    return pd.DataFrame(data)
