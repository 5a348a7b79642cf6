import math
import os
import sys
import unittest

import numpy as np
import pytest

# Add project root to Python path
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt.exceptions import GoalMismatch
from fdlc_trajopt.ilqr import Trajectory
from fdlc_trajopt.metrics import (
    COMPARISON_COLUMNS,
    REPORT_COLUMNS,
    MetricsReport,
    compare,
    comparisons_frame,
    control_effort,
    evaluate,
    force_frame,
    persistence_ratio,
    reach_step,
    reports_frame,
    travel_distance,
)


def make_report(
    model="point", goal=math.radians(30), effort=1.0, distance=0.01, persistence=1.0, goal_deg=None
):
    return MetricsReport(
        model=model,
        goal=goal,
        control_effort=effort,
        weighted_effort=math.nan,
        travel_distance=distance,
        tracking_error=0.0,
        reach_step=3,
        persistence_ratio=persistence,
        force_series=(0.1, 0.1, 0.1),
        goal_deg=goal_deg,
    )


def stationary_trajectory(horizon=4):
    return Trajectory(
        states=np.zeros((horizon + 1, 6)),
        controls=np.zeros((horizon, 2)),
        forces=np.zeros((horizon, 1, 2)),
        ground_torques=np.zeros(horizon),
        per_step_cost=np.zeros((horizon + 1, 3)),
        step=0.05,
    )


class TestEffortAndDistance(unittest.TestCase):

    def test_effort_hand_sum(self):
        self.assertAlmostEqual(control_effort([[1.0, 0.0], [0.0, 2.0]], 0.05), 0.25, places=15)

    def test_weighted_effort(self):
        R = np.diag([1.0, 0.1])
        self.assertAlmostEqual(control_effort([[1.0, 0.0], [0.0, 2.0]], 0.05, R), (1.0 + 0.4) * 0.05)

    def test_travel_hand_sum(self):
        positions = np.array([[[0.0, 0.0]], [[0.003, 0.004]], [[0.006, 0.008]]])
        self.assertAlmostEqual(travel_distance(positions), 0.01, places=15)

    def test_travel_averages_over_points(self):
        positions = np.zeros((2, 2, 2))
        positions[1, 0] = (0.01, 0.0)
        positions[1, 1] = (0.03, 0.0)
        self.assertAlmostEqual(travel_distance(positions), 0.02, places=15)

    def test_time_reversal_invariance(self):
        rng = np.random.default_rng(0)
        u = rng.normal(size=(8, 4))
        p = rng.normal(size=(9, 2, 2))
        self.assertAlmostEqual(control_effort(u, 0.05), control_effort(u[::-1], 0.05), places=12)
        self.assertAlmostEqual(travel_distance(p), travel_distance(p[::-1]), places=12)

    def test_scaling(self):
        rng = np.random.default_rng(1)
        u = rng.normal(size=(5, 2))
        p = rng.normal(size=(6, 1, 2))
        self.assertAlmostEqual(control_effort(3.0 * u, 0.05), 9.0 * control_effort(u, 0.05), places=10)
        self.assertAlmostEqual(travel_distance(3.0 * p), 3.0 * travel_distance(p), places=10)


class TestReachAndPersistence(unittest.TestCase):

    def test_reach_step(self):
        goal = math.radians(10)
        thetas = np.radians([0.0, 5.0, 9.6, 10.0])
        self.assertEqual(reach_step(thetas, goal), 2)
        self.assertIsNone(reach_step(np.zeros(4), goal))

    def test_persistence_counts_steps_before_reach(self):
        forces = np.array([0.5, 0.0, 0.2, 0.0, 0.0])
        self.assertAlmostEqual(persistence_ratio(forces, reached=3), 2.0 / 3.0)
        self.assertAlmostEqual(persistence_ratio(forces, reached=None), 2.0 / 5.0)
        self.assertEqual(persistence_ratio(forces, reached=0), 1.0)


class TestEvaluate(unittest.TestCase):

    def test_null_trajectory_at_goal(self):
        report = evaluate(stationary_trajectory(), 0.0, model="point")
        self.assertEqual(report.control_effort, 0.0)
        self.assertEqual(report.travel_distance, 0.0)
        self.assertEqual(report.tracking_error, 0.0)
        self.assertEqual(report.reach_step, 0)
        self.assertTrue(math.isnan(report.weighted_effort))

    def test_force_series_sums_normal_forces(self):
        traj = stationary_trajectory(2)
        traj.forces = np.array([[[0.3, 0.1], [0.2, -0.1]], [[0.0, 0.0], [0.05, 0.0]]])
        traj.states = np.zeros((3, 10))
        traj.controls = np.zeros((2, 4))
        report = evaluate(traj, math.radians(10), model="fdlc")
        assert report.force_series == pytest.approx((0.5, 0.05))
        frame = force_frame(report, traj.forces, ("B", "C"))
        self.assertEqual(list(frame.columns), ["step", "f_n_B", "f_t_B", "f_n_C", "f_t_C", "f_n_total"])
        self.assertAlmostEqual(frame["f_t_C"].iloc[0], -0.1)


class TestCompare(unittest.TestCase):

    def test_ratio_and_orderings(self):
        row = compare(make_report(effort=2.0, distance=0.02), make_report("fdlc", effort=1.0, distance=0.01))
        self.assertAlmostEqual(row.effort_ratio, 0.5)
        self.assertAlmostEqual(row.distance_ratio, 0.5)
        self.assertTrue(row.effort_fdlc_lower)
        self.assertTrue(row.distance_fdlc_lower)
        self.assertTrue(row.persistence_fdlc_not_lower)
        self.assertAlmostEqual(row.goal_deg, 30.0)

    def test_configured_goal_degrees_are_kept(self):
        point = make_report(goal=math.radians(30), goal_deg=30.0)
        fdlc = make_report("fdlc", goal=math.radians(30), goal_deg=30.0)
        row = compare(point, fdlc)
        self.assertEqual(row.goal_deg, 30.0)
        self.assertEqual(comparisons_frame([row])["goal_deg"].iloc[0], 30.0)
        self.assertEqual(reports_frame([point])["goal_deg"].iloc[0], 30.0)

    def test_goal_degrees_derived_when_not_configured(self):
        self.assertAlmostEqual(make_report(goal=math.radians(12.5)).goal_deg, 12.5)

    def test_zero_baseline_ratio(self):
        row = compare(make_report(effort=0.0), make_report("fdlc", effort=0.0))
        self.assertEqual(row.effort_ratio, 1.0)
        row = compare(make_report(effort=0.0), make_report("fdlc", effort=1.0))
        self.assertEqual(row.effort_ratio, math.inf)

    def test_goal_mismatch(self):
        with self.assertRaises(GoalMismatch):
            compare(make_report(goal=math.radians(10)), make_report("fdlc", goal=math.radians(20)))

    def test_frames_have_documented_columns(self):
        reports = [make_report(), make_report("fdlc")]
        self.assertEqual(list(reports_frame(reports).columns), REPORT_COLUMNS)
        frame = comparisons_frame([compare(*reports)])
        self.assertEqual(list(frame.columns), COMPARISON_COLUMNS)
        self.assertEqual(len(frame), 1)
