import os
import sys
import unittest

import numpy as np
import pytest

# Add project root to Python path
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt.gradcheck import gradcheck, random_contact_state
from fdlc_trajopt.lower_dynamics import (
    LowerProblem,
    LowerSettings,
    LowerSolver,
    VariableLayout,
    assemble_residual,
    linearize_step,
    residual_jacobians,
    solve_step,
)
from fdlc_trajopt.model import (
    ContactModel,
    Control,
    State,
    SystemParams,
    face_normal,
    face_tangent,
)

STEP = 0.05


def far_state(n_points=1, velocity=(0.0, 0.0)):
    positions = np.array([[-0.5, 0.01 * i] for i in range(n_points)])
    if n_points == 2:
        positions[1, 1] = positions[0, 1] + 0.005
    velocities = np.tile(np.asarray(velocity, dtype=float), (n_points, 1))
    return State(theta_box=0.0, omega_box=0.0, pusher_pos=positions, pusher_vel=velocities)


def contact_problem(model=None, seed=1, params=None):
    params = params or SystemParams()
    model = (model or ContactModel.point()).resolved(params)
    state, control = random_contact_state(np.random.default_rng(seed), params, model)
    return LowerProblem.build(state, control, STEP, params, model), params


class TestKappaSchedule(unittest.TestCase):

    def test_default_schedule(self):
        schedule = LowerSettings().kappa_schedule()
        np.testing.assert_allclose(schedule, [1e-3, 1e-4, 1e-5, 1e-6, 1e-7, 1e-8])
        self.assertEqual(schedule[-1], 1e-8)

    def test_warm_schedule_starts_lower(self):
        schedule = LowerSettings().kappa_schedule(1e-4)
        self.assertAlmostEqual(schedule[0], 1e-4)
        self.assertEqual(len(schedule), 5)


class TestVariableLayout(unittest.TestCase):

    def test_sizes(self):
        self.assertEqual(VariableLayout.build(1, (), friction=True, ground=False).size, 3)
        self.assertEqual(VariableLayout.build(1, (0,), friction=True, ground=True).size, 3 + 8 + 6)
        self.assertEqual(VariableLayout.build(2, (0, 1), friction=False, ground=False).size, 5 + 4)

    def test_pairs_cover_cone_variables(self):
        layout = VariableLayout.build(2, (1,), friction=True, ground=True)
        self.assertEqual(len(layout.pairs()), 4 + 3)
        self.assertEqual(len(layout.cone_indices()), 14)


class TestFreeDynamics(unittest.TestCase):

    def test_free_pusher_step_is_exact(self):
        params = SystemParams(mu_s=0.0)
        state = far_state(velocity=(0.1, -0.2))
        control = Control(forces=[[0.3, 0.4]])
        problem = LowerProblem.build(state, control, STEP, params, ContactModel.point())
        self.assertEqual(problem.layout.active, ())
        solution = solve_step(problem)

        m = params.pusher_mass
        v_next = state.pusher_vel[0] + STEP * control.forces[0] / m
        p_next = state.pusher_pos[0] + STEP * v_next
        np.testing.assert_allclose(solution.next_state.pusher_vel[0], v_next, atol=1e-10)
        np.testing.assert_allclose(solution.next_state.pusher_pos[0], p_next, atol=1e-10)
        self.assertAlmostEqual(solution.next_state.theta_box, 0.0, places=12)
        self.assertEqual(solution.forces.shape, (1, 2))

    def test_resting_state_is_equilibrium(self):
        params = SystemParams()
        state = far_state()
        problem = LowerProblem.build(
            state, Control(forces=[[0.0, 0.0]]), STEP, params, ContactModel.point()
        )
        solution = solve_step(problem)
        np.testing.assert_allclose(solution.next_state.to_vector(), state.to_vector(), atol=1e-10)
        self.assertLessEqual(solution.residual_norm, 1e-8)

    def test_free_linearization_structure(self):
        params = SystemParams(mu_s=0.0)
        problem = LowerProblem.build(
            far_state(), Control(forces=[[0.1, 0.0]]), STEP, params, ContactModel.point()
        )
        lin = linearize_step(problem, solve_step(problem))
        # x = [theta, px, py, omega, vx, vy]
        expected_A = np.eye(6)
        expected_A[0, 3] = STEP
        expected_A[1, 4] = STEP
        expected_A[2, 5] = STEP
        expected_B = np.zeros((6, 2))
        expected_B[1:3] = STEP**2 / params.pusher_mass * np.eye(2)
        expected_B[4:6] = STEP / params.pusher_mass * np.eye(2)
        np.testing.assert_allclose(lin.A, expected_A, atol=1e-12)
        np.testing.assert_allclose(lin.B, expected_B, atol=1e-12)

    def test_fdlc_spring_at_rest_length_leaves_pair_unchanged(self):
        params = SystemParams(mu_s=0.0)
        model = ContactModel.fdlc(params)
        problem = LowerProblem.build(
            far_state(2), Control(forces=np.zeros((2, 2))), STEP, params, model
        )
        solution = solve_step(problem)
        np.testing.assert_allclose(
            solution.next_state.pusher_pos, problem.state.pusher_pos, atol=1e-10
        )

    def test_fdlc_damper_step_is_implicit(self):
        params = SystemParams(mu_s=0.0)
        model = ContactModel.fdlc(params).resolved(params)
        base = far_state(2)
        state = State(
            theta_box=0.0,
            omega_box=0.0,
            pusher_pos=base.pusher_pos,
            pusher_vel=[[0.0, -0.01], [0.0, 0.01]],
        )
        problem = LowerProblem.build(state, Control(forces=np.zeros((2, 2))), STEP, params, model)
        solution = solve_step(problem)

        m, k, c = params.pusher_mass, model.stiffness, model.damping
        w_next = 0.02 / (1.0 + 2.0 * STEP * (k * STEP + c) / m)
        vel = solution.next_state.pusher_vel
        self.assertAlmostEqual(vel[1, 1] - vel[0, 1], w_next, places=12)
        np.testing.assert_allclose(vel[:, 0], 0.0, atol=1e-14)
        # the cold start already is the contact-free implicit step
        self.assertEqual(solution.iterations, 0)


class TestContactStep(unittest.TestCase):

    def setUp(self):
        self.problem, self.params = contact_problem()
        self.solution = solve_step(self.problem)

    def test_contact_is_active_and_converged(self):
        self.assertEqual(self.solution.active, (0,))
        self.assertLessEqual(self.solution.residual_norm, 1e-8)

    def test_forces_inside_friction_cone(self):
        self.assertGreaterEqual(self.solution.forces[0, 0], 0.0)
        self.assertGreaterEqual(self.solution.cone_margin(self.params.mu_p), -1e-8)

    def test_next_gap_non_negative(self):
        nxt = self.solution.next_state
        n = face_normal(nxt.theta_box)
        gap = n @ nxt.pusher_pos[0] - self.params.half_side - self.params.pusher_radius
        self.assertGreaterEqual(gap, -1e-8)

    def test_pusher_momentum_balance(self):
        state, nxt = self.problem.state, self.solution.next_state
        n, t = face_normal(nxt.theta_box), face_tangent(nxt.theta_box)
        f_n, f_t = self.solution.forces[0]
        lhs = self.params.pusher_mass * (nxt.pusher_vel[0] - state.pusher_vel[0])
        rhs = STEP * (self.problem.control.forces[0] + f_n * n + f_t * t)
        np.testing.assert_allclose(lhs, rhs, atol=1e-7)

    def test_warm_start_matches_cold_start(self):
        warm = solve_step(self.problem, warm_start=self.solution)
        self.assertTrue(warm.warm_started)
        np.testing.assert_allclose(
            warm.next_state.to_vector(), self.solution.next_state.to_vector(), atol=1e-8
        )

    def test_deterministic(self):
        again = solve_step(self.problem)
        np.testing.assert_array_equal(again.z, self.solution.z)

    def test_residual_vanishes_at_solution(self):
        residual = assemble_residual(self.solution.z, self.problem)
        self.assertLessEqual(np.max(np.abs(residual)), 1e-8)

    def test_residual_rejects_wrong_shape(self):
        with self.assertRaises(ValueError):
            assemble_residual(np.zeros(3), self.problem)


@pytest.mark.parametrize("model_factory", [ContactModel.point, lambda: ContactModel.fdlc(SystemParams())])
def test_residual_jacobians_match_finite_differences(model_factory):
    problem, _ = contact_problem(model_factory(), seed=4)
    solution = solve_step(problem)
    z = np.array(solution.z)
    jz, jx, ju = residual_jacobians(z, problem)
    eps = 1e-7

    fd_z = np.zeros_like(jz)
    for j in range(z.size):
        e = np.zeros(z.size)
        e[j] = eps
        fd_z[:, j] = (assemble_residual(z + e, problem) - assemble_residual(z - e, problem)) / (2 * eps)
    np.testing.assert_allclose(jz, fd_z, atol=1e-6)

    n = problem.n_points
    x0, u0 = problem.state.to_vector(), problem.control.to_vector()

    def residual_at(x, u):
        trial = problem.with_data(State.from_vector(x, n), Control.from_vector(u, n))
        return assemble_residual(z, trial)

    for j in range(x0.size):
        e = np.zeros(x0.size)
        e[j] = eps
        fd = (residual_at(x0 + e, u0) - residual_at(x0 - e, u0)) / (2 * eps)
        np.testing.assert_allclose(jx[:, j], fd, atol=1e-6)
    for j in range(u0.size):
        e = np.zeros(u0.size)
        e[j] = eps
        fd = (residual_at(x0, u0 + e) - residual_at(x0, u0 - e)) / (2 * eps)
        np.testing.assert_allclose(ju[:, j], fd, atol=1e-6)


def test_linearize_rejects_foreign_solution():
    problem, params = contact_problem()
    free = LowerProblem.build(
        far_state(), Control(forces=[[0.0, 0.0]]), STEP, params, ContactModel.point()
    )
    with pytest.raises(ValueError):
        linearize_step(problem, solve_step(free))


@pytest.mark.parametrize("model_factory", [ContactModel.point, lambda: ContactModel.fdlc(SystemParams())])
def test_cold_solve_converges_on_random_contact_states(model_factory):
    params = SystemParams()
    model = model_factory().resolved(params)
    rng = np.random.default_rng(0)
    for _ in range(40):
        state, control = random_contact_state(rng, params, model)
        solution = solve_step(LowerProblem.build(state, control, STEP, params, model))
        assert solution.residual_norm <= 1e-8
        assert solution.cone_margin(params.mu_p) >= -1e-8


@pytest.mark.parametrize("model", [ContactModel.point(), ContactModel.fdlc(SystemParams())])
def test_gradcheck_sensitivities(model):
    report = gradcheck(model, samples=20, seed=0)
    assert report.samples == 20
    assert report.max_error <= 1e-4


def test_solver_records_diagnostics():
    problem, _ = contact_problem()
    solver = LowerSolver(record=True)
    solution = solver.solve(problem, step_index=3)
    assert len(solver.records) == len(solution.stages)
    assert solver.records[0]["step"] == 3
    assert solver.records[0]["active_contacts"] == 1
    solver.clear()
    assert solver.records == []
