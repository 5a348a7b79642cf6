import math
import os
import sys
import unittest

import numpy as np
import pytest
from pydantic import ValidationError

# Add project root to Python path
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt.exceptions import DegenerateDirection
from fdlc_trajopt.model import (
    ContactKind,
    ContactModel,
    Control,
    State,
    SystemParams,
    contact_jacobians,
    corner_friction_torque,
    initial_state,
    signed_distance,
    spring_damper_force,
    spring_terms,
)


def rotation(angle):
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def point_state(x, y, theta=0.0):
    return State(theta_box=theta, omega_box=0.0, pusher_pos=[[x, y]], pusher_vel=[[0.0, 0.0]])


class TestSystemParams(unittest.TestCase):

    def test_default_inertia_is_square_plate(self):
        params = SystemParams()
        self.assertAlmostEqual(params.box_inertia, 1.0 * 0.02**2 / 6.0, places=15)

    def test_inertia_check_rejects_inconsistent_value(self):
        with self.assertRaises(ValidationError):
            SystemParams(box_inertia=1.0)
        params = SystemParams(box_inertia=1.0, check_inertia=False)
        self.assertEqual(params.box_inertia, 1.0)

    def test_negative_friction_rejected(self):
        with self.assertRaises(ValidationError) as ctx:
            SystemParams(mu_p=-1.0)
        self.assertEqual(ctx.exception.errors()[0]["loc"], ("mu_p",))

    def test_unknown_field_rejected(self):
        with self.assertRaises(ValidationError):
            SystemParams(friction=0.3)


class TestContactModel(unittest.TestCase):

    def test_point_and_fdlc_sizes(self):
        self.assertEqual(ContactModel.point().n_points, 1)
        self.assertEqual(ContactModel.point().contact_ids, ("A",))
        fdlc = ContactModel.fdlc(SystemParams())
        self.assertEqual(fdlc.n_points, 2)
        self.assertEqual(fdlc.contact_ids, ("B", "C"))

    def test_fdlc_defaults_resolve(self):
        params = SystemParams()
        fdlc = ContactModel(kind=ContactKind.FDLC).resolved(params)
        self.assertAlmostEqual(fdlc.damping, 2.0 * math.sqrt(1000.0 * 0.1))
        self.assertEqual(fdlc.rest_length, params.pusher_sep)

    def test_kind_parses_from_string(self):
        self.assertEqual(ContactModel.model_validate({"kind": "fdlc"}).kind, ContactKind.FDLC)


class TestStateAndControl(unittest.TestCase):

    def test_vector_layout(self):
        state = State(
            theta_box=0.1,
            omega_box=0.2,
            pusher_pos=[[1.0, 2.0], [3.0, 4.0]],
            pusher_vel=[[5.0, 6.0], [7.0, 8.0]],
        )
        np.testing.assert_array_equal(state.to_vector(), [0.1, 1, 2, 3, 4, 0.2, 5, 6, 7, 8])
        again = State.from_vector(state.to_vector(), 2)
        self.assertEqual(again.theta_box, 0.1)
        np.testing.assert_array_equal(again.pusher_vel, state.pusher_vel)

    def test_non_finite_rejected(self):
        with self.assertRaises(ValueError):
            point_state(float("nan"), 0.0)
        with self.assertRaises(ValueError):
            Control(forces=[[float("inf"), 0.0]])

    def test_arrays_are_read_only(self):
        state = point_state(-0.02, 0.0)
        with self.assertRaises(ValueError):
            state.pusher_pos[0, 0] = 1.0

    def test_model_mismatch(self):
        with self.assertRaises(ValueError):
            point_state(-0.02, 0.0).check_model(ContactModel.fdlc(SystemParams()))


class TestSignedDistance(unittest.TestCase):

    def setUp(self):
        self.params = SystemParams(pusher_radius=0.005)
        self.model = ContactModel.point()

    def test_center_on_face_plane(self):
        frames = signed_distance(point_state(-0.01, 0.003), self.params, self.model)
        self.assertAlmostEqual(frames[0].gap, -0.005, places=15)

    def test_axis_aligned_gap(self):
        frame = signed_distance(point_state(-0.02, 0.0), self.params, self.model)[0]
        self.assertAlmostEqual(frame.gap, 0.005, places=15)
        np.testing.assert_allclose(frame.normal, [-1.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(frame.tangent, [0.0, -1.0], atol=1e-15)
        np.testing.assert_allclose(frame.point, [-0.01, 0.0], atol=1e-15)
        self.assertEqual(frame.contact_id, "A")

    def test_rotated_box_matches_body_frame_oracle(self):
        rng = np.random.default_rng(3)
        theta = math.radians(30.0)
        for _ in range(10):
            p = rng.uniform(-0.03, 0.0, size=2)
            frame = signed_distance(point_state(p[0], p[1], theta), self.params, self.model)[0]
            body = rotation(-theta) @ p
            expected = (-body[0] - 0.01) - 0.005
            self.assertAlmostEqual(frame.gap, expected, places=12)
            self.assertAlmostEqual(np.linalg.norm(frame.normal), 1.0, places=12)
            self.assertAlmostEqual(frame.normal @ frame.tangent, 0.0, places=12)

    def test_rotation_consistency(self):
        alpha = 0.4
        p = np.array([-0.015, 0.004])
        rotated = signed_distance(point_state(*(rotation(alpha) @ p), alpha), self.params, self.model)
        base = signed_distance(point_state(*p), self.params, self.model)
        self.assertAlmostEqual(rotated[0].gap, base[0].gap, places=12)


class TestSpringDamper(unittest.TestCase):

    def setUp(self):
        self.model = ContactModel(kind=ContactKind.FDLC, stiffness=1000.0, damping=0.0, rest_length=0.005)

    def pair(self, p1, p2, v1=(0.0, 0.0), v2=(0.0, 0.0)):
        return State(theta_box=0.0, omega_box=0.0, pusher_pos=[p1, p2], pusher_vel=[v1, v2])

    def test_rest_length_gives_zero_force(self):
        model = self.model.model_copy(update={"damping": 5.0})
        f_12, f_21 = spring_damper_force(self.pair((0, 0), (0.005, 0), v2=(0.0, 0.3)), model)
        np.testing.assert_allclose(f_12, [0.0, 0.0], atol=1e-15)
        np.testing.assert_allclose(f_21, [0.0, 0.0], atol=1e-15)

    def test_stretched_spring_is_restoring(self):
        f_12, f_21 = spring_damper_force(self.pair((0, 0), (0.007, 0)), self.model)
        np.testing.assert_allclose(f_12, [-2.0, 0.0], atol=1e-12)
        np.testing.assert_allclose(f_21, [2.0, 0.0], atol=1e-12)

    def test_third_law_exact(self):
        model = self.model.model_copy(update={"damping": 3.0})
        rng = np.random.default_rng(0)
        for _ in range(20):
            p1, p2, v1, v2 = rng.normal(scale=0.01, size=(4, 2))
            f_12, f_21 = spring_damper_force(self.pair(p1, p2, v1, v2), model)
            np.testing.assert_array_equal(f_12 + f_21, [0.0, 0.0])

    def test_translation_and_rotation_equivariance(self):
        model = self.model.model_copy(update={"damping": 2.0})
        p1, p2 = np.array([0.001, 0.002]), np.array([0.004, 0.009])
        v1, v2 = np.array([0.1, -0.2]), np.array([0.3, 0.05])
        f_12, _ = spring_damper_force(self.pair(p1, p2, v1, v2), model)
        shift = np.array([0.3, -0.7])
        f_shift, _ = spring_damper_force(self.pair(p1 + shift, p2 + shift, v1, v2), model)
        np.testing.assert_allclose(f_shift, f_12, atol=1e-12)
        Rm = rotation(0.7)
        f_rot, _ = spring_damper_force(self.pair(Rm @ p1, Rm @ p2, Rm @ v1, Rm @ v2), model)
        np.testing.assert_allclose(f_rot, Rm @ f_12, atol=1e-12)

    def test_coincident_points_raise(self):
        with self.assertRaises(DegenerateDirection):
            spring_damper_force(self.pair((0.001, 0.0), (0.001, 0.0)), self.model)

    def test_fallback_direction_freezes_axis(self):
        terms = spring_terms(np.zeros(2), np.zeros(2), self.model, fallback_direction=np.array([0.0, 2.0]))
        np.testing.assert_allclose(terms.direction, [0.0, 1.0])
        np.testing.assert_allclose(terms.force, [0.0, 5.0])

    def test_derivatives_match_finite_differences(self):
        model = self.model.model_copy(update={"damping": 4.0})
        r, w = np.array([0.006, 0.002]), np.array([0.2, -0.1])
        terms = spring_terms(r, w, model)
        eps = 1e-8
        for j in range(2):
            e = np.zeros(2)
            e[j] = eps
            fd_r = (spring_terms(r + e, w, model).force - spring_terms(r - e, w, model).force) / (2 * eps)
            fd_w = (spring_terms(r, w + e, model).force - spring_terms(r, w - e, model).force) / (2 * eps)
            np.testing.assert_allclose(terms.d_force_d_r[:, j], fd_r, rtol=1e-5, atol=1e-6)
            np.testing.assert_allclose(terms.d_force_d_w[:, j], fd_w, rtol=1e-5, atol=1e-8)


class TestCornerFriction(unittest.TestCase):

    def test_table_values(self):
        friction = corner_friction_torque(0.0, 9.81, SystemParams())
        self.assertAlmostEqual(friction.tau_max, 9.81 * 0.02 / math.sqrt(2.0), places=12)
        self.assertAlmostEqual(friction.tau_max, 0.13873, places=5)

    def test_zero_friction_or_load(self):
        self.assertEqual(corner_friction_torque(0.3, 9.81, SystemParams(mu_s=0.0)).tau_max, 0.0)
        self.assertEqual(corner_friction_torque(0.3, 0.0, SystemParams()).tau_max, 0.0)

    def test_torque_opposes_rotation_within_bound(self):
        friction = corner_friction_torque(0.5, 9.81, SystemParams())
        self.assertLess(friction.torque, 0.0)
        self.assertLessEqual(abs(friction.torque), friction.tau_max + 1e-15)

    def test_negative_load_rejected(self):
        with self.assertRaises(ValueError):
            corner_friction_torque(0.0, -1.0, SystemParams())


class TestContactJacobians(unittest.TestCase):

    def test_normal_force_torque(self):
        params = SystemParams()
        b = 0.004
        state = point_state(-(params.half_side + params.pusher_radius), b)
        frames = signed_distance(state, params, ContactModel.point())
        jac = contact_jacobians(state, frames, params)[0]
        generalized = jac.generalized_force(2.0, 0.0)
        self.assertAlmostEqual(generalized[0], -b * 2.0, places=14)
        np.testing.assert_allclose(generalized[1:], [-2.0, 0.0], atol=1e-15)

    def test_transpose_property(self):
        params = SystemParams()
        rng = np.random.default_rng(7)
        for _ in range(10):
            state = point_state(*rng.uniform(-0.02, -0.01, size=2), theta=rng.uniform(-0.5, 0.5))
            frames = signed_distance(state, params, ContactModel.point())
            jac = contact_jacobians(state, frames, params)[0]
            v, f = rng.normal(size=3), rng.normal(size=2)
            self.assertAlmostEqual(
                jac.relative_velocity(v[0], v[1:]) @ f, v @ jac.generalized_force(*f), places=12
            )


@pytest.mark.parametrize("kind", [ContactKind.POINT, ContactKind.FDLC])
def test_initial_state_gap(kind):
    params = SystemParams()
    model = ContactModel(kind=kind).resolved(params)
    state = initial_state(params, model, gap=0.005)
    for frame in signed_distance(state, params, model):
        assert frame.gap == pytest.approx(0.005, abs=1e-15)
    if kind == ContactKind.FDLC:
        separation = np.linalg.norm(state.pusher_pos[1] - state.pusher_pos[0])
        assert separation == pytest.approx(params.pusher_sep, abs=1e-15)
