"""
Planar pusher-box scene: parameters, contact models, state containers and the
geometric primitives shared by the lower-level dynamics and the upper-level cost.

Conventions:
    - The box is pinned at the world origin and only rotates (theta_box about z).
    - Contact is resolved against a single face, the one whose outward normal
      is -x at theta_box = 0. Its plane sits at distance side_len/2 from the
      centre along the outward normal.
    - The state vector is x = [theta, p_1, ..., p_Np, omega, v_1, ..., v_Np]
      (positions first, then velocities); the control is u = [u_1, ..., u_Np].
"""

import enum
import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator

from fdlc_trajopt.exceptions import DegenerateDirection

logger = logging.getLogger(__name__)

GRAVITY = 9.81
EPS_DIR = 1e-9
INERTIA_RTOL = 1e-9
CONTACT_IDS = {1: ("A",), 2: ("B", "C")}


class ContactKind(enum.Enum):
    POINT = "point"
    FDLC = "fdlc"


class SystemParams(BaseModel):
    """Physical constants of the pusher-box scene (SI units)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    mu_p: float = Field(0.5, ge=0.0)  # pusher-object friction
    mu_s: float = Field(1.0, ge=0.0)  # object-surface friction
    mass_box: float = Field(1.0, gt=0.0)
    side_len: float = Field(0.02, gt=0.0)
    pusher_sep: float = Field(0.005, gt=0.0)
    pusher_radius: float = Field(0.0025, gt=0.0)
    pusher_mass: float = Field(0.1, gt=0.0)
    box_inertia: Optional[float] = Field(None, gt=0.0)
    # Disable to accept a box_inertia other than the square-plate value.
    check_inertia: bool = True
    gravity: float = Field(GRAVITY, gt=0.0)
    # Normal load carried by the ground; None means the box weight.
    ground_load: Optional[float] = Field(None, ge=0.0)

    @model_validator(mode="before")
    @classmethod
    def _default_inertia(cls, data):
        if isinstance(data, dict) and data.get("box_inertia") is None:
            mass = data.get("mass_box", 1.0)
            side = data.get("side_len", 0.02)
            if isinstance(mass, (int, float)) and isinstance(side, (int, float)):
                data = {**data, "box_inertia": mass * side**2 / 6.0}
        return data

    @model_validator(mode="after")
    def _check_inertia(self):
        plate = self.mass_box * self.side_len**2 / 6.0
        if self.box_inertia is None:
            raise ValueError("box_inertia could not be derived")
        if self.check_inertia and not math.isclose(
            self.box_inertia, plate, rel_tol=INERTIA_RTOL
        ):
            raise ValueError(
                f"box_inertia {self.box_inertia} differs from the square-plate value "
                f"{plate} (set check_inertia=false to override)"
            )
        return self

    @property
    def half_side(self) -> float:
        return 0.5 * self.side_len

    @property
    def normal_load(self) -> float:
        if self.ground_load is not None:
            return self.ground_load
        return self.mass_box * self.gravity


class ContactModel(BaseModel):
    """Point contact (one pusher point) or FDLC (two points joined by a spring-damper)."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kind: ContactKind = ContactKind.POINT
    stiffness: float = Field(1000.0, gt=0.0)  # k, N/m
    damping: Optional[float] = Field(None, ge=0.0)  # c, N*s/m; None -> critical
    rest_length: Optional[float] = Field(None, gt=0.0)  # L, m; None -> pusher_sep

    @property
    def n_points(self) -> int:
        return 1 if self.kind == ContactKind.POINT else 2

    @property
    def name(self) -> str:
        return self.kind.value

    @property
    def contact_ids(self) -> Tuple[str, ...]:
        return CONTACT_IDS[self.n_points]

    @property
    def is_resolved(self) -> bool:
        if self.kind == ContactKind.POINT:
            return True
        return self.damping is not None and self.rest_length is not None

    def resolved(self, params: SystemParams) -> "ContactModel":
        """Fills FDLC defaults: critical damping for one pusher point and L = pusher_sep."""
        if self.is_resolved:
            return self
        damping = self.damping
        if damping is None:
            damping = 2.0 * math.sqrt(self.stiffness * params.pusher_mass)
        rest_length = self.rest_length if self.rest_length is not None else params.pusher_sep
        return self.model_copy(update={"damping": damping, "rest_length": rest_length})

    @classmethod
    def point(cls) -> "ContactModel":
        return cls(kind=ContactKind.POINT)

    @classmethod
    def fdlc(cls, params: SystemParams, **overrides) -> "ContactModel":
        return cls(kind=ContactKind.FDLC, **overrides).resolved(params)


def state_dim(n_points: int) -> int:
    return 2 * (1 + 2 * n_points)


def control_dim(n_points: int) -> int:
    return 2 * n_points


def _frozen_array(values, shape) -> np.ndarray:
    arr = np.array(values, dtype=float).reshape(shape)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class State:
    theta_box: float
    omega_box: float
    pusher_pos: np.ndarray  # (N_p, 2)
    pusher_vel: np.ndarray  # (N_p, 2)

    def __post_init__(self):
        pos = _frozen_array(self.pusher_pos, (-1, 2))
        vel = _frozen_array(self.pusher_vel, (-1, 2))
        if pos.shape != vel.shape:
            raise ValueError(
                f"pusher_pos {pos.shape} and pusher_vel {vel.shape} disagree"
            )
        object.__setattr__(self, "pusher_pos", pos)
        object.__setattr__(self, "pusher_vel", vel)
        object.__setattr__(self, "theta_box", float(self.theta_box))
        object.__setattr__(self, "omega_box", float(self.omega_box))
        if not (
            math.isfinite(self.theta_box)
            and math.isfinite(self.omega_box)
            and np.all(np.isfinite(pos))
            and np.all(np.isfinite(vel))
        ):
            raise ValueError("State contains non-finite entries")

    @property
    def n_points(self) -> int:
        return self.pusher_pos.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate(
            (
                [self.theta_box],
                self.pusher_pos.ravel(),
                [self.omega_box],
                self.pusher_vel.ravel(),
            )
        )

    @classmethod
    def from_vector(cls, x: np.ndarray, n_points: int) -> "State":
        x = np.asarray(x, dtype=float).ravel()
        if x.size != state_dim(n_points):
            raise ValueError(
                f"State vector has {x.size} entries, expected {state_dim(n_points)}"
            )
        nq = 1 + 2 * n_points
        return cls(
            theta_box=x[0],
            omega_box=x[nq],
            pusher_pos=x[1:nq].reshape(n_points, 2),
            pusher_vel=x[nq + 1 :].reshape(n_points, 2),
        )

    def check_model(self, model: ContactModel) -> None:
        if self.n_points != model.n_points:
            raise ValueError(
                f"State has {self.n_points} pusher points but the {model.name} model needs {model.n_points}"
            )


@dataclass(frozen=True)
class Control:
    forces: np.ndarray  # (N_p, 2), N

    def __post_init__(self):
        forces = _frozen_array(self.forces, (-1, 2))
        if not np.all(np.isfinite(forces)):
            raise ValueError("Control contains non-finite entries")
        object.__setattr__(self, "forces", forces)

    @property
    def n_points(self) -> int:
        return self.forces.shape[0]

    def to_vector(self) -> np.ndarray:
        return self.forces.ravel().copy()

    @classmethod
    def from_vector(cls, u: np.ndarray, n_points: int) -> "Control":
        u = np.asarray(u, dtype=float).ravel()
        if u.size != control_dim(n_points):
            raise ValueError(
                f"Control vector has {u.size} entries, expected {control_dim(n_points)}"
            )
        return cls(forces=u.reshape(n_points, 2))


@dataclass(frozen=True)
class FaceGeometry:
    """World-frame face normal/tangent and the pusher centre's body coordinates."""

    normal: np.ndarray
    tangent: np.ndarray
    s_n: float  # distance from the box centre along the outward normal
    s_t: float  # coordinate along the tangent


def face_normal(theta: float) -> np.ndarray:
    return np.array([-math.cos(theta), -math.sin(theta)])


def face_tangent(theta: float) -> np.ndarray:
    # normal rotated by +90 degrees
    return np.array([math.sin(theta), -math.cos(theta)])


def face_geometry(theta: float, point: np.ndarray) -> FaceGeometry:
    n = face_normal(theta)
    t = face_tangent(theta)
    return FaceGeometry(
        normal=n, tangent=t, s_n=float(n @ point), s_t=float(t @ point)
    )


@dataclass(frozen=True)
class ContactFrame:
    point: np.ndarray
    normal: np.ndarray
    tangent: np.ndarray
    gap: float
    contact_id: str
    index: int = field(default=0)


def signed_distance(
    state: State, params: SystemParams, model: ContactModel
) -> List[ContactFrame]:
    """One frame per pusher point against the designated face, in world coordinates."""
    state.check_model(model)
    frames = []
    for i, (p, contact_id) in enumerate(zip(state.pusher_pos, model.contact_ids)):
        geom = face_geometry(state.theta_box, p)
        plane_dist = geom.s_n - params.half_side
        frames.append(
            ContactFrame(
                point=p - plane_dist * geom.normal,
                normal=geom.normal,
                tangent=geom.tangent,
                gap=plane_dist - params.pusher_radius,
                contact_id=contact_id,
                index=i,
            )
        )
    return frames


@dataclass(frozen=True)
class SpringTerms:
    """f_12 (acting on point 2) and its derivatives w.r.t. r = p_2 - p_1 and w = v_2 - v_1."""

    force: np.ndarray
    d_force_d_r: np.ndarray
    d_force_d_w: np.ndarray
    direction: np.ndarray


def spring_terms(
    r: np.ndarray,
    w: np.ndarray,
    model: ContactModel,
    eps_dir: float = EPS_DIR,
    fallback_direction: Optional[np.ndarray] = None,
) -> SpringTerms:
    """
    Evaluates f_12 = -k (d - L) n - c ((v_2 - v_1)^T n) n with d = |r|, n = r / d.

    Raises DegenerateDirection when |r| <= eps_dir and no fallback direction is
    given; with a fallback the direction is frozen and only the axial terms remain.
    """
    if model.kind != ContactKind.FDLC:
        raise ValueError("Spring-damper forces exist only for the FDLC model")
    model_k = model.stiffness
    model_c = model.damping if model.damping is not None else 0.0
    rest = model.rest_length
    if rest is None:
        raise ValueError("FDLC model must be resolved before use (rest_length unset)")

    r = np.asarray(r, dtype=float)
    w = np.asarray(w, dtype=float)
    d = math.sqrt(float(r @ r))
    if d <= eps_dir:
        if fallback_direction is None:
            raise DegenerateDirection(d, eps_dir)
        n = np.asarray(fallback_direction, dtype=float)
        n = n / np.linalg.norm(n)
        nn = np.outer(n, n)
        force = -model_k * (float(n @ r) - rest) * n - model_c * float(w @ n) * n
        return SpringTerms(force, -model_k * nn, -model_c * nn, n)

    n = r / d
    nn = np.outer(n, n)
    proj = np.eye(2) - nn
    wn = float(w @ n)
    force = -model_k * (d - rest) * n - model_c * wn * n
    d_force_d_r = -model_k * (nn + (d - rest) / d * proj) - (model_c / d) * (
        np.outer(n, w @ proj) + wn * proj
    )
    d_force_d_w = -model_c * nn
    return SpringTerms(force, d_force_d_r, d_force_d_w, n)


def spring_damper_force(
    state: State, model: ContactModel, eps_dir: float = EPS_DIR
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Returns (f_12, f_21) for the FDLC pair. f_12 acts on point 2 and f_21 = -f_12
    on point 1, so a stretched spring pulls the points together.
    """
    state.check_model(model)
    p1, p2 = state.pusher_pos
    v1, v2 = state.pusher_vel
    terms = spring_terms(p2 - p1, v2 - v1, model, eps_dir=eps_dir)
    f_12 = terms.force
    return f_12, -f_12


@dataclass(frozen=True)
class CornerFriction:
    tau_max: float  # N*m, bound on the ground torque magnitude
    torque: float  # N*m, regularized four-corner torque opposing omega


def corner_friction_torque(
    omega_box: float,
    normal_load: float,
    params: SystemParams,
    velocity_scale: float = 1e-4,
) -> CornerFriction:
    """
    Rotational ground friction as Coulomb forces at the four corners, each
    carrying a quarter of the normal load at radius side_len / sqrt(2).
    """
    if normal_load < 0:
        raise ValueError(f"normal_load must be non-negative, got {normal_load}")
    corner_radius = params.side_len / math.sqrt(2.0)
    per_corner = params.mu_s * (normal_load / 4.0)
    tau_max = 0.0
    torque = 0.0
    for _ in range(4):
        tau_max += per_corner * corner_radius
        slip_speed = omega_box * corner_radius
        torque -= per_corner * corner_radius * math.tanh(slip_speed / velocity_scale)
    return CornerFriction(tau_max=tau_max, torque=torque)


def cross2(a: np.ndarray, b: np.ndarray) -> float:
    return float(a[0] * b[1] - a[1] * b[0])


@dataclass(frozen=True)
class ContactJacobian:
    """
    velocity_map takes (omega_box, v_x, v_y) of one pusher point to the relative
    normal and tangential velocity at the contact point; force_map is its transpose
    and takes (f_n, f_t) on the pusher to (torque on box, force on pusher).
    """

    contact_id: str
    velocity_map: np.ndarray  # (2, 3)

    @property
    def force_map(self) -> np.ndarray:
        return self.velocity_map.T

    def relative_velocity(self, omega_box: float, pusher_vel: np.ndarray) -> np.ndarray:
        return self.velocity_map @ np.concatenate(([omega_box], pusher_vel))

    def generalized_force(self, f_n: float, f_t: float) -> np.ndarray:
        return self.force_map @ np.array([f_n, f_t])


def contact_jacobians(
    state: State, frames: List[ContactFrame], params: SystemParams
) -> List[ContactJacobian]:
    jacobians = []
    for frame in frames:
        # Box material velocity at c is omega * z x c, so n.(z x c) = c x n.
        arm_n = cross2(frame.point, frame.normal)
        arm_t = cross2(frame.point, frame.tangent)
        velocity_map = np.array(
            [
                [-arm_n, frame.normal[0], frame.normal[1]],
                [-arm_t, frame.tangent[0], frame.tangent[1]],
            ]
        )
        jacobians.append(ContactJacobian(frame.contact_id, velocity_map))
    return jacobians


def initial_state(
    params: SystemParams, model: ContactModel, gap: float = 0.005
) -> State:
    """
    Pusher (or the FDLC midpoint) at the centre height of the -x face with the
    given gap; FDLC points sit +-pusher_sep/2 along the face tangent.
    """
    mid = np.array([-(params.half_side + params.pusher_radius + gap), 0.0])
    if model.n_points == 1:
        positions = mid.reshape(1, 2)
    else:
        t0 = face_tangent(0.0)
        half = 0.5 * params.pusher_sep
        positions = np.vstack((mid + half * t0, mid - half * t0))
    return State(
        theta_box=0.0,
        omega_box=0.0,
        pusher_pos=positions,
        pusher_vel=np.zeros_like(positions),
    )
