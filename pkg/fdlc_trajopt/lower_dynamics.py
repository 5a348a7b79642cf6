"""
Lower-level optimization-based dynamics: one implicit time step with contact.

The step is posed as a relaxed complementarity system R(z; theta_p, kappa) = 0 over
the decision vector

    z = [ v_1+ .. v_Np+ | omega+ | contact blocks | ground block ]

where each active contact block is

    [lam_n, s, lam_pos, sig_pos, lam_neg, sig_neg, beta, sig_cone]

(impulses lam_*, gap slack s, Stewart-Trinkle friction slacks) and the ground block is

    [tau_pos, sig_gpos, tau_neg, sig_gneg, gamma, sig_gcone].

Every complementarity pair (a, b) is relaxed to a * b = kappa with a, b > 0, and
damped Newton with fraction-to-the-boundary follows kappa down to kappa_final.
Sensitivities of the converged step w.r.t. the current state and control come
from the implicit-function theorem on the same residual.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field

from fdlc_trajopt.exceptions import (
    MaxIterationsExceeded,
    NonFiniteIterate,
    SingularJacobian,
    SolverFailure,
)
from fdlc_trajopt.model import (
    EPS_DIR,
    Control,
    ContactKind,
    ContactModel,
    State,
    SystemParams,
    control_dim,
    corner_friction_torque,
    face_geometry,
    face_normal,
    face_tangent,
    spring_terms,
    state_dim,
)

logger = logging.getLogger(__name__)

CONTACT_BLOCK = ("lam_n", "s", "lam_pos", "sig_pos", "lam_neg", "sig_neg", "beta", "sig_cone")
CONTACT_BLOCK_FRICTIONLESS = ("lam_n", "s")
GROUND_BLOCK = ("tau_pos", "sig_gpos", "tau_neg", "sig_gneg", "gamma", "sig_gcone")
CONTACT_PAIRS = (("lam_n", "s"), ("lam_pos", "sig_pos"), ("lam_neg", "sig_neg"), ("beta", "sig_cone"))
GROUND_PAIRS = (("tau_pos", "sig_gpos"), ("tau_neg", "sig_gneg"), ("gamma", "sig_gcone"))
FREE_STEP_ITERATIONS = 20


class LowerSettings(BaseModel):
    """Numerical settings of the lower-level solver."""

    model_config = ConfigDict(frozen=True, extra="forbid")

    kappa_init: float = Field(1e-3, gt=0.0)
    kappa_final: float = Field(1e-8, gt=0.0)
    kappa_factor: float = Field(0.1, gt=0.0, lt=1.0)
    kappa_warm: float = Field(1e-4, gt=0.0)
    tol_lower: float = Field(1e-8, gt=0.0)
    polish_tol: float = Field(1e-12, gt=0.0)
    polish_iterations: int = Field(3, ge=0)
    max_iterations: int = Field(100, ge=1)
    backtrack: float = Field(0.5, gt=0.0, lt=1.0)
    sufficient_decrease: float = Field(1e-4, gt=0.0, lt=0.5)
    min_step: float = Field(1e-10, gt=0.0)
    fraction_to_boundary: float = Field(0.99, gt=0.0, lt=1.0)
    interior_floor: float = Field(1e-3, gt=0.0)
    activation_distance: float = Field(1e-3, ge=0.0)
    eps_dir: float = Field(EPS_DIR, gt=0.0)
    singular_condition: float = Field(1e14, gt=1.0)

    def kappa_schedule(self, start: Optional[float] = None) -> List[float]:
        """Geometric schedule from start (default kappa_init) down to exactly kappa_final."""
        k0 = self.kappa_init if start is None else start
        if k0 <= self.kappa_final:
            return [self.kappa_final]
        n_stages = int(round(math.log(self.kappa_final / k0) / math.log(self.kappa_factor)))
        schedule = [k0 * self.kappa_factor**i for i in range(n_stages)]
        return [k for k in schedule if k > self.kappa_final] + [self.kappa_final]


@dataclass(frozen=True)
class VariableLayout:
    """Index map of the decision vector for a given active-contact set."""

    n_points: int
    active: Tuple[int, ...]
    friction: bool
    ground: bool
    velocity: np.ndarray = field(repr=False)
    omega: int = field(repr=False)
    contacts: Dict[int, Dict[str, int]] = field(repr=False)
    ground_block: Dict[str, int] = field(repr=False)
    size: int = 0

    @classmethod
    def build(
        cls, n_points: int, active: Sequence[int], friction: bool, ground: bool
    ) -> "VariableLayout":
        cursor = 2 * n_points
        velocity = np.arange(cursor)
        omega = cursor
        cursor += 1
        names = CONTACT_BLOCK if friction else CONTACT_BLOCK_FRICTIONLESS
        contacts = {}
        for i in sorted(active):
            contacts[i] = {name: cursor + k for k, name in enumerate(names)}
            cursor += len(names)
        ground_block = {}
        if ground:
            ground_block = {name: cursor + k for k, name in enumerate(GROUND_BLOCK)}
            cursor += len(GROUND_BLOCK)
        return cls(
            n_points=n_points,
            active=tuple(sorted(active)),
            friction=friction,
            ground=ground,
            velocity=velocity,
            omega=omega,
            contacts=contacts,
            ground_block=ground_block,
            size=cursor,
        )

    def pairs(self) -> List[Tuple[int, int]]:
        """Complementarity pairs as (dual index, primal slack index)."""
        pairs = []
        contact_pairs = CONTACT_PAIRS if self.friction else CONTACT_PAIRS[:1]
        for block in self.contacts.values():
            pairs.extend((block[a], block[b]) for a, b in contact_pairs)
        if self.ground:
            pairs.extend((self.ground_block[a], self.ground_block[b]) for a, b in GROUND_PAIRS)
        return pairs

    def cone_indices(self) -> np.ndarray:
        return np.array(sorted(i for pair in self.pairs() for i in pair), dtype=int)

    def same_as(self, other: "VariableLayout") -> bool:
        return (
            self.n_points == other.n_points
            and self.active == other.active
            and self.friction == other.friction
            and self.ground == other.ground
        )


@dataclass(frozen=True)
class LowerProblem:
    """Problem data theta_p = (state, control, h, params, model) plus the variable layout."""

    state: State
    control: Control
    step: float
    params: SystemParams
    model: ContactModel
    settings: LowerSettings
    layout: VariableLayout
    tau_max: float
    spring_direction: Optional[np.ndarray] = None

    @property
    def relaxation(self) -> float:
        return self.settings.kappa_final

    @property
    def n_points(self) -> int:
        return self.model.n_points

    @classmethod
    def build(
        cls,
        state: State,
        control: Control,
        step: float,
        params: SystemParams,
        model: ContactModel,
        settings: Optional[LowerSettings] = None,
        active: Optional[Sequence[int]] = None,
    ) -> "LowerProblem":
        """Assembles the problem; active=None runs the contact broad phase."""
        settings = settings or LowerSettings()
        model = model.resolved(params)
        state.check_model(model)
        if control.n_points != model.n_points:
            raise ValueError(
                f"Control has {control.n_points} points, model {model.name} needs {model.n_points}"
            )
        if step <= 0:
            raise ValueError(f"Time step must be positive, got {step}")

        spring_direction = None
        if model.kind == ContactKind.FDLC:
            r = state.pusher_pos[1] - state.pusher_pos[0]
            d = float(np.linalg.norm(r))
            spring_direction = r / d if d > settings.eps_dir else face_tangent(state.theta_box) * -1.0

        tau_max = corner_friction_torque(0.0, params.normal_load, params).tau_max
        friction = params.mu_p > 0.0
        problem = cls(
            state=state,
            control=control,
            step=step,
            params=params,
            model=model,
            settings=settings,
            layout=VariableLayout.build(model.n_points, (), friction=friction, ground=False),
            tau_max=tau_max,
            spring_direction=spring_direction,
        )
        if active is None:
            active = _broad_phase(problem)
        layout = VariableLayout.build(model.n_points, active, friction=friction, ground=tau_max > 0.0)
        return replace(problem, layout=layout)

    def with_data(self, state: State, control: Control) -> "LowerProblem":
        """Same model, settings and active set, new state/control (used for finite differences)."""
        return LowerProblem.build(
            state,
            control,
            self.step,
            self.params,
            self.model,
            self.settings,
            active=self.layout.active,
        )


def _free_velocity(problem: LowerProblem) -> np.ndarray:
    """
    Pusher velocities of the contact-free implicit step, spring-damper included.
    Newton on the momentum rows alone: at the default parameters h * c / m is about
    10, so an explicit spring prediction overshoots by an order of magnitude.
    """
    state = problem.state
    guess = state.pusher_vel + problem.step * problem.control.forces / problem.params.pusher_mass
    if problem.model.kind != ContactKind.FDLC:
        return guess
    free = replace(
        problem,
        layout=VariableLayout.build(problem.n_points, (), friction=problem.layout.friction, ground=False),
    )
    z = np.concatenate((guess.ravel(), [state.omega_box]))
    for _ in range(FREE_STEP_ITERATIONS):
        ev = _evaluate(z, free, problem.relaxation, with_jacobians=True)
        if np.max(np.abs(ev.residual)) <= problem.settings.polish_tol:
            break
        try:
            z = z + np.linalg.solve(ev.jac_z, -ev.residual)
        except np.linalg.LinAlgError:
            break
    return z[free.layout.velocity].reshape(-1, 2)


def _broad_phase(problem: LowerProblem) -> Tuple[int, ...]:
    """Contacts whose gap now or after a free step is within activation_distance."""
    state = problem.state
    params = problem.params
    p_free = state.pusher_pos + problem.step * _free_velocity(problem)
    thetas = (state.theta_box, state.theta_box + problem.step * state.omega_box)
    offset = params.half_side + params.pusher_radius
    active = []
    for i in range(problem.n_points):
        gaps = [face_geometry(state.theta_box, state.pusher_pos[i]).s_n - offset]
        gaps.extend(face_geometry(th, p_free[i]).s_n - offset for th in thetas)
        if min(gaps) <= problem.settings.activation_distance:
            active.append(i)
    return tuple(active)


@dataclass
class ResidualEvaluation:
    residual: np.ndarray
    jac_z: Optional[np.ndarray] = None
    jac_x: Optional[np.ndarray] = None
    jac_u: Optional[np.ndarray] = None


def _evaluate(
    z: np.ndarray, problem: LowerProblem, kappa: float, with_jacobians: bool
) -> ResidualEvaluation:
    layout = problem.layout
    params = problem.params
    model = problem.model
    state = problem.state
    h = problem.step
    n = problem.n_points
    m = params.pusher_mass
    inertia = params.box_inertia
    half = params.half_side
    mu = params.mu_p
    nq = 1 + 2 * n
    nz = layout.size

    vp = z[layout.velocity].reshape(n, 2)
    om = float(z[layout.omega])
    theta_next = state.theta_box + h * om
    p_next = state.pusher_pos + h * vp
    normal = face_normal(theta_next)
    tangent = face_tangent(theta_next)

    res = np.zeros(nz)
    jz = jx = ju = None
    if with_jacobians:
        jz = np.zeros((nz, nz))
        jx = np.zeros((nz, state_dim(n)))
        ju = np.zeros((nz, control_dim(n)))

    rb = layout.omega
    x_theta, x_omega = 0, nq

    def rows(i):
        return layout.velocity[2 * i : 2 * i + 2]

    def x_pos(i):
        return slice(1 + 2 * i, 3 + 2 * i)

    def x_vel(i):
        return slice(nq + 1 + 2 * i, nq + 3 + 2 * i)

    # (1) pusher momentum, impulse form
    for i in range(n):
        r_i = rows(i)
        res[r_i] = m * (vp[i] - state.pusher_vel[i]) - h * problem.control.forces[i]
        if with_jacobians:
            jz[np.ix_(r_i, r_i)] += m * np.eye(2)
            jx[r_i, x_vel(i)] = -m * np.eye(2)
            ju[r_i, 2 * i : 2 * i + 2] = -h * np.eye(2)

    # FDLC spring-damper at the semi-implicit positions; f_12 acts on point 2
    if model.kind == ContactKind.FDLC:
        terms = spring_terms(
            p_next[1] - p_next[0],
            vp[1] - vp[0],
            model,
            eps_dir=problem.settings.eps_dir,
            fallback_direction=problem.spring_direction,
        )
        r0, r1 = rows(0), rows(1)
        res[r1] -= h * terms.force
        res[r0] += h * terms.force
        if with_jacobians:
            g_v = h * (h * terms.d_force_d_r + terms.d_force_d_w)
            g_p = h * terms.d_force_d_r
            jz[np.ix_(r1, r1)] -= g_v
            jz[np.ix_(r1, r0)] += g_v
            jz[np.ix_(r0, r1)] += g_v
            jz[np.ix_(r0, r0)] -= g_v
            jx[r1, x_pos(1)] -= g_p
            jx[r1, x_pos(0)] += g_p
            jx[r0, x_pos(1)] += g_p
            jx[r0, x_pos(0)] -= g_p

    # (2) box angular momentum
    res[rb] = inertia * (om - state.omega_box)
    if with_jacobians:
        jz[rb, rb] += inertia
        jx[rb, x_omega] = -inertia

    # (3)-(4) contacts
    for i, block in layout.contacts.items():
        r_i = rows(i)
        p_i = p_next[i]
        s_n = float(normal @ p_i)
        s_t = float(tangent @ p_i)
        gap = s_n - half - params.pusher_radius

        lam_n = z[block["lam_n"]]
        slack = z[block["s"]]
        lam_t = 0.0
        if layout.friction:
            lam_t = z[block["lam_pos"]] - z[block["lam_neg"]]

        res[r_i] -= lam_n * normal + lam_t * tangent
        res[rb] -= lam_n * s_t - lam_t * half
        if with_jacobians:
            d_theta = -(lam_n * tangent - lam_t * normal)
            jz[r_i, block["lam_n"]] -= normal
            jz[r_i, rb] += h * d_theta
            jx[r_i, x_theta] += d_theta
            jz[rb, block["lam_n"]] -= s_t
            jz[rb, rb] += h * lam_n * s_n
            jx[rb, x_theta] += lam_n * s_n
            jz[rb, r_i] -= h * lam_n * tangent
            jx[rb, x_pos(i)] -= lam_n * tangent
            if layout.friction:
                jz[r_i, block["lam_pos"]] -= tangent
                jz[r_i, block["lam_neg"]] += tangent
                jz[rb, block["lam_pos"]] += half
                jz[rb, block["lam_neg"]] -= half

        # gap slack equality and its complementarity
        g_row, c_row = block["lam_n"], block["s"]
        res[g_row] = slack - gap
        res[c_row] = lam_n * slack - kappa
        if with_jacobians:
            jz[g_row, block["s"]] = 1.0
            jz[g_row, rb] = -h * s_t
            jz[g_row, r_i] = -h * normal
            jx[g_row, x_theta] = -s_t
            jx[g_row, x_pos(i)] = -normal
            jz[c_row, block["lam_n"]] = slack
            jz[c_row, block["s"]] = lam_n

        if not layout.friction:
            continue

        v_t = float(tangent @ vp[i]) - om * half
        vn_i = float(normal @ vp[i])
        beta = z[block["beta"]]
        lam_pos, sig_pos = z[block["lam_pos"]], z[block["sig_pos"]]
        lam_neg, sig_neg = z[block["lam_neg"]], z[block["sig_neg"]]
        sig_cone = z[block["sig_cone"]]

        fp, cp = block["lam_pos"], block["sig_pos"]
        fm, cm = block["lam_neg"], block["sig_neg"]
        fc, cc = block["beta"], block["sig_cone"]
        res[fp] = sig_pos - (beta + v_t)
        res[cp] = lam_pos * sig_pos - kappa
        res[fm] = sig_neg - (beta - v_t)
        res[cm] = lam_neg * sig_neg - kappa
        res[fc] = sig_cone - (mu * lam_n - lam_pos - lam_neg)
        res[cc] = beta * sig_cone - kappa
        if with_jacobians:
            dvt_domega = -half - h * vn_i
            jz[fp, block["sig_pos"]] = 1.0
            jz[fp, block["beta"]] = -1.0
            jz[fp, rb] = -dvt_domega
            jz[fp, r_i] = -tangent
            jx[fp, x_theta] = vn_i
            jz[cp, block["lam_pos"]] = sig_pos
            jz[cp, block["sig_pos"]] = lam_pos

            jz[fm, block["sig_neg"]] = 1.0
            jz[fm, block["beta"]] = -1.0
            jz[fm, rb] = dvt_domega
            jz[fm, r_i] = tangent
            jx[fm, x_theta] = -vn_i
            jz[cm, block["lam_neg"]] = sig_neg
            jz[cm, block["sig_neg"]] = lam_neg

            jz[fc, block["sig_cone"]] = 1.0
            jz[fc, block["lam_n"]] = -mu
            jz[fc, block["lam_pos"]] = 1.0
            jz[fc, block["lam_neg"]] = 1.0
            jz[cc, block["beta"]] = sig_cone
            jz[cc, block["sig_cone"]] = beta

    # (5) ground torque: the ground applies (tau_pos - tau_neg) to the box
    if layout.ground:
        gb = layout.ground_block
        tau_pos, sig_gpos = z[gb["tau_pos"]], z[gb["sig_gpos"]]
        tau_neg, sig_gneg = z[gb["tau_neg"]], z[gb["sig_gneg"]]
        gamma, sig_gcone = z[gb["gamma"]], z[gb["sig_gcone"]]
        bound = h * problem.tau_max

        res[rb] -= tau_pos - tau_neg
        fp, cp = gb["tau_pos"], gb["sig_gpos"]
        fm, cm = gb["tau_neg"], gb["sig_gneg"]
        fc, cc = gb["gamma"], gb["sig_gcone"]
        res[fp] = sig_gpos - (gamma + om)
        res[cp] = tau_pos * sig_gpos - kappa
        res[fm] = sig_gneg - (gamma - om)
        res[cm] = tau_neg * sig_gneg - kappa
        res[fc] = sig_gcone - (bound - tau_pos - tau_neg)
        res[cc] = gamma * sig_gcone - kappa
        if with_jacobians:
            jz[rb, gb["tau_pos"]] -= 1.0
            jz[rb, gb["tau_neg"]] += 1.0
            jz[fp, gb["sig_gpos"]] = 1.0
            jz[fp, gb["gamma"]] = -1.0
            jz[fp, rb] = -1.0
            jz[cp, gb["tau_pos"]] = sig_gpos
            jz[cp, gb["sig_gpos"]] = tau_pos
            jz[fm, gb["sig_gneg"]] = 1.0
            jz[fm, gb["gamma"]] = -1.0
            jz[fm, rb] = 1.0
            jz[cm, gb["tau_neg"]] = sig_gneg
            jz[cm, gb["sig_gneg"]] = tau_neg
            jz[fc, gb["sig_gcone"]] = 1.0
            jz[fc, gb["tau_pos"]] = 1.0
            jz[fc, gb["tau_neg"]] = 1.0
            jz[cc, gb["gamma"]] = sig_gcone
            jz[cc, gb["sig_gcone"]] = gamma

    return ResidualEvaluation(res, jz, jx, ju)


def assemble_residual(
    z: np.ndarray, problem: LowerProblem, kappa: Optional[float] = None
) -> np.ndarray:
    """R(z; theta_p, kappa); kappa defaults to the problem's final relaxation."""
    z = np.asarray(z, dtype=float)
    if z.shape != (problem.layout.size,):
        raise ValueError(f"z has shape {z.shape}, layout expects ({problem.layout.size},)")
    kappa = problem.relaxation if kappa is None else kappa
    return _evaluate(z, problem, kappa, with_jacobians=False).residual


def residual_jacobians(
    z: np.ndarray, problem: LowerProblem
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(dR/dz, dR/dx, dR/du) at z. The Jacobians do not depend on kappa."""
    ev = _evaluate(np.asarray(z, dtype=float), problem, problem.relaxation, with_jacobians=True)
    return ev.jac_z, ev.jac_x, ev.jac_u


@dataclass(frozen=True)
class StageRecord:
    kappa: float
    iterations: int
    residual_norm: float


@dataclass(frozen=True)
class LowerSolution:
    next_state: State
    forces: np.ndarray  # (N_p, 2): [f_n, f_t] per pusher point, N
    ground_torque: float  # resisting torque tau_g, N*m
    residual_norm: float
    iterations: int
    z: np.ndarray
    layout: VariableLayout
    stages: Tuple[StageRecord, ...] = ()
    warm_started: bool = False

    @property
    def active(self) -> Tuple[int, ...]:
        return self.layout.active

    @property
    def duals_and_slacks(self) -> np.ndarray:
        return self.z

    def cone_margin(self, mu_p: float) -> float:
        """min over contacts of mu_p * f_n - |f_t| (positive inside the cone)."""
        if self.forces.size == 0:
            return math.inf
        return float(np.min(mu_p * self.forces[:, 0] - np.abs(self.forces[:, 1])))


@dataclass(frozen=True)
class StepLinearization:
    A: np.ndarray
    B: np.ndarray


def _next_state_vector(z: np.ndarray, problem: LowerProblem) -> np.ndarray:
    layout = problem.layout
    h = problem.step
    vp = z[layout.velocity]
    om = z[layout.omega]
    theta = problem.state.theta_box + h * om
    pos = problem.state.pusher_pos.ravel() + h * vp
    return np.concatenate(([theta], pos, [om], vp))


def _selection_matrix(problem: LowerProblem) -> np.ndarray:
    """d x_next / d z."""
    layout = problem.layout
    n = problem.n_points
    nq = 1 + 2 * n
    h = problem.step
    sel = np.zeros((state_dim(n), layout.size))
    sel[0, layout.omega] = h
    sel[nq, layout.omega] = 1.0
    for k, idx in enumerate(layout.velocity):
        sel[1 + k, idx] = h
        sel[nq + 1 + k, idx] = 1.0
    return sel


def _cold_start(problem: LowerProblem, kappa: float) -> np.ndarray:
    """
    Interior point from the contact-free implicit step. A contact that step would
    penetrate is moved back onto the face and starts with the impulse doing so.
    """
    layout = problem.layout
    params = problem.params
    state = problem.state
    h = problem.step
    floor = problem.settings.interior_floor
    half = params.half_side

    v_pred = _free_velocity(problem)
    om = state.omega_box
    theta_pred = state.theta_box + h * om

    z = np.zeros(layout.size)
    z[layout.omega] = om
    for i, block in layout.contacts.items():
        geom = face_geometry(theta_pred, state.pusher_pos[i] + h * v_pred[i])
        gap = geom.s_n - half - params.pusher_radius
        if gap < 0.0:
            v_pred[i] = v_pred[i] - (gap / h) * geom.normal
        slack = max(gap, floor)
        lam_n = max(kappa / slack, -params.pusher_mass * gap / h)
        z[block["s"]] = slack
        z[block["lam_n"]] = lam_n
        if layout.friction:
            v_t = float(geom.tangent @ v_pred[i]) - om * half
            beta = abs(v_t) + floor
            sig_pos, sig_neg = beta + v_t, beta - v_t
            lam_pos, lam_neg = kappa / sig_pos, kappa / sig_neg
            z[block["beta"]] = beta
            z[block["sig_pos"]] = sig_pos
            z[block["sig_neg"]] = sig_neg
            z[block["lam_pos"]] = lam_pos
            z[block["lam_neg"]] = lam_neg
            z[block["sig_cone"]] = max(params.mu_p * lam_n - lam_pos - lam_neg, floor)
    z[layout.velocity] = v_pred.ravel()
    if layout.ground:
        gb = layout.ground_block
        gamma = abs(om) + floor
        sig_gpos, sig_gneg = gamma + om, gamma - om
        tau_pos, tau_neg = kappa / sig_gpos, kappa / sig_gneg
        z[gb["gamma"]] = gamma
        z[gb["sig_gpos"]] = sig_gpos
        z[gb["sig_gneg"]] = sig_gneg
        z[gb["tau_pos"]] = tau_pos
        z[gb["tau_neg"]] = tau_neg
        z[gb["sig_gcone"]] = max(h * problem.tau_max - tau_pos - tau_neg, floor)
    return z


def _warm_start(problem: LowerProblem, warm: LowerSolution, kappa: float) -> np.ndarray:
    layout = problem.layout
    if layout.same_as(warm.layout):
        z = warm.z.copy()
    else:
        z = _cold_start(problem, kappa)
        z[layout.velocity] = warm.z[warm.layout.velocity]
        z[layout.omega] = warm.z[warm.layout.omega]
        for i, block in layout.contacts.items():
            old = warm.layout.contacts.get(i)
            if old is not None and warm.layout.friction == layout.friction:
                for name, idx in block.items():
                    z[idx] = warm.z[old[name]]
        if layout.ground and warm.layout.ground:
            for name, idx in layout.ground_block.items():
                z[idx] = warm.z[warm.layout.ground_block[name]]
    # re-centre every pair onto (at least) the warm central path
    for a, b in layout.pairs():
        z[a] = max(z[a], 1e-300)
        z[b] = max(z[b], 1e-300)
        product = z[a] * z[b]
        if product < kappa:
            scale = math.sqrt(kappa / product)
            z[a] *= scale
            z[b] *= scale
    return z


def _max_step(z: np.ndarray, dz: np.ndarray, cone: np.ndarray, tau: float) -> float:
    if cone.size == 0:
        return 1.0
    dz_c = dz[cone]
    shrinking = dz_c < 0
    if not np.any(shrinking):
        return 1.0
    return float(min(1.0, tau * np.min(-z[cone][shrinking] / dz_c[shrinking])))


def _newton_stage(
    z: np.ndarray,
    problem: LowerProblem,
    kappa: float,
    tol: float,
    max_iterations: int,
    cone: np.ndarray,
) -> Tuple[np.ndarray, int, float]:
    settings = problem.settings
    iterations = 0
    ev = _evaluate(z, problem, kappa, with_jacobians=True)
    norm = float(np.max(np.abs(ev.residual)))
    while norm > tol:
        if iterations >= max_iterations:
            raise MaxIterationsExceeded(
                f"Newton did not reach {tol:.1e} within {max_iterations} iterations "
                f"at kappa={kappa:.1e} (residual {norm:.3e})",
                residual_norm=norm,
                kappa=kappa,
            )
        iterations += 1
        try:
            dz = np.linalg.solve(ev.jac_z, -ev.residual)
        except np.linalg.LinAlgError as e:
            raise SingularJacobian(
                f"Residual Jacobian is singular at kappa={kappa:.1e}: {e}",
                condition=math.inf,
            ) from e
        if not np.all(np.isfinite(dz)):
            raise NonFiniteIterate(f"Newton direction is not finite at kappa={kappa:.1e}")

        merit = float(ev.residual @ ev.residual)
        alpha = _max_step(z, dz, cone, settings.fraction_to_boundary)
        while True:
            z_try = z + alpha * dz
            ev_try = _evaluate(z_try, problem, kappa, with_jacobians=False)
            merit_try = float(ev_try.residual @ ev_try.residual)
            if np.isfinite(merit_try) and merit_try <= (
                1.0 - 2.0 * settings.sufficient_decrease * alpha
            ) * merit:
                break
            if alpha * settings.backtrack < settings.min_step:
                # no sufficient decrease along dz; take the short step and let the
                # iteration budget decide
                break
            alpha *= settings.backtrack
        if not np.all(np.isfinite(z_try)):
            raise NonFiniteIterate(f"Newton iterate is not finite at kappa={kappa:.1e}")
        z = z_try
        ev = _evaluate(z, problem, kappa, with_jacobians=True)
        norm = float(np.max(np.abs(ev.residual)))
        if not math.isfinite(norm):
            raise NonFiniteIterate(f"Residual is not finite at kappa={kappa:.1e}")
    return z, iterations, norm


def _polish(z: np.ndarray, problem: LowerProblem, cone: np.ndarray) -> Tuple[np.ndarray, int, float]:
    settings = problem.settings
    kappa = settings.kappa_final
    ev = _evaluate(z, problem, kappa, with_jacobians=True)
    norm = float(np.max(np.abs(ev.residual)))
    steps = 0
    while norm > settings.polish_tol and steps < settings.polish_iterations:
        steps += 1
        try:
            dz = np.linalg.solve(ev.jac_z, -ev.residual)
        except np.linalg.LinAlgError:
            break
        alpha = _max_step(z, dz, cone, settings.fraction_to_boundary)
        z_try = z + alpha * dz
        ev_try = _evaluate(z_try, problem, kappa, with_jacobians=True)
        norm_try = float(np.max(np.abs(ev_try.residual)))
        if not norm_try < norm:
            break
        z, ev, norm = z_try, ev_try, norm_try
    return z, steps, norm


def _run_schedule(
    z: np.ndarray, problem: LowerProblem, schedule: List[float]
) -> Tuple[np.ndarray, List[StageRecord], float]:
    settings = problem.settings
    cone = problem.layout.cone_indices()
    stages = []
    norm = math.inf
    for kappa in schedule:
        is_final = kappa == schedule[-1]
        tol = settings.tol_lower if is_final else max(kappa, settings.tol_lower)
        z, iterations, norm = _newton_stage(
            z, problem, kappa, tol, settings.max_iterations, cone
        )
        stages.append(StageRecord(kappa, iterations, norm))
    z, steps, norm = _polish(z, problem, cone)
    if steps:
        stages.append(StageRecord(settings.kappa_final, steps, norm))
    return z, stages, norm


def _package(
    z: np.ndarray,
    problem: LowerProblem,
    stages: List[StageRecord],
    norm: float,
    warm_started: bool,
) -> LowerSolution:
    layout = problem.layout
    h = problem.step
    n = problem.n_points
    forces = np.zeros((n, 2))
    for i, block in layout.contacts.items():
        forces[i, 0] = z[block["lam_n"]] / h
        if layout.friction:
            forces[i, 1] = (z[block["lam_pos"]] - z[block["lam_neg"]]) / h
    ground_torque = 0.0
    if layout.ground:
        gb = layout.ground_block
        ground_torque = (z[gb["tau_neg"]] - z[gb["tau_pos"]]) / h
    z = z.copy()
    z.setflags(write=False)
    forces.setflags(write=False)
    return LowerSolution(
        next_state=State.from_vector(_next_state_vector(z, problem), n),
        forces=forces,
        ground_torque=float(ground_torque),
        residual_norm=norm,
        iterations=sum(s.iterations for s in stages),
        z=z,
        layout=layout,
        stages=tuple(stages),
        warm_started=warm_started,
    )


def solve_step(
    problem: LowerProblem, warm_start: Optional[LowerSolution] = None
) -> LowerSolution:
    """
    Solves R(z) = 0 along the kappa schedule and returns the next state and contact forces.

    A warm start skips to kappa_warm after re-centring; if that fails, the step is
    retried from a cold start so the outcome never depends on a bad warm start. A
    failed cold start gets one more pass, a kappa stage earlier with twice the budget.
    """
    settings = problem.settings
    if warm_start is not None:
        if warm_start.layout.n_points != problem.layout.n_points:
            raise ValueError("Warm start belongs to a different contact model")
        kappa0 = min(settings.kappa_warm, settings.kappa_init)
        z0 = _warm_start(problem, warm_start, kappa0)
        try:
            z, stages, norm = _run_schedule(z0, problem, settings.kappa_schedule(kappa0))
            return _package(z, problem, stages, norm, warm_started=True)
        except SolverFailure as e:
            logger.debug(f"Warm-started solve failed ({e}); retrying from a cold start.")

    try:
        z0 = _cold_start(problem, settings.kappa_init)
        z, stages, norm = _run_schedule(z0, problem, settings.kappa_schedule())
    except SolverFailure as e:
        # one gentler pass: a stage earlier on the kappa path, twice the Newton budget
        kappa0 = settings.kappa_init / settings.kappa_factor
        logger.debug(f"Cold solve failed ({e}); retrying from kappa={kappa0:.1e}.")
        patient = replace(
            problem,
            settings=settings.model_copy(update={"max_iterations": 2 * settings.max_iterations}),
        )
        z, stages, norm = _run_schedule(
            _cold_start(patient, kappa0), patient, settings.kappa_schedule(kappa0)
        )
    return _package(z, problem, stages, norm, warm_started=False)


def linearize_step(problem: LowerProblem, solution: LowerSolution) -> StepLinearization:
    """
    A = dx+/dx and B = dx+/du by the implicit-function theorem at kappa_final:
    (dR/dz) (dz/dtheta) = -dR/dtheta, one LU factorization for all right-hand sides.
    """
    if not solution.layout.same_as(problem.layout):
        raise ValueError("Solution layout does not match the problem")
    if solution.residual_norm > problem.settings.tol_lower:
        raise ValueError(
            f"Solution residual {solution.residual_norm:.3e} exceeds tol_lower "
            f"{problem.settings.tol_lower:.1e}"
        )
    jz, jx, ju = residual_jacobians(solution.z, problem)
    condition = float(np.linalg.cond(jz))
    if not math.isfinite(condition) or condition > problem.settings.singular_condition:
        raise SingularJacobian(
            f"Residual Jacobian is numerically singular (condition {condition:.3e})",
            condition=condition,
        )
    lu = scipy.linalg.lu_factor(jz, check_finite=False)
    sens = scipy.linalg.lu_solve(lu, -np.hstack((jx, ju)), check_finite=False)
    n = problem.n_points
    nx = state_dim(n)
    nq = 1 + 2 * n
    sel = _selection_matrix(problem)
    direct = np.zeros((nx, nx))
    direct[np.arange(nq), np.arange(nq)] = 1.0
    A = direct + sel @ sens[:, :nx]
    B = sel @ sens[:, nx:]
    return StepLinearization(A=A, B=B)


def finite_difference_linearization(
    problem: LowerProblem,
    solution: LowerSolution,
    eps: float = 1e-6,
    tol: float = 1e-12,
) -> StepLinearization:
    """Central differences of solve_step at kappa_final with the active set pinned."""
    tight = problem.settings.model_copy(
        update={"tol_lower": tol, "polish_tol": min(tol, problem.settings.polish_tol)}
    )
    base = LowerProblem.build(
        problem.state,
        problem.control,
        problem.step,
        problem.params,
        problem.model,
        tight,
        active=problem.layout.active,
    )
    n = problem.n_points
    x0 = problem.state.to_vector()
    u0 = problem.control.to_vector()

    def next_state(x, u):
        trial = base.with_data(State.from_vector(x, n), Control.from_vector(u, n))
        return solve_step(trial, warm_start=solution).next_state.to_vector()

    nx, nu = x0.size, u0.size
    A = np.zeros((nx, nx))
    B = np.zeros((nx, nu))
    for j in range(nx):
        dx = np.zeros(nx)
        dx[j] = eps
        A[:, j] = (next_state(x0 + dx, u0) - next_state(x0 - dx, u0)) / (2 * eps)
    for j in range(nu):
        du = np.zeros(nu)
        du[j] = eps
        B[:, j] = (next_state(x0, u0 + du) - next_state(x0, u0 - du)) / (2 * eps)
    return StepLinearization(A=A, B=B)


class LowerSolver:
    """
    Per-trajectory solver handle: settings plus the per-step diagnostic records
    written to lower_diagnostics.csv in verbose runs. Not shared between threads.
    """

    def __init__(self, settings: Optional[LowerSettings] = None, record: bool = False):
        self.settings = settings or LowerSettings()
        self.record = record
        self.records: List[Dict[str, float]] = []

    def problem(
        self,
        state: State,
        control: Control,
        step: float,
        params: SystemParams,
        model: ContactModel,
    ) -> LowerProblem:
        return LowerProblem.build(state, control, step, params, model, self.settings)

    def solve(
        self,
        problem: LowerProblem,
        warm_start: Optional[LowerSolution] = None,
        step_index: int = -1,
    ) -> LowerSolution:
        solution = solve_step(problem, warm_start)
        if self.record:
            for stage_index, stage in enumerate(solution.stages):
                self.records.append(
                    {
                        "step": step_index,
                        "stage": stage_index,
                        "kappa": stage.kappa,
                        "newton_iterations": stage.iterations,
                        "residual_norm": stage.residual_norm,
                        "warm_started": solution.warm_started,
                        "active_contacts": len(solution.active),
                    }
                )
        return solution

    def linearize(self, problem: LowerProblem, solution: LowerSolution) -> StepLinearization:
        return linearize_step(problem, solution)

    def clear(self) -> None:
        self.records.clear()
