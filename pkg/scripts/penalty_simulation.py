"""
Fine-timestep penalty simulation of the pusher-box scene.

Independent of the complementarity solver: contact is a stiff unilateral
spring-damper, pusher friction is tanh-regularized Coulomb, and the state is
advanced with explicit symplectic Euler at h / substeps. Used as a test oracle
for the implicit time stepper.
"""

import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass

import numpy as np

# Add project root to Python path to allow importing project modules
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt.config import LOG_FORMAT
from fdlc_trajopt.model import (
    ContactKind,
    ContactModel,
    Control,
    State,
    SystemParams,
    corner_friction_torque,
    face_geometry,
    spring_damper_force,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class PenaltySettings:
    stiffness: float = 1e7  # N/m
    damping: float = 1e3  # N*s/m, only while penetrating
    friction_velocity: float = 1e-4  # m/s, tanh regularization of Coulomb friction
    substeps: int = 1000


def contact_forces(state: State, params: SystemParams, settings: PenaltySettings):
    """Per-point (f_n, f_t) from penetration depth and relative velocity."""
    forces = np.zeros((state.n_points, 2))
    half = params.half_side
    for i, (p, v) in enumerate(zip(state.pusher_pos, state.pusher_vel)):
        geom = face_geometry(state.theta_box, p)
        depth = -(geom.s_n - half - params.pusher_radius)
        if depth <= 0.0:
            continue
        v_n = float(geom.normal @ v) + state.omega_box * geom.s_t
        f_n = max(settings.stiffness * depth - settings.damping * v_n, 0.0)
        v_t = float(geom.tangent @ v) - state.omega_box * half
        f_t = -params.mu_p * f_n * math.tanh(v_t / settings.friction_velocity)
        forces[i] = (f_n, f_t)
    return forces


def simulate(
    state: State,
    control: Control,
    params: SystemParams,
    model: ContactModel,
    step: float,
    n_steps: int,
    settings: PenaltySettings = PenaltySettings(),
) -> np.ndarray:
    """Returns the state vectors at the n_steps + 1 coarse step boundaries."""
    model = model.resolved(params)
    dt = step / settings.substeps
    theta, omega = state.theta_box, state.omega_box
    pos = np.array(state.pusher_pos)
    vel = np.array(state.pusher_vel)
    out = [state.to_vector()]
    for _ in range(n_steps):
        for _ in range(settings.substeps):
            current = State(theta, omega, pos, vel)
            forces = contact_forces(current, params, settings)
            push = np.array(control.forces, dtype=float)
            torque = corner_friction_torque(omega, params.normal_load, params).torque
            for i, p in enumerate(pos):
                geom = face_geometry(theta, p)
                f_n, f_t = forces[i]
                push[i] += f_n * geom.normal + f_t * geom.tangent
                torque += f_n * geom.s_t - f_t * params.half_side
            if model.kind == ContactKind.FDLC:
                f_12, f_21 = spring_damper_force(current, model)
                push[1] += f_12
                push[0] += f_21
            vel = vel + dt * push / params.pusher_mass
            omega = omega + dt * torque / params.box_inertia
            pos = pos + dt * vel
            theta = theta + dt * omega
        out.append(State(theta, omega, pos, vel).to_vector())
    return np.array(out)


def push_scenario(params: SystemParams, offset: float = 0.005, force: float = 0.05, omega: float = 0.0):
    """
    Point pusher touching the -x face at height offset, pushing along +x. With a
    spinning box (omega != 0) the pusher starts with the normal velocity of the
    face at the contact, so the first step has no impact.
    """
    x = -(params.half_side + params.pusher_radius)
    position = np.array([x, offset])
    geom = face_geometry(0.0, position)
    velocity = -omega * geom.s_t * geom.normal
    state = State(
        theta_box=0.0,
        omega_box=omega,
        pusher_pos=position[None, :],
        pusher_vel=velocity[None, :],
    )
    return state, Control(forces=np.array([[force, 0.0]]))


def main():
    parser = argparse.ArgumentParser(description="Penalty-method reference simulation of a single push.")
    parser.add_argument("--steps", type=int, default=5, help="Coarse steps to simulate.")
    parser.add_argument("--step", type=float, default=0.05, help="Coarse step h in seconds.")
    parser.add_argument("--force", type=float, default=0.05, help="Push force along +x in N.")
    parser.add_argument("--offset", type=float, default=0.005, help="Contact height above the pivot in m.")
    parser.add_argument("--omega", type=float, default=0.0, help="Initial box angular velocity in rad/s.")
    parser.add_argument("--mu-s", type=float, default=0.0, help="Object-surface friction.")
    parser.add_argument("--mu-p", type=float, default=0.5, help="Pusher-object friction.")
    parser.add_argument("--substeps", type=int, default=1000, help="Fine steps per coarse step.")
    parser.add_argument("--log-level", default="INFO", help="Logging level.")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT, stream=sys.stdout)
    params = SystemParams(mu_s=args.mu_s, mu_p=args.mu_p)
    state, control = push_scenario(params, args.offset, args.force, args.omega)
    states = simulate(
        state,
        control,
        params,
        ContactModel.point(),
        args.step,
        args.steps,
        PenaltySettings(substeps=args.substeps),
    )
    nq = 1 + 2 * state.n_points
    for k, x in enumerate(states):
        logger.info(f"t={k * args.step:.3f}s theta={x[0]:+.6f} rad omega={x[nq]:+.6f} rad/s")


if __name__ == "__main__":
    main()
