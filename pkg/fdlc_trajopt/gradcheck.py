"""Implicit-function-theorem sensitivities vs central finite differences on random contact states."""

import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np

from fdlc_trajopt.lower_dynamics import (
    LowerProblem,
    LowerSettings,
    finite_difference_linearization,
    linearize_step,
    solve_step,
)
from fdlc_trajopt.model import ContactModel, Control, State, SystemParams, face_normal, face_tangent

logger = logging.getLogger(__name__)

MAX_GAP = 8e-4


def random_contact_state(
    rng: np.random.Generator, params: SystemParams, model: ContactModel
) -> Tuple[State, Control]:
    """A state with every pusher point within MAX_GAP of the face, moving into it, and a pushing control."""
    model = model.resolved(params)
    theta = rng.uniform(-0.3, 0.3)
    omega = rng.uniform(-0.2, 0.2)
    n, t = face_normal(theta), face_tangent(theta)
    s_n = params.half_side + params.pusher_radius + rng.uniform(0.0, MAX_GAP)
    s_t = rng.uniform(-0.004, 0.004)
    if model.n_points == 1:
        offsets = [0.0]
    else:
        half = 0.5 * model.rest_length
        offsets = [half, -half]
    positions = np.array([s_n * n + (s_t + o) * t for o in offsets])
    velocities = np.array(
        [-rng.uniform(0.01, 0.05) * n + rng.uniform(-0.02, 0.02) * t for _ in offsets]
    )
    forces = np.array([-rng.uniform(0.5, 2.0) * n + rng.uniform(-0.3, 0.3) * t for _ in offsets])
    state = State(theta_box=theta, omega_box=omega, pusher_pos=positions, pusher_vel=velocities)
    return state, Control(forces=forces)


def relative_error(analytic: np.ndarray, reference: np.ndarray) -> float:
    scale = np.linalg.norm(reference)
    diff = np.linalg.norm(analytic - reference)
    return float(diff / scale) if scale > 0 else float(diff)


@dataclass(frozen=True)
class GradcheckReport:
    model: str
    samples: int
    errors_A: List[float]
    errors_B: List[float]

    @property
    def max_error_A(self) -> float:
        return max(self.errors_A, default=0.0)

    @property
    def max_error_B(self) -> float:
        return max(self.errors_B, default=0.0)

    @property
    def max_error(self) -> float:
        return max(self.max_error_A, self.max_error_B)


def gradcheck(
    model: ContactModel,
    params: Optional[SystemParams] = None,
    samples: int = 20,
    seed: int = 0,
    step: float = 0.05,
    settings: Optional[LowerSettings] = None,
    eps: float = 1e-6,
) -> GradcheckReport:
    params = params or SystemParams()
    settings = (settings or LowerSettings()).model_copy(update={"tol_lower": 1e-12})
    rng = np.random.default_rng(seed)
    errors_A, errors_B = [], []
    for sample in range(samples):
        state, control = random_contact_state(rng, params, model)
        problem = LowerProblem.build(state, control, step, params, model, settings)
        solution = solve_step(problem)
        lin = linearize_step(problem, solution)
        fd = finite_difference_linearization(problem, solution, eps=eps)
        errors_A.append(relative_error(lin.A, fd.A))
        errors_B.append(relative_error(lin.B, fd.B))
        logger.debug(
            f"gradcheck {model.name} sample {sample}: A err {errors_A[-1]:.2e}, B err {errors_B[-1]:.2e}"
        )
    report = GradcheckReport(model.name, samples, errors_A, errors_B)
    logger.info(
        f"gradcheck {model.name}: max rel. error A {report.max_error_A:.2e}, B {report.max_error_B:.2e}"
    )
    return report
