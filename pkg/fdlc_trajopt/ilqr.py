"""
Upper-level trajectory optimizer: iLQR over the implicit contact dynamics.

    J = l_T(x_T) + sum_{t<T} (x_t - x_g)' Q (x_t - x_g) + u_t' R u_t + 1/2 w max(phi(x_t), 0)^2

The dynamics are whatever `ContactDynamics` wraps: each step is a lower-level
solve, each linearization an implicit-function-theorem sensitivity.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Any, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
from pydantic import BaseModel, ConfigDict, Field

from fdlc_trajopt.exceptions import (
    NonFiniteIterate,
    NotPositiveDefinite,
    RegularizationExhausted,
    SolverFailure,
)
from fdlc_trajopt.lower_dynamics import (
    LowerSettings,
    LowerSolution,
    LowerSolver,
    StepLinearization,
)
from fdlc_trajopt.model import (
    ContactModel,
    Control,
    State,
    SystemParams,
    control_dim,
    face_geometry,
    state_dim,
)

logger = logging.getLogger(__name__)

MAX_BREAKAWAY_PUSH = 1024.0  # N per point


class ILQRSettings(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    max_iterations: int = Field(200, ge=1)
    tolerance: float = Field(1e-6, gt=0.0)
    reg_init: float = Field(1e-6, ge=0.0)
    reg_min: float = Field(1e-9, ge=0.0)
    reg_max: float = Field(1e6, gt=0.0)
    reg_increase: float = Field(10.0, gt=1.0)
    reg_decrease: float = Field(2.0, gt=1.0)
    armijo: float = Field(1e-4, gt=0.0, lt=1.0)
    line_search_halvings: int = Field(10, ge=0)
    initial_guess: Literal["breakaway", "axis"] = "breakaway"
    u_init_magnitude: float = 1.0  # N, axis guess only

    def step_sizes(self) -> List[float]:
        return [0.5**i for i in range(self.line_search_halvings + 1)]


@dataclass(frozen=True)
class CostWeights:
    Q: np.ndarray
    R: np.ndarray
    w: float
    goal: np.ndarray
    terminal_scale: float = 1.0

    def __post_init__(self):
        Q = np.array(self.Q, dtype=float)
        R = np.array(self.R, dtype=float)
        goal = np.array(self.goal, dtype=float).ravel()
        n, m = goal.size, R.shape[0]
        if Q.shape != (n, n) or R.shape != (m, m):
            raise ValueError(f"Weight shapes Q{Q.shape}, R{R.shape} do not match goal of size {n}")
        if not np.allclose(Q, Q.T) or np.min(np.linalg.eigvalsh(Q)) < -1e-12:
            raise ValueError("Q must be symmetric positive semidefinite")
        if not np.allclose(R, R.T) or np.min(np.linalg.eigvalsh(R)) <= 0.0:
            raise ValueError("R must be symmetric positive definite")
        if self.w < 0 or self.terminal_scale < 0:
            raise ValueError("w and terminal_scale must be nonnegative")
        for arr in (Q, R, goal):
            arr.setflags(write=False)
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "goal", goal)
        object.__setattr__(self, "w", float(self.w))

    @property
    def n_points(self) -> int:
        return (self.goal.size // 2 - 1) // 2

    @classmethod
    def from_diagonals(
        cls,
        x0: State,
        theta_goal: float,
        q_position: Sequence[float],
        q_velocity: float,
        r_diagonal: Sequence[float],
        w: float,
        terminal_scale: float = 1.0,
    ) -> "CostWeights":
        """
        Goal is (theta_goal, initial pusher positions, zero velocities).
        q_position covers [theta, p_1..p_Np]; every velocity entry gets q_velocity.
        """
        n = x0.n_points
        nq = 1 + 2 * n
        if len(q_position) != nq or len(r_diagonal) != control_dim(n):
            raise ValueError(
                f"Need {nq} positional Q entries and {control_dim(n)} R entries for {n} pusher point(s)"
            )
        goal = np.zeros(state_dim(n))
        goal[0] = theta_goal
        goal[1:nq] = x0.pusher_pos.ravel()
        Q = np.diag(np.concatenate((q_position, np.full(nq, q_velocity))))
        return cls(Q=Q, R=np.diag(r_diagonal), w=w, goal=goal, terminal_scale=terminal_scale)


@dataclass(frozen=True)
class CostTerms:
    """Value, breakdown and exact derivatives of one stage (or the terminal) cost."""

    value: float
    state_part: float
    control_part: float
    sdf_part: float
    l_x: np.ndarray
    l_u: np.ndarray
    l_xx: np.ndarray
    l_uu: np.ndarray
    l_ux: np.ndarray


def min_gap_terms(x: np.ndarray, params: SystemParams, n_points: int) -> Tuple[float, np.ndarray, np.ndarray]:
    """
    phi(x) = min_i gap_i with its gradient and Hessian w.r.t. x.
    np.argmin keeps the smaller index on ties.
    """
    theta = x[0]
    offset = params.half_side + params.pusher_radius
    geoms = [face_geometry(theta, x[1 + 2 * i : 3 + 2 * i]) for i in range(n_points)]
    gaps = np.array([g.s_n - offset for g in geoms])
    i = int(np.argmin(gaps))
    g = geoms[i]
    n = x.size
    pos = slice(1 + 2 * i, 3 + 2 * i)
    grad = np.zeros(n)
    grad[0] = g.s_t
    grad[pos] = g.normal
    hess = np.zeros((n, n))
    hess[0, 0] = -g.s_n
    hess[0, pos] = g.tangent
    hess[pos, 0] = g.tangent
    return float(gaps[i]), grad, hess


def stage_cost(
    x: np.ndarray,
    u: np.ndarray,
    weights: CostWeights,
    params: Optional[SystemParams] = None,
) -> CostTerms:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.size != weights.goal.size or u.size != weights.R.shape[0]:
        raise ValueError(f"Stage cost got x{x.shape}, u{u.shape} for weights of size {weights.goal.size}")
    e = x - weights.goal
    state_part = float(e @ weights.Q @ e)
    control_part = float(u @ weights.R @ u)
    l_x = 2.0 * weights.Q @ e
    l_xx = 2.0 * weights.Q
    sdf_part = 0.0
    if weights.w > 0.0:
        if params is None:
            raise ValueError("The signed-distance penalty needs the system geometry")
        phi, grad, hess = min_gap_terms(x, params, weights.n_points)
        if phi > 0.0:
            sdf_part = 0.5 * weights.w * phi**2
            l_x = l_x + weights.w * phi * grad
            l_xx = l_xx + weights.w * (np.outer(grad, grad) + phi * hess)
    return CostTerms(
        value=state_part + control_part + sdf_part,
        state_part=state_part,
        control_part=control_part,
        sdf_part=sdf_part,
        l_x=l_x,
        l_u=2.0 * weights.R @ u,
        l_xx=l_xx,
        l_uu=2.0 * weights.R,
        l_ux=np.zeros((u.size, x.size)),
    )


def terminal_cost(x: np.ndarray, weights: CostWeights) -> CostTerms:
    x = np.asarray(x, dtype=float)
    e = x - weights.goal
    Q = weights.terminal_scale * weights.Q
    value = float(e @ Q @ e)
    m = weights.R.shape[0]
    return CostTerms(
        value=value,
        state_part=value,
        control_part=0.0,
        sdf_part=0.0,
        l_x=2.0 * Q @ e,
        l_u=np.zeros(m),
        l_xx=2.0 * Q,
        l_uu=np.zeros((m, m)),
        l_ux=np.zeros((m, x.size)),
    )


@dataclass(frozen=True)
class StepResult:
    next_state: np.ndarray
    forces: np.ndarray
    ground_torque: float
    handle: Any = None


class ContactDynamics:
    """x_{t+1} = f(x_t, u_t) through the lower-level solver."""

    def __init__(
        self,
        params: SystemParams,
        model: ContactModel,
        step: float,
        settings: Optional[LowerSettings] = None,
        record: bool = False,
    ):
        self.params = params
        self.model = model.resolved(params)
        self.step_size = step
        self.solver = LowerSolver(settings, record=record)

    @property
    def n_points(self) -> int:
        return self.model.n_points

    def step(
        self, x: np.ndarray, u: np.ndarray, warm: Optional[StepResult] = None, index: int = -1
    ) -> StepResult:
        n = self.n_points
        problem = self.solver.problem(
            State.from_vector(x, n), Control.from_vector(u, n), self.step_size, self.params, self.model
        )
        warm_solution: Optional[LowerSolution] = warm.handle[1] if warm is not None else None
        solution = self.solver.solve(problem, warm_solution, step_index=index)
        return StepResult(
            next_state=solution.next_state.to_vector(),
            forces=np.array(solution.forces),
            ground_torque=solution.ground_torque,
            handle=(problem, solution),
        )

    def linearize(self, result: StepResult) -> StepLinearization:
        problem, solution = result.handle
        return self.solver.linearize(problem, solution)


@dataclass
class ILQRStats:
    iterations: int = 0
    costs: List[float] = field(default_factory=list)
    alphas: List[float] = field(default_factory=list)
    regs: List[float] = field(default_factory=list)
    gradient_norm: float = math.nan
    reason: str = ""

    def log_rows(self) -> List[Dict[str, float]]:
        rows = []
        for i, cost in enumerate(self.costs):
            rows.append(
                {
                    "iteration": i,
                    "cost": cost,
                    "delta_cost": abs(self.costs[i - 1] - cost) if i > 0 else math.nan,
                    "alpha": self.alphas[i - 1] if i > 0 else math.nan,
                    "reg": self.regs[i - 1] if i > 0 else math.nan,
                }
            )
        return rows


@dataclass
class Trajectory:
    states: np.ndarray  # (T+1, n)
    controls: np.ndarray  # (T, m)
    forces: np.ndarray  # (T, N_p, 2)
    ground_torques: np.ndarray  # (T,)
    per_step_cost: np.ndarray  # (T+1, 3): state, control, sdf
    step: float
    solver_stats: ILQRStats = field(default_factory=ILQRStats)
    steps: List[StepResult] = field(default_factory=list, repr=False)

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    @property
    def n_points(self) -> int:
        return self.forces.shape[1]

    @property
    def cost(self) -> float:
        return float(self.per_step_cost.sum())

    def state(self, t: int) -> State:
        return State.from_vector(self.states[t], self.n_points)


def _costs(
    states: np.ndarray, controls: np.ndarray, weights: CostWeights, params: Optional[SystemParams]
) -> np.ndarray:
    T = controls.shape[0]
    per_step = np.zeros((T + 1, 3))
    for t in range(T):
        c = stage_cost(states[t], controls[t], weights, params)
        per_step[t] = (c.state_part, c.control_part, c.sdf_part)
    per_step[T, 0] = terminal_cost(states[T], weights).value
    return per_step


def rollout(
    x0: np.ndarray,
    controls: np.ndarray,
    dynamics: ContactDynamics,
    weights: CostWeights,
    feedback: Optional[Tuple["Gains", "Trajectory", float]] = None,
) -> Trajectory:
    """
    Simulates controls from x0, chaining lower-level warm starts. With feedback
    (gains, reference, alpha) the controls are u_ref + alpha k + K (x - x_ref).
    """
    controls = np.array(controls, dtype=float)
    T = controls.shape[0]
    n = dynamics.n_points
    states = np.zeros((T + 1, state_dim(n)))
    states[0] = x0
    forces = np.zeros((T, n, 2))
    torques = np.zeros(T)
    steps: List[StepResult] = []
    warm = None
    for t in range(T):
        if feedback is not None:
            gains, ref, alpha = feedback
            controls[t] = ref.controls[t] + alpha * gains.k[t] + gains.K[t] @ (states[t] - ref.states[t])
        result = dynamics.step(states[t], controls[t], warm, index=t)
        if not np.all(np.isfinite(result.next_state)):
            raise NonFiniteIterate(f"Rollout produced a non-finite state at step {t}")
        states[t + 1] = result.next_state
        forces[t] = result.forces
        torques[t] = result.ground_torque
        steps.append(result)
        warm = result
    params = getattr(dynamics, "params", None)
    return Trajectory(
        states=states,
        controls=controls,
        forces=forces,
        ground_torques=torques,
        per_step_cost=_costs(states, controls, weights, params),
        step=dynamics.step_size,
        steps=steps,
    )


@dataclass(frozen=True)
class Gains:
    k: np.ndarray  # (T, m)
    K: np.ndarray  # (T, m, n)
    dV1: float
    dV2: float
    gradient_norm: float

    def expected_decrease(self, alpha: float) -> float:
        """Predicted cost reduction -(alpha dV1 + alpha^2 dV2), positive for a descent step."""
        return -(alpha * self.dV1 + alpha**2 * self.dV2)


def _sym(M: np.ndarray) -> np.ndarray:
    return 0.5 * (M + M.T)


def backward_pass(
    traj: Trajectory,
    linearizations: Sequence[StepLinearization],
    weights: CostWeights,
    reg: float,
    params: Optional[SystemParams] = None,
) -> Gains:
    T = traj.horizon
    if len(linearizations) != T:
        raise ValueError(f"Expected {T} linearizations, got {len(linearizations)}")
    n, m = traj.states.shape[1], traj.controls.shape[1]
    k = np.zeros((T, m))
    K = np.zeros((T, m, n))
    term = terminal_cost(traj.states[T], weights)
    Vx, Vxx = term.l_x, term.l_xx
    dV1 = dV2 = 0.0
    gradient_norm = 0.0
    for t in reversed(range(T)):
        c = stage_cost(traj.states[t], traj.controls[t], weights, params)
        A, B = linearizations[t].A, linearizations[t].B
        Qx = c.l_x + A.T @ Vx
        Qu = c.l_u + B.T @ Vx
        Qxx = c.l_xx + A.T @ Vxx @ A
        Quu = _sym(c.l_uu + B.T @ Vxx @ B)
        Qux = c.l_ux + B.T @ Vxx @ A
        try:
            factor = scipy.linalg.cho_factor(Quu + reg * np.eye(m))
        except scipy.linalg.LinAlgError as e:
            raise NotPositiveDefinite(t) from e
        k[t] = -scipy.linalg.cho_solve(factor, Qu)
        K[t] = -scipy.linalg.cho_solve(factor, Qux)
        gradient_norm = max(gradient_norm, float(np.max(np.abs(Qu))))

        dV1 += float(k[t] @ Qu)
        dV2 += 0.5 * float(k[t] @ Quu @ k[t])
        Vx = Qx + K[t].T @ Quu @ k[t] + K[t].T @ Qu + Qux.T @ k[t]
        Vxx = _sym(Qxx + K[t].T @ Quu @ K[t] + K[t].T @ Qux + Qux.T @ K[t])
    return Gains(k=k, K=K, dV1=dV1, dV2=dV2, gradient_norm=gradient_norm)


def forward_pass(
    traj: Trajectory,
    gains: Gains,
    step_size: float,
    dynamics: ContactDynamics,
    weights: CostWeights,
) -> Optional[Trajectory]:
    """Candidate rollout for one step size; None when the lower level fails on it."""
    try:
        candidate = rollout(
            traj.states[0], traj.controls.copy(), dynamics, weights, feedback=(gains, traj, step_size)
        )
    except SolverFailure as e:
        logger.debug(f"Forward pass rejected at alpha={step_size:g}: {e}")
        return None
    if not math.isfinite(candidate.cost):
        return None
    return candidate


def _linearize_all(traj: Trajectory, dynamics: ContactDynamics) -> List[StepLinearization]:
    return [dynamics.linearize(result) for result in traj.steps]


def optimize(
    x0: State,
    weights: CostWeights,
    u_init: np.ndarray,
    horizon: int,
    settings: Optional[ILQRSettings] = None,
    dynamics: Optional[ContactDynamics] = None,
) -> Trajectory:
    """
    Alternates backward and forward passes until the accepted cost change drops
    below tolerance * (1 + |cost|) or max_iterations is reached.
    """
    settings = settings or ILQRSettings()
    if dynamics is None:
        raise ValueError("optimize needs the system dynamics")
    u_init = np.asarray(u_init, dtype=float)
    if u_init.shape[0] != horizon:
        raise ValueError(f"u_init has {u_init.shape[0]} steps, horizon is {horizon}")
    params = getattr(dynamics, "params", None)
    x0_vec = x0.to_vector() if isinstance(x0, State) else np.asarray(x0, dtype=float)

    traj = rollout(x0_vec, u_init, dynamics, weights)
    stats = ILQRStats(costs=[traj.cost])
    reg = settings.reg_init
    logger.debug(f"iLQR start: cost={traj.cost:.6e}")
    linearizations: Optional[List[StepLinearization]] = None

    for iteration in range(1, settings.max_iterations + 1):
        stats.iterations = iteration
        if linearizations is None:
            try:
                linearizations = _linearize_all(traj, dynamics)
            except SolverFailure as e:
                logger.error(f"Linearization failed at iteration {iteration}: {e}", exc_info=True)
                stats.reason = "linearization_failed"
                break

        while True:
            try:
                gains = backward_pass(traj, linearizations, weights, reg, params)
                break
            except NotPositiveDefinite as e:
                reg *= settings.reg_increase
                logger.debug(f"{e} Raising reg to {reg:.1e}")
                if reg > settings.reg_max:
                    traj.solver_stats = stats
                    raise RegularizationExhausted(
                        f"Q_uu stayed indefinite up to reg_max={settings.reg_max:.1e}",
                        trajectory=traj,
                    ) from e
        stats.gradient_norm = gains.gradient_norm

        if gains.expected_decrease(1.0) <= settings.tolerance * (1.0 + abs(traj.cost)):
            stats.reason = "converged"
            break

        accepted = None
        for alpha in settings.step_sizes():
            candidate = forward_pass(traj, gains, alpha, dynamics, weights)
            if candidate is None:
                continue
            if traj.cost - candidate.cost >= settings.armijo * gains.expected_decrease(alpha):
                accepted = (candidate, alpha)
                break

        if accepted is None:
            reg *= settings.reg_increase
            logger.debug(f"Line search exhausted at iteration {iteration}; reg -> {reg:.1e}")
            if reg > settings.reg_max:
                stats.reason = "line_search_exhausted"
                break
            continue

        candidate, alpha = accepted
        delta = traj.cost - candidate.cost
        traj = candidate
        linearizations = None
        stats.costs.append(traj.cost)
        stats.alphas.append(alpha)
        stats.regs.append(reg)
        reg = max(reg / settings.reg_decrease, settings.reg_min)
        logger.debug(
            f"iLQR iter {iteration}: cost={traj.cost:.6e} dcost={delta:.3e} alpha={alpha:g} reg={reg:.1e}"
        )
        if delta < settings.tolerance * (1.0 + abs(traj.cost)):
            stats.reason = "converged"
            break
    else:
        stats.reason = "max_iterations"

    traj.solver_stats = stats
    logger.info(
        f"iLQR finished ({stats.reason}) after {stats.iterations} iteration(s): cost={traj.cost:.6e}"
    )
    return traj


def default_controls(n_points: int, horizon: int, magnitude: float) -> np.ndarray:
    """Every point pushes along +x with the same magnitude."""
    u = np.zeros((horizon, control_dim(n_points)))
    u[:, 0::2] = magnitude
    return u


def breakaway_controls(
    x0: State,
    theta_goal: float,
    dynamics: ContactDynamics,
    horizon: int,
    lever: Optional[float] = None,
    rtol: float = 1e-6,
) -> np.ndarray:
    """
    Initial controls that turn the box to theta_goal within the first step.

    Step 0 carries every pusher point onto the face, shifted along it until the
    outermost point on the turning side sits `lever` from the face centre
    (default half side minus pusher radius), and adds one push of common
    magnitude s per point: into the face plus mu_p along the slide, which offsets
    the sliding friction. s is bisected on the lower-level step until theta_1
    reaches the goal. Step 1 brakes the pushers to rest; later controls are zero.
    """
    params = dynamics.params
    n = dynamics.n_points
    h = dynamics.step_size
    m = params.pusher_mass
    u = np.zeros((horizon, control_dim(n)))
    turn = theta_goal - x0.theta_box
    if horizon == 0 or turn == 0.0:
        return u
    sign = math.copysign(1.0, turn)
    lever = params.half_side - params.pusher_radius if lever is None else lever

    geoms = [face_geometry(x0.theta_box, p) for p in x0.pusher_pos]
    normal, tangent = geoms[0].normal, geoms[0].tangent
    offset = params.half_side + params.pusher_radius
    slide = sign * max(lever - max(sign * g.s_t for g in geoms), 0.0)
    approach = np.zeros((n, 2))
    for i, g in enumerate(geoms):
        shift = slide * tangent - (g.s_n - offset) * normal
        approach[i] = m * (shift / h - x0.pusher_vel[i]) / h
    direction = -normal + params.mu_p * sign * tangent
    x0_vec = x0.to_vector()

    def first_step(scale: float) -> Tuple[np.ndarray, StepResult]:
        u0 = (approach + scale * direction).ravel()
        return u0, dynamics.step(x0_vec, u0, index=0)

    def reached(result: StepResult) -> bool:
        return sign * (result.next_state[0] - theta_goal) >= 0.0

    lo, hi = 0.0, 1.0
    u0, result = first_step(hi)
    while not reached(result):
        if hi >= MAX_BREAKAWAY_PUSH:
            logger.warning(
                f"No push up to {hi:g} N per point turns the box to {math.degrees(theta_goal):g} deg"
            )
            break
        lo, hi = hi, 2.0 * hi
        u0, result = first_step(hi)
    else:
        while hi - lo > rtol * hi:
            mid = 0.5 * (lo + hi)
            u_mid, r_mid = first_step(mid)
            if reached(r_mid):
                hi, u0, result = mid, u_mid, r_mid
            else:
                lo = mid
    u[0] = u0
    if horizon > 1:
        nq = 1 + 2 * n
        u[1] = -m * result.next_state[nq + 1 :] / h
    logger.debug(f"Breakaway push {hi:.6g} N per point, theta_1={result.next_state[0]:.6f} rad")
    return u


def initial_controls(
    x0: State,
    theta_goal: float,
    dynamics: ContactDynamics,
    horizon: int,
    settings: Optional[ILQRSettings] = None,
) -> np.ndarray:
    settings = settings or ILQRSettings()
    if settings.initial_guess == "axis":
        return default_controls(dynamics.n_points, horizon, settings.u_init_magnitude)
    return breakaway_controls(x0, theta_goal, dynamics, horizon)
