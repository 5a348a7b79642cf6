"""
Finite-horizon discrete LQR for affine dynamics x+ = A x + B u + c with the
tracking cost sum_{t<T} (x_t - g)' Q (x_t - g) + u_t' R u_t + (x_T - g)' Q_T (x_T - g).

Reference solution for the trajectory optimizer on contact-free motion.
"""

import argparse
import logging
import os
import sys
from dataclasses import dataclass
from typing import List, Optional

import numpy as np
import scipy.linalg

# Add project root to Python path to allow importing project modules
PROJECT_ROOT = os.path.abspath(os.path.join(os.path.dirname(__file__), ".."))
if PROJECT_ROOT not in sys.path:
    sys.path.insert(0, PROJECT_ROOT)

from fdlc_trajopt.config import LOG_FORMAT

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LQRSolution:
    states: np.ndarray
    controls: np.ndarray
    K: List[np.ndarray]
    k: List[np.ndarray]
    cost: float


def double_integrator(n_points: int, step: float, mass: float):
    """Semi-implicit free pusher dynamics on x = [p_1..p_Np, v_1..v_Np]."""
    d = 2 * n_points
    eye = np.eye(d)
    A = np.block([[eye, step * eye], [np.zeros((d, d)), eye]])
    B = np.vstack((step**2 / mass * eye, step / mass * eye))
    return A, B


def solve_lqr(
    A: np.ndarray,
    B: np.ndarray,
    Q: np.ndarray,
    R: np.ndarray,
    x0: np.ndarray,
    goal: np.ndarray,
    horizon: int,
    Q_terminal: Optional[np.ndarray] = None,
    c: Optional[np.ndarray] = None,
) -> LQRSolution:
    n = A.shape[0]
    Q_terminal = Q if Q_terminal is None else Q_terminal
    c = np.zeros(n) if c is None else c
    # error coordinates e = x - goal: e+ = A e + B u + d
    d = (A - np.eye(n)) @ goal + c

    P, s = Q_terminal.copy(), np.zeros(n)
    K_list: List[np.ndarray] = [None] * horizon
    k_list: List[np.ndarray] = [None] * horizon
    for t in reversed(range(horizon)):
        Quu = R + B.T @ P @ B
        Qux = B.T @ P @ A
        qu = B.T @ (P @ d + s)
        factor = scipy.linalg.cho_factor(Quu)
        K = -scipy.linalg.cho_solve(factor, Qux)
        k = -scipy.linalg.cho_solve(factor, qu)
        s = A.T @ (P @ d + s) + Qux.T @ k
        P = Q + A.T @ P @ A + Qux.T @ K
        P = 0.5 * (P + P.T)
        K_list[t], k_list[t] = K, k

    states = np.zeros((horizon + 1, n))
    controls = np.zeros((horizon, B.shape[1]))
    states[0] = x0
    cost = 0.0
    for t in range(horizon):
        e = states[t] - goal
        controls[t] = K_list[t] @ e + k_list[t]
        cost += float(e @ Q @ e + controls[t] @ R @ controls[t])
        states[t + 1] = A @ states[t] + B @ controls[t] + c
    e = states[horizon] - goal
    cost += float(e @ Q_terminal @ e)
    return LQRSolution(states, controls, K_list, k_list, cost)


def main():
    parser = argparse.ArgumentParser(description="Discrete LQR on the free pusher double integrator.")
    parser.add_argument("--horizon", type=int, default=26, help="Number of steps.")
    parser.add_argument("--step", type=float, default=0.05, help="Time step in seconds.")
    parser.add_argument("--mass", type=float, default=0.1, help="Pusher mass in kg.")
    parser.add_argument("--dx", type=float, default=0.05, help="Goal displacement along x in m.")
    parser.add_argument("--log-level", default="INFO", help="Logging level.")
    args = parser.parse_args()

    logging.basicConfig(level=args.log_level.upper(), format=LOG_FORMAT, stream=sys.stdout)
    A, B = double_integrator(1, args.step, args.mass)
    Q = np.diag([0.1, 0.1, 0.01, 0.01])
    R = np.diag([1.0, 0.1])
    goal = np.array([args.dx, 0.0, 0.0, 0.0])
    solution = solve_lqr(A, B, Q, R, np.zeros(4), goal, args.horizon)
    logger.info(f"LQR cost {solution.cost:.6e}, final state {solution.states[-1]}")


if __name__ == "__main__":
    main()
