"""Comparison controller: analytic goal seeking plus a minimum-intervention
safety filter.

The naive controller feedback-linearizes the speed/yaw-rate dynamics to track
a tanh-saturated acceleration toward the goal; it knows nothing about
obstacles.  Safety comes from a one-constraint quadratic program solved in
closed form: project the desired control (with zero slack) onto the feasible
half-space in the metric weighted by the slack penalty.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .cadp_core import InfeasibleConstraintError
from .robot_world import RobotParams, drive_matrix, robot_f

Array = np.ndarray


@dataclass(frozen=True)
class NaiveGains:
    k_p: float = 0.4
    k_d: float = 0.75

    def __post_init__(self):
        if self.k_p <= 0 or self.k_d <= 0:
            raise ValueError("gains must be positive")


def naive_control(x, goal, gains: NaiveGains, p: RobotParams) -> Array:
    """Goal-seeking voltages, blind to obstacles.

    The commanded planar acceleration is a_d = -k_p tanh(q - q_d)
    - k_d tanh(qdot), bounded componentwise by k_p + k_d.  It is mapped to
    desired speed/yaw-rate accelerations through the geometry of the tracked
    point, then the drive matrix is inverted after cancelling the drift
    damping so those accelerations are realized exactly.
    """
    x = np.asarray(x, dtype=float)
    goal = np.asarray(goal, dtype=float).reshape(2)
    gamma, s, omega = x[2], x[3], x[4]
    fx = robot_f(x, p)
    qdot = fx[:2]
    a_d = -gains.k_p * np.tanh(x[:2] - goal) - gains.k_d * np.tanh(qdot)
    cg, sg = np.cos(gamma), np.sin(gamma)
    sdot_d = cg * a_d[0] + sg * a_d[1] + p.l_d * omega**2
    wdot_d = (-sg * a_d[0] + cg * a_d[1] - s * omega) / p.l_d
    rhs = np.array([sdot_d - fx[3], wdot_d - fx[4]])
    return np.linalg.solve(drive_matrix(p), rhs)


def min_intervention_filter(v_d, a: float, b, r_delta: float, eps_b: float = 1e-12):
    """Closest feasible (v, delta) to (v_d, 0) under a + b'[v; delta] >= 0.

    Objective |v - v_d|^2 + r_delta delta^2.  With a single affine constraint
    the projection is closed-form: inactive constraints return the desired
    control untouched; otherwise

        u = u_d + mu H^-1 b,   mu = (-a - b'u_d) / (b' H^-1 b) > 0,

    with H = diag(I, r_delta), which lands exactly on the constraint surface.
    """
    v_d = np.asarray(v_d, dtype=float)
    b = np.asarray(b, dtype=float)
    if r_delta <= 0:
        raise ValueError("r_delta must be positive")
    u_d = np.concatenate([v_d, [0.0]])
    residual = float(a) + float(b @ u_d)
    if residual >= 0.0:
        return v_d.copy(), 0.0
    Hinv_b = np.concatenate([b[:-1], [b[-1] / r_delta]])
    bHb = float(b @ Hinv_b)
    if bHb < eps_b:
        raise InfeasibleConstraintError(
            f"constraint direction vanishes with residual {residual:.6g} < 0"
        )
    mu = -residual / bHb
    u = u_d + mu * Hinv_b
    return u[:-1], float(u[-1])
