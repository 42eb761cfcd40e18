"""Differential-drive ground robot: dynamics, limits, obstacle maps, and the
composed safe set used by the benchmark.

State x = [q_x, q_y, gamma, s, omega]: planar position of a point of interest
ahead of the axle, heading of its velocity, forward speed, and yaw rate.  The
two controls are the right/left motor voltages.  Speed and yaw dynamics carry
back-EMF plus ground-friction damping (linear) and drag (quadratic, smoothed
through tanh).

Safety combines three barrier families: circular obstacle clearances (lifted
once because they have relative degree two), a speed limit, and a yaw-rate
limit.  A log-sum-exponential soft minimum composes them into one scalar
barrier with configurable sharpness.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .cbf_constraints import (
    Barrier,
    HigherOrderChain,
    SoftMinBarrier,
    linear_class_k,
    to_stage_constraint,
)
from .cadp_core import StageConstraint
from .receding_horizon import HorizonConfig

Array = np.ndarray


@dataclass(frozen=True)
class RobotParams:
    """Physical constants of the drive train and body.

    k_m [N m/A] torque constant, r [m] wheel radius, l [m] wheel separation,
    l_d [m] offset of the tracked point from the mass center, R_a [ohm]
    armature resistance, m [kg] mass, I [kg m^2] yaw inertia, k_b [V s/rad]
    back-EMF constant, eps3 [N m s] friction coefficient, c2 [1/m] and c4
    drag coefficients, eps1/eps2 tanh smoothing widths.
    """

    k_m: float = 0.1
    r: float = 0.1
    l: float = 0.5
    l_d: float = 0.25
    R_a: float = 0.27
    m: float = 10.0
    I: float = 0.83
    k_b: float = 0.0487
    eps3: float = 0.01
    c2: float = 0.4581
    c4: float = 0.3477
    eps1: float = 0.4
    eps2: float = 0.4

    @property
    def c1(self) -> float:
        """Linear speed damping: back-EMF through both motors plus friction."""
        return 2.0 * self.k_b * self.k_m / (self.m * self.r * self.R_a) + 2.0 * self.eps3 / (self.m * self.r)

    @property
    def c3(self) -> float:
        """Linear yaw damping from the differential drive."""
        return (self.k_b * self.k_m * self.l**2 / (self.I * self.r**2 * self.R_a)
                + self.l * self.eps3 / (self.I * self.r**2))


@dataclass(frozen=True)
class RobotState:
    q_x: float
    q_y: float
    gamma: float
    s: float
    omega: float

    def as_array(self) -> Array:
        return np.array([self.q_x, self.q_y, self.gamma, self.s, self.omega], dtype=float)

    @classmethod
    def from_array(cls, x) -> "RobotState":
        x = np.asarray(x, dtype=float)
        if x.shape != (5,) or not np.all(np.isfinite(x)):
            raise ValueError(f"robot state must be 5 finite numbers, got {x}")
        return cls(*x)


@dataclass(frozen=True)
class ObstacleMap:
    """Circular obstacles (inflate radii in config to cover the footprint)."""

    centers: Array  # (n_obs, 2)
    radii: Array    # (n_obs,)
    bounds: Optional[Array] = None  # optional [[xmin, ymin], [xmax, ymax]]

    def __post_init__(self):
        centers = np.asarray(self.centers, dtype=float).reshape(-1, 2)
        radii = np.asarray(self.radii, dtype=float).reshape(-1)
        if centers.shape[0] != radii.shape[0]:
            raise ValueError("centers/radii count mismatch")
        if np.any(radii <= 0):
            raise ValueError("obstacle radii must be positive")
        object.__setattr__(self, "centers", centers)
        object.__setattr__(self, "radii", radii)
        if self.bounds is not None:
            object.__setattr__(self, "bounds", np.asarray(self.bounds, dtype=float).reshape(2, 2))

    @property
    def n_obstacles(self) -> int:
        return self.centers.shape[0]

    @classmethod
    def from_json_obj(cls, obstacles: list, bounds=None) -> "ObstacleMap":
        centers = [o["c"] for o in obstacles]
        radii = [o["r"] for o in obstacles]
        return cls(centers=np.asarray(centers, dtype=float).reshape(-1, 2),
                   radii=np.asarray(radii, dtype=float), bounds=bounds)


@dataclass(frozen=True)
class ScenarioLimits:
    """Velocity limits, barrier shaping, and trial termination settings."""

    goal: Array
    s_bar: float = 1.5
    omega_bar: float = 0.5
    zeta: float = 0.5
    rho: float = 750.0
    d_tol: float = 0.25
    T_f: float = 120.0
    kappa: float = 1.0  # outer class-K gain of the control constraint

    def __post_init__(self):
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(2))
        for name in ("s_bar", "omega_bar", "zeta", "rho", "d_tol", "T_f", "kappa"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


def _batchify(x) -> tuple[Array, bool]:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def robot_f(x, p: RobotParams):
    """Drift field of the robot; accepts (5,) or stacked (B, 5) states."""
    X, single = _batchify(x)
    gamma, s, omega = X[:, 2], X[:, 3], X[:, 4]
    cg, sg = np.cos(gamma), np.sin(gamma)
    out = np.empty_like(X)
    out[:, 0] = s * cg - p.l_d * omega * sg
    out[:, 1] = s * sg + p.l_d * omega * cg
    out[:, 2] = omega
    out[:, 3] = -p.c1 * s - p.c2 * s**2 * np.tanh(s / p.eps1)
    out[:, 4] = -p.c3 * omega - p.c4 * omega**2 * np.tanh(omega / p.eps2)
    return out[0] if single else out


def robot_f_jac(x, p: RobotParams):
    """Analytic Jacobian of the drift field; (5, 5) or (B, 5, 5)."""
    X, single = _batchify(x)
    B = X.shape[0]
    gamma, s, omega = X[:, 2], X[:, 3], X[:, 4]
    cg, sg = np.cos(gamma), np.sin(gamma)
    J = np.zeros((B, 5, 5))
    J[:, 0, 2] = -s * sg - p.l_d * omega * cg
    J[:, 0, 3] = cg
    J[:, 0, 4] = -p.l_d * sg
    J[:, 1, 2] = s * cg - p.l_d * omega * sg
    J[:, 1, 3] = sg
    J[:, 1, 4] = p.l_d * cg
    J[:, 2, 4] = 1.0
    th_s = np.tanh(s / p.eps1)
    J[:, 3, 3] = -p.c1 - p.c2 * (2.0 * s * th_s + s**2 * (1.0 - th_s**2) / p.eps1)
    th_w = np.tanh(omega / p.eps2)
    J[:, 4, 4] = -p.c3 - p.c4 * (2.0 * omega * th_w + omega**2 * (1.0 - th_w**2) / p.eps2)
    return J[0] if single else J


def robot_g(p: RobotParams) -> Array:
    """Constant input matrix: voltages enter speed and yaw-rate dynamics only."""
    scale = p.k_m / (p.r * p.R_a)
    M = scale * np.array([[1.0 / p.m, 1.0 / p.m], [p.l / p.I, -p.l / p.I]])
    g = np.zeros((5, 2))
    g[3:, :] = M
    return g


def drive_matrix(p: RobotParams) -> Array:
    """The 2x2 voltage-to-acceleration map M (bottom block of robot_g)."""
    return robot_g(p)[3:, :]


def obstacle_phi(center, radius: float, x):
    """Squared clearance phi = |q - c|^2 - r^2 with its analytic gradient."""
    X, single = _batchify(x)
    c = np.asarray(center, dtype=float).reshape(2)
    d = X[:, :2] - c
    phi = np.einsum("bi,bi->b", d, d) - float(radius) ** 2
    grad = np.zeros((X.shape[0], 5))
    grad[:, :2] = 2.0 * d
    if single:
        return float(phi[0]), grad[0]
    return phi, grad


def velocity_barriers(x, limits: ScenarioLimits):
    """Speed and yaw-rate limit barriers with gradients.

    h_s = s_bar^2 - s^2 and h_omega = omega_bar^2 - omega^2; both have
    relative degree one, so they join the composition without lifting.
    """
    X, single = _batchify(x)
    s, omega = X[:, 3], X[:, 4]
    h_s = limits.s_bar**2 - s**2
    h_w = limits.omega_bar**2 - omega**2
    g_s = np.zeros((X.shape[0], 5))
    g_s[:, 3] = -2.0 * s
    g_w = np.zeros((X.shape[0], 5))
    g_w[:, 4] = -2.0 * omega
    if single:
        return (float(h_s[0]), g_s[0]), (float(h_w[0]), g_w[0])
    return (h_s, g_s), (h_w, g_w)


def lifted_obstacle_barriers(x, omap: ObstacleMap, zeta: float, p: RobotParams):
    """Once-lifted obstacle clearances, all obstacles at once.

    h_i = d/dt phi_i along the drift + zeta phi_i; returns values (B, n_obs)
    and gradients (B, n_obs, 5).  The lift removes one relative degree: the
    control reaches h_i through the speed/yaw-rate dependence of the position
    drift.
    """
    X, single = _batchify(x)
    B = X.shape[0]
    gamma, s, omega = X[:, 2], X[:, 3], X[:, 4]
    cg, sg = np.cos(gamma), np.sin(gamma)
    qdot = np.stack([s * cg - p.l_d * omega * sg, s * sg + p.l_d * omega * cg], axis=1)
    d = X[:, None, :2] - omap.centers[None, :, :]          # (B, n_obs, 2)
    phi = np.einsum("bki,bki->bk", d, d) - omap.radii[None, :] ** 2
    lf_phi = 2.0 * np.einsum("bki,bi->bk", d, qdot)
    vals = lf_phi + zeta * phi

    grads = np.zeros((B, omap.n_obstacles, 5))
    grads[:, :, 0] = 2.0 * qdot[:, None, 0] + 2.0 * zeta * d[:, :, 0]
    grads[:, :, 1] = 2.0 * qdot[:, None, 1] + 2.0 * zeta * d[:, :, 1]
    dqdot_dgamma = np.stack([-s * sg - p.l_d * omega * cg, s * cg - p.l_d * omega * sg], axis=1)
    grads[:, :, 2] = 2.0 * np.einsum("bki,bi->bk", d, dqdot_dgamma)
    grads[:, :, 3] = 2.0 * (d[:, :, 0] * cg[:, None] + d[:, :, 1] * sg[:, None])
    grads[:, :, 4] = 2.0 * p.l_d * (-d[:, :, 0] * sg[:, None] + d[:, :, 1] * cg[:, None])
    if single:
        return vals[0], grads[0]
    return vals, grads


@dataclass(frozen=True)
class SafeSet:
    """Composed safe set of a scenario: soft-minimum barrier, its
    relative-degree-one chain, and the solver-facing constraint."""

    barrier: SoftMinBarrier
    chain: HigherOrderChain
    constraint: StageConstraint
    omap: ObstacleMap
    limits: ScenarioLimits
    params: RobotParams

    def psi0(self, x):
        return self.barrier.value(x)

    def chain_values(self, x):
        """Barrier-chain values at x (degree one: just the composed value)."""
        x = np.asarray(x, dtype=float)
        v = self.barrier.value(x)
        if x.ndim == 1:
            return np.array([v])
        return np.asarray(v)[:, None]

    def contains(self, x) -> bool:
        return bool(np.min(self.chain_values(x)) >= 0.0)


def assemble_safe_set(omap: ObstacleMap, limits: ScenarioLimits, p: RobotParams) -> SafeSet:
    """Build the composed barrier and its affine control constraint.

    Obstacle clearances are lifted once (degree two -> one), velocity limits
    enter directly, and everything is soft-minimized with sharpness rho into
    a single degree-one barrier.  The member count is n_obstacles + 2.
    """
    members = []
    for idx in range(omap.n_obstacles):
        sub = ObstacleMap(centers=omap.centers[idx][None, :], radii=omap.radii[idx : idx + 1])

        def h(x, _sub=sub):
            X, single = _batchify(x)
            vals, _g = lifted_obstacle_barriers(X, _sub, limits.zeta, p)
            return vals[0, 0] if single else vals[:, 0]

        def grad_h(x, _sub=sub):
            X, single = _batchify(x)
            _vals, g = lifted_obstacle_barriers(X, _sub, limits.zeta, p)
            return g[0, 0] if single else g[:, 0]

        members.append(Barrier(h=h, grad_h=grad_h, label=f"obstacle_{idx}", vectorized=True))

    def h_speed(x):
        (hs, _), _ = velocity_barriers(x, limits)
        return hs

    def grad_speed(x):
        (_, gs), _ = velocity_barriers(x, limits)
        return gs

    def h_yaw(x):
        _, (hw, _) = velocity_barriers(x, limits)
        return hw

    def grad_yaw(x):
        _, (_, gw) = velocity_barriers(x, limits)
        return gw

    members.append(Barrier(h=h_speed, grad_h=grad_speed, label="speed_limit", vectorized=True))
    members.append(Barrier(h=h_yaw, grad_h=grad_yaw, label="yaw_rate_limit", vectorized=True))

    def members_eval(X):
        obs_vals, obs_grads = lifted_obstacle_barriers(X, omap, limits.zeta, p)
        (hs, gs), (hw, gw) = velocity_barriers(X, limits)
        vals = np.concatenate([obs_vals, hs[:, None], hw[:, None]], axis=1)
        grads = np.concatenate([obs_grads, gs[:, None, :], gw[:, None, :]], axis=1)
        return vals, grads

    barrier = SoftMinBarrier(members=tuple(members), rho=limits.rho,
                             members_eval=members_eval, label="safe_set")
    chain = HigherOrderChain(
        psi0=barrier,
        degree=1,
        alphas=(linear_class_k(limits.kappa),),
        f=lambda X: robot_f(X, p),
        constant_g=robot_g(p),
        vectorized_f=True,
    )
    generic = to_stage_constraint(chain, label="safe_set")
    fused_ab = _fused_constraint_ab(omap, limits, p)
    constraint = StageConstraint(a=generic.a, b=generic.b, ab=fused_ab,
                                 vectorized=True, label="safe_set")
    return SafeSet(barrier=barrier, chain=chain, constraint=constraint,
                   omap=omap, limits=limits, params=p)


def _fused_constraint_ab(omap: ObstacleMap, limits: ScenarioLimits, p: RobotParams):
    """Hot-path constraint evaluation with shared intermediates.

    Semantically identical to the generic chain route (the tests pin the
    equivalence); this version computes the trig terms, drift field, member
    barriers, soft-minimum, and Lie derivatives in one sweep per batch.
    """
    g_mat = robot_g(p)
    gv = g_mat[3:, :]  # voltages only reach the last two states
    centers = omap.centers
    radii_sq = omap.radii**2
    zeta, rho, kappa = limits.zeta, limits.rho, limits.kappa
    s_bar_sq, w_bar_sq = limits.s_bar**2, limits.omega_bar**2
    n_obs = omap.n_obstacles

    def ab(X):
        X = np.asarray(X, dtype=float)
        B = X.shape[0]
        gamma, s, omega = X[:, 2], X[:, 3], X[:, 4]
        cg, sg = np.cos(gamma), np.sin(gamma)
        qdot_x = s * cg - p.l_d * omega * sg
        qdot_y = s * sg + p.l_d * omega * cg
        th_s = np.tanh(s / p.eps1)
        th_w = np.tanh(omega / p.eps2)
        f = np.empty((B, 5))
        f[:, 0] = qdot_x
        f[:, 1] = qdot_y
        f[:, 2] = omega
        f[:, 3] = -p.c1 * s - p.c2 * s**2 * th_s
        f[:, 4] = -p.c3 * omega - p.c4 * omega**2 * th_w

        n_h = n_obs + 2
        vals = np.empty((B, n_h))
        grads = np.zeros((B, n_h, 5))
        if n_obs:
            dx = X[:, None, 0] - centers[None, :, 0]
            dy = X[:, None, 1] - centers[None, :, 1]
            phi = dx * dx + dy * dy - radii_sq[None, :]
            lf_phi = 2.0 * (dx * qdot_x[:, None] + dy * qdot_y[:, None])
            vals[:, :n_obs] = lf_phi + zeta * phi
            grads[:, :n_obs, 0] = 2.0 * qdot_x[:, None] + 2.0 * zeta * dx
            grads[:, :n_obs, 1] = 2.0 * qdot_y[:, None] + 2.0 * zeta * dy
            dqx_dg = -s * sg - p.l_d * omega * cg
            dqy_dg = s * cg - p.l_d * omega * sg
            grads[:, :n_obs, 2] = 2.0 * (dx * dqx_dg[:, None] + dy * dqy_dg[:, None])
            grads[:, :n_obs, 3] = 2.0 * (dx * cg[:, None] + dy * sg[:, None])
            grads[:, :n_obs, 4] = 2.0 * p.l_d * (dy * cg[:, None] - dx * sg[:, None])
        vals[:, n_obs] = s_bar_sq - s * s
        grads[:, n_obs, 3] = -2.0 * s
        vals[:, n_obs + 1] = w_bar_sq - omega * omega
        grads[:, n_obs + 1, 4] = -2.0 * omega

        m = vals.min(axis=1, keepdims=True)
        e = np.exp(-rho * (vals - m))
        denom = e.sum(axis=1, keepdims=True)
        psi = (m - np.log(denom) / rho)[:, 0]
        w = e / denom
        grad = np.einsum("bk,bkn->bn", w, grads)

        a = np.einsum("bn,bn->b", grad, f) + kappa * psi
        b = np.empty((B, 3))
        b[:, :2] = grad[:, 3:] @ gv
        b[:, 2] = psi
        return a, b

    return ab


@dataclass(frozen=True)
class Weights:
    """Running-cost weights of a scenario."""

    q_diag: Array
    r_v_diag: Array
    omega_v: Array
    r_delta: float

    def __post_init__(self):
        object.__setattr__(self, "q_diag", np.asarray(self.q_diag, dtype=float).reshape(5))
        object.__setattr__(self, "r_v_diag", np.asarray(self.r_v_diag, dtype=float).reshape(2))
        object.__setattr__(self, "omega_v", np.asarray(self.omega_v, dtype=float).reshape(2))
        if self.r_delta <= 0:
            raise ValueError("r_delta must be positive")


@dataclass(frozen=True)
class Scenario:
    """Everything needed to run benchmark trials on one map."""

    name: str
    omap: ObstacleMap
    limits: ScenarioLimits
    starts: Array  # (n_starts, 5)
    weights: Weights
    horizon: HorizonConfig
    zoh_hz: float = 100.0
    substeps: int = 5
    params: RobotParams = field(default_factory=RobotParams)

    def goal_state(self) -> Array:
        return np.concatenate([self.limits.goal, np.zeros(3)])


def load_scenario(path) -> Scenario:
    """Parse a scenario JSON file.

    Schema: {"obstacles": [{"c": [x, y], "r": r}, ...], "goal": [x, y],
    "starts": [[x, y, gamma, s, omega], ...], "limits": {...},
    "weights": {...}, "horizon": {...}, optional "bounds", "sim", "name"}.
    """
    path = Path(path)
    with open(path) as fh:
        raw = json.load(fh)
    omap = ObstacleMap.from_json_obj(raw["obstacles"], bounds=raw.get("bounds"))
    lim = dict(raw.get("limits", {}))
    limits = ScenarioLimits(goal=np.asarray(raw["goal"], dtype=float), **lim)
    starts = np.asarray(raw["starts"], dtype=float).reshape(-1, 5)
    w = raw["weights"]
    weights = Weights(q_diag=w["q_diag"], r_v_diag=w["r_v_diag"],
                      omega_v=w.get("omega_v", [0.0, 0.0]), r_delta=w["r_delta"])
    hz = raw["horizon"]
    horizon = HorizonConfig(T=hz["T"], T_p=hz["T_p"], T_s=hz["T_s"],
                            eta=hz.get("eta", 1.0), r_delta=weights.r_delta)
    sim = raw.get("sim", {})
    return Scenario(
        name=raw.get("name", path.stem),
        omap=omap, limits=limits, starts=starts, weights=weights, horizon=horizon,
        zoh_hz=float(sim.get("zoh_hz", 100.0)), substeps=int(sim.get("substeps", 5)),
    )
