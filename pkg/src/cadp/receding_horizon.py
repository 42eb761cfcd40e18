"""Receding-horizon control loop around the finite-horizon solver.

Each update window k: sample the running cost on the planning grid, roll the
previous policy forward from the measured state to get a nominal trajectory,
re-solve the backward pass, and apply the leading stage control until the
next update.  The plant runs in continuous time under a zero-order hold; the
planner sees a forward-Euler discretization with a slack column appended to
the input matrix so the safety constraint can be relaxed away from the
boundary at quadratic price r_delta.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .cadp_core import (
    DEFAULT_OPTS,
    DiscreteDynamics,
    PolicySequence,
    SolverError,
    SolverOptions,
    StageConstraint,
    StageCost,
    TerminalCost,
    backward_pass,
    policy_eval,
)

Array = np.ndarray
log = logging.getLogger("cadp.receding_horizon")


class ForwardPassError(RuntimeError):
    def __init__(self, stage_index: int, cause: Exception):
        super().__init__(f"forward pass failed at stage {stage_index}: {cause}")
        self.stage_index = stage_index


class SimulationAbort(RuntimeError):
    def __init__(self, t: float, msg: str):
        super().__init__(f"simulation aborted at t = {t:.6f} s: {msg}")
        self.t = t


@dataclass(frozen=True)
class HorizonConfig:
    """Receding-horizon timing and regularization.

    T: prediction horizon [s]; T_p: planning step [s] (T/T_p must be an
    integer); T_s: policy update period in (0, T_p]; eta: softplus sharpness
    of the smoothed multiplier; r_delta: quadratic slack weight.
    """

    T: float
    T_p: float
    T_s: float
    eta: float = 1.0
    r_delta: float = 1e6

    def __post_init__(self):
        if self.T <= 0 or self.T_p <= 0:
            raise ValueError("horizon and planning step must be positive")
        ratio = self.T / self.T_p
        if abs(ratio - round(ratio)) > 1e-9:
            raise ValueError(f"T/T_p = {ratio} is not an integer")
        if not (0.0 < self.T_s <= self.T_p + 1e-12):
            raise ValueError("update period T_s must lie in (0, T_p]")
        if self.r_delta <= 0 or self.eta <= 0:
            raise ValueError("r_delta and eta must be positive")

    @property
    def N(self) -> int:
        return int(round(self.T / self.T_p))


@dataclass(frozen=True)
class RunningCost:
    """Time-sampled quadratic running cost for the continuous problem.

    Q(t) (n, n) PSD and Gamma(t) (n,) weight the state; R_v(t) (l_v, l_v) PD
    and Omega_v(t) (l_v,) weight the physical control (the slack weight lives
    in HorizonConfig).
    """

    Q: Callable
    Gamma: Callable
    R_v: Callable
    Omega_v: Callable
    time_invariant: bool = False

    @classmethod
    def constant(cls, Q: Array, Gamma: Array, R_v: Array, Omega_v: Optional[Array] = None):
        Q = np.asarray(Q, dtype=float)
        Gamma = np.asarray(Gamma, dtype=float)
        R_v = np.asarray(R_v, dtype=float)
        Omega_v = np.zeros(R_v.shape[0]) if Omega_v is None else np.asarray(Omega_v, dtype=float)
        return cls(
            Q=lambda t: Q, Gamma=lambda t: Gamma, R_v=lambda t: R_v,
            Omega_v=lambda t: Omega_v, time_invariant=True,
        )

    @property
    def l_v(self) -> int:
        return np.asarray(self.R_v(0.0)).shape[0]


@dataclass
class ClosedLoopLog:
    """Zero-order-hold trace of one closed-loop run.

    One row per hold tick (plus the final state): time, state, applied
    control and slack, the desired (intervention-free) control, barrier chain
    values, per-tick solver wall time, and whether a policy update happened on
    that tick.
    """

    t: Array
    x: Array
    v: Array
    delta: Array
    v_des: Array
    psi_chain: Array  # (K, d); column 0 is the composed barrier value
    solve_s: Array
    is_update: Array

    def __post_init__(self):
        if len(self.t) == 0:
            raise ValueError("empty log")
        if np.any(np.diff(self.t) <= 0):
            raise ValueError("time grid must be strictly increasing")
        K = len(self.t)
        for name in ("x", "v", "delta", "v_des", "psi_chain", "solve_s", "is_update"):
            if len(getattr(self, name)) != K:
                raise ValueError(f"trace '{name}' length differs from time grid")

    @property
    def psi0(self) -> Array:
        return self.psi_chain[:, 0]


def discretize(f: Callable, g: Callable, T_p: float, vectorized: bool = False,
               constant_g: Optional[Array] = None, fd_step: float = 1e-5) -> DiscreteDynamics:
    """Forward-Euler discretization with a slack column on the input matrix.

    F(x) = x + T_p f(x);  G(x) = [T_p g(x), 0].  The appended zero column
    gives the slack decision variable no dynamic effect.
    """
    if T_p <= 0:
        raise ValueError("planning step must be positive")

    def F(x):
        x = np.asarray(x, dtype=float)
        return x + T_p * np.asarray(f(x), dtype=float)

    if constant_g is not None:
        gd = T_p * np.asarray(constant_g, dtype=float)
        return DiscreteDynamics(F=F, vectorized=vectorized, fd_step=fd_step,
                                constant_G=augment_with_slack(gd))

    def g_d(x):
        return T_p * np.asarray(g(np.asarray(x, dtype=float)), dtype=float)

    return DiscreteDynamics(F=F, G=augment_with_slack(g_d), vectorized=vectorized,
                            fd_step=fd_step)


def augment_with_slack(g_d):
    """Append a zero column to an input matrix (or matrix-valued map)."""
    if isinstance(g_d, np.ndarray):
        return np.concatenate([g_d, np.zeros((g_d.shape[0], 1))], axis=1)

    def G(x):
        gx = np.asarray(g_d(x), dtype=float)
        zero = np.zeros(gx.shape[:-1] + (1,))
        return np.concatenate([gx, zero], axis=-1)

    return G


def sample_stage_costs(k: int, cfg: HorizonConfig, running: RunningCost):
    """Sample the running cost on window k's planning grid.

    Stage i is weighted by the integrand at t = k T_s + i T_p times T_p (left
    Riemann rule); the terminal cost samples the state integrand at the
    horizon end with the same scale.  The sampled control weight is extended
    block-diagonally with r_delta and the linear control weight padded with a
    zero for the slack.
    """
    N = cfg.N
    l_v = running.l_v

    def build(t: float) -> StageCost:
        Q = np.asarray(running.Q(t), dtype=float)
        R_v = np.asarray(running.R_v(t), dtype=float)
        R = np.zeros((l_v + 1, l_v + 1))
        R[:l_v, :l_v] = R_v
        R[l_v, l_v] = cfg.r_delta
        Omega = np.concatenate([np.asarray(running.Omega_v(t), dtype=float), [0.0]])
        try:
            return StageCost(Q=cfg.T_p * Q, R=cfg.T_p * R,
                             Omega=cfg.T_p * Omega, Gamma=cfg.T_p * np.asarray(running.Gamma(t), dtype=float))
        except ValueError as exc:
            raise ValueError(f"invalid running cost sampled at t = {t:.6f}: {exc}") from exc

    t0 = k * cfg.T_s
    if running.time_invariant:
        costs = [build(t0)] * N
    else:
        costs = [build(t0 + i * cfg.T_p) for i in range(N)]
    t_end = t0 + N * cfg.T_p
    terminal = TerminalCost(Q_N=cfg.T_p * np.asarray(running.Q(t_end), dtype=float),
                            Gamma_N=cfg.T_p * np.asarray(running.Gamma(t_end), dtype=float))
    return costs, terminal


def forward_pass(prev_policy: PolicySequence, x_now: Array) -> Array:
    """Roll the previous window's policies forward from the measured state:

        xbar_{i+1} = F(xbar_i) + G(xbar_i) u*_i(xbar_i),  xbar_0 = x_now.
    """
    x_now = np.asarray(x_now, dtype=float)
    N = prev_policy.N
    dyn = prev_policy.dyn
    nominal = np.empty((N, x_now.shape[0]))
    nominal[0] = x_now
    for i in range(N - 1):
        try:
            u = policy_eval(prev_policy, i, nominal[i])
        except SolverError as exc:
            raise ForwardPassError(i, exc) from exc
        nominal[i + 1] = dyn.step(nominal[i], u)
    return nominal


def rh_update(
    k: int,
    x_now: Array,
    cfg: HorizonConfig,
    running: RunningCost,
    constraint: StageConstraint,
    dyn: DiscreteDynamics,
    prev_policy: Optional[PolicySequence] = None,
    initial_nominal: Optional[Array] = None,
    opts: SolverOptions = DEFAULT_OPTS,
) -> PolicySequence:
    """Solve window k's policies: forward pass (or the supplied initial
    nominal at k = 0) followed by a backward pass; wall time is recorded on
    the returned policy."""
    tic = time.perf_counter()
    if k == 0:
        if initial_nominal is None:
            raise ValueError("window 0 requires an initial nominal trajectory")
        nominal = np.asarray(initial_nominal, dtype=float)
    else:
        if prev_policy is None:
            raise ValueError("windows k >= 1 require the previous policy")
        nominal = forward_pass(prev_policy, x_now)
    costs, terminal = sample_stage_costs(k, cfg, running)
    policy = backward_pass(cfg.N, nominal, costs, terminal, constraint, dyn, cfg.eta, opts)
    policy.solve_time_s = time.perf_counter() - tic
    return policy


def extract_control(policy: PolicySequence, t: float, x: Array):
    """Split the leading-stage control into (physical control, slack)."""
    u = policy_eval(policy, 0, x)
    return u[:-1], float(u[-1])


def zero_control_nominal_fn(x0: Array, dyn: DiscreteDynamics, N: int) -> Array:
    """Drift-only rollout used as a fallback initial nominal trajectory."""
    x0 = np.asarray(x0, dtype=float)
    nominal = np.empty((N, x0.shape[0]))
    nominal[0] = x0
    for i in range(N - 1):
        nominal[i + 1] = np.asarray(dyn.F(nominal[i]), dtype=float)
    return nominal


class RecedingHorizonController:
    """Stateful wrapper: holds the latest policy and refreshes it on demand."""

    def __init__(self, cfg: HorizonConfig, running: RunningCost,
                 constraint: StageConstraint, dyn: DiscreteDynamics,
                 initial_nominal_fn: Optional[Callable] = None,
                 opts: SolverOptions = DEFAULT_OPTS):
        self.cfg = cfg
        self.running = running
        self.constraint = constraint
        self.dyn = dyn
        self.opts = opts
        self.initial_nominal_fn = initial_nominal_fn or zero_control_nominal_fn
        self.policy: Optional[PolicySequence] = None
        self.update_times: list[float] = []

    def update(self, k: int, x_now: Array) -> PolicySequence:
        initial = self.initial_nominal_fn(x_now, self.dyn, self.cfg.N) if k == 0 else None
        self.policy = rh_update(k, x_now, self.cfg, self.running, self.constraint,
                                self.dyn, prev_policy=self.policy,
                                initial_nominal=initial, opts=self.opts)
        self.update_times.append(self.policy.solve_time_s)
        return self.policy

    def control(self, t: float, x: Array):
        return extract_control(self.policy, t, x)


def rk4_step(fn: Callable, x: Array, dt: float) -> Array:
    k1 = fn(x)
    k2 = fn(x + 0.5 * dt * k1)
    k3 = fn(x + 0.5 * dt * k2)
    k4 = fn(x + dt * k3)
    return x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_hold(f: Callable, g, x: Array, v: Array, dt: float, substeps: int) -> Array:
    """Integrate xdot = f(x) + g(x) v over dt with v held constant (RK4)."""
    if isinstance(g, np.ndarray):
        gv = g @ v
        ode = lambda s: np.asarray(f(s), dtype=float) + gv
    else:
        ode = lambda s: np.asarray(f(s), dtype=float) + np.asarray(g(s), dtype=float) @ v
    h = dt / substeps
    for _ in range(substeps):
        x = rk4_step(ode, x, h)
    return x


def simulate_zoh(
    x0: Array,
    duration: float,
    f: Callable,
    g,
    control_fn: Callable,
    chain_values_fn: Callable,
    zoh_hz: float = 100.0,
    substeps: int = 5,
    state_cap: float = 1e8,
) -> ClosedLoopLog:
    """Run the continuous plant under a zero-order hold.

    ``control_fn(tick_index, t, x)`` returns (v, delta, v_des, solve_s,
    is_update); the returned v is held for one tick while the plant is
    integrated with fixed-step RK4 (``substeps`` per tick).
    ``chain_values_fn(x)`` supplies the logged barrier-chain values.
    """
    if zoh_hz <= 0 or substeps < 1:
        raise ValueError("zoh_hz must be positive and substeps >= 1")
    dt = 1.0 / zoh_hz
    K = int(round(duration * zoh_hz))
    x = np.asarray(x0, dtype=float).copy()

    l_v = None
    t_grid = np.arange(K + 1) * dt
    xs, vs, deltas, vdes, psis, solves, updates = [], [], [], [], [], [], []
    for j in range(K):
        t = t_grid[j]
        if not np.all(np.isfinite(x)) or np.abs(x).max() > state_cap:
            raise SimulationAbort(t, "state left the admissible numeric range")
        v, delta, v_d, solve_s, is_update = control_fn(j, t, x)
        v = np.asarray(v, dtype=float)
        if l_v is None:
            l_v = v.shape[0]
        xs.append(x.copy())
        vs.append(v.copy())
        deltas.append(float(delta))
        vdes.append(np.asarray(v_d, dtype=float).copy())
        psis.append(np.asarray(chain_values_fn(x), dtype=float))
        solves.append(float(solve_s))
        updates.append(bool(is_update))
        x = integrate_hold(f, g, x, v, dt, substeps)

    # Final row: terminal state with the last hold repeated for completeness.
    xs.append(x.copy())
    vs.append(vs[-1].copy())
    deltas.append(deltas[-1])
    vdes.append(vdes[-1].copy())
    psis.append(np.asarray(chain_values_fn(x), dtype=float))
    solves.append(0.0)
    updates.append(False)

    return ClosedLoopLog(
        t=t_grid,
        x=np.asarray(xs),
        v=np.asarray(vs),
        delta=np.asarray(deltas),
        v_des=np.asarray(vdes),
        psi_chain=np.atleast_2d(np.asarray(psis)),
        solve_s=np.asarray(solves),
        is_update=np.asarray(updates, dtype=bool),
    )


def run_closed_loop(
    x0: Array,
    duration: float,
    cfg: HorizonConfig,
    running: RunningCost,
    constraint: StageConstraint,
    f: Callable,
    g,
    chain_values_fn: Callable,
    initial_nominal_fn: Optional[Callable] = None,
    zoh_hz: float = 100.0,
    substeps: int = 5,
    constant_g: Optional[Array] = None,
    opts: SolverOptions = DEFAULT_OPTS,
) -> ClosedLoopLog:
    """Closed-loop run of the receding-horizon controller.

    The policy refreshes every T_s; between refreshes the held control is
    re-evaluated from the measured state at every hold tick (the policy is a
    state-feedback function, so this needs no extra solves).  The start state
    must lie inside the barrier chain's superlevel sets.
    """
    x0 = np.asarray(x0, dtype=float)
    chain0 = np.asarray(chain_values_fn(x0), dtype=float)
    if np.min(chain0) < 0.0:
        raise ValueError(f"start state violates the safe-set chain: values {chain0}")

    ticks_per_update = round(cfg.T_s * zoh_hz)
    if ticks_per_update < 1 or abs(ticks_per_update - cfg.T_s * zoh_hz) > 1e-9:
        raise ValueError("T_s must be an integer multiple of the hold period")

    dyn = discretize(f, g, cfg.T_p, constant_g=constant_g,
                     vectorized=constant_g is not None)
    controller = RecedingHorizonController(cfg, running, constraint, dyn,
                                           initial_nominal_fn=initial_nominal_fn,
                                           opts=opts)

    def control_fn(j: int, t: float, x: Array):
        is_update = j % ticks_per_update == 0
        solve_s = 0.0
        if is_update:
            k = j // ticks_per_update
            controller.update(k, x)
            solve_s = controller.policy.solve_time_s
        v, delta = controller.control(t, x)
        v_d = controller_desired(controller.policy, x)
        return v, delta, v_d, solve_s, is_update

    return simulate_zoh(x0, duration, f, g, control_fn, chain_values_fn,
                        zoh_hz=zoh_hz, substeps=substeps)


def controller_desired(policy: PolicySequence, x: Array) -> Array:
    """Intervention-free branch of the leading stage control (multiplier
    forced to zero); the physical part of k_0(x)."""
    from .cadp_core import unconstrained_policy_eval

    u = unconstrained_policy_eval(policy, 0, x)
    return u[:-1]
