"""Benchmark harness: run trial grids over a scenario, compute the six
performance metrics, and write machine-readable results.

Outputs per run directory:
  scenario.json          copy of the scenario config (self-contained results)
  trial_<id>.csv         hold-tick trace, columns
                         t,qx,qy,gamma,s,omega,v_r,v_l,delta,psi0,solve_ms
  trial_<id>_vd.csv      desired-control trace (t,vd_r,vd_l), needed to
                         recompute the intervention metric offline
  metrics.csv            one row per trial; wall times excluded so reruns of
                         the same config are byte-identical
  summary.json           normalized metrics, per-method means, solver timing,
                         safety audit

Metrics (lower is better before normalization): SI success indicator (0 on
reaching the goal ball and staying), AT arrival time (T_f on failure), TC
integrated quadratic state/control cost, CM peak control norm, CD peak
control slew excluding policy-update jumps, CI peak deviation from the
intervention-free desired control.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict
from pathlib import Path
from typing import Optional

import numpy as np

from .baselines import NaiveGains, min_intervention_filter, naive_control
from .cadp_core import SolverError
from .receding_horizon import (
    ClosedLoopLog,
    RunningCost,
    discretize,
    run_closed_loop,
    simulate_zoh,
)
from .robot_world import (
    RobotParams,
    Scenario,
    SafeSet,
    assemble_safe_set,
    load_scenario,
    robot_f,
    robot_g,
)

Array = np.ndarray
log = logging.getLogger("cadp.bench")

METHODS = ("cadp", "naive_cbf")
METRIC_NAMES = ("SI", "AT", "TC", "CM", "CD", "CI")
TRACE_COLUMNS = "t,qx,qy,gamma,s,omega,v_r,v_l,delta,psi0,solve_ms"
SAFETY_PSI_TOL = 1e-6
SAFETY_VEL_TOL = 1e-6


@dataclass(frozen=True)
class TrialSpec:
    """One benchmark trial: a method driving one start toward the goal."""

    trial_id: str
    method: str
    start: Array
    goal: Array
    scenario_path: str
    seed: int
    duration: float
    start_index: int

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        object.__setattr__(self, "start", np.asarray(self.start, dtype=float).reshape(5))
        object.__setattr__(self, "goal", np.asarray(self.goal, dtype=float).reshape(2))


@dataclass
class TrialMetrics:
    trial_id: str
    method: str
    start_index: int
    seed: int
    si: int
    at: float
    tc: float
    cm: float
    cd: float
    ci: float
    min_psi0: float
    max_abs_s: float
    max_abs_omega: float
    mean_solve_ms: float
    norm: Optional[dict] = None
    wall_s: float = 0.0

    def raw_dict(self) -> dict:
        return {"SI": float(self.si), "AT": self.at, "TC": self.tc,
                "CM": self.cm, "CD": self.cd, "CI": self.ci}


def goal_distance(log_: ClosedLoopLog, goal: Array) -> Array:
    return np.linalg.norm(log_.x[:, :2] - np.asarray(goal)[None, :], axis=1)


def compute_metrics(log_: ClosedLoopLog, spec: TrialSpec, weights) -> TrialMetrics:
    """Evaluate one trial trace.

    Success means the goal-distance enters the tolerance ball and never
    leaves again before the final time; the arrival time is the start of that
    terminal stay.  TC integrates the quadratic state/control cost by the
    trapezoid rule on the log grid.  CD uses one-sided differences of the
    held control and skips the ticks where a policy update may jump.
    """
    if len(log_.t) < 2:
        raise ValueError("log too short to evaluate metrics")
    dist = goal_distance(log_, spec.goal)
    inside = dist <= weights.d_tol
    if inside.all():
        si, at = 0, float(log_.t[0])
    else:
        last_out = int(np.nonzero(~inside)[0][-1])
        if last_out == len(dist) - 1:
            si, at = 1, float(spec.duration)
        else:
            si, at = 0, float(log_.t[last_out + 1])

    x_d = np.concatenate([spec.goal, np.zeros(3)])
    dx = log_.x - x_d[None, :]
    state_term = np.einsum("bi,ij,bj->b", dx, weights.Q, dx)
    ctrl_term = np.einsum("bi,ij,bj->b", log_.v, weights.R_v, log_.v)
    tc = float(np.trapezoid(state_term + ctrl_term, log_.t))

    cm = float(np.linalg.norm(log_.v, axis=1).max())

    dts = np.diff(log_.t)
    dv = np.linalg.norm(np.diff(log_.v, axis=0), axis=1) / dts
    keep = ~log_.is_update[1:]
    cd = float(dv[keep].max()) if keep.any() else 0.0

    ci = float(np.linalg.norm(log_.v - log_.v_des, axis=1).max())

    solve = log_.solve_s[log_.solve_s > 0]
    mean_solve_ms = float(1e3 * solve.mean()) if solve.size else 0.0
    return TrialMetrics(
        trial_id=spec.trial_id, method=spec.method, start_index=spec.start_index,
        seed=spec.seed, si=si, at=at, tc=tc, cm=cm, cd=cd, ci=ci,
        min_psi0=float(log_.psi0.min()),
        max_abs_s=float(np.abs(log_.x[:, 3]).max()),
        max_abs_omega=float(np.abs(log_.x[:, 4]).max()),
        mean_solve_ms=mean_solve_ms,
    )


@dataclass(frozen=True)
class MetricWeights:
    Q: Array
    R_v: Array
    d_tol: float


def normalize_metrics(all_metrics: list[TrialMetrics]) -> list[dict]:
    """Min-max normalize each metric across the trial pool: 1 is best, 0 is
    worst.  A column with no spread normalizes to all ones."""
    if not all_metrics:
        return []
    out = [dict() for _ in all_metrics]
    for name in METRIC_NAMES:
        vals = np.array([m.raw_dict()[name] for m in all_metrics])
        lo, hi = vals.min(), vals.max()
        if hi - lo <= 0.0:
            scaled = np.ones_like(vals)
        else:
            scaled = (hi - vals) / (hi - lo)
        for i, v in enumerate(scaled):
            out[i][name] = float(v)
    for m, norm in zip(all_metrics, out):
        m.norm = norm
    return out


def naive_nominal_fn(scenario: Scenario, safe_set: SafeSet):
    """Initial nominal trajectory: roll the discretized dynamics under the
    safety-filtered goal-seeking controller (slack contributes nothing)."""
    gains = NaiveGains()
    p = scenario.params
    goal = scenario.limits.goal
    r_delta = scenario.weights.r_delta

    def build(x0, dyn, N):
        nominal = np.empty((N, 5))
        nominal[0] = np.asarray(x0, dtype=float)
        for i in range(N - 1):
            xi = nominal[i]
            v_d = naive_control(xi, goal, gains, p)
            a, b = safe_set.constraint.pair(xi)
            v, _ = min_intervention_filter(v_d, a, b, r_delta)
            nominal[i + 1] = dyn.step(xi, np.concatenate([v, [0.0]]))
        return nominal

    return build


def build_running_cost(scenario: Scenario) -> RunningCost:
    """Quadratic running cost centered on the goal state.

    Gamma = -Q x_d completes the square so 0.5 x'Qx + Gamma'x is minimized at
    the goal state (up to a constant).
    """
    Q = np.diag(scenario.weights.q_diag)
    x_d = scenario.goal_state()
    return RunningCost.constant(
        Q=Q, Gamma=-Q @ x_d,
        R_v=np.diag(scenario.weights.r_v_diag),
        Omega_v=scenario.weights.omega_v,
    )


def run_cadp_trial(scenario: Scenario, safe_set: SafeSet, spec: TrialSpec) -> ClosedLoopLog:
    p = scenario.params
    return run_closed_loop(
        x0=spec.start,
        duration=spec.duration,
        cfg=scenario.horizon,
        running=build_running_cost(scenario),
        constraint=safe_set.constraint,
        f=lambda x: robot_f(x, p),
        g=robot_g(p),
        chain_values_fn=safe_set.chain_values,
        initial_nominal_fn=naive_nominal_fn(scenario, safe_set),
        zoh_hz=scenario.zoh_hz,
        substeps=scenario.substeps,
        constant_g=robot_g(p),
    )


def run_naive_trial(scenario: Scenario, safe_set: SafeSet, spec: TrialSpec) -> ClosedLoopLog:
    p = scenario.params
    gains = NaiveGains()
    r_delta = scenario.weights.r_delta
    goal = spec.goal
    constraint = safe_set.constraint

    def control_fn(j, t, x):
        tic = time.perf_counter()
        v_d = naive_control(x, goal, gains, p)
        a, b = constraint.pair(x)
        v, delta = min_intervention_filter(v_d, a, b, r_delta)
        return v, delta, v_d, time.perf_counter() - tic, False

    return simulate_zoh(
        spec.start, spec.duration, lambda x: robot_f(x, p), robot_g(p),
        control_fn, safe_set.chain_values,
        zoh_hz=scenario.zoh_hz, substeps=scenario.substeps,
    )


def run_trial(scenario: Scenario, safe_set: SafeSet, spec: TrialSpec) -> ClosedLoopLog:
    if not safe_set.contains(spec.start):
        raise ValueError(f"trial {spec.trial_id}: start state outside the safe set")
    if spec.method == "cadp":
        return run_cadp_trial(scenario, safe_set, spec)
    return run_naive_trial(scenario, safe_set, spec)


# ---------------------------------------------------------------------------
# File I/O


def write_trace_csv(path: Path, log_: ClosedLoopLog):
    rows = np.column_stack([
        log_.t, log_.x, log_.v, log_.delta, log_.psi0, 1e3 * log_.solve_s,
    ])
    np.savetxt(path, rows, delimiter=",", fmt="%.17g", header=TRACE_COLUMNS, comments="")


def write_vd_csv(path: Path, log_: ClosedLoopLog):
    rows = np.column_stack([log_.t, log_.v_des])
    np.savetxt(path, rows, delimiter=",", fmt="%.17g", header="t,vd_r,vd_l", comments="")


def read_trace(trace_path: Path, vd_path: Path, t_s: float, zoh_hz: float,
               method: str) -> ClosedLoopLog:
    """Rebuild a ClosedLoopLog from the trace files.  Update ticks are
    reconstructed from the policy update period."""
    data = np.loadtxt(trace_path, delimiter=",", skiprows=1, ndmin=2)
    vd = np.loadtxt(vd_path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    is_update = np.zeros(len(t), dtype=bool)
    if method == "cadp":
        ticks_per_update = round(t_s * zoh_hz)
        idx = np.arange(len(t) - 1)  # final row is the terminal state, never an update
        is_update[idx] = idx % ticks_per_update == 0
    return ClosedLoopLog(
        t=t, x=data[:, 1:6], v=data[:, 6:8], delta=data[:, 8],
        v_des=vd[:, 1:3], psi_chain=data[:, 9][:, None],
        solve_s=1e-3 * data[:, 10], is_update=is_update,
    )


def write_metrics_csv(path: Path, metrics: list[TrialMetrics]):
    header = "trial,method,start_index,seed,SI,AT,TC,CM,CD,CI,min_psi0,max_abs_s,max_abs_omega"
    lines = [header]
    for m in sorted(metrics, key=lambda m: m.trial_id):
        vals = [m.at, m.tc, m.cm, m.cd, m.ci, m.min_psi0, m.max_abs_s, m.max_abs_omega]
        formatted = ",".join("%.17g" % v for v in vals)
        lines.append(f"{m.trial_id},{m.method},{m.start_index},{m.seed},{m.si},{formatted}")
    path.write_text("\n".join(lines) + "\n")


def audit_safety(m: TrialMetrics, scenario: Scenario) -> list[str]:
    problems = []
    if m.min_psi0 < -SAFETY_PSI_TOL:
        problems.append(f"min psi0 {m.min_psi0:.3e} below -{SAFETY_PSI_TOL:.0e}")
    if m.max_abs_s > scenario.limits.s_bar + SAFETY_VEL_TOL:
        problems.append(f"|s| reached {m.max_abs_s:.6f} above the speed limit")
    if m.max_abs_omega > scenario.limits.omega_bar + SAFETY_VEL_TOL:
        problems.append(f"|omega| reached {m.max_abs_omega:.6f} above the yaw-rate limit")
    return problems


def write_summary(path: Path, scenario: Scenario, metrics: list[TrialMetrics],
                  audit: dict, failures: dict):
    normalize_metrics(metrics)
    per_method = {}
    for method in METHODS:
        ms = [m for m in metrics if m.method == method]
        if not ms:
            continue
        per_method[method] = {
            "trials": len(ms),
            "success_rate": float(np.mean([1 - m.si for m in ms])),
            "mean_raw": {k: float(np.mean([m.raw_dict()[k] for m in ms])) for k in METRIC_NAMES},
            "mean_normalized": {k: float(np.mean([m.norm[k] for m in ms])) for k in METRIC_NAMES},
            "mean_solve_ms": float(np.mean([m.mean_solve_ms for m in ms])),
        }
    doc = {
        "scenario": scenario.name,
        "normalization_pool_size": len(metrics),
        "per_method": per_method,
        "trials": [
            {
                "trial": m.trial_id, "method": m.method, "start_index": m.start_index,
                "seed": m.seed, "raw": m.raw_dict(), "normalized": m.norm,
                "min_psi0": m.min_psi0, "mean_solve_ms": m.mean_solve_ms,
                "wall_s": m.wall_s,
            }
            for m in sorted(metrics, key=lambda m: m.trial_id)
        ],
        "safety_audit": audit,
        "failures": failures,
    }
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Suite runner


def enumerate_trials(scenario: Scenario, scenario_path: str, method_filter: Optional[str],
                     seed: int) -> list[TrialSpec]:
    methods = [method_filter] if method_filter else list(METHODS)
    specs = []
    for method in methods:
        for idx, start in enumerate(scenario.starts):
            specs.append(TrialSpec(
                trial_id=f"{method}_{idx:02d}", method=method, start=start,
                goal=scenario.limits.goal, scenario_path=str(scenario_path),
                seed=seed + idx, duration=scenario.limits.T_f, start_index=idx,
            ))
    return specs


def _trial_payload(spec: TrialSpec) -> dict:
    d = asdict(spec)
    d["start"] = spec.start.tolist()
    d["goal"] = spec.goal.tolist()
    return d


def _run_trial_worker(payload: dict):
    """Worker entry point: rebuilds the scenario so nothing unpicklable
    crosses the process boundary."""
    spec = TrialSpec(**payload)
    scenario = load_scenario(spec.scenario_path)
    safe_set = assemble_safe_set(scenario.omap, scenario.limits, scenario.params)
    tic = time.perf_counter()
    log_ = run_trial(scenario, safe_set, spec)
    return spec.trial_id, log_, time.perf_counter() - tic


def run_suite(config_path, out_dir, method: Optional[str] = None, jobs: int = 1,
              seed: int = 0) -> int:
    """Execute every trial of a scenario; returns a process exit code."""
    config_path = Path(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    scenario = load_scenario(config_path)
    safe_set = assemble_safe_set(scenario.omap, scenario.limits, scenario.params)
    shutil.copyfile(config_path, out / "scenario.json")

    specs = enumerate_trials(scenario, config_path, method, seed)
    weights = MetricWeights(Q=np.diag(scenario.weights.q_diag),
                            R_v=np.diag(scenario.weights.r_v_diag),
                            d_tol=scenario.limits.d_tol)

    logs: dict[str, ClosedLoopLog] = {}
    walls: dict[str, float] = {}
    failures: dict[str, str] = {}
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = {pool.submit(_run_trial_worker, _trial_payload(s)): s for s in specs}
            for fut, spec in futures.items():
                try:
                    trial_id, log_, wall = fut.result()
                    logs[trial_id] = log_
                    walls[trial_id] = wall
                except Exception as exc:  # noqa: BLE001 - failures become markers
                    failures[spec.trial_id] = str(exc)
    else:
        for spec in specs:
            try:
                tic = time.perf_counter()
                logs[spec.trial_id] = run_trial(scenario, safe_set, spec)
                walls[spec.trial_id] = time.perf_counter() - tic
            except Exception as exc:  # noqa: BLE001
                failures[spec.trial_id] = str(exc)

    metrics: list[TrialMetrics] = []
    for spec in specs:
        if spec.trial_id in failures:
            (out / f"trial_{spec.trial_id}.FAILED").write_text(failures[spec.trial_id] + "\n")
            log.error("trial %s failed: %s", spec.trial_id, failures[spec.trial_id])
            continue
        log_ = logs[spec.trial_id]
        write_trace_csv(out / f"trial_{spec.trial_id}.csv", log_)
        write_vd_csv(out / f"trial_{spec.trial_id}_vd.csv", log_)
        m = compute_metrics(log_, spec, weights)
        m.wall_s = walls[spec.trial_id]
        metrics.append(m)

    audit: dict[str, list[str]] = {}
    for m in metrics:
        problems = audit_safety(m, scenario)
        if problems:
            audit[m.trial_id] = problems
            log.error("safety audit failed for %s: %s", m.trial_id, "; ".join(problems))

    write_metrics_csv(out / "metrics.csv", metrics)
    write_summary(out / "summary.json", scenario, metrics, audit, failures)
    if failures or audit:
        return 1
    return 0


def recompute_metrics(results_dir) -> int:
    """Rebuild metrics.csv and summary.json from the trace files in a results
    directory."""
    out = Path(results_dir)
    scenario = load_scenario(out / "scenario.json")
    weights = MetricWeights(Q=np.diag(scenario.weights.q_diag),
                            R_v=np.diag(scenario.weights.r_v_diag),
                            d_tol=scenario.limits.d_tol)
    seeds = {}
    walls = {}
    summary_path = out / "summary.json"
    if summary_path.exists():
        prior = json.loads(summary_path.read_text())
        seeds = {t["trial"]: t["seed"] for t in prior.get("trials", [])}
        walls = {t["trial"]: t.get("wall_s", 0.0) for t in prior.get("trials", [])}

    metrics = []
    failures = {}
    for marker in sorted(out.glob("trial_*.FAILED")):
        failures[marker.stem.removeprefix("trial_")] = marker.read_text().strip()
    for trace_path in sorted(out.glob("trial_*.csv")):
        stem = trace_path.stem
        if stem.endswith("_vd"):
            continue
        trial_id = stem.removeprefix("trial_")
        method, start_index = trial_id.rsplit("_", 1)
        log_ = read_trace(trace_path, out / f"{stem}_vd.csv",
                          scenario.horizon.T_s, scenario.zoh_hz, method)
        spec = TrialSpec(
            trial_id=trial_id, method=method,
            start=scenario.starts[int(start_index)], goal=scenario.limits.goal,
            scenario_path=str(out / "scenario.json"),
            seed=seeds.get(trial_id, int(start_index)),
            duration=scenario.limits.T_f, start_index=int(start_index),
        )
        m = compute_metrics(log_, spec, weights)
        m.wall_s = walls.get(trial_id, 0.0)
        metrics.append(m)

    audit = {}
    for m in metrics:
        problems = audit_safety(m, scenario)
        if problems:
            audit[m.trial_id] = problems
    write_metrics_csv(out / "metrics.csv", metrics)
    write_summary(out / "summary.json", scenario, metrics, audit, failures)
    return 1 if (failures or audit) else 0


def main(argv=None) -> int:
    logging.basicConfig(level=os.environ.get("CADP_LOG_LEVEL", "WARNING").upper())
    parser = argparse.ArgumentParser(prog="cadp-bench",
                                     description="Safe receding-horizon control benchmark")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run all trials of a scenario")
    run_p.add_argument("--config", required=True, help="scenario JSON file")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.add_argument("--method", choices=METHODS, default=None,
                       help="restrict to one method")
    run_p.add_argument("--jobs", type=int, default=1, help="parallel trial workers")
    run_p.add_argument("--seed", type=int, default=0, help="base seed recorded per trial")

    met_p = sub.add_parser("metrics", help="recompute metrics from trial traces")
    met_p.add_argument("--in", dest="results", required=True, help="results directory")

    args = parser.parse_args(argv)
    if args.command == "run":
        return run_suite(args.config, args.out, method=args.method,
                         jobs=args.jobs, seed=args.seed)
    return recompute_metrics(args.results)


if __name__ == "__main__":
    sys.exit(main())
