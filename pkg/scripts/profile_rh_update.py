"""Time the receding-horizon policy update at the full 400-stage horizon.

Prints the per-update wall time on this machine; the release budget is a
mean of 200 ms (5-state robot, 3 stacked controls).
"""

import sys
from pathlib import Path

import numpy as np

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))

from cadp.receding_horizon import HorizonConfig, RunningCost, discretize, rh_update  # noqa: E402
from cadp.robot_world import assemble_safe_set, load_scenario, robot_f, robot_g  # noqa: E402


def main():
    sc = load_scenario(ROOT / "scenarios" / "cluttered12.json")
    ss = assemble_safe_set(sc.omap, sc.limits, sc.params)
    Q = np.diag(sc.weights.q_diag)
    x_d = sc.goal_state()
    running = RunningCost.constant(Q=Q, Gamma=-Q @ x_d, R_v=np.diag(sc.weights.r_v_diag))
    cfg = HorizonConfig(T=20.0, T_p=0.05, T_s=0.05, eta=1.0, r_delta=sc.weights.r_delta)
    dyn = discretize(lambda x: robot_f(x, sc.params), None, cfg.T_p,
                     constant_g=robot_g(sc.params), vectorized=True)
    x0 = np.asarray(sc.starts[0], dtype=float)
    pol = rh_update(0, x0, cfg, running, ss.constraint, dyn,
                    initial_nominal=np.tile(x0, (cfg.N, 1)))
    times = []
    for k in range(1, 21):
        pol = rh_update(k, x0, cfg, running, ss.constraint, dyn, prev_policy=pol)
        times.append(1e3 * pol.solve_time_s)
    print(f"N={cfg.N}: mean {np.mean(times):.1f} ms, "
          f"min {np.min(times):.1f} ms, max {np.max(times):.1f} ms over {len(times)} updates")


if __name__ == "__main__":
    main()
