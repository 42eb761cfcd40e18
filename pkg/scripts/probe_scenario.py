"""Quick scenario probe: run every trial of a scenario (optionally shortened)
and print reach/safety figures.  Used while tuning the shipped maps."""

import argparse
import sys
import time
from pathlib import Path

import numpy as np

sys.path.insert(0, str(Path(__file__).resolve().parents[1] / "src"))

from cadp.bench_cli import TrialSpec, run_trial  # noqa: E402
from cadp.robot_world import assemble_safe_set, load_scenario  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("scenario")
    ap.add_argument("--duration", type=float, default=None)
    ap.add_argument("--method", default=None)
    args = ap.parse_args()

    sc = load_scenario(args.scenario)
    ss = assemble_safe_set(sc.omap, sc.limits, sc.params)
    duration = args.duration or sc.limits.T_f
    methods = [args.method] if args.method else ["cadp", "naive_cbf"]
    print(f"--- {sc.name} (duration {duration}s) ---")
    worst = 0.0
    for method in methods:
        for i, start in enumerate(sc.starts):
            spec = TrialSpec(trial_id=f"{method}_{i:02d}", method=method, start=start,
                             goal=sc.limits.goal, scenario_path=args.scenario,
                             seed=i, duration=duration, start_index=i)
            tic = time.perf_counter()
            log = run_trial(sc, ss, spec)
            wall = time.perf_counter() - tic
            dist = np.linalg.norm(log.x[:, :2] - sc.limits.goal, axis=1)
            inside = dist <= sc.limits.d_tol
            last_out = np.nonzero(~inside)[0][-1] if not inside.all() else -1
            at = log.t[last_out + 1] if (last_out < len(dist) - 1) else np.inf
            ok = "OK " if at < np.inf else "no "
            mp = log.psi0.min()
            worst = min(worst, mp)
            print(f"  {method:9s} start {i}: reach={ok} AT={at:6.1f}  "
                  f"min_psi0={mp:10.6f}  max|s|={abs(log.x[:, 3]).max():.3f}  "
                  f"max|w|={abs(log.x[:, 4]).max():.3f}  wall={wall:5.1f}s")
    print(f"worst min_psi0 = {worst:.6f}")


if __name__ == "__main__":
    main()
