"""Run both shipped scenarios end to end and summarize the results.

Writes results/<scenario>/ (traces, metrics.csv, summary.json) and, when the
cadp-plots package is importable, the trajectory and radar figures next to
them.  Expect a few minutes per scenario: every trial simulates the full
final time.
"""

import argparse
import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[1]
sys.path.insert(0, str(ROOT / "src"))
sys.path.insert(0, str(ROOT / "plots" / "src"))

from cadp.bench_cli import run_suite  # noqa: E402


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", default=str(ROOT / "results"))
    ap.add_argument("--jobs", type=int, default=1)
    ap.add_argument("--scenarios", nargs="*", default=["simple2", "cluttered12"])
    args = ap.parse_args()

    failures = 0
    for name in args.scenarios:
        out = Path(args.out) / name
        print(f"=== {name} -> {out}")
        code = run_suite(ROOT / "scenarios" / f"{name}.json", out, jobs=args.jobs)
        failures += code
        summary = json.loads((out / "summary.json").read_text())
        for method, agg in summary["per_method"].items():
            print(f"  {method:9s}: success {agg['success_rate']:.0%}  "
                  f"mean AT {agg['mean_raw']['AT']:6.1f}s  "
                  f"mean solve {agg['mean_solve_ms']:6.1f} ms")
        try:
            from cadp_plots.figures import FigureSpec, render

            for kind in ("trajectories", "radar"):
                fig = render(FigureSpec(input_dir=out, kind=kind,
                                        output=out / f"{kind}.png"))
                print(f"  wrote {fig}")
        except ImportError:
            print("  (cadp-plots not importable; skipping figures)")
    return 1 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
