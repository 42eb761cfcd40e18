"""Command-line figure generator for benchmark result directories."""

from __future__ import annotations

import argparse
import sys

from .figures import FigureSpec, render


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="cadp-plots",
        description="Draw trajectory maps and metric radar charts from a results directory",
    )
    parser.add_argument("--in", dest="input_dir", required=True,
                        help="results directory (scenario.json, metrics.csv, ...)")
    parser.add_argument("--kind", choices=("trajectories", "radar"), required=True)
    parser.add_argument("--out", required=True, help="output image path")
    parser.add_argument("--format", default="", help="image format (default: from suffix)")
    args = parser.parse_args(argv)
    spec = FigureSpec(input_dir=args.input_dir, kind=args.kind, output=args.out,
                      image_format=args.format)
    path = render(spec)
    print(path)
    return 0


if __name__ == "__main__":
    sys.exit(main())
