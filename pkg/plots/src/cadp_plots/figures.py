"""Read a benchmark results directory and draw static figures.

Input contract (produced by the cadp benchmark CLI):
  scenario.json   map geometry, goal, starts
  metrics.csv     one row per trial with an SI column (0 = reached the goal)
  trial_*.csv     hold-tick traces with columns t,qx,qy,gamma,s,omega,...
  summary.json    normalized per-trial metrics and per-method means

Two figure kinds: a trajectory-over-map plot (blue paths reached the goal,
red paths did not) and a per-method radar chart of the six normalized
metrics, axes ordered SI, AT, TC, CM, CD, CI clockwise from the top.  Saved
files carry pinned metadata so regeneration from identical inputs is
byte-stable.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np
from matplotlib.patches import Circle

RADAR_AXES = ("SI", "AT", "TC", "CM", "CD", "CI")
TRACE_REQUIRED = ("t", "qx", "qy")
METRICS_REQUIRED = ("trial", "method", "SI")

BLUE = "#1f77b4"
RED = "#d62728"


class PlotSchemaError(RuntimeError):
    """Results directory does not match the documented schema."""


@dataclass(frozen=True)
class FigureSpec:
    """One figure request: where to read, what to draw, where to write."""

    input_dir: Path
    kind: str
    output: Path
    image_format: str = ""

    def __post_init__(self):
        if self.kind not in ("trajectories", "radar"):
            raise ValueError(f"unknown figure kind {self.kind!r}")
        object.__setattr__(self, "input_dir", Path(self.input_dir))
        object.__setattr__(self, "output", Path(self.output))
        fmt = self.image_format or self.output.suffix.lstrip(".").lower() or "png"
        object.__setattr__(self, "image_format", fmt)


def _load_json(path: Path) -> dict:
    if not path.exists():
        raise PlotSchemaError(f"missing {path.name} in {path.parent}")
    return json.loads(path.read_text())


def load_metrics(input_dir: Path) -> list[dict]:
    path = input_dir / "metrics.csv"
    if not path.exists():
        raise PlotSchemaError(f"missing metrics.csv in {input_dir}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in METRICS_REQUIRED if c not in (reader.fieldnames or [])]
        if missing:
            raise PlotSchemaError(f"metrics.csv lacks columns: {', '.join(missing)}")
        return list(reader)


def load_trace(path: Path) -> dict:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, [])
    missing = [c for c in TRACE_REQUIRED if c not in header]
    if missing:
        raise PlotSchemaError(f"{path.name} lacks columns: {', '.join(missing)}")
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    cols = {name: data[:, i] for i, name in enumerate(header)}
    return cols


def _save(fig, spec: FigureSpec):
    spec.output.parent.mkdir(parents=True, exist_ok=True)
    # Pinned metadata keeps regenerated files byte-identical for a fixed
    # renderer version (SVG/PDF otherwise embed the current date).
    metadata = {"Software": "cadp-plots"}
    if spec.image_format == "svg":
        metadata = {"Date": None}
    elif spec.image_format == "pdf":
        metadata = {"CreationDate": None}
    fig.savefig(spec.output, format=spec.image_format, dpi=150, metadata=metadata)
    plt.close(fig)
    return spec.output


def build_trajectories(spec: FigureSpec):
    """Assemble the map figure: obstacles, goal, and one path per trial
    colored by outcome (blue reached the goal, red did not)."""
    scenario = _load_json(spec.input_dir / "scenario.json")
    metrics = load_metrics(spec.input_dir) if (spec.input_dir / "metrics.csv").exists() else []

    fig, ax = plt.subplots(figsize=(8.0, 5.5))
    for obs in scenario.get("obstacles", []):
        ax.add_patch(Circle(obs["c"], obs["r"], facecolor="0.72", edgecolor="0.35",
                            zorder=1))
    goal = scenario.get("goal")
    if goal is not None:
        ax.plot(*goal, marker="*", markersize=16, color="goldenrod", zorder=4,
                linestyle="none", label="goal")
    for start in scenario.get("starts", []):
        ax.plot(start[0], start[1], marker="o", markersize=5, color="0.2",
                zorder=3, linestyle="none")

    seen = set()
    for row in metrics:
        trace_path = spec.input_dir / f"trial_{row['trial']}.csv"
        if not trace_path.exists():
            raise PlotSchemaError(f"missing trace for trial {row['trial']}")
        cols = load_trace(trace_path)
        reached = int(float(row["SI"])) == 0
        color = BLUE if reached else RED
        label = None
        key = ("reached" if reached else "failed")
        if key not in seen:
            seen.add(key)
            label = "reached" if reached else "did not reach"
        ax.plot(cols["qx"], cols["qy"], color=color, linewidth=1.1, alpha=0.9,
                zorder=2, label=label)

    bounds = scenario.get("bounds")
    if bounds is not None:
        (xmin, ymin), (xmax, ymax) = bounds
        ax.set_xlim(xmin, xmax)
        ax.set_ylim(ymin, ymax)
    ax.set_aspect("equal")
    ax.set_xlabel("x [m]")
    ax.set_ylabel("y [m]")
    ax.set_title(f"{scenario.get('name', spec.input_dir.name)}: trial trajectories")
    if metrics or goal is not None:
        ax.legend(loc="upper left", fontsize=8)
    return fig


def plot_trajectories(spec: FigureSpec):
    """Render the trajectory map to spec.output."""
    return _save(build_trajectories(spec), spec)


def radar_polygons(summary: dict) -> dict:
    """Radar geometry per method: axis angles plus mean and per-trial value
    polygons (vertices in RADAR_AXES order, clockwise from the top)."""
    if "trials" not in summary or "per_method" not in summary:
        raise PlotSchemaError("summary.json lacks trials/per_method sections")
    angles = np.array([0.5 * math.pi - 2.0 * math.pi * i / len(RADAR_AXES)
                       for i in range(len(RADAR_AXES))])
    out = {}
    for method, agg in summary["per_method"].items():
        mean_norm = agg.get("mean_normalized")
        if mean_norm is None or any(k not in mean_norm for k in RADAR_AXES):
            raise PlotSchemaError(f"per-method means for {method} lack radar metrics")
        trials = []
        for trial in summary["trials"]:
            if trial["method"] != method:
                continue
            norm = trial.get("normalized") or {}
            missing = [k for k in RADAR_AXES if k not in norm]
            if missing:
                raise PlotSchemaError(
                    f"trial {trial['trial']} lacks normalized metrics: {missing}")
            trials.append((trial["trial"], np.array([norm[k] for k in RADAR_AXES])))
        out[method] = {
            "angles": angles,
            "mean": np.array([mean_norm[k] for k in RADAR_AXES]),
            "trials": trials,
        }
    return out


def build_radar(spec: FigureSpec):
    """Assemble the per-method radar chart of the six normalized metrics
    (1 = best).  The shaded red polygon is the per-method mean; dashed lines
    show the individual trials."""
    summary = _load_json(spec.input_dir / "summary.json")
    polys = radar_polygons(summary)
    methods = sorted(polys)
    fig, axes = plt.subplots(1, len(methods), figsize=(4.6 * len(methods), 4.6),
                             subplot_kw={"projection": "polar"})
    if len(methods) == 1:
        axes = [axes]
    for ax, method in zip(axes, methods):
        data = polys[method]
        angles = data["angles"]
        closed = np.concatenate([angles, angles[:1]])
        for name, vals in data["trials"]:
            ax.plot(closed, np.concatenate([vals, vals[:1]]), linestyle="--",
                    linewidth=0.8, color="0.45", alpha=0.8)
        mean = data["mean"]
        ax.plot(closed, np.concatenate([mean, mean[:1]]), color=RED, linewidth=1.8)
        ax.fill(closed, np.concatenate([mean, mean[:1]]), color=RED, alpha=0.25)
        ax.set_xticks(angles)
        ax.set_xticklabels(RADAR_AXES)
        ax.set_ylim(0.0, 1.0)
        ax.set_yticks([0.25, 0.5, 0.75, 1.0])
        ax.set_yticklabels(["0.25", "0.5", "0.75", "1"], fontsize=7)
        ax.set_title(method, pad=16)
    fig.suptitle("Normalized performance metrics (1 = best)")
    return fig


def plot_radar(spec: FigureSpec):
    """Render the radar chart to spec.output."""
    return _save(build_radar(spec), spec)


def render(spec: FigureSpec):
    if spec.kind == "trajectories":
        return plot_trajectories(spec)
    return plot_radar(spec)
