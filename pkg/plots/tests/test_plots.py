import json
import math
import shutil

import numpy as np
import pytest
from matplotlib.patches import Circle

from cadp_plots import (
    FigureSpec,
    PlotSchemaError,
    RADAR_AXES,
    plot_radar,
    plot_trajectories,
    radar_polygons,
)
from cadp_plots.cli import main
from cadp_plots.figures import BLUE, RED, build_radar, build_trajectories


def test_figure_spec_validation(tmp_path):
    spec = FigureSpec(input_dir=tmp_path, kind="radar", output=tmp_path / "f.png")
    assert spec.image_format == "png"
    spec2 = FigureSpec(input_dir=tmp_path, kind="radar", output=tmp_path / "f.svg")
    assert spec2.image_format == "svg"
    with pytest.raises(ValueError):
        FigureSpec(input_dir=tmp_path, kind="pie", output=tmp_path / "f.png")


# ---------------------------------------------------------------------------
# trajectory figure


def test_trajectories_from_golden(golden_dir, tmp_path):
    spec = FigureSpec(input_dir=golden_dir, kind="trajectories",
                      output=tmp_path / "map.png")
    out = plot_trajectories(spec)
    assert out.exists() and out.stat().st_size > 0


def test_trajectory_colors_follow_outcomes(golden_dir, tmp_path):
    spec = FigureSpec(input_dir=golden_dir, kind="trajectories",
                      output=tmp_path / "map.png")
    fig = build_trajectories(spec)
    ax = fig.axes[0]
    rows = {r["trial"]: int(float(r["SI"]))
            for r in __import__("csv").DictReader(open(golden_dir / "metrics.csv"))}
    n_reached = sum(1 for si in rows.values() if si == 0)
    n_failed = len(rows) - n_reached
    assert n_reached > 0 and n_failed > 0  # golden data mixes outcomes
    path_lines = [ln for ln in ax.get_lines() if len(ln.get_xdata()) > 10]
    blue = sum(1 for ln in path_lines if ln.get_color() == BLUE)
    red = sum(1 for ln in path_lines if ln.get_color() == RED)
    assert blue == n_reached
    assert red == n_failed
    circles = [p for p in ax.patches if isinstance(p, Circle)]
    scenario = json.loads((golden_dir / "scenario.json").read_text())
    assert len(circles) == len(scenario["obstacles"])


def test_trajectories_map_only_when_no_trials(golden_dir, tmp_path):
    bare = tmp_path / "bare"
    bare.mkdir()
    shutil.copyfile(golden_dir / "scenario.json", bare / "scenario.json")
    header = (golden_dir / "metrics.csv").read_text().splitlines()[0]
    (bare / "metrics.csv").write_text(header + "\n")
    spec = FigureSpec(input_dir=bare, kind="trajectories", output=tmp_path / "bare.png")
    fig = build_trajectories(spec)
    path_lines = [ln for ln in fig.axes[0].get_lines() if len(ln.get_xdata()) > 10]
    assert path_lines == []
    assert plot_trajectories(spec).exists()


def test_trajectories_reject_bad_metrics_schema(golden_dir, tmp_path):
    broken = tmp_path / "broken"
    broken.mkdir()
    shutil.copyfile(golden_dir / "scenario.json", broken / "scenario.json")
    (broken / "metrics.csv").write_text("trial,method\nx,cadp\n")
    spec = FigureSpec(input_dir=broken, kind="trajectories", output=tmp_path / "x.png")
    with pytest.raises(PlotSchemaError):
        plot_trajectories(spec)


def test_trajectories_reject_missing_trace_columns(golden_dir, tmp_path):
    broken = tmp_path / "cols"
    broken.mkdir()
    shutil.copyfile(golden_dir / "scenario.json", broken / "scenario.json")
    shutil.copyfile(golden_dir / "metrics.csv", broken / "metrics.csv")
    for trace in golden_dir.glob("trial_*.csv"):
        lines = trace.read_text().splitlines()
        lines[0] = lines[0].replace("qx", "foo")
        (broken / trace.name).write_text("\n".join(lines))
    spec = FigureSpec(input_dir=broken, kind="trajectories", output=tmp_path / "x.png")
    with pytest.raises(PlotSchemaError):
        plot_trajectories(spec)


# ---------------------------------------------------------------------------
# radar figure


def test_radar_from_golden(golden_dir, tmp_path):
    spec = FigureSpec(input_dir=golden_dir, kind="radar", output=tmp_path / "radar.png")
    out = plot_radar(spec)
    assert out.exists() and out.stat().st_size > 0


def test_radar_polygons_match_summary(golden_dir):
    summary = json.loads((golden_dir / "summary.json").read_text())
    polys = radar_polygons(summary)
    assert set(polys) == set(summary["per_method"])
    for method, data in polys.items():
        expected_mean = [summary["per_method"][method]["mean_normalized"][k]
                         for k in RADAR_AXES]
        np.testing.assert_allclose(data["mean"], expected_mean, atol=0)
        by_trial = {t["trial"]: t["normalized"] for t in summary["trials"]
                    if t["method"] == method}
        assert len(data["trials"]) == len(by_trial)
        for name, vals in data["trials"]:
            np.testing.assert_allclose(
                vals, [by_trial[name][k] for k in RADAR_AXES], atol=0)
    # axes run clockwise from the top
    angles = polys[next(iter(polys))]["angles"]
    assert angles[0] == pytest.approx(math.pi / 2)
    assert np.all(np.diff(angles) < 0)


def test_radar_rendered_vertices_equal_normalized_metrics(golden_dir, tmp_path):
    summary = json.loads((golden_dir / "summary.json").read_text())
    spec = FigureSpec(input_dir=golden_dir, kind="radar", output=tmp_path / "r.png")
    fig = build_radar(spec)
    methods = sorted(summary["per_method"])
    for ax, method in zip(fig.axes, methods):
        mean_expected = np.array(
            [summary["per_method"][method]["mean_normalized"][k] for k in RADAR_AXES])
        solid = [ln for ln in ax.get_lines() if ln.get_linestyle() == "-"]
        mean_line = solid[-1]
        np.testing.assert_allclose(np.asarray(mean_line.get_ydata())[:-1],
                                   mean_expected, atol=0)
        dashed = [ln for ln in ax.get_lines() if ln.get_linestyle() == "--"]
        trial_norms = [np.array([t["normalized"][k] for k in RADAR_AXES])
                       for t in summary["trials"] if t["method"] == method]
        assert len(dashed) == len(trial_norms)
        rendered = sorted(tuple(np.asarray(ln.get_ydata())[:-1]) for ln in dashed)
        expected = sorted(tuple(v) for v in trial_norms)
        np.testing.assert_allclose(rendered, expected, atol=0)


def radar_dir_with_values(tmp_path, value):
    vals = {k: value for k in RADAR_AXES}
    summary = {
        "per_method": {"cadp": {"mean_normalized": vals}},
        "trials": [{"trial": "cadp_00", "method": "cadp", "normalized": vals}],
    }
    d = tmp_path / f"vals_{value}"
    d.mkdir()
    (d / "summary.json").write_text(json.dumps(summary))
    return d


def test_radar_all_ones_is_full_polygon(tmp_path):
    d = radar_dir_with_values(tmp_path, 1.0)
    polys = radar_polygons(json.loads((d / "summary.json").read_text()))
    np.testing.assert_allclose(polys["cadp"]["mean"], np.ones(6))
    spec = FigureSpec(input_dir=d, kind="radar", output=tmp_path / "ones.png")
    assert plot_radar(spec).exists()


def test_radar_all_zeros_collapses_to_center(tmp_path):
    d = radar_dir_with_values(tmp_path, 0.0)
    polys = radar_polygons(json.loads((d / "summary.json").read_text()))
    np.testing.assert_allclose(polys["cadp"]["mean"], np.zeros(6))


def test_radar_rejects_missing_metric(tmp_path):
    vals = {k: 0.5 for k in RADAR_AXES}
    bad_vals = dict(vals)
    del bad_vals["CD"]
    summary = {
        "per_method": {"cadp": {"mean_normalized": vals}},
        "trials": [{"trial": "cadp_00", "method": "cadp", "normalized": bad_vals}],
    }
    d = tmp_path / "missing"
    d.mkdir()
    (d / "summary.json").write_text(json.dumps(summary))
    with pytest.raises(PlotSchemaError):
        radar_polygons(summary)
    spec = FigureSpec(input_dir=d, kind="radar", output=tmp_path / "x.png")
    with pytest.raises(PlotSchemaError):
        plot_radar(spec)


# ---------------------------------------------------------------------------
# regeneration stability and the CLI


@pytest.mark.parametrize("kind", ["trajectories", "radar"])
def test_figures_regenerate_byte_stable(golden_dir, tmp_path, kind):
    a = FigureSpec(input_dir=golden_dir, kind=kind, output=tmp_path / "a.png")
    b = FigureSpec(input_dir=golden_dir, kind=kind, output=tmp_path / "b.png")
    plot_trajectories(a) if kind == "trajectories" else plot_radar(a)
    plot_trajectories(b) if kind == "trajectories" else plot_radar(b)
    assert (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()


def test_cli_generates_both_kinds(golden_dir, tmp_path):
    for kind in ("trajectories", "radar"):
        out = tmp_path / f"{kind}.png"
        assert main(["--in", str(golden_dir), "--kind", kind, "--out", str(out)]) == 0
        assert out.exists() and out.stat().st_size > 0
