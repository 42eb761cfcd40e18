"""Figure generation from benchmark result directories."""

from .figures import (
    FigureSpec,
    PlotSchemaError,
    RADAR_AXES,
    plot_radar,
    plot_trajectories,
    radar_polygons,
    render,
)

__version__ = "0.1.0"
