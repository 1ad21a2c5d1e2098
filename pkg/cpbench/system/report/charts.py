# cpbench simulates context parallel attention on a deterministic fabric.
# Copyright (C) 2026 cpbench contributors
#
# This program is free software: you can redistribute it and/or modify
# it under the terms of the GNU General Public License as published by
# the Free Software Foundation, either version 3 of the License, or
# (at your option) any later version.
#
# This program is distributed in the hope that it will be useful,
# but WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the
# GNU General Public License for more details.
#
# You should have received a copy of the GNU General Public License
# along with this program.  If not, see <https://www.gnu.org/licenses/>.
"""
SVG charts of a results frame. The output is byte stable: the SVG id salt
is fixed and no creation date is written.
"""
import os

import matplotlib
from matplotlib.figure import Figure
import pandas as pd

from cpbench.misc.io import ensure_folder, open_write
from cpbench.system.report.metrics import Metric, METRIC_UNITS


CHART_METRICS: tuple[Metric, ...] = ("tflops", "peak_activation")
SVG_SALT = "cpbench"


def chart_axis(frame: pd.DataFrame) -> str:
    """Plots over the sequence length unless only the world size varies."""
    if frame["S"].nunique() == 1 and frame["N"].nunique() > 1:
        return "N"
    return "S"


def plot_metric(
        frame: pd.DataFrame, metric: Metric, pattern: str, fname: str) -> None:
    """
    Writes one chart with a line per mechanism.

    Args:
        frame (pd.DataFrame): Rows of a single metric and pattern.
        metric (Metric): The metric.
        pattern (str): The mask pattern.
        fname (str): The SVG file.
    """
    axis = chart_axis(frame)
    with matplotlib.rc_context({
            "svg.hashsalt": SVG_SALT,
            "svg.fonttype": "path",
            }):
        fig = Figure(figsize=(6, 4))
        ax = fig.subplots()
        for mechanism in sorted(frame["mechanism"].unique()):
            series = frame[frame["mechanism"] == mechanism]
            series = series.groupby(axis)["value"].median().sort_index()
            ax.plot(
                series.index.to_list(),
                series.to_list(),
                marker="o",
                label=f"{mechanism}")
        ax.set_xscale("log", base=2)
        ax.set_xlabel("sequence length" if axis == "S" else "devices")
        unit = METRIC_UNITS[metric]
        ax.set_ylabel(f"{metric} [{unit}]" if unit else metric)
        ax.set_title(f"{pattern}")
        ax.legend()
        fig.tight_layout()
        with open_write(fname, text=True) as fout:
            fig.savefig(fout, format="svg", metadata={"Date": None})


def write_charts(frame: pd.DataFrame, out_dir: str) -> list[str]:
    """
    Writes a chart per metric and pattern.

    Args:
        frame (pd.DataFrame): The long results frame as written to CSV.
        out_dir (str): The chart folder.

    Returns:
        list[str]: The written files.
    """
    files: list[str] = []
    for metric in CHART_METRICS:
        rows = frame[frame["metric"] == metric]
        if rows.empty:
            continue
        ensure_folder(out_dir)
        for pattern in sorted(rows["pattern"].unique()):
            fname = os.path.join(out_dir, f"{metric}_{pattern}.svg")
            plot_metric(
                rows[rows["pattern"] == pattern], metric, pattern, fname)
            files.append(fname)
    return files
