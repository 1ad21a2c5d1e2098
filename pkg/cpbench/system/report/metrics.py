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
from typing import get_args, Literal, TypeAlias

from cpbench.system.fabric.log import StageTimeline


Metric: TypeAlias = Literal[
    "tflops",
    "sim_time",
    "flops",
    "comm_bytes",
    "max_abs_err",
    "peak_activation",
    "peak_activation_bytes",
    "attention_state",
    "failed",
]
METRICS: tuple[Metric, ...] = get_args(Metric)


METRIC_UNITS: dict[Metric, str] = {
    "tflops": "TFLOPs/s",
    "sim_time": "s",
    "flops": "FLOPs",
    "comm_bytes": "B",
    "max_abs_err": "",
    "peak_activation": "elements",
    "peak_activation_bytes": "B",
    "attention_state": "elements",
    "failed": "",
}


def tflops_per_device(flops: int, seconds: float, world_size: int) -> float:
    if seconds <= 0.0:
        raise ValueError(f"simulated time must be positive got {seconds}")
    if world_size < 1:
        raise ValueError(f"world_size must be positive got {world_size}")
    return flops / (seconds * world_size) / 1e12


def effective_tflops(
        flops: int, timeline: StageTimeline, world_size: int) -> float:
    """Achieved TFLOPs/s per device over the simulated time."""
    return tflops_per_device(flops, timeline.get_total_time(), world_size)
