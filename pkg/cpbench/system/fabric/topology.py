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
Cluster model. All numbers are model parameters and not measurements of
any particular machine.
"""
from typing import Any, get_args, Literal, TypeAlias, TypedDict


LinkClass: TypeAlias = Literal["intra", "inter"]
LINK_CLASSES: tuple[LinkClass, ...] = get_args(LinkClass)


GIB = 1024 ** 3


DEFAULT_RANKS_PER_NODE = 8
DEFAULT_INTRA_BW = 150.0 * GIB
DEFAULT_INTER_BW = DEFAULT_INTRA_BW / 6.0
DEFAULT_LATENCY_INTRA = 2e-6
DEFAULT_LATENCY_INTER = 5e-6
DEFAULT_DEVICE_FLOPS = 400e12


Topology = TypedDict('Topology', {
    "world_size": int,
    "ranks_per_node": int,
    "intra_bw": float,
    "inter_bw": float,
    "link_latency_intra": float,
    "link_latency_inter": float,
    "device_flops_rate": float,
})


def create_topology(
        world_size: int,
        *,
        ranks_per_node: int = DEFAULT_RANKS_PER_NODE,
        intra_bw: float = DEFAULT_INTRA_BW,
        inter_bw: float = DEFAULT_INTER_BW,
        link_latency_intra: float = DEFAULT_LATENCY_INTRA,
        link_latency_inter: float = DEFAULT_LATENCY_INTER,
        device_flops_rate: float = DEFAULT_DEVICE_FLOPS) -> Topology:
    if world_size < 1 or ranks_per_node < 1:
        raise ValueError(
            f"world_size ({world_size}) and ranks_per_node "
            f"({ranks_per_node}) must be positive")
    if world_size > ranks_per_node and world_size % ranks_per_node != 0:
        raise ValueError(
            f"world_size ({world_size}) must be a multiple of "
            f"ranks_per_node ({ranks_per_node}) or fit on a single node")
    rates = [intra_bw, inter_bw, device_flops_rate]
    if min(rates) <= 0 or min(link_latency_intra, link_latency_inter) < 0:
        raise ValueError(
            "bandwidths and flops rate must be positive and latencies "
            "non-negative")
    return {
        "world_size": world_size,
        "ranks_per_node": ranks_per_node,
        "intra_bw": float(intra_bw),
        "inter_bw": float(inter_bw),
        "link_latency_intra": float(link_latency_intra),
        "link_latency_inter": float(link_latency_inter),
        "device_flops_rate": float(device_flops_rate),
    }


def topology_from_json(
        world_size: int, overrides: dict[str, Any] | None) -> Topology:
    if not overrides:
        return create_topology(world_size)
    allowed = set(Topology.__annotations__) - {"world_size"}
    unknown = set(overrides) - allowed
    if unknown:
        raise ValueError(f"unknown topology keys {sorted(unknown)}")
    return create_topology(world_size, **overrides)


def link_class(topology: Topology, src: int, dst: int) -> LinkClass:
    rpn = topology["ranks_per_node"]
    return "inter" if src // rpn != dst // rpn else "intra"


def transfer_time(
        topology: Topology, src: int, dst: int, num_bytes: int) -> float:
    """Latency plus serialization time of one point to point transfer."""
    if link_class(topology, src, dst) == "inter":
        return (
            topology["link_latency_inter"]
            + num_bytes / topology["inter_bw"])
    return topology["link_latency_intra"] + num_bytes / topology["intra_bw"]


def compute_time(topology: Topology, flops: int) -> float:
    return flops / topology["device_flops_rate"]
