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
Sequence sharding plans and process grids.

Ring style mechanisms use the zigzag plan: the sequence is cut into 2N
chunks and rank r owns chunks r and 2N - 1 - r so that causal masks give
every rank the same amount of work. Hybrid mechanisms apply the same
scheme to groups of ranks and cut the positions of a group contiguously
among its members.
"""
import math
from typing import Any, get_args, Literal, TypeAlias, TypedDict

import numpy as np

from cpbench.misc.errors import DivisibilityError, ShapeError
from cpbench.system.fabric.topology import Topology
from cpbench.system.masks.pattern import create_mask_spec, MaskSpec
from cpbench.system.numcore import Tensor3


PlanScheme: TypeAlias = Literal["contiguous", "zigzag", "grouped_zigzag"]
PLAN_SCHEMES: tuple[PlanScheme, ...] = get_args(PlanScheme)


ShardPlan = TypedDict('ShardPlan', {
    "world_size": int,
    "seq_len": int,
    "scheme": PlanScheme,
    "ranges": list[list[tuple[int, int]]],
})
ProcessGrid = TypedDict('ProcessGrid', {
    "ulysses_size": int,
    "ring_size": int,
    "inner_window": int,
    "outer_window": int,
})


def _check_ranges(seq_len: int, ranges: list[list[tuple[int, int]]]) -> None:
    covered = np.zeros(seq_len, dtype=np.int64)
    for rank_ranges in ranges:
        for start, end in rank_ranges:
            if not 0 <= start < end <= seq_len:
                raise ValueError(f"range [{start}, {end}) outside {seq_len}")
            covered[start:end] += 1
    if not (covered == 1).all():
        raise ValueError("plan ranges must cover the sequence exactly once")


def create_shard_plan(
        seq_len: int,
        scheme: PlanScheme,
        ranges: list[list[tuple[int, int]]]) -> ShardPlan:
    _check_ranges(seq_len, ranges)
    return {
        "world_size": len(ranges),
        "seq_len": seq_len,
        "scheme": scheme,
        "ranges": [
            [(int(start), int(end)) for start, end in rank_ranges]
            for rank_ranges in ranges
        ],
    }


def _require_multiple(seq_len: int, multiple: int, what: str) -> None:
    if multiple < 1 or seq_len % multiple != 0:
        raise DivisibilityError(
            f"{what} needs the sequence length ({seq_len}) to be a multiple "
            f"of {multiple}: pad the sequence first")


def plan_contiguous(seq_len: int, world_size: int) -> ShardPlan:
    _require_multiple(seq_len, world_size, "contiguous plan")
    size = seq_len // world_size
    return create_shard_plan(
        seq_len,
        "contiguous",
        [[(rank * size, (rank + 1) * size)] for rank in range(world_size)])


def _zigzag_ranges(seq_len: int, parts: int) -> list[list[tuple[int, int]]]:
    if parts == 1:
        return [[(0, seq_len)]]
    chunk = seq_len // (2 * parts)
    return [
        [
            (ix * chunk, (ix + 1) * chunk),
            ((2 * parts - 1 - ix) * chunk, (2 * parts - ix) * chunk),
        ]
        for ix in range(parts)
    ]


def plan_zigzag(seq_len: int, world_size: int) -> ShardPlan:
    """
    Head to tail plan. Rank r owns [rC, (r+1)C) and
    [(2N-1-r)C, (2N-r)C) with C = S / 2N.

    Args:
        seq_len (int): The sequence length S.
        world_size (int): The number of ranks N.

    Returns:
        ShardPlan: The plan.
    """
    _require_multiple(
        seq_len, 1 if world_size == 1 else 2 * world_size, "zigzag plan")
    return create_shard_plan(
        seq_len, "zigzag", _zigzag_ranges(seq_len, world_size))


def _split_ranges(
        ranges: list[tuple[int, int]],
        parts: int) -> list[list[tuple[int, int]]]:
    """Cuts the concatenation of the ranges into equal consecutive slices."""
    total = sum(end - start for start, end in ranges)
    size = total // parts
    res: list[list[tuple[int, int]]] = [[] for _ in range(parts)]
    offset = 0
    for start, end in ranges:
        pos = start
        while pos < end:
            part = offset // size
            take = min(end - pos, (part + 1) * size - offset)
            res[part].append((pos, pos + take))
            pos += take
            offset += take
    return res


def plan_grouped(seq_len: int, grid: ProcessGrid) -> ShardPlan:
    """
    Zigzag over the ring groups of a process grid. Rank
    `ring_ix * ulysses_size + uly_ix` gets slice `uly_ix` of the positions
    of group `ring_ix`.

    Args:
        seq_len (int): The sequence length.
        grid (ProcessGrid): The grid.

    Returns:
        ShardPlan: The plan.
    """
    ulysses = grid["ulysses_size"]
    ring = grid["ring_size"]
    multiple = ulysses if ring == 1 else 2 * ring * ulysses
    _require_multiple(seq_len, multiple, "grouped zigzag plan")
    ranges = [
        rank_ranges
        for group_ranges in _zigzag_ranges(seq_len, ring)
        for rank_ranges in _split_ranges(group_ranges, ulysses)
    ]
    return create_shard_plan(seq_len, "grouped_zigzag", ranges)


def plan_multiple(scheme: PlanScheme, grid: ProcessGrid) -> int:
    world_size = grid["ulysses_size"] * grid["ring_size"]
    if scheme == "contiguous":
        return world_size
    if scheme == "zigzag":
        return 1 if world_size == 1 else 2 * world_size
    if grid["ring_size"] == 1:
        return grid["ulysses_size"]
    return 2 * world_size


def ranges_positions(ranges: list[tuple[int, int]]) -> np.ndarray:
    if not ranges:
        return np.zeros(0, dtype=np.int64)
    return np.concatenate([
        np.arange(start, end, dtype=np.int64) for start, end in ranges
    ])


def plan_positions(plan: ShardPlan, rank: int) -> np.ndarray:
    return ranges_positions(plan["ranges"][rank])


def group_ranges(
        plan: ShardPlan, group_size: int) -> list[list[tuple[int, int]]]:
    """Ranges of consecutive rank groups in rank order."""
    ranges = plan["ranges"]
    if len(ranges) % group_size != 0:
        raise ShapeError(
            f"{len(ranges)} ranks cannot form groups of {group_size}")
    return [
        [
            rng
            for rank in range(start, start + group_size)
            for rng in ranges[rank]
        ]
        for start in range(0, len(ranges), group_size)
    ]


def shard(plan: ShardPlan, tensor: Tensor3) -> list[Tensor3]:
    if tensor.shape[1] != plan["seq_len"]:
        raise ShapeError(
            f"tensor has {tensor.shape[1]} rows but the plan covers "
            f"{plan['seq_len']}")
    return [
        tensor[:, plan_positions(plan, rank), :].copy()
        for rank in range(plan["world_size"])
    ]


def unshard(plan: ShardPlan, shards: list[np.ndarray]) -> np.ndarray:
    """Inverse of `shard`. Works for tensors and (heads, rows) stats."""
    if len(shards) != plan["world_size"]:
        raise ShapeError(
            f"expected {plan['world_size']} shards got {len(shards)}")
    first = shards[0]
    res = np.zeros(
        (first.shape[0], plan["seq_len"], *first.shape[2:]),
        dtype=first.dtype)
    for rank, part in enumerate(shards):
        res[:, plan_positions(plan, rank), ...] = part
    return res


def pad_for_plan(
        spec: MaskSpec,
        tensors: list[Tensor3],
        multiple: int) -> tuple[MaskSpec, list[Tensor3]]:
    """
    Pads the sequence to the next multiple with fully masked tokens.

    Args:
        spec (MaskSpec): The mask.
        tensors (list[Tensor3]): Tensors with the sequence as second axis.
        multiple (int): The required multiple.

    Returns:
        tuple[MaskSpec, list[Tensor3]]: The padded mask and zero padded
        tensors. Unchanged if the length is a multiple already.
    """
    seq_len = spec["seq_len"]
    extra = -seq_len % multiple
    if extra == 0:
        return spec, tensors
    padded = create_mask_spec(
        spec["pattern"],
        seq_len + extra,
        doc_offsets=spec["doc_offsets"],
        window=spec["window"],
        prefix_lens=spec["prefix_lens"],
        block_size=spec["block_size"],
        global_len=spec["global_len"],
        pad_len=spec["pad_len"] + extra)
    return padded, [
        np.pad(tensor, ((0, 0), (0, extra), (0, 0)))
        for tensor in tensors
    ]


def create_process_grid(
        world_size: int,
        ulysses_size: int,
        *,
        inner_window: int | None = None,
        ranks_per_node: int | None = None) -> ProcessGrid:
    """
    Groups of `ulysses_size` consecutive ranks and a ring of `world_size /
    ulysses_size` groups split into inner windows.

    Args:
        world_size (int): The number of ranks N.
        ulysses_size (int): The head parallel size u.
        inner_window (int | None, optional): The inner window. Defaults to
            the whole ring.
        ranks_per_node (int | None, optional): If set the all-to-all groups
            must fit on a node.

    Returns:
        ProcessGrid: The grid.
    """
    if ulysses_size < 1 or world_size % ulysses_size != 0:
        raise DivisibilityError(
            f"ulysses_size ({ulysses_size}) must divide the world size "
            f"({world_size})")
    if ranks_per_node is not None and ulysses_size > ranks_per_node:
        raise ValueError(
            f"ulysses_size ({ulysses_size}) exceeds the {ranks_per_node} "
            "ranks of a node")
    ring_size = world_size // ulysses_size
    if inner_window is None:
        inner_window = ring_size
    if inner_window < 1 or ring_size % inner_window != 0:
        raise DivisibilityError(
            f"inner_window ({inner_window}) must divide the ring size "
            f"({ring_size})")
    return {
        "ulysses_size": ulysses_size,
        "ring_size": ring_size,
        "inner_window": inner_window,
        "outer_window": ring_size // inner_window,
    }


def default_grid(topology: Topology) -> ProcessGrid:
    """
    All-to-all groups stay within a node and the ring is split into the
    most balanced inner x outer windows with the inner window not larger.

    Args:
        topology (Topology): The cluster.

    Returns:
        ProcessGrid: The grid.
    """
    world_size = topology["world_size"]
    ulysses = math.gcd(world_size, topology["ranks_per_node"])
    ring = world_size // ulysses
    inner = max(
        div
        for div in range(1, math.isqrt(ring) + 1)
        if ring % div == 0)
    return create_process_grid(
        world_size,
        ulysses,
        inner_window=inner,
        ranks_per_node=topology["ranks_per_node"])


def grid_from_json(topology: Topology, obj: dict[str, Any]) -> ProcessGrid:
    return create_process_grid(
        topology["world_size"],
        int(obj.get("ulysses_size", 1)),
        inner_window=(
            None if obj.get("inner_window") is None
            else int(obj["inner_window"])),
        ranks_per_node=topology["ranks_per_node"])
