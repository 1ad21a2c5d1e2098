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
Hybrid head and sequence parallelism. Ranks form groups of `ulysses_size`
consecutive ranks. An all-to-all inside every group switches to head
shards over the sequence of the group and a ring over the groups exchanges
key values. Without head parallelism the all-to-all is skipped and the
ring starts at stage 0.
"""
from collections.abc import Callable
from typing import Any

import numpy as np

from cpbench.misc.errors import MissingStateError, ShapeError
from cpbench.system.attnref.partial import create_partial
from cpbench.system.attnref.reference import output_delta
from cpbench.system.cpmech.common import (
    check_forward,
    check_shards,
    CPBackward,
    CPForward,
    head_shard_layout,
    heads_to_seq,
    kv_replication,
    Mechanism,
    RankShard,
    reduce_replicas,
    replicate_kv,
    SavedState,
    seq_to_heads,
)
from cpbench.system.cpmech.meta import create_varlen_meta, VarlenMeta
from cpbench.system.cpmech.plan import (
    group_ranges,
    ProcessGrid,
    ranges_positions,
    ShardPlan,
)
from cpbench.system.cpmech.ring import ring_backward_steps, ring_forward_steps
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import RankContext, RankGen, spawn_world
from cpbench.system.masks.pattern import MaskSpec
from cpbench.system.numcore import HeadLayout, Tensor3


# (ctx, grid, ring_ix, uly_ix, q, kv, meta, layout, stage_offset)
# -> (partial, key values to keep for the backward, unit of those)
RingForward = Callable[..., RankGen]
# (ctx, grid, ring_ix, uly_ix, q, kv, d_out, lse, delta, meta, layout,
# stage_offset) -> (dq, dk, dv, unit of dk and dv)
RingBackward = Callable[..., RankGen]


def grid_rank(grid: ProcessGrid, ring_ix: int, uly_ix: int) -> int:
    return ring_ix * grid["ulysses_size"] + uly_ix


def group_positions(plan: ShardPlan, group_size: int) -> list[np.ndarray]:
    return [
        ranges_positions(ranges) for ranges in group_ranges(plan, group_size)
    ]


def _usp_ring_forward(
        ctx: RankContext,
        *,
        grid: ProcessGrid,
        ring_ix: int,
        uly_ix: int,
        **kwargs: Any) -> RankGen:
    peers = [
        grid_rank(grid, cix, uly_ix) for cix in range(grid["ring_size"])
    ]
    part, final_kv = yield from ring_forward_steps(
        ctx, peers=peers, index=ring_ix, **kwargs)
    return part, final_kv, (ring_ix + 1) % grid["ring_size"]


def _usp_ring_backward(
        ctx: RankContext,
        *,
        grid: ProcessGrid,
        ring_ix: int,
        uly_ix: int,
        **kwargs: Any) -> RankGen:
    peers = [
        grid_rank(grid, cix, uly_ix) for cix in range(grid["ring_size"])
    ]
    res = yield from ring_backward_steps(
        ctx, peers=peers, index=ring_ix, **kwargs)
    return res


def _check_grid(
        topology: Topology, plan: ShardPlan, grid: ProcessGrid) -> None:
    world_size = grid["ulysses_size"] * grid["ring_size"]
    if world_size != plan["world_size"]:
        raise ShapeError(
            f"grid covers {world_size} ranks but the plan "
            f"{plan['world_size']}")
    if topology["world_size"] != world_size:
        raise ShapeError(
            f"topology has {topology['world_size']} ranks but the grid "
            f"{world_size}")


def hybrid_forward(
        mechanism: Mechanism,
        ring_steps: RingForward,
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        grid: ProcessGrid,
        *,
        meta: VarlenMeta | None = None) -> CPForward:
    _check_grid(topology, plan, grid)
    check_shards(shards, layout, plan)
    uly = grid["ulysses_size"]
    rep = kv_replication(layout, uly)
    local = head_shard_layout(layout, uly, rep)
    if meta is None:
        meta = create_varlen_meta(plan, mask, group_size=uly)
    ring_meta = meta
    unit_pos = group_positions(plan, uly)
    ring_size = grid["ring_size"]
    offset = 0 if uly == 1 else 1

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        ring_ix, uly_ix = divmod(rank, uly)
        group = [grid_rank(grid, ring_ix, uix) for uix in range(uly)]
        rank_shard = shards[rank]
        q_h = rank_shard["q"]
        k_h = replicate_kv(rank_shard["k"], rep)
        v_h = replicate_kv(rank_shard["v"], rep)
        if uly > 1:
            ctx.stage(0)
            q_h, k_h, v_h = yield from seq_to_heads(
                ctx, group, (q_h, k_h, v_h))
        part, kept_kv, kept_unit = yield from ring_steps(
            ctx,
            grid=grid,
            ring_ix=ring_ix,
            uly_ix=uly_ix,
            q=q_h,
            kv=(k_h, v_h),
            meta=ring_meta,
            layout=local,
            stage_offset=offset)
        out = part["out"]
        lse = part["lse"]
        if uly > 1:
            ctx.stage(offset + ring_size)
            out, lse = yield from heads_to_seq(ctx, group, (out, lse))
        state: SavedState = {
            "q": q_h,
            "kv": kept_kv,
            "q_pos": unit_pos[ring_ix],
            "k_pos": unit_pos[kept_unit],
            "partial": part,
        }
        return create_partial(out, lse), state

    results, log, timeline = spawn_world(topology, program)
    return {
        "mechanism": mechanism,
        "topology": topology,
        "layout": layout,
        "mask": mask,
        "plan": plan,
        "grid": grid,
        "meta": ring_meta,
        "outputs": [part for part, _ in results],
        "saved": [state for _, state in results],
        "log": log,
        "timeline": timeline,
    }


def hybrid_backward(
        mechanism: Mechanism,
        ring_steps: RingBackward,
        fwd: CPForward | None,
        d_out: list[Tensor3]) -> CPBackward:
    fwd = check_forward(fwd, mechanism, d_out)
    grid = fwd["grid"]
    if grid is None:
        raise MissingStateError(f"{mechanism} forward state has no grid")
    layout = fwd["layout"]
    uly = grid["ulysses_size"]
    rep = kv_replication(layout, uly)
    local = head_shard_layout(layout, uly, rep)
    meta = fwd["meta"]
    if meta is None:
        raise MissingStateError(
            f"{mechanism} forward state has no mask structure")
    saved = fwd["saved"]
    ring_size = grid["ring_size"]
    offset = 0 if uly == 1 else 1

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        ring_ix, uly_ix = divmod(rank, uly)
        group = [grid_rank(grid, ring_ix, uix) for uix in range(uly)]
        state = saved[rank]
        kv = state["kv"]
        if kv is None:
            raise MissingStateError(
                f"rank {rank} has no stored key values from the forward")
        d_h = d_out[rank]
        if uly > 1:
            ctx.stage(0)
            (d_h,) = yield from seq_to_heads(ctx, group, (d_h,))
        part = state["partial"]
        d_q, d_k, d_v, unit = yield from ring_steps(
            ctx,
            grid=grid,
            ring_ix=ring_ix,
            uly_ix=uly_ix,
            q=state["q"],
            kv=kv,
            d_out=d_h,
            lse=part["lse"],
            delta=output_delta(d_h, part["out"]),
            meta=meta,
            layout=local,
            stage_offset=offset)
        if uly > 1:
            ctx.stage(offset + ring_size)
            d_q, d_k, d_v = yield from heads_to_seq(
                ctx, group, (d_q, d_k, d_v))
        return (
            d_q,
            reduce_replicas(d_k, rep),
            reduce_replicas(d_v, rep),
            grid_rank(grid, unit, uly_ix),
        )

    results, log, timeline = spawn_world(fwd["topology"], program)
    return {
        "mechanism": mechanism,
        "grads": [(d_q, d_k, d_v) for d_q, d_k, d_v, _ in results],
        "grad_owners": [owner for _, _, _, owner in results],
        "log": log,
        "timeline": timeline,
    }


def usp_forward(
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        grid: ProcessGrid,
        *,
        meta: VarlenMeta | None = None) -> CPForward:
    """
    Runs the USP forward: Ulysses inside groups and a ring across groups.

    Args:
        topology (Topology): The cluster.
        shards (list[RankShard]): Per rank inputs following the grouped
            zigzag plan of the grid.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): Full, Causal, FullDocument or CausalDocument.
        plan (ShardPlan): The plan.
        grid (ProcessGrid): Head parallel size and ring size.
        meta (VarlenMeta | None, optional): Mask structure with one unit
            per group. Computed if missing.

    Returns:
        CPForward: Outputs, saved state and traffic.
    """
    return hybrid_forward(
        "usp",
        _usp_ring_forward,
        topology,
        shards,
        layout,
        mask,
        plan,
        grid,
        meta=meta)


def usp_backward(fwd: CPForward | None, d_out: list[Tensor3]) -> CPBackward:
    return hybrid_backward("usp", _usp_ring_backward, fwd, d_out)