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
Ring attention with point to point traffic. Key value blocks travel one hop
per stage while every rank merges the partial attention of its queries
against the block it currently holds.

The backward pass starts from the block each rank holds after the forward
and rotates in the opposite direction. Key value gradients follow their
block: the gradients accumulated in one stage are sent during the next
stage so that after N stages every rank holds the gradients of its own
keys and values.
"""
import numpy as np

from cpbench.misc.errors import MissingStateError, ShapeError
from cpbench.system.attnref.partial import (
    AttentionPartial,
    empty_partial,
    merge_partials,
)
from cpbench.system.attnref.reference import (
    attention_partial,
    block_backward,
    output_delta,
)
from cpbench.system.cpmech.common import (
    account,
    check_forward,
    check_shards,
    CPBackward,
    CPForward,
    RankShard,
    SavedState,
)
from cpbench.system.cpmech.meta import create_varlen_meta, VarlenMeta
from cpbench.system.cpmech.plan import plan_positions, ShardPlan
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import RankContext, RankGen, spawn_world
from cpbench.system.masks.pattern import MaskSpec
from cpbench.system.numcore import HeadLayout, RowStats, Tensor3


def ring_forward_steps(
        ctx: RankContext,
        *,
        peers: list[int],
        index: int,
        q: Tensor3,
        kv: tuple[Tensor3, Tensor3],
        meta: VarlenMeta,
        layout: HeadLayout,
        stage_offset: int) -> RankGen:
    """
    Forward ring over `peers`. The rank is at position `index` of the ring
    and holds the queries of meta unit `index`.

    Returns:
        tuple[AttentionPartial, tuple[Tensor3, Tensor3]]: The merged
        partial and the key values held after the last stage.
    """
    num = len(peers)
    left = peers[(index - 1) % num]
    right = peers[(index + 1) % num]
    res: AttentionPartial | None = None
    cur = kv
    for step in range(num):
        ctx.stage(stage_offset + step)
        handle = None
        if step < num - 1:
            handle = ctx.isend(right, cur, tag=("kv", step))
        owner = (index - step) % num
        pairs = meta.count_pairs(index, owner)
        if pairs > 0:
            part = attention_partial(
                q, cur[0], cur[1], layout, meta.allow(index, owner))
            account(ctx, pairs, layout, "forward")
            res = part if res is None else merge_partials(res, part)
        if handle is not None:
            cur = yield ctx.recv(left, tag=("kv", step))
            yield ctx.wait(handle)
    if res is None:
        res = empty_partial(
            q.shape[0], q.shape[1], q.shape[2], dtype=q.dtype.type)
    return res, cur


def ring_backward_steps(
        ctx: RankContext,
        *,
        peers: list[int],
        index: int,
        q: Tensor3,
        kv: tuple[Tensor3, Tensor3],
        d_out: Tensor3,
        lse: RowStats,
        delta: RowStats,
        meta: VarlenMeta,
        layout: HeadLayout,
        stage_offset: int) -> RankGen:
    """
    Backward ring in reverse direction starting from the key values held
    after the forward.

    Returns:
        tuple[Tensor3, Tensor3, Tensor3, int]: dq of the local queries, the
        accumulated dk and dv and the unit whose gradients these are. The
        unit is `index` after a full rotation.
    """
    num = len(peers)
    left = peers[(index - 1) % num]
    right = peers[(index + 1) % num]
    d_q = np.zeros_like(q)
    cur = kv
    pending: tuple[Tensor3, Tensor3] | None = None
    held = index
    for step in range(num):
        ctx.stage(stage_offset + step)
        handles = []
        if step < num - 1:
            handles.append(ctx.isend(left, cur, tag=("kv", step)))
        if pending is not None:
            handles.append(ctx.isend(left, pending, tag=("dkv", step)))
        owner = (index + 1 + step) % num
        held = owner
        pairs = meta.count_pairs(index, owner)
        local_dk = np.zeros_like(cur[0])
        local_dv = np.zeros_like(cur[1])
        if pairs > 0:
            block_dq, local_dk, local_dv = block_backward(
                q,
                cur[0],
                cur[1],
                d_out,
                lse,
                delta,
                layout,
                meta.allow(index, owner))
            d_q = d_q + block_dq
            account(ctx, pairs, layout, "backward")
        acc = (local_dk, local_dv)
        if step > 0:
            recv_dk, recv_dv = yield ctx.recv(right, tag=("dkv", step))
            acc = (recv_dk + local_dk, recv_dv + local_dv)
        if step < num - 1:
            cur = yield ctx.recv(right, tag=("kv", step))
        for handle in handles:
            yield ctx.wait(handle)
        pending = acc
    assert pending is not None
    return d_q, pending[0], pending[1], held


def ring_p2p_forward(
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        *,
        meta: VarlenMeta | None = None) -> CPForward:
    """
    Runs the ring forward.

    Args:
        topology (Topology): The cluster.
        shards (list[RankShard]): Per rank inputs following the plan.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): Full, Causal, FullDocument or CausalDocument.
        plan (ShardPlan): Usually the zigzag plan.
        meta (VarlenMeta | None, optional): Precomputed mask structure
            with one unit per rank. Computed if missing.

    Returns:
        CPForward: Outputs, saved state and traffic.
    """
    world_size = plan["world_size"]
    if topology["world_size"] != world_size:
        raise ShapeError(
            f"topology has {topology['world_size']} ranks but the plan "
            f"{world_size}")
    check_shards(shards, layout, plan)
    if meta is None:
        meta = create_varlen_meta(plan, mask)
    ring_meta = meta

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        rank_shard = shards[rank]
        res = yield from ring_forward_steps(
            ctx,
            peers=list(range(world_size)),
            index=rank,
            q=rank_shard["q"],
            kv=(rank_shard["k"], rank_shard["v"]),
            meta=ring_meta,
            layout=layout,
            stage_offset=0)
        return res

    results, log, timeline = spawn_world(topology, program)
    saved: list[SavedState] = [
        {
            "q": shards[rank]["q"],
            "kv": final_kv,
            "q_pos": shards[rank]["pos"],
            "k_pos": plan_positions(plan, (rank + 1) % world_size),
            "partial": part,
        }
        for rank, (part, final_kv) in enumerate(results)
    ]
    return {
        "mechanism": "ring_p2p",
        "topology": topology,
        "layout": layout,
        "mask": mask,
        "plan": plan,
        "grid": None,
        "meta": ring_meta,
        "outputs": [part for part, _ in results],
        "saved": saved,
        "log": log,
        "timeline": timeline,
    }


def ring_p2p_backward(
        fwd: CPForward | None, d_out: list[Tensor3]) -> CPBackward:
    fwd = check_forward(fwd, "ring_p2p", d_out)
    layout = fwd["layout"]
    plan = fwd["plan"]
    world_size = plan["world_size"]
    meta = fwd["meta"]
    if meta is None:
        raise MissingStateError("ring_p2p forward state has no mask structure")
    saved = fwd["saved"]

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        state = saved[rank]
        kv = state["kv"]
        if kv is None:
            raise MissingStateError(
                f"rank {rank} has no key values from the forward")
        part = state["partial"]
        res = yield from ring_backward_steps(
            ctx,
            peers=list(range(world_size)),
            index=rank,
            q=state["q"],
            kv=kv,
            d_out=d_out[rank],
            lse=part["lse"],
            delta=output_delta(d_out[rank], part["out"]),
            meta=meta,
            layout=layout,
            stage_offset=0)
        return res

    results, log, timeline = spawn_world(fwd["topology"], program)
    return {
        "mechanism": "ring_p2p",
        "grads": [(d_q, d_k, d_v) for d_q, d_k, d_v, _ in results],
        "grad_owners": [held for _, _, _, held in results],
        "log": log,
        "timeline": timeline,
    }
