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
Ulysses attention. An all-to-all switches from sequence shards to head
shards, every rank runs exact attention over the whole sequence for its
heads and a second all-to-all switches back. No partial results are merged
so the output matches the single device oracle bit by bit.
"""
import numpy as np

from cpbench.system.attnref.partial import create_partial
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
    head_shard_layout,
    heads_to_seq,
    kv_replication,
    RankShard,
    reduce_replicas,
    replicate_kv,
    SavedState,
    seq_to_heads,
)
from cpbench.system.cpmech.plan import ShardPlan
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import RankContext, RankGen, spawn_world
from cpbench.system.masks.pattern import allowed_matrix, MaskSpec
from cpbench.system.numcore import HeadLayout, Tensor3


def unsort_rows(tensor: Tensor3, order: np.ndarray) -> Tensor3:
    """Inverse of `tensor[:, order]`."""
    res = np.empty_like(tensor)
    res[:, order] = tensor
    return res


def ulysses_forward(
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan) -> CPForward:
    """
    Runs the Ulysses forward. Grouped kv heads are replicated as little as
    possible so that heads split evenly over the ranks.

    Args:
        topology (Topology): The cluster.
        shards (list[RankShard]): Per rank inputs following the plan.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): Any mask pattern.
        plan (ShardPlan): The sharding plan.

    Returns:
        CPForward: Outputs, saved state and traffic.
    """
    world_size = plan["world_size"]
    check_shards(shards, layout, plan)
    rep = kv_replication(layout, world_size)
    local = head_shard_layout(layout, world_size, rep)
    group = list(range(world_size))
    all_pos = np.concatenate([rank_shard["pos"] for rank_shard in shards])
    order = np.argsort(all_pos, kind="stable")
    k_pos = all_pos[order]
    allow = allowed_matrix(mask, all_pos, k_pos)
    pairs = int(np.count_nonzero(allow))

    def program(ctx: RankContext) -> RankGen:
        rank_shard = shards[ctx.get_rank()]
        ctx.stage(0)
        q_h, k_h, v_h = yield from seq_to_heads(ctx, group, (
            rank_shard["q"],
            replicate_kv(rank_shard["k"], rep),
            replicate_kv(rank_shard["v"], rep),
        ))
        ctx.stage(1)
        k_sorted = k_h[:, order]
        v_sorted = v_h[:, order]
        part = attention_partial(q_h, k_sorted, v_sorted, local, allow)
        account(ctx, pairs, local, "forward")
        ctx.stage(2)
        out, lse = yield from heads_to_seq(
            ctx, group, (part["out"], part["lse"]))
        state: SavedState = {
            "q": q_h,
            "kv": (k_sorted, v_sorted),
            "q_pos": all_pos,
            "k_pos": k_pos,
            "partial": part,
        }
        return create_partial(out, lse), state

    results, log, timeline = spawn_world(topology, program)
    return {
        "mechanism": "ulysses",
        "topology": topology,
        "layout": layout,
        "mask": mask,
        "plan": plan,
        "grid": None,
        "meta": None,
        "outputs": [part for part, _ in results],
        "saved": [state for _, state in results],
        "log": log,
        "timeline": timeline,
    }


def ulysses_backward(
        fwd: CPForward | None, d_out: list[Tensor3]) -> CPBackward:
    fwd = check_forward(fwd, "ulysses", d_out)
    layout = fwd["layout"]
    world_size = fwd["plan"]["world_size"]
    rep = kv_replication(layout, world_size)
    local = head_shard_layout(layout, world_size, rep)
    group = list(range(world_size))
    saved = fwd["saved"]
    first = saved[0]
    order = np.argsort(first["q_pos"], kind="stable")
    allow = allowed_matrix(fwd["mask"], first["q_pos"], first["k_pos"])
    pairs = int(np.count_nonzero(allow))

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        state = saved[rank]
        kv = state["kv"]
        assert kv is not None
        ctx.stage(0)
        (d_h,) = yield from seq_to_heads(ctx, group, (d_out[rank],))
        ctx.stage(1)
        part = state["partial"]
        d_q, d_k, d_v = block_backward(
            state["q"],
            kv[0],
            kv[1],
            d_h,
            part["lse"],
            output_delta(d_h, part["out"]),
            local,
            allow)
        account(ctx, pairs, local, "backward")
        ctx.stage(2)
        d_q, d_k, d_v = yield from heads_to_seq(ctx, group, (
            d_q, unsort_rows(d_k, order), unsort_rows(d_v, order)))
        return d_q, reduce_replicas(d_k, rep), reduce_replicas(d_v, rep)

    results, log, timeline = spawn_world(fwd["topology"], program)
    return {
        "mechanism": "ulysses",
        "grads": [(d_q, d_k, d_v) for d_q, d_k, d_v in results],
        "grad_owners": list(range(world_size)),
        "log": log,
        "timeline": timeline,
    }
