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
Ring attention with a single all-gather. Every rank gathers all keys and
values once and computes its queries against the whole sequence. Key value
gradients are sent back to their owners with an all-to-all.
"""
import numpy as np

from cpbench.misc.errors import SizeCapError
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
from cpbench.system.cpmech.plan import ShardPlan
from cpbench.system.cpmech.ulysses import unsort_rows
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import RankContext, RankGen, spawn_world
from cpbench.system.masks.pattern import allowed_matrix, MaskSpec
from cpbench.system.numcore import HeadLayout, ordered_sum, Tensor3


def ring_allgather_forward(
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        *,
        kv_cap: int | None = None) -> CPForward:
    """
    Runs the all-gather forward.

    Args:
        topology (Topology): The cluster.
        shards (list[RankShard]): Per rank inputs following the plan.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): Any mask pattern.
        plan (ShardPlan): A contiguous or zigzag plan.
        kv_cap (int | None, optional): Maximum number of gathered key value
            tokens a rank may hold.

    Returns:
        CPForward: Outputs, saved state and traffic.
    """
    world_size = plan["world_size"]
    check_shards(shards, layout, plan)
    if kv_cap is not None and plan["seq_len"] > kv_cap:
        raise SizeCapError(
            f"gathering {plan['seq_len']} key value tokens exceeds the cap "
            f"of {kv_cap}")
    group = list(range(world_size))
    all_pos = np.concatenate([rank_shard["pos"] for rank_shard in shards])
    order = np.argsort(all_pos, kind="stable")
    k_pos = all_pos[order]

    def program(ctx: RankContext) -> RankGen:
        rank_shard = shards[ctx.get_rank()]
        ctx.stage(0)
        gathered = yield ctx.all_gather(
            group, (rank_shard["k"], rank_shard["v"]))
        ctx.stage(1)
        k_all = np.concatenate([kv[0] for kv in gathered], axis=1)[:, order]
        v_all = np.concatenate([kv[1] for kv in gathered], axis=1)[:, order]
        allow = allowed_matrix(mask, rank_shard["pos"], k_pos)
        part = attention_partial(rank_shard["q"], k_all, v_all, layout, allow)
        account(ctx, int(np.count_nonzero(allow)), layout, "forward")
        state: SavedState = {
            "q": rank_shard["q"],
            "kv": (k_all, v_all),
            "q_pos": rank_shard["pos"],
            "k_pos": k_pos,
            "partial": part,
        }
        return part, state

    results, log, timeline = spawn_world(topology, program)
    return {
        "mechanism": "ring_allgather",
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


def ring_allgather_backward(
        fwd: CPForward | None, d_out: list[Tensor3]) -> CPBackward:
    fwd = check_forward(fwd, "ring_allgather", d_out)
    layout = fwd["layout"]
    mask = fwd["mask"]
    world_size = fwd["plan"]["world_size"]
    group = list(range(world_size))
    saved = fwd["saved"]
    sizes = [len(state["q_pos"]) for state in saved]
    bounds = np.cumsum([0, *sizes])
    all_pos = np.concatenate([state["q_pos"] for state in saved])
    order = np.argsort(all_pos, kind="stable")

    def program(ctx: RankContext) -> RankGen:
        rank = ctx.get_rank()
        state = saved[rank]
        kv = state["kv"]
        assert kv is not None
        part = state["partial"]
        ctx.stage(0)
        allow = allowed_matrix(mask, state["q_pos"], state["k_pos"])
        d_q, d_k, d_v = block_backward(
            state["q"],
            kv[0],
            kv[1],
            d_out[rank],
            part["lse"],
            output_delta(d_out[rank], part["out"]),
            layout,
            allow)
        account(ctx, int(np.count_nonzero(allow)), layout, "backward")
        d_k = unsort_rows(d_k, order)
        d_v = unsort_rows(d_v, order)
        ctx.stage(1)
        received = yield ctx.all_to_all(group, [
            (d_k[:, lo:hi], d_v[:, lo:hi])
            for lo, hi in zip(bounds[:-1], bounds[1:])
        ])
        return (
            d_q,
            ordered_sum(np.stack([grads[0] for grads in received]), axis=0),
            ordered_sum(np.stack([grads[1] for grads in received]), axis=0),
        )

    results, log, timeline = spawn_world(fwd["topology"], program)
    return {
        "mechanism": "ring_allgather",
        "grads": [(d_q, d_k, d_v) for d_q, d_k, d_v in results],
        "grad_owners": list(range(world_size)),
        "log": log,
        "timeline": timeline,
    }
