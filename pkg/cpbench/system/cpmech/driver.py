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
Runs a mechanism end to end: pads the sequence for the plan, shards the
inputs, runs the forward and optionally the backward on the simulated
fabric and assembles the results in global sequence order.
"""
from typing import TypedDict

import numpy as np

from cpbench.misc.errors import ShapeError
from cpbench.system.attnref.partial import AttentionPartial
from cpbench.system.attnref.reference import (
    attention_backward,
    attention_forward,
    check_qkv,
    KVGrads,
)
from cpbench.system.cpmech.allgather import (
    ring_allgather_backward,
    ring_allgather_forward,
)
from cpbench.system.cpmech.common import (
    CPBackward,
    CPForward,
    Mechanism,
    RankShard,
)
from cpbench.system.cpmech.loongtrain import (
    loongtrain_backward,
    loongtrain_forward,
)
from cpbench.system.cpmech.plan import (
    create_process_grid,
    default_grid,
    pad_for_plan,
    plan_contiguous,
    plan_grouped,
    plan_multiple,
    plan_positions,
    plan_zigzag,
    PlanScheme,
    ProcessGrid,
    shard,
    ShardPlan,
    unshard,
)
from cpbench.system.cpmech.ring import ring_p2p_backward, ring_p2p_forward
from cpbench.system.cpmech.ulysses import ulysses_backward, ulysses_forward
from cpbench.system.cpmech.usp import usp_backward, usp_forward
from cpbench.system.fabric.topology import Topology
from cpbench.system.masks.pattern import MaskSpec
from cpbench.system.numcore import HeadLayout, RowStats, Tensor3


MechanismRun = TypedDict('MechanismRun', {
    "mechanism": Mechanism,
    "mask": MaskSpec,
    "plan": ShardPlan,
    "grid": ProcessGrid,
    "forward": CPForward,
    "backward": CPBackward | None,
    "out": Tensor3,
    "lse": RowStats,
    "grads": KVGrads | None,
})
OracleRun = TypedDict('OracleRun', {
    "partial": AttentionPartial,
    "grads": KVGrads | None,
})


def mechanism_scheme(mechanism: Mechanism) -> PlanScheme:
    if mechanism == "ulysses":
        return "contiguous"
    if mechanism in ("ring_p2p", "ring_allgather"):
        return "zigzag"
    return "grouped_zigzag"


def mechanism_grid(
        mechanism: Mechanism,
        topology: Topology,
        grid: ProcessGrid | None) -> ProcessGrid:
    world_size = topology["world_size"]
    if mechanism == "ulysses":
        return create_process_grid(world_size, world_size)
    if mechanism in ("ring_p2p", "ring_allgather"):
        return create_process_grid(world_size, 1)
    if grid is None:
        return default_grid(topology)
    if grid["ulysses_size"] * grid["ring_size"] != world_size:
        raise ShapeError(
            f"grid {grid} does not cover {world_size} ranks")
    return create_process_grid(
        world_size,
        grid["ulysses_size"],
        inner_window=grid["inner_window"],
        ranks_per_node=topology["ranks_per_node"])


def build_plan(
        scheme: PlanScheme, seq_len: int, grid: ProcessGrid) -> ShardPlan:
    world_size = grid["ulysses_size"] * grid["ring_size"]
    if scheme == "contiguous":
        return plan_contiguous(seq_len, world_size)
    if scheme == "zigzag":
        return plan_zigzag(seq_len, world_size)
    return plan_grouped(seq_len, grid)


def make_shards(
        plan: ShardPlan,
        q: Tensor3,
        k: Tensor3,
        v: Tensor3) -> list[RankShard]:
    return [
        {
            "q": q_part,
            "k": k_part,
            "v": v_part,
            "pos": plan_positions(plan, rank),
        }
        for rank, (q_part, k_part, v_part) in enumerate(
            zip(shard(plan, q), shard(plan, k), shard(plan, v)))
    ]


def _forward(
        mechanism: Mechanism,
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        grid: ProcessGrid,
        kv_cap: int | None) -> CPForward:
    if mechanism == "ulysses":
        return ulysses_forward(topology, shards, layout, mask, plan)
    if mechanism == "ring_p2p":
        return ring_p2p_forward(topology, shards, layout, mask, plan)
    if mechanism == "ring_allgather":
        return ring_allgather_forward(
            topology, shards, layout, mask, plan, kv_cap=kv_cap)
    if mechanism == "usp":
        return usp_forward(topology, shards, layout, mask, plan, grid)
    return loongtrain_forward(topology, shards, layout, mask, plan, grid)


def _backward(
        mechanism: Mechanism,
        fwd: CPForward,
        d_out: list[Tensor3]) -> CPBackward:
    if mechanism == "ulysses":
        return ulysses_backward(fwd, d_out)
    if mechanism == "ring_p2p":
        return ring_p2p_backward(fwd, d_out)
    if mechanism == "ring_allgather":
        return ring_allgather_backward(fwd, d_out)
    if mechanism == "usp":
        return usp_backward(fwd, d_out)
    return loongtrain_backward(fwd, d_out)


def _by_owner(
        values: list[Tensor3], owners: list[int]) -> list[Tensor3]:
    if sorted(owners) != list(range(len(values))):
        raise ShapeError(f"gradients are not owned once per rank: {owners}")
    res = list(values)
    for value, owner in zip(values, owners):
        res[owner] = value
    return res


def run_mechanism(
        mechanism: Mechanism,
        topology: Topology,
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        layout: HeadLayout,
        mask: MaskSpec,
        *,
        grid: ProcessGrid | None = None,
        d_out: Tensor3 | None = None,
        kv_cap: int | None = None) -> MechanismRun:
    """
    Runs a mechanism on unsharded inputs.

    Args:
        mechanism (Mechanism): The mechanism.
        topology (Topology): The cluster.
        q (Tensor3): Queries of the whole sequence.
        k (Tensor3): Keys of the whole sequence.
        v (Tensor3): Values of the whole sequence.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): The mask.
        grid (ProcessGrid | None, optional): Grid of the hybrid mechanisms.
            Defaults to `default_grid`.
        d_out (Tensor3 | None, optional): Output gradient. The backward
            only runs if it is given.
        kv_cap (int | None, optional): Gathered token cap of the all-gather
            mechanism.

    Returns:
        MechanismRun: Traffic, timing and the results cropped to the
        original sequence.
    """
    check_qkv(q, k, v, layout)
    seq_len = mask["seq_len"]
    if q.shape[1] != seq_len or k.shape[1] != seq_len:
        raise ShapeError(
            f"inputs have {q.shape[1]} rows but the mask covers {seq_len}")
    if d_out is not None and d_out.shape != q.shape:
        raise ShapeError(f"d_out {d_out.shape} does not match q {q.shape}")
    run_grid = mechanism_grid(mechanism, topology, grid)
    scheme = mechanism_scheme(mechanism)
    tensors = [q, k, v] if d_out is None else [q, k, v, d_out]
    padded, tensors = pad_for_plan(
        mask, tensors, plan_multiple(scheme, run_grid))
    plan = build_plan(scheme, padded["seq_len"], run_grid)
    fwd = _forward(
        mechanism,
        topology,
        make_shards(plan, tensors[0], tensors[1], tensors[2]),
        layout,
        padded,
        plan,
        run_grid,
        kv_cap)
    out = unshard(plan, [part["out"] for part in fwd["outputs"]])
    lse = unshard(plan, [part["lse"] for part in fwd["outputs"]])
    bwd = None
    grads: KVGrads | None = None
    if d_out is not None:
        bwd = _backward(mechanism, fwd, shard(plan, tensors[3]))
        owners = bwd["grad_owners"]
        grads = (
            unshard(plan, [grad[0] for grad in bwd["grads"]])[:, :seq_len],
            unshard(plan, _by_owner(
                [grad[1] for grad in bwd["grads"]], owners))[:, :seq_len],
            unshard(plan, _by_owner(
                [grad[2] for grad in bwd["grads"]], owners))[:, :seq_len],
        )
    return {
        "mechanism": mechanism,
        "mask": padded,
        "plan": plan,
        "grid": run_grid,
        "forward": fwd,
        "backward": bwd,
        "out": out[:, :seq_len],
        "lse": lse[:, :seq_len],
        "grads": grads,
    }


def run_oracle(
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        layout: HeadLayout,
        mask: MaskSpec,
        *,
        d_out: Tensor3 | None = None) -> OracleRun:
    partial = attention_forward(q, k, v, layout, mask)
    grads = None
    if d_out is not None:
        grads = attention_backward(q, k, v, partial, d_out, layout, mask)
    return {
        "partial": partial,
        "grads": grads,
    }


def max_abs_error(run: MechanismRun, oracle: OracleRun) -> float:
    """Largest deviation of output and gradients from the oracle."""
    errs = [float(np.max(np.abs(run["out"] - oracle["partial"]["out"])))]
    run_grads = run["grads"]
    oracle_grads = oracle["grads"]
    if run_grads is not None and oracle_grads is not None:
        errs.extend(
            float(np.max(np.abs(mine - ref)))
            for mine, ref in zip(run_grads, oracle_grads))
    return max(errs)
