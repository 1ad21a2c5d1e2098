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
"""Records and helpers shared by the context parallel mechanisms."""
from typing import Any, get_args, Literal, TypeAlias, TypedDict

import numpy as np

from cpbench.misc.errors import CapabilityError, MissingStateError, ShapeError
from cpbench.system.attnref.partial import AttentionPartial
from cpbench.system.attnref.reference import check_qkv, KVGrads
from cpbench.system.cpmech.meta import VarlenMeta
from cpbench.system.cpmech.plan import ProcessGrid, ShardPlan
from cpbench.system.fabric.log import CommLog, StageTimeline
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import RankContext, RankGen
from cpbench.system.masks.count import pair_flops
from cpbench.system.masks.pattern import MaskSpec
from cpbench.system.numcore import (
    Direction,
    group_size,
    HeadLayout,
    ordered_sum,
    Tensor3,
)


Mechanism: TypeAlias = Literal[
    "ulysses",
    "ring_p2p",
    "ring_allgather",
    "usp",
    "loongtrain",
]
MECHANISMS: tuple[Mechanism, ...] = get_args(Mechanism)


RankShard = TypedDict('RankShard', {
    "q": Tensor3,
    "k": Tensor3,
    "v": Tensor3,
    "pos": np.ndarray,
})
SavedState = TypedDict('SavedState', {
    "q": Tensor3,
    "kv": tuple[Tensor3, Tensor3] | None,
    "q_pos": np.ndarray,
    "k_pos": np.ndarray,
    "partial": AttentionPartial,
})
CPForward = TypedDict('CPForward', {
    "mechanism": Mechanism,
    "topology": Topology,
    "layout": HeadLayout,
    "mask": MaskSpec,
    "plan": ShardPlan,
    "grid": ProcessGrid | None,
    "meta": VarlenMeta | None,
    "outputs": list[AttentionPartial],
    "saved": list[SavedState],
    "log": CommLog,
    "timeline": StageTimeline,
})
CPBackward = TypedDict('CPBackward', {
    "mechanism": Mechanism,
    "grads": list[KVGrads],
    "grad_owners": list[int],
    "log": CommLog,
    "timeline": StageTimeline,
})


def get_mechanism(text: str) -> Mechanism:
    if text not in MECHANISMS:
        raise ValueError(f"unknown mechanism {text} not in {MECHANISMS}")
    return text  # type: ignore


def check_shards(
        shards: list[RankShard],
        layout: HeadLayout,
        plan: ShardPlan) -> None:
    if len(shards) != plan["world_size"]:
        raise ShapeError(
            f"expected {plan['world_size']} shards got {len(shards)}")
    for rank, rank_shard in enumerate(shards):
        check_qkv(rank_shard["q"], rank_shard["k"], rank_shard["v"], layout)
        rows = len(rank_shard["pos"])
        if {
                rank_shard["q"].shape[1],
                rank_shard["k"].shape[1],
                rank_shard["v"].shape[1]} != {rows}:
            raise ShapeError(
                f"shard of rank {rank} must have {rows} rows for q, k, v")


def check_forward(
        fwd: CPForward | None,
        mechanism: Mechanism,
        d_out: list[Tensor3]) -> CPForward:
    if fwd is None or fwd["mechanism"] != mechanism or not fwd["saved"]:
        raise MissingStateError(
            f"{mechanism} backward needs the state of a {mechanism} forward")
    if len(d_out) != len(fwd["outputs"]):
        raise ShapeError(
            f"expected {len(fwd['outputs'])} output gradients "
            f"got {len(d_out)}")
    for rank, (grad, part) in enumerate(zip(d_out, fwd["outputs"])):
        if grad.shape != part["out"].shape:
            raise ShapeError(
                f"output gradient of rank {rank} has shape {grad.shape} "
                f"expected {part['out'].shape}")
    return fwd


def kv_replication(layout: HeadLayout, parts: int) -> int:
    """
    Smallest replication of the kv heads such that both query and kv heads
    split evenly into `parts`. Grouped query attention becomes multi head
    attention in the worst case.

    Args:
        layout (HeadLayout): The head layout.
        parts (int): The number of head shards.

    Returns:
        int: The replication factor. It divides the group size.
    """
    if layout["q_heads"] % parts != 0:
        raise CapabilityError(
            f"{layout['q_heads']} query heads cannot be split into "
            f"{parts} head shards")
    group = group_size(layout)
    for rep in range(1, group + 1):
        if group % rep == 0 and (layout["kv_heads"] * rep) % parts == 0:
            return rep
    raise CapabilityError(
        f"{layout['kv_heads']} kv heads cannot be split into {parts} "
        "head shards")


def head_shard_layout(
        layout: HeadLayout, parts: int, rep: int) -> HeadLayout:
    return {
        "q_heads": layout["q_heads"] // parts,
        "kv_heads": layout["kv_heads"] * rep // parts,
        "head_dim": layout["head_dim"],
    }


def replicate_kv(tensor: Tensor3, rep: int) -> Tensor3:
    return tensor if rep == 1 else np.repeat(tensor, rep, axis=0)


def reduce_replicas(grad: Tensor3, rep: int) -> Tensor3:
    if rep == 1:
        return grad
    heads, rows, dim = grad.shape
    return ordered_sum(grad.reshape((heads // rep, rep, rows, dim)), axis=1)


def head_chunk(tensor: np.ndarray, parts: int, ix: int) -> np.ndarray:
    size = tensor.shape[0] // parts
    return tensor[ix * size:(ix + 1) * size]


def account(
        ctx: RankContext,
        pairs: int,
        layout: HeadLayout,
        direction: Direction) -> None:
    if pairs > 0:
        ctx.compute(pair_flops(pairs, layout, direction), pairs=pairs)


def seq_to_heads(
        ctx: RankContext,
        group: list[int],
        tensors: tuple[np.ndarray, ...]) -> RankGen:
    """
    All-to-all from sequence shards with every head to head shards with
    the sequence of the whole group. Rows are concatenated in group order.
    """
    parts = len(group)
    received: list[Any] = yield ctx.all_to_all(group, [
        tuple(head_chunk(tensor, parts, ix) for tensor in tensors)
        for ix in range(parts)
    ])
    return tuple(
        np.concatenate([recv[tx] for recv in received], axis=1)
        for tx in range(len(tensors)))


def heads_to_seq(
        ctx: RankContext,
        group: list[int],
        tensors: tuple[np.ndarray, ...]) -> RankGen:
    """Inverse of `seq_to_heads`."""
    parts = len(group)
    rows = tensors[0].shape[1] // parts
    received: list[Any] = yield ctx.all_to_all(group, [
        tuple(tensor[:, ix * rows:(ix + 1) * rows] for tensor in tensors)
        for ix in range(parts)
    ])
    return tuple(
        np.concatenate([recv[tx] for recv in received], axis=0)
        for tx in range(len(tensors)))
