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
Double ring attention. The ring of `ring_size` units is split into outer
windows of `inner_window` consecutive units. Key values rotate inside a
window for `inner_window` stages. Meanwhile the key values a window started
with are prefetched by the next window on a separate stream so that the
next phase can start without waiting.

The backward pass reuses the forward rotation starting from the initial
key values every rank stored. Key value gradients travel with their block
inside a window and hop diagonally to the next window at the end of every
phase. The last hop returns every gradient to its owner.
"""
from typing import Any

import numpy as np

from cpbench.system.attnref.partial import (
    AttentionPartial,
    empty_partial,
    merge_partials,
)
from cpbench.system.attnref.reference import attention_partial, block_backward
from cpbench.system.cpmech.common import (
    account,
    CPBackward,
    CPForward,
    RankShard,
)
from cpbench.system.cpmech.meta import VarlenMeta
from cpbench.system.cpmech.plan import ProcessGrid, ShardPlan
from cpbench.system.cpmech.usp import (
    grid_rank,
    hybrid_backward,
    hybrid_forward,
)
from cpbench.system.fabric.topology import Topology
from cpbench.system.fabric.world import Handle, RankContext, RankGen
from cpbench.system.masks.pattern import MaskSpec
from cpbench.system.numcore import HeadLayout, RowStats, Tensor3


PREFETCH_STREAM = "prefetch"


class _Windows:
    """Neighbors of a rank in the window layout of the ring."""
    def __init__(self, grid: ProcessGrid, ring_ix: int, uly_ix: int) -> None:
        self._grid = grid
        self._uly_ix = uly_ix
        self._inner = grid["inner_window"]
        self._outer = grid["outer_window"]
        self.win, self.inn = divmod(ring_ix, self._inner)

    def rank(self, win: int, inn: int) -> int:
        unit = (win % self._outer) * self._inner + inn % self._inner
        return grid_rank(self._grid, unit, self._uly_ix)

    def unit(self, phase: int, step: int) -> int:
        """Unit whose key values are held at a step of a phase."""
        return (
            ((self.win - phase) % self._outer) * self._inner
            + (self.inn - step) % self._inner)

    def inner_right(self) -> int:
        return self.rank(self.win, self.inn + 1)

    def inner_left(self) -> int:
        return self.rank(self.win, self.inn - 1)

    def outer_right(self) -> int:
        return self.rank(self.win + 1, self.inn)

    def outer_left(self) -> int:
        return self.rank(self.win - 1, self.inn)

    def diag_right(self) -> int:
        return self.rank(self.win + 1, self.inn + 1)

    def diag_left(self) -> int:
        return self.rank(self.win - 1, self.inn - 1)


def loongtrain_forward_steps(
        ctx: RankContext,
        *,
        grid: ProcessGrid,
        ring_ix: int,
        uly_ix: int,
        q: Tensor3,
        kv: tuple[Tensor3, Tensor3],
        meta: VarlenMeta,
        layout: HeadLayout,
        stage_offset: int) -> RankGen:
    wins = _Windows(grid, ring_ix, uly_ix)
    inner = grid["inner_window"]
    outer = grid["outer_window"]
    res: AttentionPartial | None = None
    cur = kv
    for phase in range(outer):
        prefetch: Handle | None = None
        for step in range(inner):
            ctx.stage(stage_offset + phase * inner + step)
            handles: list[Handle] = []
            if step == 0 and phase < outer - 1:
                prefetch = ctx.isend(
                    wins.outer_right(),
                    cur,
                    tag=("pf", phase),
                    stream=PREFETCH_STREAM)
            if step < inner - 1:
                handles.append(ctx.isend(
                    wins.inner_right(), cur, tag=("kv", phase, step)))
            owner = wins.unit(phase, step)
            pairs = meta.count_pairs(ring_ix, owner)
            if pairs > 0:
                part = attention_partial(
                    q, cur[0], cur[1], layout, meta.allow(ring_ix, owner))
                account(ctx, pairs, layout, "forward")
                res = part if res is None else merge_partials(res, part)
            if step < inner - 1:
                cur = yield ctx.recv(
                    wins.inner_left(), tag=("kv", phase, step))
            elif prefetch is not None:
                cur = yield ctx.recv(wins.outer_left(), tag=("pf", phase))
                handles.append(prefetch)
            for handle in handles:
                yield ctx.wait(handle)
    if res is None:
        res = empty_partial(
            q.shape[0], q.shape[1], q.shape[2], dtype=q.dtype.type)
    # the initial key values are kept for the backward
    return res, kv, ring_ix


def loongtrain_backward_steps(
        ctx: RankContext,
        *,
        grid: ProcessGrid,
        ring_ix: int,
        uly_ix: int,
        q: Tensor3,
        kv: tuple[Tensor3, Tensor3],
        d_out: Tensor3,
        lse: RowStats,
        delta: RowStats,
        meta: VarlenMeta,
        layout: HeadLayout,
        stage_offset: int) -> RankGen:
    wins = _Windows(grid, ring_ix, uly_ix)
    inner = grid["inner_window"]
    outer = grid["outer_window"]
    multi = grid["ring_size"] > 1
    d_q = np.zeros_like(q)
    cur = kv
    pending: tuple[Tensor3, Tensor3] | None = None
    held = ring_ix
    deferred: list[Handle] = []
    for phase in range(outer):
        prefetch: Handle | None = None
        for step in range(inner):
            ctx.stage(stage_offset + phase * inner + step)
            handles = deferred
            deferred = []
            if step == 0 and phase < outer - 1:
                prefetch = ctx.isend(
                    wins.outer_right(),
                    cur,
                    tag=("pf", phase),
                    stream=PREFETCH_STREAM)
            if step < inner - 1:
                handles.append(ctx.isend(
                    wins.inner_right(), cur, tag=("kv", phase, step)))
            if step > 0 and pending is not None:
                handles.append(ctx.isend(
                    wins.inner_right(), pending, tag=("dkv", phase, step)))
            owner = wins.unit(phase, step)
            held = owner
            pairs = meta.count_pairs(ring_ix, owner)
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
                    meta.allow(ring_ix, owner))
                d_q = d_q + block_dq
                account(ctx, pairs, layout, "backward")
            acc = (local_dk, local_dv)
            recv: Any = None
            if step > 0:
                recv = yield ctx.recv(
                    wins.inner_left(), tag=("dkv", phase, step))
            elif phase > 0 and multi:
                recv = yield ctx.recv(
                    wins.diag_left(), tag=("diag", phase - 1))
            if recv is not None:
                acc = (recv[0] + local_dk, recv[1] + local_dv)
            if step < inner - 1:
                cur = yield ctx.recv(
                    wins.inner_left(), tag=("kv", phase, step))
            elif prefetch is not None:
                cur = yield ctx.recv(wins.outer_left(), tag=("pf", phase))
                handles.append(prefetch)
            if step == inner - 1 and multi:
                # the receiver picks this up in its next stage
                deferred.append(ctx.isend(
                    wins.diag_right(), acc, tag=("diag", phase)))
            for handle in handles:
                yield ctx.wait(handle)
            pending = acc
    assert pending is not None
    if multi:
        pending = yield ctx.recv(wins.diag_left(), tag=("diag", outer - 1))
        held = ring_ix
        for handle in deferred:
            yield ctx.wait(handle)
    assert pending is not None
    return d_q, pending[0], pending[1], held


def loongtrain_forward(
        topology: Topology,
        shards: list[RankShard],
        layout: HeadLayout,
        mask: MaskSpec,
        plan: ShardPlan,
        grid: ProcessGrid,
        *,
        meta: VarlenMeta | None = None) -> CPForward:
    """
    Runs the double ring forward.

    Args:
        topology (Topology): The cluster.
        shards (list[RankShard]): Per rank inputs following the grouped
            zigzag plan of the grid.
        layout (HeadLayout): The head layout.
        mask (MaskSpec): Full, Causal, FullDocument or CausalDocument.
        plan (ShardPlan): The plan.
        grid (ProcessGrid): Head parallel size, inner and outer window.
        meta (VarlenMeta | None, optional): Mask structure with one unit
            per ring position. Computed if missing.

    Returns:
        CPForward: Outputs, saved state (with the initial key values) and
        traffic.
    """
    return hybrid_forward(
        "loongtrain",
        loongtrain_forward_steps,
        topology,
        shards,
        layout,
        mask,
        plan,
        grid,
        meta=meta)


def loongtrain_backward(
        fwd: CPForward | None, d_out: list[Tensor3]) -> CPBackward:
    return hybrid_backward(
        "loongtrain", loongtrain_backward_steps, fwd, d_out)
