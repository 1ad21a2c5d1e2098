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
Precomputed mask structure for ring style mechanisms. For every pair of a
query unit and a key value unit the mask is stored as a list of rectangles
in local coordinates. A rectangle is either fully allowed or causal with a
fixed diagonal. Stages only look these up and never evaluate the mask.
"""
from typing import NamedTuple

import numpy as np

from cpbench.misc.errors import CapabilityError
from cpbench.system.cpmech.plan import group_ranges, ShardPlan
from cpbench.system.masks.pattern import MaskPattern, MaskSpec, real_len
from cpbench.system.workload.packing import batch_to_mask, PackedBatch


VARLEN_PATTERNS: tuple[MaskPattern, ...] = (
    "Full",
    "Causal",
    "FullDocument",
    "CausalDocument",
)
CAUSAL_VARLEN: frozenset[MaskPattern] = frozenset(["Causal", "CausalDocument"])


class Segment(NamedTuple):
    q_lo: int
    q_hi: int
    k_lo: int
    k_hi: int
    # local key offset minus local query offset must not exceed diag
    diag: int | None


def _pieces(ranges: list[tuple[int, int]]) -> list[tuple[int, int, int]]:
    """(local start, global start, global end) of every range."""
    res = []
    local = 0
    for start, end in ranges:
        res.append((local, start, end))
        local += end - start
    return res


def _doc_bounds(spec: MaskSpec) -> np.ndarray:
    if spec["pattern"] in ("Full", "Causal"):
        return np.array([0, real_len(spec)], dtype=np.int64)
    return np.asarray(spec["doc_offsets"], dtype=np.int64)


class VarlenMeta:
    def __init__(
            self,
            unit_ranges: list[list[tuple[int, int]]],
            spec: MaskSpec) -> None:
        pattern = spec["pattern"]
        if pattern not in VARLEN_PATTERNS:
            raise CapabilityError(
                f"ring mechanisms support {list(VARLEN_PATTERNS)} "
                f"not {pattern}")
        self._causal = pattern in CAUSAL_VARLEN
        self._bounds = _doc_bounds(spec)
        self._unit_ranges = [list(ranges) for ranges in unit_ranges]
        self._sizes = [
            sum(end - start for start, end in ranges)
            for ranges in unit_ranges
        ]
        num = len(unit_ranges)
        self._segments: dict[tuple[int, int], list[Segment]] = {}
        self._pairs: dict[tuple[int, int], int] = {}
        for q_unit in range(num):
            for kv_unit in range(num):
                segs = self._intersect(
                    unit_ranges[q_unit], unit_ranges[kv_unit])
                self._segments[(q_unit, kv_unit)] = segs
                self._pairs[(q_unit, kv_unit)] = sum(
                    self._segment_pairs(seg) for seg in segs)

    def _docs_overlapping(self, start: int, end: int) -> range:
        bounds = self._bounds
        first = int(np.searchsorted(bounds, start, side="right")) - 1
        last = int(np.searchsorted(bounds, end, side="left"))
        return range(max(first, 0), min(last, len(bounds) - 1))

    def _intersect(
            self,
            q_ranges: list[tuple[int, int]],
            k_ranges: list[tuple[int, int]]) -> list[Segment]:
        bounds = self._bounds
        res: list[Segment] = []
        for q_local, q_start, q_end in _pieces(q_ranges):
            for k_local, k_start, k_end in _pieces(k_ranges):
                for doc in self._docs_overlapping(q_start, q_end):
                    doc_lo = int(bounds[doc])
                    doc_hi = int(bounds[doc + 1])
                    qlo = max(q_start, doc_lo)
                    qhi = min(q_end, doc_hi)
                    klo = max(k_start, doc_lo)
                    khi = min(k_end, doc_hi)
                    if qlo >= qhi or klo >= khi:
                        continue
                    diag = None
                    if self._causal:
                        if klo > qhi - 1:
                            continue
                        diag = qlo - klo
                    res.append(Segment(
                        q_local + qlo - q_start,
                        q_local + qhi - q_start,
                        k_local + klo - k_start,
                        k_local + khi - k_start,
                        diag))
        return res

    @staticmethod
    def _segment_pairs(seg: Segment) -> int:
        rows = seg.q_hi - seg.q_lo
        cols = seg.k_hi - seg.k_lo
        if seg.diag is None:
            return rows * cols
        limits = np.arange(rows, dtype=np.int64) + seg.diag + 1
        return int(np.clip(limits, 0, cols).sum())

    def get_num_units(self) -> int:
        return len(self._unit_ranges)

    def count_pairs(self, q_unit: int, kv_unit: int) -> int:
        return self._pairs[(q_unit, kv_unit)]

    def allow(self, q_unit: int, kv_unit: int) -> np.ndarray:
        res = np.zeros(
            (self._sizes[q_unit], self._sizes[kv_unit]), dtype=np.bool_)
        for seg in self._segments[(q_unit, kv_unit)]:
            if seg.diag is None:
                res[seg.q_lo:seg.q_hi, seg.k_lo:seg.k_hi] = True
                continue
            rows = np.arange(seg.q_hi - seg.q_lo)[:, None]
            cols = np.arange(seg.k_hi - seg.k_lo)[None, :]
            res[seg.q_lo:seg.q_hi, seg.k_lo:seg.k_hi] = (
                cols - rows <= seg.diag)
        return res

    def ring_owner(self, unit: int, stage: int) -> int:
        """Owner of the key values held by a unit at a forward stage."""
        return (unit - stage) % self.get_num_units()


def create_varlen_meta(
        plan: ShardPlan, spec: MaskSpec, *, group_size: int = 1) -> VarlenMeta:
    """Units are consecutive groups of `group_size` ranks of the plan."""
    if spec["seq_len"] != plan["seq_len"]:
        raise ValueError(
            f"mask covers {spec['seq_len']} tokens but the plan covers "
            f"{plan['seq_len']}")
    return VarlenMeta(group_ranges(plan, group_size), spec)


def precompute_varlen_meta(
        plan: ShardPlan,
        batch: PackedBatch,
        pattern: MaskPattern) -> VarlenMeta:
    """
    Builds the stage structure of a packed window once before any stage
    runs.

    Args:
        plan (ShardPlan): The sharding of the window.
        batch (PackedBatch): The packed documents.
        pattern (MaskPattern): Full, Causal, FullDocument or CausalDocument.

    Returns:
        VarlenMeta: The precomputed structure with one unit per rank.
    """
    return create_varlen_meta(plan, batch_to_mask(batch, pattern))


def count_stage_pairs(meta: VarlenMeta) -> list[list[int]]:
    """Computed pairs per unit and ring stage."""
    num = meta.get_num_units()
    return [
        [meta.count_pairs(unit, meta.ring_owner(unit, stage))
         for stage in range(num)]
        for unit in range(num)
    ]
