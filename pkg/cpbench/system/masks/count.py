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
from collections.abc import Callable

import numpy as np

from cpbench.system.masks.pattern import (
    allowed_matrix,
    doc_lengths,
    MaskPattern,
    MaskSpec,
    real_len,
)
from cpbench.system.numcore import Direction, HeadLayout


# flops per unmasked pair per query head and head dim: 2 for the QK^T dot
# and 2 for the PV product
FLOPS_PER_PAIR = 4
# backward = 2.5 x forward (recompute of P included)
BACKWARD_NUM = 5
BACKWARD_DEN = 2
BRUTE_ROW_CHUNK = 256


def _tri(n: int) -> int:
    return n * (n + 1) // 2


def _sliding(rlen: int, window: int) -> int:
    """Pairs with |i - j| < window (both sides)."""
    if rlen <= 0:
        return 0
    dist = min(window - 1, rlen - 1)
    return rlen + 2 * (dist * rlen - _tri(dist))


def _causal_sliding(rlen: int, window: int) -> int:
    if rlen <= 0:
        return 0
    dist = min(window - 1, rlen - 1)
    return rlen + dist * rlen - _tri(dist)


def _prefix_causal(length: int, prefix: int) -> int:
    return prefix * length + _tri(length - prefix)


def _block_causal(length: int, block: int) -> int:
    num_blocks = -(-length // block)
    full = block * block * _tri(num_blocks - 1)
    last = length - (num_blocks - 1) * block
    return full + last * length


def _count_full(spec: MaskSpec) -> int:
    return real_len(spec) ** 2


def _count_causal(spec: MaskSpec) -> int:
    return _tri(real_len(spec))


def _count_full_sliding(spec: MaskSpec) -> int:
    return _sliding(real_len(spec), int(spec["window"] or 1))


def _count_causal_sliding(spec: MaskSpec) -> int:
    return _causal_sliding(real_len(spec), int(spec["window"] or 1))


def _count_full_document(spec: MaskSpec) -> int:
    return sum(length * length for length in doc_lengths(spec))


def _count_causal_document(spec: MaskSpec) -> int:
    return sum(_tri(length) for length in doc_lengths(spec))


def _count_share_question(spec: MaskSpec) -> int:
    lengths = doc_lengths(spec)
    return real_len(spec) * lengths[0] + sum(
        _tri(length) for length in lengths[1:])


def _count_causal_blockwise(spec: MaskSpec) -> int:
    lengths = doc_lengths(spec)
    rlen = real_len(spec)
    last_start = rlen - lengths[-1]
    return sum(_tri(length) for length in lengths[:-1]) + (
        _tri(rlen) - _tri(last_start))


def _count_global_sliding(spec: MaskSpec) -> int:
    rlen = real_len(spec)
    rest = rlen - min(int(spec["global_len"] or 0), rlen)
    blocked = rest * rest - _sliding(rest, int(spec["window"] or 1))
    return rlen * rlen - blocked


def _count_prefix_lm_causal(spec: MaskSpec) -> int:
    return _prefix_causal(real_len(spec), (spec["prefix_lens"] or [0])[0])


def _count_prefix_lm_document(spec: MaskSpec) -> int:
    return sum(
        _prefix_causal(length, prefix)
        for length, prefix in zip(
            doc_lengths(spec), spec["prefix_lens"] or []))


def _count_block_causal_document(spec: MaskSpec) -> int:
    block = int(spec["block_size"] or 1)
    return sum(_block_causal(length, block) for length in doc_lengths(spec))


ANALYTIC_COUNTS: dict[MaskPattern, Callable[[MaskSpec], int]] = {
    "Full": _count_full,
    "Causal": _count_causal,
    "FullSlidingWindow": _count_full_sliding,
    "CausalSlidingWindow": _count_causal_sliding,
    "FullDocument": _count_full_document,
    "CausalDocument": _count_causal_document,
    "ShareQuestion": _count_share_question,
    "CausalBlockwise": _count_causal_blockwise,
    "GlobalSliding": _count_global_sliding,
    "PrefixLmCausal": _count_prefix_lm_causal,
    "PrefixLmDocument": _count_prefix_lm_document,
    "BlockCausalDocument": _count_block_causal_document,
}


def count_unmasked_brute(spec: MaskSpec) -> int:
    """Counts allowed pairs by evaluating the predicate in row chunks."""
    seq_len = spec["seq_len"]
    keys = np.arange(seq_len)
    total = 0
    for start in range(0, seq_len, BRUTE_ROW_CHUNK):
        rows = np.arange(start, min(start + BRUTE_ROW_CHUNK, seq_len))
        total += int(np.count_nonzero(allowed_matrix(spec, rows, keys)))
    return total


def count_unmasked(spec: MaskSpec) -> int:
    counter = ANALYTIC_COUNTS.get(spec["pattern"])
    if counter is None:
        return count_unmasked_brute(spec)
    return counter(spec)


def pair_flops(pairs: int, layout: HeadLayout, direction: Direction) -> int:
    fwd = FLOPS_PER_PAIR * layout["head_dim"] * layout["q_heads"] * pairs
    if direction == "forward":
        return fwd
    return fwd * BACKWARD_NUM // BACKWARD_DEN


def attention_flops(
        spec: MaskSpec, layout: HeadLayout, direction: Direction) -> int:
    return pair_flops(count_unmasked(spec), layout, direction)
