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
Block sparse masks. The sequence is cut into a grid of query blocks and key
blocks. Every query block keeps the top k key blocks by a simulated score.
Masks are shared by all query heads of one kv head group.
"""
import math
from typing import Any, TypedDict

import numpy as np

from cpbench.misc.errors import ShapeError
from cpbench.system.masks.count import pair_flops
from cpbench.system.masks.export import check_dense_cap
from cpbench.system.numcore import Direction, HeadLayout


DEFAULT_SPARSITY_RATIOS: tuple[float, ...] = (0.2, 0.5, 0.8)


BlockGrid = TypedDict('BlockGrid', {
    "q_block_sizes": list[int],
    "k_block_sizes": list[int],
})
BlockMask = TypedDict('BlockMask', {
    "grid": BlockGrid,
    "groups": int,
    "selected": list[list[list[int]]],
    "seed": int,
})


def create_block_grid(
        q_block_sizes: list[int], k_block_sizes: list[int]) -> BlockGrid:
    if not q_block_sizes or not k_block_sizes:
        raise ValueError("grid needs at least one block per axis")
    if min(q_block_sizes) < 1 or min(k_block_sizes) < 1:
        raise ValueError(
            f"block sizes must be positive: {q_block_sizes} {k_block_sizes}")
    if sum(q_block_sizes) != sum(k_block_sizes):
        raise ShapeError(
            f"query blocks cover {sum(q_block_sizes)} tokens but key blocks "
            f"cover {sum(k_block_sizes)}")
    return {
        "q_block_sizes": [int(size) for size in q_block_sizes],
        "k_block_sizes": [int(size) for size in k_block_sizes],
    }


def uniform_grid(seq_len: int, block_size: int) -> BlockGrid:
    """Square grid of equal blocks. The last block absorbs the remainder."""
    full, rest = divmod(seq_len, block_size)
    sizes = [block_size] * full
    if rest:
        sizes.append(rest)
    return create_block_grid(sizes, list(sizes))


def grid_seq_len(grid: BlockGrid) -> int:
    return sum(grid["q_block_sizes"])


def uniform_block_size(grid: BlockGrid) -> int | None:
    """The common block size or None for variable grids. Only the last
    block of an axis may be smaller."""
    qsizes = grid["q_block_sizes"]
    ksizes = grid["k_block_sizes"]
    block = qsizes[0]
    for sizes in (qsizes, ksizes):
        if any(size != block for size in sizes[:-1]) or sizes[-1] > block:
            return None
    return block


def sparsity_to_topk(ratio: float, num_k_blocks: int) -> int:
    if not 0.0 < ratio <= 1.0:
        raise ValueError(f"ratio must be in (0, 1] got {ratio}")
    if num_k_blocks < 1:
        raise ValueError(f"need at least one key block got {num_k_blocks}")
    # round half away from zero (the product is positive)
    return min(num_k_blocks, max(1, math.floor(ratio * num_k_blocks + 0.5)))


def block_scores(
        seed: int, group: int, q_block: int, count: int) -> np.ndarray:
    rng = np.random.Generator(
        np.random.Philox(np.random.SeedSequence([seed, group, q_block])))
    return rng.random(count)


def select_topk(scores: np.ndarray, k: int) -> list[int]:
    """Top k indices by score with ties going to the lower index."""
    order = np.argsort(-scores, kind="stable")
    return sorted(int(ix) for ix in order[:k])


def create_block_mask(
        grid: BlockGrid,
        groups: int,
        selected: list[list[list[int]]],
        *,
        seed: int = 0) -> BlockMask:
    num_q = len(grid["q_block_sizes"])
    num_k = len(grid["k_block_sizes"])
    if groups < 1 or len(selected) != groups:
        raise ShapeError(
            f"expected selections for {groups} groups got {len(selected)}")
    for group, per_q in enumerate(selected):
        if len(per_q) != num_q:
            raise ShapeError(
                f"group {group} has {len(per_q)} query blocks "
                f"expected {num_q}")
        for qblock, sel in enumerate(per_q):
            if any(right <= left for left, right in zip(sel[:-1], sel[1:])):
                raise ValueError(
                    f"selection of group {group} block {qblock} must be "
                    f"strictly ascending: {sel}")
            if sel and (sel[0] < 0 or sel[-1] >= num_k):
                raise ValueError(
                    f"selection of group {group} block {qblock} outside "
                    f"[0, {num_k}): {sel}")
    return {
        "grid": grid,
        "groups": groups,
        "selected": [[list(sel) for sel in per_q] for per_q in selected],
        "seed": seed,
    }


def sample_block_mask(
        grid: BlockGrid, ratio: float, groups: int, seed: int) -> BlockMask:
    """
    Samples a block mask. Each (seed, group, query block) triple has its own
    counter based random stream of uniform scores so the result does not
    depend on the order in which blocks are sampled.

    Args:
        grid (BlockGrid): The block grid.
        ratio (float): Fraction of key blocks kept per query block.
        groups (int): Number of kv head groups.
        seed (int): The seed.

    Returns:
        BlockMask: The mask.
    """
    if groups < 1:
        raise ValueError(f"groups must be positive got {groups}")
    num_k = len(grid["k_block_sizes"])
    k = sparsity_to_topk(ratio, num_k)
    selected = [
        [
            select_topk(block_scores(seed, group, qblock, num_k), k)
            for qblock in range(len(grid["q_block_sizes"]))
        ]
        for group in range(groups)
    ]
    return create_block_mask(grid, groups, selected, seed=seed)


def block_bits(mask: BlockMask, group: int) -> np.ndarray:
    grid = mask["grid"]
    res = np.zeros(
        (len(grid["q_block_sizes"]), len(grid["k_block_sizes"])),
        dtype=np.bool_)
    for qblock, sel in enumerate(mask["selected"][group]):
        res[qblock, sel] = True
    return res


def selected_area(mask: BlockMask, group: int) -> int:
    grid = mask["grid"]
    qsizes = np.array(grid["q_block_sizes"], dtype=np.int64)
    ksizes = np.array(grid["k_block_sizes"], dtype=np.int64)
    return int(qsizes @ block_bits(mask, group).astype(np.int64) @ ksizes)


def block_mask_to_dense(
        mask: BlockMask, group: int, *, cap: int | None = None) -> np.ndarray:
    grid = mask["grid"]
    check_dense_cap(grid_seq_len(grid), cap)
    bits = block_bits(mask, group)
    return np.repeat(
        np.repeat(bits, grid["q_block_sizes"], axis=0),
        grid["k_block_sizes"],
        axis=1)


def block_mask_head_masks(
        mask: BlockMask,
        layout: HeadLayout,
        *,
        cap: int | None = None) -> np.ndarray:
    """Dense mask per query head, shape (q_heads, seq_len, seq_len)."""
    q_heads = layout["q_heads"]
    groups = mask["groups"]
    if q_heads % groups != 0:
        raise ShapeError(
            f"q_heads ({q_heads}) must be a multiple of groups ({groups})")
    per_group = [
        block_mask_to_dense(mask, group, cap=cap) for group in range(groups)
    ]
    return np.stack([
        per_group[head // (q_heads // groups)] for head in range(q_heads)
    ])


def sparse_flops(
        mask: BlockMask, layout: HeadLayout, direction: Direction) -> int:
    q_heads = layout["q_heads"]
    groups = mask["groups"]
    if q_heads % groups != 0:
        raise ShapeError(
            f"q_heads ({q_heads}) must be a multiple of groups ({groups})")
    area = sum(selected_area(mask, group) for group in range(groups))
    # one pair per selected token pair and query head of the group
    per_head: HeadLayout = {
        "q_heads": q_heads // groups,
        "kv_heads": 1,
        "head_dim": layout["head_dim"],
    }
    return pair_flops(area, per_head, direction)


def block_mask_to_json(mask: BlockMask) -> dict[str, Any]:
    return {
        "grid": mask["grid"],
        "groups": mask["groups"],
        "selected": mask["selected"],
        "seed": mask["seed"],
    }


def block_mask_from_json(obj: dict[str, Any]) -> BlockMask:
    grid = create_block_grid(
        obj["grid"]["q_block_sizes"], obj["grid"]["k_block_sizes"])
    return create_block_mask(
        grid, int(obj["groups"]), obj["selected"], seed=int(obj["seed"]))
