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
"""Characteristics of the block sparse attention kernel families."""
from typing import get_args, Literal, TypeAlias, TypedDict

import pandas as pd

from cpbench.system.numcore import Direction, HeadLayout
from cpbench.system.sparse.blocks import BlockMask, uniform_block_size


SparseKernel: TypeAlias = Literal[
    "VSA",
    "Triton VSA",
    "FA2 Sparse",
    "FlexAttention",
    "FlashInfer",
]
SPARSE_KERNELS: tuple[SparseKernel, ...] = get_args(SparseKernel)


BlockLayouts: TypeAlias = Literal["uniform", "both"]
Rating: TypeAlias = Literal["Low", "Medium", "High"]


SparseKernelTraits = TypedDict('SparseKernelTraits', {
    "layouts": BlockLayouts,
    "directions": list[Direction],
    "block_sizes": list[int] | None,  # None means arbitrary
    "gqa": bool,
    "min_sm": int,
    "performance": Rating,
    "memory_overhead": Rating,
})


SparseCapabilityMatrix: TypeAlias = dict[SparseKernel, SparseKernelTraits]


def get_sparse_kernel(text: str) -> SparseKernel:
    if text not in SPARSE_KERNELS:
        raise ValueError(
            f"unknown sparse kernel {text} not in {SPARSE_KERNELS}")
    return text  # type: ignore


def _traits(
        layouts: BlockLayouts,
        directions: list[Direction],
        block_sizes: list[int] | None,
        gqa: bool,
        min_sm: int,
        performance: Rating,
        memory_overhead: Rating) -> SparseKernelTraits:
    return {
        "layouts": layouts,
        "directions": directions,
        "block_sizes": block_sizes,
        "gqa": gqa,
        "min_sm": min_sm,
        "performance": performance,
        "memory_overhead": memory_overhead,
    }


def sparse_kernel_capabilities() -> SparseCapabilityMatrix:
    both: list[Direction] = ["forward", "backward"]
    fwd: list[Direction] = ["forward"]
    return {
        "VSA": _traits("uniform", both, [64], False, 90, "High", "Low"),
        "Triton VSA": _traits(
            "uniform", both, [64], False, 80, "Medium", "Low"),
        "FA2 Sparse": _traits(
            "uniform", fwd, [128], True, 80, "Medium", "Low"),
        "FlexAttention": _traits(
            "both", both, None, True, 80, "Low", "High"),
        "FlashInfer": _traits(
            "both", fwd, None, True, 80, "Medium", "Medium"),
    }


def kernel_accepts(
        matrix: SparseCapabilityMatrix,
        kernel: str,
        mask: BlockMask,
        layout: HeadLayout,
        direction: Direction) -> str | None:
    """
    Checks whether a sparse kernel can run the given mask.

    Args:
        matrix (SparseCapabilityMatrix): The capabilities.
        kernel (str): The kernel name.
        mask (BlockMask): The mask.
        layout (HeadLayout): The head layout.
        direction (Direction): The pass.

    Returns:
        str | None: None if the kernel accepts the mask otherwise the
        reason why it does not.
    """
    traits = matrix[get_sparse_kernel(kernel)]
    block = uniform_block_size(mask["grid"])
    if block is None and traits["layouts"] == "uniform":
        return f"{kernel} only supports uniform block masks"
    sizes = traits["block_sizes"]
    if sizes is not None and block not in sizes:
        return f"{kernel} requires block size in {sizes} got {block}"
    if direction not in traits["directions"]:
        return f"{kernel} does not support the {direction} pass"
    if not traits["gqa"] and layout["q_heads"] != layout["kv_heads"]:
        return f"{kernel} does not support grouped query attention"
    return None


def _fmt_traits(traits: SparseKernelTraits) -> dict[str, str]:
    directions = traits["directions"]
    sizes = traits["block_sizes"]
    return {
        "Uniform/Variable Masks": (
            "Uniform only" if traits["layouts"] == "uniform" else "Both"),
        "Forward/Backward": (
            "Both" if len(directions) == 2 else "Forward only"),
        "Block Size": (
            "Arbitrary" if sizes is None
            else " / ".join(f"{size}" for size in sizes) + " only"),
        "GQA Support": "yes" if traits["gqa"] else "no",
        "GPU Support": f">= sm{traits['min_sm']}",
        "Performance": traits["performance"],
        "Memory Overhead": traits["memory_overhead"],
    }


def sparse_capability_frame(matrix: SparseCapabilityMatrix) -> pd.DataFrame:
    return pd.DataFrame({
        kernel: _fmt_traits(matrix[kernel])
        for kernel in SPARSE_KERNELS
    })
