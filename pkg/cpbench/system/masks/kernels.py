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
"""Which dense attention kernel families accept which mask patterns."""
from typing import get_args, Literal, TypeAlias

import pandas as pd

from cpbench.system.masks.pattern import MASK_PATTERNS, MaskPattern
from cpbench.system.numcore import HeadLayout


DenseKernel: TypeAlias = Literal[
    "Naive-Torch",
    "SDPA",
    "FA2",
    "FA3",
    "cuDNN-Fused-Attn",
    "FlexAttn",
    "FlashMask",
]
DENSE_KERNELS: tuple[DenseKernel, ...] = get_args(DenseKernel)


KernelCapabilityMatrix: TypeAlias = dict[DenseKernel, dict[MaskPattern, bool]]


# patterns that need an arbitrary mask representation
HETEROGENEOUS_PATTERNS: frozenset[MaskPattern] = frozenset([
    "ShareQuestion",
    "CausalBlockwise",
    "GlobalSliding",
    "PrefixLmCausal",
    "PrefixLmDocument",
    "BlockCausalDocument",
])
FIXED_FORM_KERNELS: frozenset[DenseKernel] = frozenset([
    "FA2",
    "FA3",
    "cuDNN-Fused-Attn",
])


def get_dense_kernel(text: str) -> DenseKernel:
    if text not in DENSE_KERNELS:
        raise ValueError(f"unknown dense kernel {text} not in {DENSE_KERNELS}")
    return text  # type: ignore


def dense_kernel_capabilities() -> KernelCapabilityMatrix:
    return {
        kernel: {
            pattern: (
                kernel not in FIXED_FORM_KERNELS
                or pattern not in HETEROGENEOUS_PATTERNS)
            for pattern in MASK_PATTERNS
        }
        for kernel in DENSE_KERNELS
    }


def kernel_supports(
        matrix: KernelCapabilityMatrix,
        kernel: str,
        pattern: MaskPattern,
        *,
        layout: HeadLayout | None = None) -> bool:
    """
    Looks up whether a kernel accepts a mask pattern.

    Args:
        matrix (KernelCapabilityMatrix): The capability matrix.
        kernel (str): The kernel name.
        pattern (MaskPattern): The pattern.
        layout (HeadLayout | None, optional): If given, constraints that
            depend on the head layout are applied as well. cuDNN rejects
            full sliding windows with grouped query heads.

    Returns:
        bool: Whether the combination is supported.
    """
    row = matrix.get(get_dense_kernel(kernel))
    if row is None:
        raise ValueError(f"kernel {kernel} missing from capability matrix")
    res = row[pattern]
    if (
            res
            and layout is not None
            and kernel == "cuDNN-Fused-Attn"
            and pattern == "FullSlidingWindow"
            and layout["q_heads"] != layout["kv_heads"]):
        return False
    return res


def capability_frame(matrix: KernelCapabilityMatrix) -> pd.DataFrame:
    return pd.DataFrame(
        [
            [matrix[kernel][pattern] for kernel in DENSE_KERNELS]
            for pattern in MASK_PATTERNS
        ],
        index=pd.Index(MASK_PATTERNS, name="pattern"),
        columns=list(DENSE_KERNELS))
