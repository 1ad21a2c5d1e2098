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
Peak activation memory of one attention layer. Kernels that materialize
the full mask and the attention matrix store five quadratic buffers on top
of the linear activations. Fused kernels only add one row statistic per
query.
"""
from typing import get_args, Literal, TypeAlias, TypedDict

from cpbench.system.masks.kernels import DenseKernel


MemoryClass: TypeAlias = Literal["naive_full_mask", "fused_linear"]
MEMORY_CLASSES: tuple[MemoryClass, ...] = get_args(MemoryClass)


# 11 bshd for the layer inputs and projections plus 2 bshd for the output
LINEAR_TERMS = 13
QUADRATIC_TERMS = 5
LSE_TERMS = 1


MemoryModel = TypedDict('MemoryModel', {
    "kernel_class": MemoryClass,
    "batch": int,
    "seq_len": int,
    "heads": int,
    "head_dim": int,
    "bytes_per_element": int,
})


def get_memory_class(text: str) -> MemoryClass:
    if text not in MEMORY_CLASSES:
        raise ValueError(
            f"unknown memory class {text} not in {MEMORY_CLASSES}")
    return text  # type: ignore


def kernel_memory_class(kernel: DenseKernel) -> MemoryClass:
    if kernel in ("Naive-Torch", "SDPA"):
        return "naive_full_mask"
    return "fused_linear"


def create_memory_model(
        kernel_class: MemoryClass,
        *,
        batch: int,
        seq_len: int,
        heads: int,
        head_dim: int,
        bytes_per_element: int = 2) -> MemoryModel:
    dims = [batch, seq_len, heads, head_dim, bytes_per_element]
    if min(dims) < 1:
        raise ValueError(f"memory model dims must be positive: {dims}")
    return {
        "kernel_class": get_memory_class(kernel_class),
        "batch": batch,
        "seq_len": seq_len,
        "heads": heads,
        "head_dim": head_dim,
        "bytes_per_element": bytes_per_element,
    }


def peak_activation_elements(model: MemoryModel) -> int:
    """
    Peak number of stored activation elements.

    Args:
        model (MemoryModel): The model.

    Returns:
        int: 13 bshd + 5 bhs^2 for naive kernels and 13 bshd + bhs for
        fused kernels.
    """
    bsz = model["batch"]
    slen = model["seq_len"]
    heads = model["heads"]
    linear = LINEAR_TERMS * bsz * slen * heads * model["head_dim"]
    if model["kernel_class"] == "naive_full_mask":
        return linear + QUADRATIC_TERMS * bsz * heads * slen * slen
    return linear + LSE_TERMS * bsz * heads * slen


def peak_activation_bytes(model: MemoryModel) -> int:
    return peak_activation_elements(model) * model["bytes_per_element"]


def attention_state_elements(model: MemoryModel) -> int:
    """Output and lse kept by a fused kernel: bshd + bhs."""
    bsz = model["batch"]
    slen = model["seq_len"]
    heads = model["heads"]
    return bsz * slen * heads * model["head_dim"] + bsz * heads * slen
