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
Dense numerics shared by every other module. Tensors are numpy arrays of
shape (heads, rows, cols). All reductions run in ascending index order so
that results are reproducible bit by bit.
"""
from typing import get_args, Literal, TypeAlias, TypedDict

import numpy as np

from cpbench.misc.errors import ShapeError


Tensor3: TypeAlias = np.ndarray
RowStats: TypeAlias = np.ndarray


Precision: TypeAlias = Literal["f64", "f32"]
PRECISIONS: tuple[Precision] = get_args(Precision)


Direction: TypeAlias = Literal["forward", "backward"]


HeadLayout = TypedDict('HeadLayout', {
    "q_heads": int,
    "kv_heads": int,
    "head_dim": int,
})


def get_precision(text: str) -> Precision:
    if text not in PRECISIONS:
        raise ValueError(f"invalid precision {text} not in {PRECISIONS}")
    return text  # type: ignore


def get_dtype(precision: Precision) -> type[np.floating]:
    if precision == "f32":
        return np.float32
    return np.float64


def create_tensor(
        data: np.ndarray | list,
        *,
        precision: Precision = "f64") -> Tensor3:
    res = np.array(data, dtype=get_dtype(precision))
    if res.ndim != 3:
        raise ValueError(
            f"tensor must have 3 dims (heads, rows, cols) got {res.shape}")
    if not np.isfinite(res).all():
        raise ValueError("tensor must only contain finite values")
    return res


def create_head_layout(
        q_heads: int, kv_heads: int, head_dim: int) -> HeadLayout:
    if q_heads < 1 or kv_heads < 1 or head_dim < 1:
        raise ValueError(
            f"head counts and dims must be positive: {q_heads=} "
            f"{kv_heads=} {head_dim=}")
    if q_heads % kv_heads != 0:
        raise ValueError(
            f"q_heads ({q_heads}) must be a multiple of "
            f"kv_heads ({kv_heads})")
    return {
        "q_heads": q_heads,
        "kv_heads": kv_heads,
        "head_dim": head_dim,
    }


def group_size(layout: HeadLayout) -> int:
    return layout["q_heads"] // layout["kv_heads"]


def matmul(a: Tensor3, b: Tensor3, *, transpose_b: bool = False) -> Tensor3:
    """
    Per head matrix product. The contraction runs over ascending indices
    and every partial sum is rounded exactly as a scalar loop would.

    Args:
        a (Tensor3): Shape (heads, rows, inner).
        b (Tensor3): Shape (heads, inner, cols) or (heads, cols, inner) if
            transposed.
        transpose_b (bool, optional): Whether to use the transpose of b.

    Returns:
        Tensor3: Shape (heads, rows, cols).
    """
    if transpose_b:
        b = np.swapaxes(b, 1, 2)
    if a.ndim != 3 or b.ndim != 3:
        raise ShapeError(f"expected 3 dims got {a.shape} and {b.shape}")
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"head counts differ: {a.shape} vs {b.shape}")
    if a.shape[2] != b.shape[1]:
        raise ShapeError(f"inner dims differ: {a.shape} vs {b.shape}")
    dtype = np.result_type(a, b)
    out = np.zeros((a.shape[0], a.shape[1], b.shape[2]), dtype=dtype)
    for kx in range(a.shape[2]):
        out = out + a[:, :, kx:kx + 1] * b[:, kx:kx + 1, :]
    return out


def ordered_sum(arr: np.ndarray, *, axis: int) -> np.ndarray:
    """Sums along an axis strictly from the lowest to the highest index."""
    arr = np.moveaxis(arr, axis, 0)
    out = np.zeros(arr.shape[1:], dtype=arr.dtype)
    for elem in arr:
        out = out + elem
    return out


def masked_row_softmax(
        scores: Tensor3, allow: np.ndarray) -> tuple[Tensor3, RowStats]:
    """
    Softmax over the allowed entries of each row.

    Args:
        scores (Tensor3): The scores of shape (heads, rows, cols).
        allow (np.ndarray): Boolean matrix broadcastable to the scores.

    Returns:
        tuple[Tensor3, RowStats]: The probabilities (exactly 0 where not
        allowed) and the log-sum-exp per (head, row). Rows without any
        allowed entry have all zero probabilities and an lse of -inf.
    """
    allow = np.broadcast_to(allow, scores.shape)
    if scores.shape[-1] == 0:
        return (
            np.zeros_like(scores),
            np.full(scores.shape[:-1], -np.inf, dtype=scores.dtype))
    masked = np.where(allow, scores, -np.inf)
    row_max = masked.max(axis=-1)
    has_any = allow.any(axis=-1)
    safe_max = np.where(has_any, row_max, 0.0).astype(scores.dtype)
    shifted = np.where(allow, scores - safe_max[..., None], -np.inf)
    ex = np.exp(shifted)
    total = ordered_sum(ex, axis=-1)
    safe_total = np.where(total > 0, total, 1.0).astype(scores.dtype)
    probs = ex / safe_total[..., None]
    lse = np.where(has_any, safe_max + np.log(safe_total), -np.inf)
    return probs, lse.astype(scores.dtype)
