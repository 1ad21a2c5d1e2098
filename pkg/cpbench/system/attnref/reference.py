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
Exact single device attention. This is the oracle for every distributed
mechanism.

The backward pass uses the standard softmax attention gradients with
P = softmax(Q K^T / sqrt(d)) recomputed from the stored lse:

    dV = P^T dO
    dP = dO V^T
    dS = P * (dP - delta)  with  delta = rowsum(dO * O) = rowsum(dP * P)
    dQ = dS K / sqrt(d)
    dK = dS^T Q / sqrt(d)

Key and value gradients of grouped query heads are summed over the group.
"""
import math

import numpy as np

from cpbench.misc.errors import ShapeError
from cpbench.system.attnref.partial import (
    AttentionPartial,
    create_partial,
    empty_partial,
    merge_partials,
)
from cpbench.system.masks.pattern import allowed_matrix, MaskSpec
from cpbench.system.numcore import (
    group_size,
    HeadLayout,
    masked_row_softmax,
    matmul,
    ordered_sum,
    RowStats,
    Tensor3,
)


KVGrads = tuple[Tensor3, Tensor3, Tensor3]


def softmax_scale(layout: HeadLayout) -> float:
    return 1.0 / math.sqrt(layout["head_dim"])


def check_qkv(
        q: Tensor3, k: Tensor3, v: Tensor3, layout: HeadLayout) -> None:
    if q.ndim != 3 or k.ndim != 3 or v.ndim != 3:
        raise ShapeError(
            f"q, k, v must have 3 dims: {q.shape} {k.shape} {v.shape}")
    if q.shape[0] != layout["q_heads"]:
        raise ShapeError(
            f"q has {q.shape[0]} heads expected {layout['q_heads']}")
    if k.shape[0] != layout["kv_heads"] or v.shape[0] != layout["kv_heads"]:
        raise ShapeError(
            f"k, v have {k.shape[0]}, {v.shape[0]} heads expected "
            f"{layout['kv_heads']}")
    dim = layout["head_dim"]
    if q.shape[2] != dim or k.shape[2] != dim or v.shape[2] != dim:
        raise ShapeError(
            f"head dims {q.shape[2]}, {k.shape[2]}, {v.shape[2]} "
            f"expected {dim}")
    if k.shape[1] != v.shape[1]:
        raise ShapeError(f"k has {k.shape[1]} rows but v has {v.shape[1]}")


def expand_kv(tensor: Tensor3, layout: HeadLayout) -> Tensor3:
    """Repeats every kv head for the query heads of its group."""
    return np.repeat(tensor, group_size(layout), axis=0)


def reduce_kv_grad(grad: Tensor3, layout: HeadLayout) -> Tensor3:
    """Sums per query head gradients into their kv head."""
    heads, rows, dim = grad.shape
    group = group_size(layout)
    return ordered_sum(
        grad.reshape((heads // group, group, rows, dim)), axis=1)


def resolve_allow(
        mask: MaskSpec | np.ndarray,
        rows: int,
        cols: int,
        *,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None) -> np.ndarray:
    """
    Boolean matrix of the allowed (query, key) pairs.

    Args:
        mask (MaskSpec | np.ndarray): A mask spec or dense bits of shape
            (rows, cols) or (heads, rows, cols).
        rows (int): Number of queries.
        cols (int): Number of keys.
        q_pos (np.ndarray | None, optional): Global query positions. Only
            used for mask specs. Defaults to 0..rows.
        k_pos (np.ndarray | None, optional): Global key positions. Only
            used for mask specs. Defaults to 0..cols.

    Returns:
        np.ndarray: The allowed pairs.
    """
    if isinstance(mask, np.ndarray):
        if mask.shape[-2:] != (rows, cols):
            raise ShapeError(
                f"mask of shape {mask.shape} does not fit {rows}x{cols}")
        return mask.astype(np.bool_)
    if q_pos is None:
        q_pos = np.arange(rows)
    if k_pos is None:
        k_pos = np.arange(cols)
    if len(q_pos) != rows or len(k_pos) != cols:
        raise ShapeError(
            f"{len(q_pos)}x{len(k_pos)} positions for {rows}x{cols} scores")
    return allowed_matrix(mask, q_pos, k_pos)


def attention_scores(
        q: Tensor3, k: Tensor3, layout: HeadLayout) -> Tensor3:
    scale = np.asarray(softmax_scale(layout), dtype=q.dtype)
    return matmul(q, expand_kv(k, layout), transpose_b=True) * scale


def attention_from_scores(
        scores: Tensor3,
        v: Tensor3,
        layout: HeadLayout,
        allow: np.ndarray) -> AttentionPartial:
    """Finishes attention from already scaled scores."""
    probs, lse = masked_row_softmax(scores, allow)
    return create_partial(matmul(probs, expand_kv(v, layout)), lse)


def attention_partial(
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        layout: HeadLayout,
        allow: np.ndarray) -> AttentionPartial:
    check_qkv(q, k, v, layout)
    return attention_from_scores(
        attention_scores(q, k, layout), v, layout, allow)


def attention_forward(
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        layout: HeadLayout,
        mask: MaskSpec | np.ndarray,
        *,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None) -> AttentionPartial:
    """
    Exact masked attention.

    Args:
        q (Tensor3): Queries (q_heads, rows, head_dim).
        k (Tensor3): Keys (kv_heads, cols, head_dim).
        v (Tensor3): Values (kv_heads, cols, head_dim).
        layout (HeadLayout): The head layout.
        mask (MaskSpec | np.ndarray): The mask as spec or dense bits.
        q_pos (np.ndarray | None, optional): Global query positions.
        k_pos (np.ndarray | None, optional): Global key positions.

    Returns:
        AttentionPartial: Output and lse. Rows without allowed keys have
        zero output and an lse of -inf.
    """
    check_qkv(q, k, v, layout)
    allow = resolve_allow(
        mask, q.shape[1], k.shape[1], q_pos=q_pos, k_pos=k_pos)
    return attention_partial(q, k, v, layout, allow)


def streaming_forward(
        q: Tensor3,
        kv_chunks: list[tuple[Tensor3, Tensor3]],
        layout: HeadLayout,
        mask: MaskSpec | np.ndarray,
        *,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None) -> AttentionPartial:
    """
    Attention over key value chunks processed one after the other. Each
    chunk yields a partial that is merged into the running result.

    Args:
        q (Tensor3): Queries.
        kv_chunks (list[tuple[Tensor3, Tensor3]]): Consecutive (k, v)
            chunks covering all keys in order.
        layout (HeadLayout): The head layout.
        mask (MaskSpec | np.ndarray): The mask over all keys.
        q_pos (np.ndarray | None, optional): Global query positions.
        k_pos (np.ndarray | None, optional): Global positions of all keys.

    Returns:
        AttentionPartial: The merged result.
    """
    total = sum(chunk_k.shape[1] for chunk_k, _ in kv_chunks)
    if k_pos is not None and len(k_pos) != total:
        raise ShapeError(
            f"chunks hold {total} keys but {len(k_pos)} positions are given")
    if isinstance(mask, np.ndarray) and mask.shape[-1] != total:
        raise ShapeError(
            f"chunks hold {total} keys but the mask has {mask.shape[-1]}")
    allow = resolve_allow(mask, q.shape[1], total, q_pos=q_pos, k_pos=k_pos)
    res: AttentionPartial | None = None
    start = 0
    for chunk_k, chunk_v in kv_chunks:
        end = start + chunk_k.shape[1]
        part = attention_partial(
            q, chunk_k, chunk_v, layout, allow[..., start:end])
        res = part if res is None else merge_partials(res, part)
        start = end
    if res is None:
        return empty_partial(
            q.shape[0], q.shape[1], q.shape[2], dtype=q.dtype.type)
    return res


def output_delta(d_out: Tensor3, out: Tensor3) -> RowStats:
    return ordered_sum(d_out * out, axis=-1)


def block_backward(
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        d_out: Tensor3,
        lse: RowStats,
        delta: RowStats,
        layout: HeadLayout,
        allow: np.ndarray) -> KVGrads:
    """
    Gradient contribution of one key value block. The lse and delta must
    come from the full forward so that blocks add up to the exact gradient.

    Args:
        q (Tensor3): Queries.
        k (Tensor3): Keys of the block.
        v (Tensor3): Values of the block.
        d_out (Tensor3): Output gradient of the queries.
        lse (RowStats): Final lse of the queries.
        delta (RowStats): rowsum(d_out * out) of the queries.
        layout (HeadLayout): The head layout.
        allow (np.ndarray): Allowed pairs of the block.

    Returns:
        KVGrads: dq (partial) and dk, dv of the block.
    """
    check_qkv(q, k, v, layout)
    if d_out.shape != q.shape:
        raise ShapeError(f"d_out {d_out.shape} does not match q {q.shape}")
    dtype = q.dtype
    scale = np.asarray(softmax_scale(layout), dtype=dtype)
    k_exp = expand_kv(k, layout)
    v_exp = expand_kv(v, layout)
    scores = matmul(q, k_exp, transpose_b=True) * scale
    finite = np.isfinite(lse)
    safe_lse = np.where(finite, lse, 0.0).astype(dtype)
    keep = np.broadcast_to(allow, scores.shape) & finite[..., None]
    probs = np.exp(np.where(keep, scores - safe_lse[..., None], -np.inf))
    d_v = matmul(np.swapaxes(probs, 1, 2), d_out)
    d_probs = matmul(d_out, v_exp, transpose_b=True)
    d_scores = probs * (d_probs - delta[..., None])
    d_q = matmul(d_scores, k_exp) * scale
    d_k = matmul(np.swapaxes(d_scores, 1, 2), q) * scale
    return (
        d_q.astype(dtype),
        reduce_kv_grad(d_k, layout).astype(dtype),
        reduce_kv_grad(d_v, layout).astype(dtype),
    )


def attention_backward(
        q: Tensor3,
        k: Tensor3,
        v: Tensor3,
        fwd: AttentionPartial,
        d_out: Tensor3,
        layout: HeadLayout,
        mask: MaskSpec | np.ndarray,
        *,
        q_pos: np.ndarray | None = None,
        k_pos: np.ndarray | None = None) -> KVGrads:
    """
    Exact gradients of masked attention.

    Args:
        q (Tensor3): Queries.
        k (Tensor3): Keys.
        v (Tensor3): Values.
        fwd (AttentionPartial): The forward result of the same inputs.
        d_out (Tensor3): Gradient of the output.
        layout (HeadLayout): The head layout.
        mask (MaskSpec | np.ndarray): The mask used in the forward.
        q_pos (np.ndarray | None, optional): Global query positions.
        k_pos (np.ndarray | None, optional): Global key positions.

    Returns:
        KVGrads: dq, dk and dv.
    """
    if fwd["out"].shape != q.shape:
        raise ShapeError(
            f"forward output {fwd['out'].shape} does not match q {q.shape}")
    allow = resolve_allow(
        mask, q.shape[1], k.shape[1], q_pos=q_pos, k_pos=k_pos)
    delta = output_delta(d_out, fwd["out"])
    return block_backward(q, k, v, d_out, fwd["lse"], delta, layout, allow)
