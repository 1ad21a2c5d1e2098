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
Attention results over a subset of the keys. A partial carries the output
normalized over its keys and the log-sum-exp of its scores so that partials
over disjoint key sets can be merged exactly.
"""
from typing import TypedDict

import numpy as np

from cpbench.misc.errors import ShapeError
from cpbench.system.numcore import RowStats, Tensor3


AttentionPartial = TypedDict('AttentionPartial', {
    "out": Tensor3,
    "lse": RowStats,
})


def create_partial(out: Tensor3, lse: RowStats) -> AttentionPartial:
    if out.ndim != 3 or lse.shape != out.shape[:2]:
        raise ShapeError(
            f"lse shape {lse.shape} does not match output {out.shape}")
    return {
        "out": out,
        "lse": lse,
    }


def empty_partial(
        heads: int,
        rows: int,
        head_dim: int,
        *,
        dtype: type[np.floating] = np.float64) -> AttentionPartial:
    """The partial over no keys. It is the identity of `merge_partials`."""
    return create_partial(
        np.zeros((heads, rows, head_dim), dtype=dtype),
        np.full((heads, rows), -np.inf, dtype=dtype))


def merge_partials(
        a: AttentionPartial, b: AttentionPartial) -> AttentionPartial:
    """
    Combines two partials over disjoint key sets of the same queries.

    Args:
        a (AttentionPartial): The first partial.
        b (AttentionPartial): The second partial.

    Returns:
        AttentionPartial: The partial over the union of both key sets. Rows
        that are empty in both stay empty.
    """
    if a["out"].shape != b["out"].shape:
        raise ShapeError(
            f"cannot merge partials of shape {a['out'].shape} and "
            f"{b['out'].shape}")
    lse_a = a["lse"]
    lse_b = b["lse"]
    dtype = a["out"].dtype
    row_max = np.maximum(lse_a, lse_b)
    both_empty = ~np.isfinite(row_max)
    safe_max = np.where(both_empty, 0.0, row_max).astype(dtype)
    # exp(-inf) == 0 so an empty operand adds no weight
    total = np.exp(lse_a - safe_max) + np.exp(lse_b - safe_max)
    lse = np.where(
        both_empty,
        -np.inf,
        safe_max + np.log(np.where(both_empty, 1.0, total))).astype(dtype)
    safe_lse = np.where(both_empty, 0.0, lse)
    coeff_a = np.where(both_empty, 0.0, np.exp(lse_a - safe_lse))
    coeff_b = np.where(both_empty, 0.0, np.exp(lse_b - safe_lse))
    out = (
        a["out"] * coeff_a[..., None].astype(dtype)
        + b["out"] * coeff_b[..., None].astype(dtype))
    return create_partial(out, lse)
