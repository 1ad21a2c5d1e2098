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
"""Materialized mask encodings: dense bit matrices and column ranges."""
from typing import TypedDict

import numpy as np

from cpbench.misc.env import envload_int
from cpbench.misc.errors import RepresentationError, SizeCapError
from cpbench.system.masks.pattern import allowed_matrix, MaskSpec


DEFAULT_DENSE_CAP = 8192
MAX_COLUMN_RANGES = 2
ASCII_PREVIEW_LIMIT = 128


ColumnRangeMask = TypedDict('ColumnRangeMask', {
    "seq_len": int,
    "ranges": list[list[tuple[int, int]]],
})


def get_dense_cap() -> int:
    return envload_int("CPBENCH_DENSE_CAP", default=DEFAULT_DENSE_CAP)


def check_dense_cap(seq_len: int, cap: int | None) -> None:
    if cap is None:
        cap = get_dense_cap()
    if seq_len > cap:
        raise SizeCapError(
            f"dense mask of {seq_len}x{seq_len} exceeds cap of {cap}")


def to_dense(spec: MaskSpec, *, cap: int | None = None) -> np.ndarray:
    seq_len = spec["seq_len"]
    check_dense_cap(seq_len, cap)
    pos = np.arange(seq_len)
    return allowed_matrix(spec, pos, pos)


def dense_to_column_ranges(dense: np.ndarray) -> ColumnRangeMask:
    """
    Encodes a square bit matrix as up to two row intervals per column.

    Args:
        dense (np.ndarray): The mask with rows as queries and columns as
            keys.

    Returns:
        ColumnRangeMask: The half-open [lo, hi) row intervals of each
        column.
    """
    seq_len = dense.shape[0]
    padded = np.zeros((seq_len + 2, dense.shape[1]), dtype=np.int8)
    padded[1:-1, :] = dense
    edges = np.diff(padded, axis=0)
    counts = np.count_nonzero(edges == 1, axis=0)
    bad = np.flatnonzero(counts > MAX_COLUMN_RANGES)
    if bad.size:
        col = int(bad[0])
        raise RepresentationError(col, int(counts[col]))
    ranges: list[list[tuple[int, int]]] = []
    for col in range(dense.shape[1]):
        starts = np.flatnonzero(edges[:, col] == 1)
        ends = np.flatnonzero(edges[:, col] == -1)
        ranges.append([
            (int(lo), int(hi))
            for lo, hi in zip(starts, ends)
        ])
    return {
        "seq_len": seq_len,
        "ranges": ranges,
    }


def to_column_ranges(
        spec: MaskSpec, *, cap: int | None = None) -> ColumnRangeMask:
    return dense_to_column_ranges(to_dense(spec, cap=cap))


def column_ranges_to_dense(mask: ColumnRangeMask) -> np.ndarray:
    seq_len = mask["seq_len"]
    res = np.zeros((seq_len, len(mask["ranges"])), dtype=np.bool_)
    for col, ranges in enumerate(mask["ranges"]):
        for lo, hi in ranges:
            res[lo:hi, col] = True
    return res


def render_ascii(spec: MaskSpec) -> str:
    seq_len = spec["seq_len"]
    if seq_len > ASCII_PREVIEW_LIMIT:
        raise SizeCapError(
            f"preview is limited to {ASCII_PREVIEW_LIMIT} tokens "
            f"got {seq_len}")
    dense = to_dense(spec)
    return "\n".join(
        "".join("#" if cell else "." for cell in row)
        for row in dense)
