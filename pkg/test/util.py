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
import os
from collections.abc import Callable

import numpy as np
import pandas as pd
import pandas.testing as pd_test

from cpbench.misc.io import open_read
from cpbench.misc.util import json_load
from cpbench.system.masks.pattern import (
    create_mask_spec,
    DOCUMENT_PATTERNS,
    MaskPattern,
    MaskSpec,
    WINDOW_PATTERNS,
)
from cpbench.system.numcore import create_head_layout, HeadLayout, Tensor3


DATA_FOLDER = os.path.join(os.path.dirname(__file__), "data")


def check_equal(a: pd.DataFrame, b: pd.DataFrame) -> None:
    pd_test.assert_frame_equal(a[sorted(a.columns)], b[sorted(b.columns)])


def load_data(fname: str) -> object:
    with open_read(os.path.join(DATA_FOLDER, fname), text=True) as fin:
        return json_load(fin)


def mha(head_dim: int = 8) -> HeadLayout:
    return create_head_layout(8, 8, head_dim)


def gqa(head_dim: int = 8) -> HeadLayout:
    return create_head_layout(8, 2, head_dim)


def random_inputs(
        layout: HeadLayout,
        seq_len: int,
        *,
        seed: int = 0) -> tuple[Tensor3, Tensor3, Tensor3, Tensor3]:
    """Standard normal q, k, v and output gradient."""
    rng = np.random.default_rng(seed)
    dim = layout["head_dim"]
    q_shape = (layout["q_heads"], seq_len, dim)
    kv_shape = (layout["kv_heads"], seq_len, dim)
    return (
        rng.standard_normal(q_shape),
        rng.standard_normal(kv_shape),
        rng.standard_normal(kv_shape),
        rng.standard_normal(q_shape),
    )


def max_err(a: np.ndarray, b: np.ndarray) -> float:
    assert a.shape == b.shape, f"{a.shape} != {b.shape}"
    return float(np.max(np.abs(a - b), initial=0.0))


def central_difference(
        fn: Callable[[np.ndarray], float],
        arr: np.ndarray,
        index: tuple[int, ...],
        *,
        eps: float = 1e-6) -> float:
    """Numeric derivative of `fn` with respect to one element of `arr`."""
    orig = arr[index]
    try:
        arr[index] = orig + eps
        upper = fn(arr)
        arr[index] = orig - eps
        lower = fn(arr)
    finally:
        arr[index] = orig
    return (upper - lower) / (2.0 * eps)


def example_mask(pattern: MaskPattern, seq_len: int) -> MaskSpec:
    """A fixed mask with uneven documents and a padded tail."""
    pad_len = seq_len // 8
    rlen = seq_len - pad_len
    doc_offsets = None
    prefix_lens = None
    if pattern in DOCUMENT_PATTERNS:
        cuts = sorted({rlen // 4, rlen // 2 + 3})
        doc_offsets = [0] + [cut for cut in cuts if 0 < cut < rlen] + [rlen]
    if pattern == "PrefixLmCausal":
        prefix_lens = [rlen // 4]
    elif pattern == "PrefixLmDocument":
        assert doc_offsets is not None
        prefix_lens = [
            (end - start) // 2
            for start, end in zip(doc_offsets[:-1], doc_offsets[1:])
        ]
    return create_mask_spec(
        pattern,
        seq_len,
        doc_offsets=doc_offsets,
        window=max(1, seq_len // 4) if pattern in WINDOW_PATTERNS else None,
        prefix_lens=prefix_lens,
        block_size=3 if pattern == "BlockCausalDocument" else None,
        global_len=2 if pattern == "GlobalSliding" else None,
        pad_len=pad_len)
