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
The twelve static mask patterns. A mask is a declarative `MaskSpec` and is
evaluated on demand for arbitrary query and key positions.

Padding is a trailing region of `pad_len` tokens. Pad tokens attend to
nothing and are attended by nothing, in every pattern.
"""
from typing import Any, get_args, Literal, TypeAlias, TypedDict

import numpy as np

from cpbench.misc.util import maybe_int, maybe_list


MaskPattern: TypeAlias = Literal[
    "Full",
    "Causal",
    "FullSlidingWindow",
    "CausalSlidingWindow",
    "FullDocument",
    "CausalDocument",
    "ShareQuestion",
    "CausalBlockwise",
    "GlobalSliding",
    "PrefixLmCausal",
    "PrefixLmDocument",
    "BlockCausalDocument",
]
MASK_PATTERNS: tuple[MaskPattern, ...] = get_args(MaskPattern)


DOCUMENT_PATTERNS: frozenset[MaskPattern] = frozenset([
    "FullDocument",
    "CausalDocument",
    "ShareQuestion",
    "CausalBlockwise",
    "PrefixLmDocument",
    "BlockCausalDocument",
])
WINDOW_PATTERNS: frozenset[MaskPattern] = frozenset([
    "FullSlidingWindow",
    "CausalSlidingWindow",
    "GlobalSliding",
])
PREFIX_PATTERNS: frozenset[MaskPattern] = frozenset([
    "PrefixLmCausal",
    "PrefixLmDocument",
])


MaskSpec = TypedDict('MaskSpec', {
    "pattern": MaskPattern,
    "seq_len": int,
    "doc_offsets": list[int] | None,
    "window": int | None,
    "prefix_lens": list[int] | None,
    "block_size": int | None,
    "global_len": int | None,
    "pad_len": int,
})


def get_mask_pattern(text: str) -> MaskPattern:
    if text not in MASK_PATTERNS:
        raise ValueError(f"unknown mask pattern {text} not in {MASK_PATTERNS}")
    return text  # type: ignore


def real_len(spec: MaskSpec) -> int:
    return spec["seq_len"] - spec["pad_len"]


def doc_lengths(spec: MaskSpec) -> list[int]:
    offsets = spec["doc_offsets"]
    if offsets is None:
        return [real_len(spec)]
    return [
        end - start
        for start, end in zip(offsets[:-1], offsets[1:])
    ]


def create_mask_spec(
        pattern: MaskPattern,
        seq_len: int,
        *,
        doc_offsets: list[int] | None = None,
        window: int | None = None,
        prefix_lens: list[int] | None = None,
        block_size: int | None = None,
        global_len: int | None = None,
        pad_len: int = 0) -> MaskSpec:
    """
    Creates a validated mask spec.

    Args:
        pattern (MaskPattern): The pattern.
        seq_len (int): Total tokens including padding.
        doc_offsets (list[int] | None, optional): Document boundaries.
            Starts at 0 and ends at the start of the padding. Required by
            the document patterns.
        window (int | None, optional): Sliding window in tokens.
        prefix_lens (list[int] | None, optional): Prefix length per
            document. PrefixLmCausal uses only the first entry.
        block_size (int | None, optional): Block size in tokens for
            BlockCausalDocument.
        global_len (int | None, optional): Number of leading global tokens
            for GlobalSliding.
        pad_len (int, optional): Trailing pad tokens.

    Returns:
        MaskSpec: The spec.
    """
    pattern = get_mask_pattern(pattern)
    if seq_len < 1:
        raise ValueError(f"seq_len must be positive: {seq_len}")
    if pad_len < 0 or pad_len > seq_len:
        raise ValueError(f"pad_len {pad_len} must be in [0, {seq_len}]")
    rlen = seq_len - pad_len
    if pattern in DOCUMENT_PATTERNS:
        if doc_offsets is None:
            raise ValueError(f"{pattern} requires doc_offsets")
    if doc_offsets is not None:
        doc_offsets = [int(off) for off in doc_offsets]
        if len(doc_offsets) < 2:
            raise ValueError(
                f"doc_offsets need at least one document: {doc_offsets}")
        if doc_offsets[0] != 0 or doc_offsets[-1] != rlen:
            raise ValueError(
                f"doc_offsets must start at 0 and end at {rlen}: "
                f"{doc_offsets}")
        if any(
                end <= start
                for start, end in zip(doc_offsets[:-1], doc_offsets[1:])):
            raise ValueError(
                f"doc_offsets must be strictly increasing: {doc_offsets}")
    if pattern in WINDOW_PATTERNS:
        if window is None or window < 1:
            raise ValueError(f"{pattern} requires window >= 1 got {window}")
    if pattern == "GlobalSliding":
        if global_len is None or global_len < 0 or global_len > seq_len:
            raise ValueError(
                f"{pattern} requires global_len in [0, {seq_len}] "
                f"got {global_len}")
    if pattern == "BlockCausalDocument":
        if block_size is None or block_size < 1:
            raise ValueError(
                f"{pattern} requires block_size >= 1 got {block_size}")
    if pattern in PREFIX_PATTERNS:
        if not prefix_lens:
            raise ValueError(f"{pattern} requires prefix_lens")
        prefix_lens = [int(plen) for plen in prefix_lens]
        if pattern == "PrefixLmCausal":
            limits = [rlen]
            prefix_lens = prefix_lens[:1]
        else:
            assert doc_offsets is not None
            limits = [
                end - start
                for start, end in zip(doc_offsets[:-1], doc_offsets[1:])
            ]
            if len(prefix_lens) != len(limits):
                raise ValueError(
                    f"expected {len(limits)} prefix_lens got {prefix_lens}")
        for plen, limit in zip(prefix_lens, limits):
            if plen < 0 or plen > limit:
                raise ValueError(
                    f"prefix length {plen} must be in [0, {limit}]")
    return {
        "pattern": pattern,
        "seq_len": seq_len,
        "doc_offsets": doc_offsets,
        "window": window,
        "prefix_lens": prefix_lens,
        "block_size": block_size,
        "global_len": global_len,
        "pad_len": pad_len,
    }


def _doc_index(offsets: np.ndarray, pos: np.ndarray) -> np.ndarray:
    return np.searchsorted(offsets, pos, side="right") - 1


def allowed_matrix(
        spec: MaskSpec, q_pos: np.ndarray, k_pos: np.ndarray) -> np.ndarray:
    """
    Evaluates the mask for all combinations of the given global positions.

    Args:
        spec (MaskSpec): The mask.
        q_pos (np.ndarray): Query positions.
        k_pos (np.ndarray): Key positions.

    Returns:
        np.ndarray: Boolean matrix of shape (len(q_pos), len(k_pos)).
    """
    pattern = spec["pattern"]
    rlen = real_len(spec)
    qx = np.asarray(q_pos, dtype=np.int64)[:, None]
    kx = np.asarray(k_pos, dtype=np.int64)[None, :]
    real = (qx < rlen) & (kx < rlen)
    causal = kx <= qx
    if pattern == "Full":
        res = np.ones_like(causal)
    elif pattern == "Causal":
        res = causal
    elif pattern == "FullSlidingWindow":
        res = np.abs(qx - kx) < int(spec["window"] or 0)
    elif pattern == "CausalSlidingWindow":
        res = causal & (qx - int(spec["window"] or 0) < kx)
    elif pattern == "GlobalSliding":
        glen = int(spec["global_len"] or 0)
        res = (
            (qx < glen)
            | (kx < glen)
            | (np.abs(qx - kx) < int(spec["window"] or 0)))
    elif pattern == "PrefixLmCausal":
        prefix = (spec["prefix_lens"] or [0])[0]
        res = (kx < prefix) | causal
    else:
        offsets = np.asarray(spec["doc_offsets"], dtype=np.int64)
        last_doc = len(offsets) - 2
        qdoc = _doc_index(offsets, qx)
        kdoc = _doc_index(offsets, kx)
        same = qdoc == kdoc
        if pattern == "FullDocument":
            res = same
        elif pattern == "CausalDocument":
            res = same & causal
        elif pattern == "ShareQuestion":
            res = (kdoc == 0) | (same & causal)
        elif pattern == "CausalBlockwise":
            res = (same | (qdoc == last_doc)) & causal
        elif pattern == "PrefixLmDocument":
            prefixes = np.asarray(spec["prefix_lens"], dtype=np.int64)
            kdoc_safe = np.clip(kdoc, 0, last_doc)
            in_prefix = (kx - offsets[kdoc_safe]) < prefixes[kdoc_safe]
            res = same & (in_prefix | causal)
        elif pattern == "BlockCausalDocument":
            block = int(spec["block_size"] or 1)
            qdoc_safe = np.clip(qdoc, 0, last_doc)
            kdoc_safe = np.clip(kdoc, 0, last_doc)
            qblock = (qx - offsets[qdoc_safe]) // block
            kblock = (kx - offsets[kdoc_safe]) // block
            res = same & (kblock <= qblock)
        else:
            raise ValueError(f"unknown pattern {pattern}")
    return np.broadcast_to(res, real.shape) & real


def is_allowed(spec: MaskSpec, qix: int, kix: int) -> bool:
    seq_len = spec["seq_len"]
    if not 0 <= qix < seq_len or not 0 <= kix < seq_len:
        raise ValueError(f"position ({qix}, {kix}) outside [0, {seq_len})")
    return bool(allowed_matrix(spec, np.array([qix]), np.array([kix]))[0, 0])


def mask_to_json(spec: MaskSpec) -> dict[str, Any]:
    return {
        key: value
        for key, value in spec.items()
        if value is not None
    }


def mask_from_json(obj: dict[str, Any]) -> MaskSpec:
    return create_mask_spec(
        get_mask_pattern(obj["pattern"]),
        int(obj["seq_len"]),
        doc_offsets=maybe_list(obj.get("doc_offsets")),
        window=maybe_int(obj.get("window")),
        prefix_lens=maybe_list(obj.get("prefix_lens")),
        block_size=maybe_int(obj.get("block_size")),
        global_len=maybe_int(obj.get("global_len")),
        pad_len=int(obj.get("pad_len", 0)))
