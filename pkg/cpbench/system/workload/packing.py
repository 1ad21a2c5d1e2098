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
from typing import Any, TypedDict

from cpbench.system.masks.pattern import (
    create_mask_spec,
    DOCUMENT_PATTERNS,
    MaskPattern,
    MaskSpec,
)


PackedBatch = TypedDict('PackedBatch', {
    "context_window": int,
    "doc_offsets": list[int],
    "pad_len": int,
})


def create_packed_batch(
        context_window: int,
        doc_offsets: list[int],
        pad_len: int) -> PackedBatch:
    if len(doc_offsets) < 2 or doc_offsets[0] != 0:
        raise ValueError(
            f"doc_offsets must start at 0 and hold a document: {doc_offsets}")
    if any(
            end <= start
            for start, end in zip(doc_offsets[:-1], doc_offsets[1:])):
        raise ValueError(f"empty document in {doc_offsets}")
    if doc_offsets[-1] + pad_len != context_window or pad_len < 0:
        raise ValueError(
            f"documents ({doc_offsets[-1]}) and padding ({pad_len}) "
            f"must fill the window ({context_window})")
    return {
        "context_window": context_window,
        "doc_offsets": list(doc_offsets),
        "pad_len": pad_len,
    }


def packed_batch_from_json(obj: dict[str, Any]) -> PackedBatch:
    return create_packed_batch(
        int(obj["context_window"]),
        [int(off) for off in obj["doc_offsets"]],
        int(obj["pad_len"]))


def pack_documents(
        lengths: list[int], context_window: int) -> list[PackedBatch]:
    """
    Packs documents in arrival order. A new window is opened as soon as the
    next document does not fit the remaining space. Documents are never
    split and the tail of every window is padding.

    Args:
        lengths (list[int]): Document lengths in arrival order.
        context_window (int): Tokens per window.

    Returns:
        list[PackedBatch]: The windows.
    """
    res: list[PackedBatch] = []
    offsets: list[int] = [0]

    def close() -> None:
        res.append(create_packed_batch(
            context_window, offsets, context_window - offsets[-1]))

    for length in lengths:
        if not 1 <= length <= context_window:
            raise ValueError(
                f"document length {length} must be in [1, {context_window}]")
        if offsets[-1] + length > context_window:
            close()
            offsets = [0]
        offsets = offsets + [offsets[-1] + length]
    if len(offsets) > 1:
        close()
    return res


def batch_to_mask(
        batch: PackedBatch,
        pattern: MaskPattern,
        *,
        prefix_lens: list[int] | None = None,
        block_size: int | None = None) -> MaskSpec:
    """
    Builds the mask of a packed window. Padding becomes the masked tail of
    the mask.

    Args:
        batch (PackedBatch): The window.
        pattern (MaskPattern): A document pattern or Full or Causal.
        prefix_lens (list[int] | None, optional): Per document prefixes for
            PrefixLmDocument.
        block_size (int | None, optional): Block size for
            BlockCausalDocument.

    Returns:
        MaskSpec: The mask.
    """
    if pattern not in DOCUMENT_PATTERNS and pattern not in ("Full", "Causal"):
        raise ValueError(
            f"{pattern} is not a document pattern nor Full or Causal")
    doc_offsets = None
    if pattern in DOCUMENT_PATTERNS:
        doc_offsets = batch["doc_offsets"]
    return create_mask_spec(
        pattern,
        batch["context_window"],
        doc_offsets=doc_offsets,
        prefix_lens=prefix_lens,
        block_size=block_size,
        pad_len=batch["pad_len"])
