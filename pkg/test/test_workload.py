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
import numpy as np
import pytest

from cpbench.system.masks.count import count_unmasked, count_unmasked_brute
from cpbench.system.masks.export import to_dense
from cpbench.system.masks.pattern import MaskPattern
from cpbench.system.workload.packing import (
    batch_to_mask,
    create_packed_batch,
    pack_documents,
    packed_batch_from_json,
)
from cpbench.system.workload.sampling import (
    create_length_distribution,
    length_distribution_from_json,
    sample_lengths,
)


MIXTURE = {
    "components": [
        {"weight": 0.5, "kind": "uniform", "low": 8, "high": 64},
        {"weight": 0.3, "kind": "lognormal", "mu": 3.0, "sigma": 1.0},
        {"weight": 0.2, "kind": "point", "length": 17},
    ],
    "max_len": 128,
}


def test_sample_lengths() -> None:
    dist = length_distribution_from_json(MIXTURE)
    first = sample_lengths(dist, 7, 500)
    assert first == sample_lengths(dist, 7, 500)
    assert first != sample_lengths(dist, 8, 500)
    assert len(first) == 500
    assert all(1 <= length <= 128 for length in first)
    assert 17 in first
    point = create_length_distribution(
        [{"weight": 1.0, "kind": "point", "length": 5}], 10)
    assert sample_lengths(point, 0, 4) == [5, 5, 5, 5]
    with pytest.raises(ValueError):
        sample_lengths(point, 0, 0)


def test_length_distribution_validation() -> None:
    with pytest.raises(ValueError, match="sum to 1"):
        create_length_distribution(
            [{"weight": 0.5, "kind": "point", "length": 5}], 10)
    with pytest.raises(ValueError, match="uniform"):
        create_length_distribution(
            [{"weight": 1.0, "kind": "uniform", "low": 5, "high": 11}], 10)
    with pytest.raises(ValueError, match="lognormal"):
        create_length_distribution(
            [{"weight": 1.0, "kind": "lognormal", "mu": 1.0}], 10)
    with pytest.raises(ValueError):
        create_length_distribution([], 10)


def test_pack_documents() -> None:
    batches = pack_documents([3, 4, 2, 5], 8)
    assert batches == [
        {"context_window": 8, "doc_offsets": [0, 3, 7], "pad_len": 1},
        {"context_window": 8, "doc_offsets": [0, 2, 7], "pad_len": 1},
    ]
    assert pack_documents([8, 8], 8) == [
        {"context_window": 8, "doc_offsets": [0, 8], "pad_len": 0},
        {"context_window": 8, "doc_offsets": [0, 8], "pad_len": 0},
    ]
    assert not pack_documents([], 8)
    with pytest.raises(ValueError):
        pack_documents([3, 9], 8)
    with pytest.raises(ValueError):
        pack_documents([0], 8)


def test_packing_conserves_documents() -> None:
    dist = length_distribution_from_json(MIXTURE)
    lengths = sample_lengths(dist, 3, 300)
    batches = pack_documents(lengths, 256)
    packed: list[int] = []
    for batch in batches:
        offsets = batch["doc_offsets"]
        assert offsets[-1] + batch["pad_len"] == 256
        packed.extend(int(val) for val in np.diff(offsets))
    assert packed == lengths
    # a window is only closed when the next document does not fit
    for batch, nxt in zip(batches[:-1], batches[1:]):
        first_next = nxt["doc_offsets"][1]
        assert batch["pad_len"] < first_next


def test_packed_batch_validation() -> None:
    batch = packed_batch_from_json(
        {"context_window": 10, "doc_offsets": [0, 4, 9], "pad_len": 1})
    assert batch["doc_offsets"] == [0, 4, 9]
    with pytest.raises(ValueError, match="fill the window"):
        create_packed_batch(10, [0, 4, 9], 0)
    with pytest.raises(ValueError, match="empty document"):
        create_packed_batch(10, [0, 4, 4, 9], 1)
    with pytest.raises(ValueError):
        create_packed_batch(10, [1, 10], 0)


def test_batch_to_mask() -> None:
    batch = create_packed_batch(8, [0, 3, 7], 1)
    causal_doc = batch_to_mask(batch, "CausalDocument")
    assert causal_doc["pad_len"] == 1
    assert count_unmasked(causal_doc) == 6 + 10
    full = batch_to_mask(batch, "Full")
    assert full["doc_offsets"] is None
    assert count_unmasked(full) == 7 * 7
    prefix = batch_to_mask(batch, "PrefixLmDocument", prefix_lens=[1, 2])
    assert count_unmasked(prefix) == count_unmasked_brute(prefix)
    blocks = batch_to_mask(batch, "BlockCausalDocument", block_size=2)
    assert count_unmasked(blocks) == count_unmasked_brute(blocks)
    with pytest.raises(ValueError):
        batch_to_mask(batch, "FullSlidingWindow")


@pytest.mark.parametrize("pattern", [
    "Full",
    "Causal",
    "FullDocument",
    "CausalDocument",
    "ShareQuestion",
    "CausalBlockwise",
])
def test_padding_never_attends(pattern: MaskPattern) -> None:
    batches = pack_documents([5, 6, 4, 7, 3], 16)
    for batch in batches:
        dense = to_dense(batch_to_mask(batch, pattern))
        real = batch["doc_offsets"][-1]
        assert not dense[real:, :].any()
        assert not dense[:, real:].any()
        assert dense[:real, :real].any()
