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
from collections.abc import Callable

import numpy as np
import pytest

from cpbench.misc.errors import ShapeError
from cpbench.system.attnref.partial import (
    AttentionPartial,
    create_partial,
    empty_partial,
    merge_partials,
)
from cpbench.system.attnref.reference import (
    attention_backward,
    attention_forward,
    attention_partial,
    block_backward,
    expand_kv,
    output_delta,
    streaming_forward,
)
from cpbench.system.masks.export import to_dense
from cpbench.system.masks.pattern import MASK_PATTERNS, MaskPattern
from cpbench.system.numcore import create_head_layout
from test.util import (
    central_difference,
    example_mask,
    gqa,
    max_err,
    mha,
    random_inputs,
)


SEQ_LEN = 32
GRAD_COORDS = 20
GRAD_RTOL = 1e-6


def _key_partials(seed: int) -> list[AttentionPartial]:
    layout = gqa(4)
    q, k, v, _ = random_inputs(layout, 24, seed=seed)
    allow = to_dense(example_mask("CausalDocument", 24))
    res = []
    for start, end in [(0, 5), (5, 13), (13, 24)]:
        part = np.zeros_like(allow)
        part[:, start:end] = allow[:, start:end]
        res.append(attention_partial(q, k, v, layout, part))
    return res


def test_partial_validation() -> None:
    with pytest.raises(ShapeError):
        create_partial(np.zeros((2, 3, 4)), np.zeros((2, 4)))
    empty = empty_partial(2, 3, 4)
    assert np.isneginf(empty["lse"]).all()
    with pytest.raises(ShapeError):
        merge_partials(empty, empty_partial(2, 4, 4))


def test_merge_identity() -> None:
    for part in _key_partials(0):
        empty = empty_partial(*part["out"].shape)
        for res in [merge_partials(empty, part), merge_partials(part, empty)]:
            np.testing.assert_array_equal(res["out"], part["out"])
            np.testing.assert_array_equal(res["lse"], part["lse"])
    empty = empty_partial(2, 3, 4)
    both = merge_partials(empty, empty)
    assert np.isneginf(both["lse"]).all()
    assert not both["out"].any()


def test_merge_commutative_associative() -> None:
    a, b, c = _key_partials(1)
    ab = merge_partials(a, b)
    ba = merge_partials(b, a)
    np.testing.assert_array_equal(ab["out"], ba["out"])
    np.testing.assert_array_equal(ab["lse"], ba["lse"])
    left = merge_partials(ab, c)
    right = merge_partials(a, merge_partials(b, c))
    assert max_err(left["out"], right["out"]) <= 1e-12
    finite = np.isfinite(left["lse"])
    np.testing.assert_array_equal(finite, np.isfinite(right["lse"]))
    assert max_err(left["lse"][finite], right["lse"][finite]) <= 1e-12


def test_merge_matches_full_attention() -> None:
    layout = gqa(4)
    q, k, v, _ = random_inputs(layout, 24, seed=1)
    mask = example_mask("CausalDocument", 24)
    full = attention_forward(q, k, v, layout, mask)
    a, b, c = _key_partials(1)
    merged = merge_partials(merge_partials(a, b), c)
    assert max_err(merged["out"], full["out"]) <= 1e-12


def test_empty_rows() -> None:
    layout = mha(4)
    q, k, v, _ = random_inputs(layout, 8, seed=3)
    res = attention_forward(q, k, v, layout, np.zeros((8, 8), dtype=bool))
    assert not res["out"].any()
    assert np.isneginf(res["lse"]).all()


def test_shape_checks() -> None:
    layout = gqa(4)
    q, k, v, d_out = random_inputs(layout, 8, seed=0)
    mask = example_mask("Causal", 8)
    with pytest.raises(ShapeError):
        attention_forward(k, k, v, layout, mask)
    with pytest.raises(ShapeError):
        attention_forward(q, q, v, layout, mask)
    with pytest.raises(ShapeError):
        attention_forward(q, k, v[:, :4], layout, mask)
    with pytest.raises(ShapeError):
        attention_forward(q, k, v, layout, np.ones((8, 4), dtype=bool))
    fwd = attention_forward(q, k, v, layout, mask)
    with pytest.raises(ValueError):
        attention_backward(q, k, v, fwd, d_out[:, :4], layout, mask)


@pytest.mark.parametrize("pattern", MASK_PATTERNS)
def test_streaming_matches_forward(pattern: MaskPattern) -> None:
    layout = gqa(4)
    q, k, v, _ = random_inputs(layout, SEQ_LEN, seed=4)
    mask = example_mask(pattern, SEQ_LEN)
    full = attention_forward(q, k, v, layout, mask)
    for sizes in [[SEQ_LEN], [1] * SEQ_LEN, [5, 11, 16], [16, 0, 16]]:
        bounds = np.cumsum([0] + sizes)
        chunks = [
            (k[:, start:end], v[:, start:end])
            for start, end in zip(bounds[:-1], bounds[1:])
        ]
        res = streaming_forward(q, chunks, layout, mask)
        assert max_err(res["out"], full["out"]) <= 1e-12
        np.testing.assert_array_equal(
            np.isfinite(res["lse"]), np.isfinite(full["lse"]))


def test_streaming_without_chunks() -> None:
    layout = mha(4)
    q, _, _, _ = random_inputs(layout, 4, seed=0)
    res = streaming_forward(q, [], layout, np.zeros((4, 0), dtype=bool))
    assert not res["out"].any()
    with pytest.raises(ShapeError):
        streaming_forward(q, [], layout, np.zeros((4, 2), dtype=bool))


def test_block_backward_adds_up() -> None:
    layout = gqa(4)
    q, k, v, d_out = random_inputs(layout, SEQ_LEN, seed=5)
    mask = example_mask("ShareQuestion", SEQ_LEN)
    allow = to_dense(mask)
    fwd = attention_forward(q, k, v, layout, mask)
    d_q, d_k, d_v = attention_backward(q, k, v, fwd, d_out, layout, mask)
    delta = output_delta(d_out, fwd["out"])
    acc_q = np.zeros_like(d_q)
    for start, end in [(0, 7), (7, 20), (20, SEQ_LEN)]:
        part_q, part_k, part_v = block_backward(
            q,
            k[:, start:end],
            v[:, start:end],
            d_out,
            fwd["lse"],
            delta,
            layout,
            allow[:, start:end])
        acc_q += part_q
        assert max_err(part_k, d_k[:, start:end]) <= 1e-12
        assert max_err(part_v, d_v[:, start:end]) <= 1e-12
    assert max_err(acc_q, d_q) <= 1e-12


def test_gqa_matches_expanded_heads() -> None:
    layout = gqa(4)
    expanded = create_head_layout(8, 8, 4)
    q, k, v, d_out = random_inputs(layout, SEQ_LEN, seed=6)
    mask = example_mask("CausalBlockwise", SEQ_LEN)
    k_exp = expand_kv(k, layout)
    v_exp = expand_kv(v, layout)
    fwd = attention_forward(q, k, v, layout, mask)
    fwd_exp = attention_forward(q, k_exp, v_exp, expanded, mask)
    np.testing.assert_array_equal(fwd["out"], fwd_exp["out"])
    d_q, d_k, d_v = attention_backward(q, k, v, fwd, d_out, layout, mask)
    e_q, e_k, e_v = attention_backward(
        q, k_exp, v_exp, fwd_exp, d_out, expanded, mask)
    assert max_err(d_q, e_q) <= 1e-12
    assert max_err(d_k, e_k.reshape((2, 4, SEQ_LEN, 4)).sum(axis=1)) <= 1e-12
    assert max_err(d_v, e_v.reshape((2, 4, SEQ_LEN, 4)).sum(axis=1)) <= 1e-12


@pytest.mark.parametrize("pattern", MASK_PATTERNS)
def test_gradients_match_finite_differences(pattern: MaskPattern) -> None:
    layout = gqa(4)
    q, k, v, d_out = random_inputs(layout, SEQ_LEN, seed=7)
    mask = example_mask(pattern, SEQ_LEN)
    fwd = attention_forward(q, k, v, layout, mask)
    grads = attention_backward(q, k, v, fwd, d_out, layout, mask)
    rng = np.random.default_rng(8)
    inputs = [q, k, v]

    def loss_fn(pos: int) -> Callable[[np.ndarray], float]:

        def loss(arr: np.ndarray) -> float:
            args = list(inputs)
            args[pos] = arr
            out = attention_forward(
                args[0], args[1], args[2], layout, mask)["out"]
            return float(np.sum(out * d_out))

        return loss

    checked = 0
    for pos, (arr, grad) in enumerate(zip(inputs, grads)):
        fn = loss_fn(pos)
        for _ in range(GRAD_COORDS):
            index = tuple(int(rng.integers(0, dim)) for dim in arr.shape)
            numeric = central_difference(fn, arr, index)
            expected = float(grad[index])
            assert abs(numeric - expected) <= GRAD_RTOL * max(
                1.0, abs(expected)), f"{pattern} input {pos} at {index}"
            checked += 1
    assert checked >= 50
