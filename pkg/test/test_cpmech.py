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
from typing import Any

import numpy as np
import pytest

from cpbench.misc.errors import (
    CapabilityError,
    DivisibilityError,
    MissingStateError,
    SizeCapError,
)
from cpbench.system.cpmech.common import (
    get_mechanism,
    kv_replication,
    Mechanism,
    MECHANISMS,
)
from cpbench.system.cpmech.driver import (
    max_abs_error,
    MechanismRun,
    run_mechanism,
    run_oracle,
)
from cpbench.system.cpmech.loongtrain import (
    loongtrain_backward,
    PREFETCH_STREAM,
)
from cpbench.system.cpmech.meta import (
    count_stage_pairs,
    create_varlen_meta,
    precompute_varlen_meta,
    VARLEN_PATTERNS,
)
from cpbench.system.cpmech.plan import (
    create_process_grid,
    default_grid,
    grid_from_json,
    plan_contiguous,
    plan_grouped,
    plan_zigzag,
    ProcessGrid,
    shard,
    unshard,
)
from cpbench.system.cpmech.ring import ring_p2p_backward
from cpbench.system.cpmech.ulysses import ulysses_backward
from cpbench.system.cpmech.usp import usp_backward
from cpbench.system.fabric.topology import create_topology
from cpbench.system.masks.count import attention_flops, count_unmasked
from cpbench.system.masks.pattern import (
    create_mask_spec,
    MaskPattern,
    MaskSpec,
)
from cpbench.system.numcore import create_head_layout, HeadLayout
from cpbench.system.report.metrics import effective_tflops
from cpbench.system.report.verify import oracle_runs
from cpbench.system.workload.packing import create_packed_batch
from test.util import example_mask, gqa, max_err, mha, random_inputs


FORWARD_TOL = 1e-10
BACKWARD_TOL = 1e-9
F64 = 8


def _mask(pattern: MaskPattern, seq_len: int) -> MaskSpec:
    offsets = None
    if pattern in ("FullDocument", "CausalDocument"):
        offsets = [0, seq_len // 4 - 3, seq_len // 2 + 5, seq_len]
    return create_mask_spec(pattern, seq_len, doc_offsets=offsets)


def _run(
        mechanism: Mechanism,
        world_size: int,
        layout: HeadLayout,
        mask: MaskSpec,
        *,
        grid: ProcessGrid | None = None,
        backward: bool = True,
        seed: int = 0) -> tuple[MechanismRun, float]:
    q, k, v, d_out = random_inputs(layout, mask["seq_len"], seed=seed)
    run = run_mechanism(
        mechanism,
        create_topology(world_size),
        q,
        k,
        v,
        layout,
        mask,
        grid=grid,
        d_out=d_out if backward else None)
    oracle = run_oracle(
        q, k, v, layout, mask, d_out=d_out if backward else None)
    return run, max_abs_error(run, oracle)


@pytest.mark.parametrize("world_size", [2, 4, 8])
@pytest.mark.parametrize("pattern", VARLEN_PATTERNS)
def test_matches_oracle(world_size: int, pattern: MaskPattern) -> None:
    mask = _mask(pattern, 64)
    for layout in [mha(), gqa()]:
        q, k, v, d_out = random_inputs(layout, 64, seed=world_size)
        oracle = run_oracle(q, k, v, layout, mask, d_out=d_out)
        assert oracle["grads"] is not None
        for mechanism, grid in oracle_runs(world_size):
            run = run_mechanism(
                mechanism,
                create_topology(world_size),
                q,
                k,
                v,
                layout,
                mask,
                grid=grid,
                d_out=d_out)
            assert (
                max_err(run["out"], oracle["partial"]["out"])
                <= FORWARD_TOL)
            assert run["grads"] is not None
            for mine, ref in zip(run["grads"], oracle["grads"]):
                assert max_err(mine, ref) <= BACKWARD_TOL


@pytest.mark.parametrize("mechanism", MECHANISMS)
def test_matches_oracle_long(mechanism: Mechanism) -> None:
    grid = create_process_grid(8, 2, inner_window=2)
    assert grid["outer_window"] == 2
    patterns: list[MaskPattern] = ["Causal", "CausalDocument"]
    for pattern in patterns:
        _, err = _run(mechanism, 8, gqa(), _mask(pattern, 256), grid=grid)
        assert err <= BACKWARD_TOL


def test_oracle_runs() -> None:
    assert [grid["outer_window"] for _, grid in oracle_runs(2)] == [1] * 5
    mechanism, grid = oracle_runs(8)[-1]
    assert mechanism == "loongtrain"
    assert grid["inner_window"] == 2
    assert grid["outer_window"] == 2


@pytest.mark.parametrize("inner_window", [1, 2, 4])
def test_loongtrain_windows(inner_window: int) -> None:
    grid = create_process_grid(8, 2, inner_window=inner_window)
    patterns: list[MaskPattern] = ["Causal", "FullDocument"]
    for pattern in patterns:
        _, err = _run(
            "loongtrain", 8, mha(), _mask(pattern, 128), grid=grid)
        assert err <= BACKWARD_TOL
    single = create_process_grid(8, 1, inner_window=inner_window)
    _, err = _run(
        "loongtrain", 8, gqa(), _mask("CausalDocument", 128), grid=single)
    assert err <= BACKWARD_TOL


@pytest.mark.parametrize("inner_window", [1, 2, 4])
def test_loongtrain_prefetch(inner_window: int) -> None:
    grid = create_process_grid(8, 2, inner_window=inner_window)
    run, _ = _run("loongtrain", 8, mha(), _mask("Causal", 128), grid=grid)
    assert run["backward"] is not None
    for log in [run["forward"]["log"], run["backward"]["log"]]:
        prefetch = [
            event
            for event in log.get_events()
            if event["stream"] == PREFETCH_STREAM
        ]
        assert all(not event["blocking"] for event in prefetch)
        for rank in range(8):
            sent = [event for event in prefetch if event["src"] == rank]
            assert len(sent) == grid["outer_window"] - 1


def test_loongtrain_single_window() -> None:
    layout = gqa()
    mask = _mask("CausalDocument", 64)
    ring, _ = _run("ring_p2p", 4, layout, mask)
    loong, err = _run(
        "loongtrain",
        4,
        layout,
        mask,
        grid=create_process_grid(4, 1, inner_window=4))
    assert err <= BACKWARD_TOL
    np.testing.assert_array_equal(ring["out"], loong["out"])
    assert (
        ring["forward"]["log"].to_json()
        == loong["forward"]["log"].to_json())
    assert ring["backward"] is not None and loong["backward"] is not None
    ring_events = ring["backward"]["log"].get_events()
    loong_events = loong["backward"]["log"].get_events()
    assert not any(
        event["stream"] == PREFETCH_STREAM
        for event in loong_events + loong["forward"]["log"].get_events())
    block = _kv_bytes(layout, 64) // 4
    assert {event["bytes"] for event in ring_events} == {block}
    assert {event["bytes"] for event in loong_events} == {block}
    # the last hop returns the gradients to their owners
    assert len(loong_events) == len(ring_events) + 4
    assert (
        loong["backward"]["log"].total_bytes()
        == ring["backward"]["log"].total_bytes() + 4 * block)


def test_gradients_return_to_owners() -> None:
    mask = _mask("CausalDocument", 64)
    cases: list[tuple[Mechanism, int, ProcessGrid | None]] = [
        ("ring_p2p", 4, None),
        ("ring_p2p", 8, None),
        ("usp", 8, create_process_grid(8, 2)),
        ("loongtrain", 8, create_process_grid(8, 2, inner_window=2)),
        ("loongtrain", 8, create_process_grid(8, 1, inner_window=2)),
        ("loongtrain", 4, create_process_grid(4, 1, inner_window=4)),
    ]
    for mechanism, world_size, grid in cases:
        run, err = _run(mechanism, world_size, gqa(), mask, grid=grid)
        assert err <= BACKWARD_TOL
        assert run["backward"] is not None
        assert run["backward"]["grad_owners"] == list(range(world_size))


def test_exposure_flags() -> None:
    layout = mha()
    mask = _mask("Full", 64)
    q, k, v, _ = random_inputs(layout, 64)
    slow = create_topology(4, device_flops_rate=1e6)
    run = run_mechanism("ring_p2p", slow, q, k, v, layout, mask)
    compute = {
        (entry["rank"], entry["stage"]): entry["compute_time"]
        for entry in run["forward"]["timeline"].get_entries()
    }
    events = run["forward"]["log"].get_events()
    assert len(events) == 4 * 3
    for event in events:
        assert not event["blocking"]
        assert compute[(event["src"], event["stage"])] >= (
            event["modeled_time"])
        assert not event["exposed"]
    fast = create_topology(4, device_flops_rate=1e30)
    run = run_mechanism("ring_p2p", fast, q, k, v, layout, mask)
    assert all(
        event["exposed"] for event in run["forward"]["log"].get_events())
    for topology in [slow, fast]:
        run = run_mechanism("ulysses", topology, q, k, v, layout, mask)
        events = run["forward"]["log"].get_events()
        assert events
        for event in events:
            assert event["kind"] == "all_to_all"
            assert event["blocking"]
            assert event["exposed"]


@pytest.mark.parametrize("pattern", [
    "FullSlidingWindow",
    "ShareQuestion",
    "GlobalSliding",
    "BlockCausalDocument",
])
def test_head_parallel_patterns(pattern: MaskPattern) -> None:
    mask = example_mask(pattern, 64)
    for mechanism in ["ulysses", "ring_allgather"]:
        _, err = _run(get_mechanism(mechanism), 4, gqa(), mask)
        assert err <= BACKWARD_TOL
    with pytest.raises(CapabilityError):
        _run("ring_p2p", 4, gqa(), mask)


def test_ulysses_is_exact() -> None:
    mask = _mask("CausalDocument", 64)
    layout = gqa()
    q, k, v, _ = random_inputs(layout, 64, seed=3)
    run = run_mechanism(
        "ulysses", create_topology(4), q, k, v, layout, mask)
    oracle = run_oracle(q, k, v, layout, mask)
    np.testing.assert_array_equal(run["out"], oracle["partial"]["out"])
    run = run_mechanism(
        "ring_allgather", create_topology(4), q, k, v, layout, mask)
    np.testing.assert_array_equal(run["out"], oracle["partial"]["out"])


def test_padding_for_plan() -> None:
    mask = _mask("Causal", 60)
    run, err = _run("ring_p2p", 4, mha(), mask)
    assert run["mask"]["seq_len"] == 64
    assert run["mask"]["pad_len"] == 4
    assert run["out"].shape == (8, 60, 8)
    assert err <= BACKWARD_TOL


def _kv_bytes(layout: HeadLayout, seq_len: int) -> int:
    return 2 * layout["kv_heads"] * seq_len * layout["head_dim"] * F64


def test_ring_volume() -> None:
    layout = mha()
    world_size = 4
    run, _ = _run(
        "ring_p2p", world_size, layout, _mask("Causal", 64), backward=False)
    log = run["forward"]["log"]
    per_stage = _kv_bytes(layout, 64) // world_size
    for rank in range(world_size):
        for stage in range(world_size - 1):
            assert log.bytes_sent(rank, stage=stage) == per_stage
            assert log.bytes_received(rank, stage=stage) == per_stage
        assert log.bytes_sent(rank, stage=world_size - 1) == 0
    assert log.total_bytes() == (world_size - 1) * _kv_bytes(layout, 64)


def test_ulysses_volume() -> None:
    layout = mha()
    world_size = 4
    rows = 64 // world_size
    run, _ = _run(
        "ulysses", world_size, layout, _mask("Full", 64), backward=False)
    log = run["forward"]["log"]
    local_qkv = 3 * layout["q_heads"] * rows * layout["head_dim"] * F64
    local_out = (
        layout["q_heads"] * rows * layout["head_dim"] * F64
        + layout["q_heads"] * rows * F64)
    for rank in range(world_size):
        assert log.bytes_sent(rank, stage=0) == local_qkv * 3 // 4
        assert log.bytes_sent(rank, stage=1) == 0
        assert log.bytes_sent(rank, stage=2) == local_out * 3 // 4
    kinds = {event["kind"] for event in log.get_events()}
    assert kinds == {"all_to_all"}


def test_usp_volume() -> None:
    layout = mha()
    grid = create_process_grid(4, 2)
    run, _ = _run(
        "usp", 4, layout, _mask("Causal", 64), grid=grid, backward=False)
    log = run["forward"]["log"]
    local_qkv = 3 * layout["q_heads"] * 16 * layout["head_dim"] * F64
    for rank in range(4):
        assert log.bytes_sent(rank, stage=0) == local_qkv // 2
    p2p = [event for event in log.get_events() if event["kind"] == "p2p"]
    # every rank sends one hop of its group key values for half the heads
    assert len(p2p) == 4
    assert {event["bytes"] for event in p2p} == {
        _kv_bytes(layout, 32) // 2}


@pytest.mark.parametrize("world_size", [8, 16])
def test_usp_group_volume(world_size: int) -> None:
    layout = mha()
    seq_len = 128
    uly = 8
    grid = create_process_grid(world_size, uly)
    run, _ = _run(
        "usp",
        world_size,
        layout,
        _mask("Causal", seq_len),
        grid=grid,
        backward=False)
    log = run["forward"]["log"]
    total = 3 * layout["q_heads"] * seq_len * layout["head_dim"] * F64
    local = total // world_size
    for rank in range(world_size):
        assert log.bytes_sent(rank, stage=0) == local * (uly - 1) // uly
    for first in range(0, world_size, uly):
        group = range(first, first + uly)
        assert sum(log.bytes_sent(rank, stage=0) for rank in group) == (
            (uly - 1) * total // world_size)
    for event in log.get_events():
        if event["kind"] == "all_to_all":
            assert event["group"] is not None
            assert len(event["group"]) == uly
            assert event["src"] // uly == event["dst"] // uly


def test_allgather_volume() -> None:
    layout = gqa()
    run, _ = _run(
        "ring_allgather", 4, layout, _mask("Full", 64), backward=False)
    log = run["forward"]["log"]
    for rank in range(4):
        assert log.bytes_received(rank, stage=0) == (
            _kv_bytes(layout, 64) * 3 // 4)
    q, k, v, _ = random_inputs(layout, 64)
    with pytest.raises(SizeCapError):
        run_mechanism(
            "ring_allgather",
            create_topology(4),
            q,
            k,
            v,
            layout,
            _mask("Full", 64),
            kv_cap=32)


def test_degenerate_grids() -> None:
    mask = _mask("CausalDocument", 32)
    layout = gqa()
    single = create_process_grid(1, 1)
    for mechanism in MECHANISMS:
        run, err = _run(mechanism, 1, layout, mask, grid=single)
        assert err <= 1e-12
        assert run["forward"]["log"].total_bytes() == 0
    ring, _ = _run("ring_p2p", 4, layout, mask, backward=False)
    usp_ring, _ = _run(
        "usp", 4, layout, mask, grid=create_process_grid(4, 1),
        backward=False)
    np.testing.assert_array_equal(ring["out"], usp_ring["out"])
    assert (
        ring["forward"]["log"].to_json()
        == usp_ring["forward"]["log"].to_json())
    uly, _ = _run("ulysses", 2, layout, mask, backward=False)
    usp_uly, _ = _run(
        "usp", 2, layout, mask, grid=create_process_grid(2, 2),
        backward=False)
    assert max_err(uly["out"], usp_uly["out"]) <= 1e-12
    assert (
        uly["forward"]["log"].total_bytes()
        == usp_uly["forward"]["log"].total_bytes())


def test_plans() -> None:
    assert plan_zigzag(16, 2)["ranges"] == [
        [(0, 4), (12, 16)],
        [(4, 8), (8, 12)],
    ]
    assert plan_zigzag(10, 1)["ranges"] == [[(0, 10)]]
    assert plan_contiguous(12, 3)["ranges"] == [
        [(0, 4)], [(4, 8)], [(8, 12)]]
    grouped = plan_grouped(32, create_process_grid(4, 2))
    assert grouped["ranges"] == [
        [(0, 8)], [(24, 32)], [(8, 16)], [(16, 24)]]
    plan = plan_zigzag(32, 4)
    arr = np.arange(2 * 32 * 3, dtype=np.float64).reshape((2, 32, 3))
    np.testing.assert_array_equal(unshard(plan, shard(plan, arr)), arr)
    with pytest.raises(DivisibilityError):
        plan_zigzag(10, 2)
    with pytest.raises(DivisibilityError):
        plan_contiguous(10, 4)
    with pytest.raises(DivisibilityError):
        create_process_grid(8, 3)
    with pytest.raises(DivisibilityError):
        create_process_grid(8, 2, inner_window=3)


def test_grid_fits_node() -> None:
    assert create_process_grid(16, 8, ranks_per_node=8)["ring_size"] == 2
    with pytest.raises(ValueError, match="exceeds"):
        create_process_grid(16, 16, ranks_per_node=8)
    topology = create_topology(4, ranks_per_node=2)
    with pytest.raises(ValueError, match="exceeds"):
        grid_from_json(topology, {"ulysses_size": 4})
    assert grid_from_json(topology, {"ulysses_size": 2})["ring_size"] == 2
    layout = mha()
    mask = _mask("Causal", 32)
    q, k, v, _ = random_inputs(layout, 32)
    with pytest.raises(ValueError, match="exceeds"):
        run_mechanism(
            "usp",
            topology,
            q,
            k,
            v,
            layout,
            mask,
            grid=create_process_grid(4, 4))
    # plain Ulysses spans every rank
    run = run_mechanism("ulysses", topology, q, k, v, layout, mask)
    assert run["grid"]["ulysses_size"] == 4
    assert default_grid(topology)["ulysses_size"] == 2


def test_default_grid() -> None:
    grid = default_grid(create_topology(32))
    assert grid == {
        "ulysses_size": 8,
        "ring_size": 4,
        "inner_window": 2,
        "outer_window": 2,
    }
    assert default_grid(create_topology(4))["ring_size"] == 1


def test_zigzag_balance() -> None:
    mask = _mask("Causal", 256)
    for world_size in [2, 4, 8]:
        meta = create_varlen_meta(plan_zigzag(256, world_size), mask)
        totals = [sum(row) for row in count_stage_pairs(meta)]
        assert len(set(totals)) == 1
        assert sum(totals) == count_unmasked(mask)
        contiguous = create_varlen_meta(plan_contiguous(256, world_size), mask)
        skewed = [sum(row) for row in count_stage_pairs(contiguous)]
        assert sum(skewed) == count_unmasked(mask)
        assert skewed[0] < skewed[-1]


def test_precomputed_meta() -> None:
    batch = create_packed_batch(32, [0, 5, 20, 28], 4)
    plan = plan_zigzag(32, 2)
    meta = precompute_varlen_meta(plan, batch, "CausalDocument")
    pairs = count_stage_pairs(meta)
    assert sum(map(sum, pairs)) == 15 + 120 + 36
    for q_unit in range(2):
        for kv_unit in range(2):
            allow = meta.allow(q_unit, kv_unit)
            assert int(allow.sum()) == meta.count_pairs(q_unit, kv_unit)


def test_errors() -> None:
    with pytest.raises(ValueError):
        get_mechanism("tree")
    with pytest.raises(CapabilityError):
        kv_replication(create_head_layout(6, 6, 8), 4)
    assert kv_replication(gqa(), 4) == 2
    assert kv_replication(gqa(), 2) == 1
    with pytest.raises(CapabilityError):
        _run("ulysses", 4, create_head_layout(6, 3, 8), _mask("Full", 64))
    with pytest.raises(MissingStateError):
        ring_p2p_backward(None, [])
    run, _ = _run("ulysses", 2, mha(), _mask("Full", 16), backward=False)
    with pytest.raises(MissingStateError):
        ring_p2p_backward(run["forward"], [])
    d_out = [part["out"] for part in run["forward"]["outputs"]]
    ulysses_backward(run["forward"], d_out)


def _rebuilt_meta(*args: Any, **kwargs: Any) -> None:
    raise AssertionError("the backward must reuse the forward mask structure")


def test_backward_reuses_meta(monkeypatch: pytest.MonkeyPatch) -> None:
    mask = _mask("CausalDocument", 64)
    cases: list[tuple[Mechanism, ProcessGrid | None, str]] = [
        ("ring_p2p", None, "cpbench.system.cpmech.ring"),
        ("usp", create_process_grid(4, 2), "cpbench.system.cpmech.usp"),
        (
            "loongtrain",
            create_process_grid(4, 1, inner_window=2),
            "cpbench.system.cpmech.usp",
        ),
    ]
    backwards = {
        "ring_p2p": ring_p2p_backward,
        "usp": usp_backward,
        "loongtrain": loongtrain_backward,
    }
    for mechanism, grid, module in cases:
        run, _ = _run(mechanism, 4, gqa(), mask, grid=grid, backward=False)
        fwd = run["forward"]
        assert fwd["meta"] is not None
        d_out = [part["out"] for part in fwd["outputs"]]
        backward = backwards[mechanism]
        expected = backward(fwd, d_out)
        with monkeypatch.context() as patch:
            patch.setattr(f"{module}.create_varlen_meta", _rebuilt_meta)
            res = backward(fwd, d_out)
        assert res["grad_owners"] == expected["grad_owners"]
        for mine, ref in zip(res["grads"], expected["grads"]):
            for left, right in zip(mine, ref):
                np.testing.assert_array_equal(left, right)
        stripped = fwd.copy()
        stripped["meta"] = None
        with pytest.raises(MissingStateError, match="mask structure"):
            backward(stripped, d_out)


def test_scaling_trend() -> None:
    layout = create_head_layout(8, 8, 8)
    world_size = 32
    topology = create_topology(world_size)

    def tflops(mechanism: Mechanism, pattern: MaskPattern) -> float:
        mask = create_mask_spec(pattern, 2048)
        q, k, v, _ = random_inputs(layout, 2048, seed=1)
        run = run_mechanism(mechanism, topology, q, k, v, layout, mask)
        return effective_tflops(
            attention_flops(mask, layout, "forward"),
            run["forward"]["timeline"],
            world_size)

    ring_causal = tflops("ring_p2p", "Causal")
    assert tflops("usp", "Causal") >= ring_causal
    assert tflops("ring_p2p", "Full") >= ring_causal
