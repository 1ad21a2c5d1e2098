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
import json
import os
from pathlib import Path
from typing import Any

import pandas as pd
import pytest

from cpbench.system.config import config_from_json, load_config
from cpbench.system.fabric.topology import create_topology
from cpbench.system.fabric.world import RankContext, RankGen, spawn_world
from cpbench.system.report.memory import (
    attention_state_elements,
    create_memory_model,
    kernel_memory_class,
    peak_activation_bytes,
    peak_activation_elements,
)
from cpbench.system.report.metrics import effective_tflops, tflops_per_device
from cpbench.system.report.runner import (
    build_mask,
    CSV_COLUMNS,
    derive_seed,
    run_config,
    run_config_from_json,
    run_matrix,
    RunConfig,
    seed_override,
)
from cpbench.system.report.verify import CHECKS, verify_suite


def _run(**kwargs: Any) -> RunConfig:
    obj: dict[str, Any] = {
        "config_id": "ring",
        "mechanism": "ring_p2p",
        "pattern": "Causal",
        "seq_len": 64,
        "world_size": 4,
        "layout": {
            "q_heads": 4,
            "kv_heads": 4,
            "head_dim": 8,
        },
    }
    obj.update(kwargs)
    return run_config_from_json(obj)


def test_memory_model() -> None:
    naive = create_memory_model(
        "naive_full_mask", batch=1, seq_len=8192, heads=64, head_dim=128)
    assert peak_activation_elements(naive) == 22_347_251_712
    assert peak_activation_bytes(naive) == 2 * 22_347_251_712
    longer = create_memory_model(
        "naive_full_mask", batch=1, seq_len=16384, heads=64, head_dim=128)
    linear = 13 * 8192 * 64 * 128
    assert peak_activation_elements(longer) - 2 * linear == 4 * (
        peak_activation_elements(naive) - linear)
    fused = create_memory_model(
        "fused_linear", batch=1, seq_len=8192, heads=64, head_dim=128)
    assert peak_activation_elements(fused) == linear + 64 * 8192
    state = attention_state_elements(fused)
    assert state == 8192 * 64 * 128 + 64 * 8192
    assert state < 0.01 * peak_activation_elements(naive)
    assert kernel_memory_class("SDPA") == "naive_full_mask"
    assert kernel_memory_class("FA2") == "fused_linear"
    with pytest.raises(ValueError):
        create_memory_model(
            "naive_full_mask", batch=0, seq_len=8, heads=1, head_dim=1)
    tiled: Any = "tiled"
    with pytest.raises(ValueError):
        create_memory_model(tiled, batch=1, seq_len=8, heads=1, head_dim=1)


def test_metrics() -> None:
    assert tflops_per_device(4_000_000_000_000, 2.0, 2) == pytest.approx(1.0)
    with pytest.raises(ValueError):
        tflops_per_device(1, 0.0, 1)
    with pytest.raises(ValueError):
        tflops_per_device(1, 1.0, 0)
    topo = create_topology(2, device_flops_rate=1e12)

    def program(ctx: RankContext) -> RankGen:
        ctx.stage(0)
        ctx.compute(1_000_000_000 * (ctx.get_rank() + 1))
        yield from ()

    _, _, timeline = spawn_world(topo, program)
    assert timeline.get_total_time() == pytest.approx(2e-3)
    assert effective_tflops(
        3_000_000_000, timeline, 2) == pytest.approx(0.75)


def test_run_config_from_json() -> None:
    config = _run()
    assert config["kind"] == "mechanism"
    assert config["repeat"] == 1
    assert config["precision"] == "f64"
    assert config["check_oracle"]
    assert not config["backward"]
    assert config["documents"] is None
    memory = run_config_from_json({
        "config_id": "mem",
        "kind": "memory",
        "kernel_class": "fused_linear",
        "seq_len": 128,
    })
    assert memory["mechanism"] is None
    assert memory["layout"]["q_heads"] == 8
    with pytest.raises(ValueError):
        _run(mechanism="tree")
    with pytest.raises(ValueError):
        _run(repeat=0)
    with pytest.raises(ValueError):
        _run(warmup=-1)
    with pytest.raises(ValueError):
        _run(seq_len=0)
    with pytest.raises(ValueError):
        _run(pattern="Diagonal")
    with pytest.raises(ValueError):
        _run(kind="latency")
    with pytest.raises(ValueError, match="missing"):
        run_config_from_json({"config_id": "a", "mechanism": "ulysses"})


def test_build_mask() -> None:
    config = _run(pattern="CausalDocument")
    first = build_mask(config, 3)
    assert first == build_mask(config, 3)
    assert first["seq_len"] == 64
    offsets = first["doc_offsets"]
    assert offsets is not None
    assert offsets[-1] + first["pad_len"] == 64
    explicit = build_mask(
        _run(
            pattern="CausalDocument",
            mask_params={"doc_offsets": [0, 30, 64]}),
        3)
    assert explicit["doc_offsets"] == [0, 30, 64]
    window = build_mask(
        _run(pattern="CausalSlidingWindow", mask_params={"window": 8}), 0)
    assert window["window"] == 8
    prefix = build_mask(_run(pattern="PrefixLmDocument"), 1)
    assert prefix["prefix_lens"] is not None
    assert derive_seed(0, 0) == derive_seed(0, 0)
    assert derive_seed(0, 0) != derive_seed(0, 1)
    assert derive_seed(0, 0) != derive_seed(5, 0)


def test_run_config() -> None:
    res = run_config(_run(repeat=3, backward=True))
    assert res["error"] is None
    metrics = res["metrics"]
    assert metrics["flops"] > 0.0
    assert metrics["sim_time"] > 0.0
    assert metrics["comm_bytes"] > 0.0
    assert metrics["tflops"] == pytest.approx(
        metrics["flops"] / (metrics["sim_time"] * 4) / 1e12)
    assert metrics["max_abs_err"] <= 1e-9
    assert res["comm_log"]
    assert sum(event["bytes"] for event in res["comm_log"]) == int(
        metrics["comm_bytes"])
    memory = run_config(run_config_from_json({
        "config_id": "mem",
        "kind": "memory",
        "kernel_class": "naive_full_mask",
        "seq_len": 8192,
        "precision": "f32",
        "layout": {
            "q_heads": 64,
            "kv_heads": 64,
            "head_dim": 128,
        },
    }))
    assert memory["mechanism"] == "naive_full_mask"
    assert memory["metrics"]["peak_activation"] == 22_347_251_712
    assert memory["metrics"]["peak_activation_bytes"] == 4 * 22_347_251_712
    assert not memory["comm_log"]


def test_run_config_failure() -> None:
    res = run_config(_run(pattern="ShareQuestion"))
    assert res["error"] is not None
    assert res["error"].startswith("CapabilityError")
    assert not res["metrics"]
    assert not res["comm_log"]


def test_run_matrix_empty(tmp_path: Path) -> None:
    report = run_matrix([], str(tmp_path))
    assert not report["results"]
    assert report["failed"] == 0
    frame = pd.read_csv(tmp_path / "results.csv")
    assert list(frame.columns) == CSV_COLUMNS
    assert frame.empty
    with open(tmp_path / "results.json", encoding="utf-8") as fin:
        assert json.load(fin) == {"runs": []}


def _matrix() -> list[RunConfig]:
    return [
        _run(
            config_id=f"{mechanism}-{world_size}",
            mechanism=mechanism,
            world_size=world_size)
        for mechanism in ["ring_p2p", "ulysses"]
        for world_size in [2, 4]
    ]


def test_run_matrix(tmp_path: Path) -> None:
    configs = _matrix() + [_run(config_id="broken", pattern="ShareQuestion")]
    report = run_matrix(configs, str(tmp_path))
    assert report["failed"] == 1
    assert report["files"] == [
        os.path.join(str(tmp_path), "results.csv"),
        os.path.join(str(tmp_path), "results.json"),
    ]
    frame = pd.read_csv(tmp_path / "results.csv")
    assert list(frame.columns) == CSV_COLUMNS
    ok = frame[frame["config_id"] != "broken"]
    assert len(ok) == 4 * 5
    assert set(ok["metric"]) == {
        "tflops", "sim_time", "flops", "comm_bytes", "max_abs_err"}
    assert (ok[ok["metric"] == "max_abs_err"]["value"] <= 1e-10).all()
    flops = ok[ok["metric"] == "flops"]["value"].unique()
    assert len(flops) == 1
    broken = frame[frame["config_id"] == "broken"]
    assert broken["metric"].to_list() == ["failed"]
    assert broken["value"].to_list() == [1.0]
    with open(tmp_path / "results.json", encoding="utf-8") as fin:
        runs = json.load(fin)["runs"]
    assert [run["config_id"] for run in runs] == [
        config["config_id"] for config in configs]
    assert runs[0]["comm_log"]
    assert runs[-1]["error"] is not None


def test_reports_are_byte_identical(tmp_path: Path) -> None:
    configs = _matrix()
    outputs: list[tuple[list[str], list[bytes]]] = []
    for name in ["first", "second"]:
        out = tmp_path / name
        report = run_matrix(
            configs, str(out), formats=("csv", "json", "svg"))
        assert report["failed"] == 0
        files = [os.path.relpath(fname, str(out)) for fname in report["files"]]
        contents: list[bytes] = []
        for fname in report["files"]:
            with open(fname, "rb") as fin:
                contents.append(fin.read())
        outputs.append((files, contents))
    assert outputs[0] == outputs[1]
    files, contents = outputs[0]
    chart = os.path.join("charts", "tflops_Causal.svg")
    assert chart in files
    svg = contents[files.index(chart)]
    assert svg.lstrip().startswith(b"<?xml")


def test_seed_override(
        tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> None:
    config = _run(pattern="CausalDocument", seed=0)
    monkeypatch.delenv("LONGCA_SEED", raising=False)
    monkeypatch.delenv("CPBENCH_SEED", raising=False)
    assert seed_override() is None
    monkeypatch.setenv("LONGCA_SEED", "5")
    assert seed_override() == 5
    report = run_matrix([config], str(tmp_path), formats=("json",))
    expected = run_config(config, seed=5)
    assert report["results"][0]["metrics"] == expected["metrics"]
    assert report["results"][0]["comm_log"] == expected["comm_log"]
    monkeypatch.setenv("CPBENCH_SEED", "7")
    assert seed_override() == 5
    monkeypatch.delenv("LONGCA_SEED")
    assert seed_override() == 7


def test_config(tmp_path: Path) -> None:
    fname = str(tmp_path / "config.json")
    with pytest.raises(ValueError, match="config file missing"):
        load_config(fname)
    assert os.path.exists(fname)
    config = load_config(fname)
    assert [run["config_id"] for run in config["runs"]] == [
        "ring-causal", "memory-naive"]
    assert config["output"] == "results/"
    shared = config_from_json({
        "runs": [
            {"config_id": "a", "mechanism": "ulysses", "seq_len": 16},
            {
                "config_id": "b",
                "mechanism": "ulysses",
                "seq_len": 16,
                "topology": {"inter_bw": 1e9},
            },
        ],
        "topology": {"intra_bw": 1e10},
    })
    assert shared["runs"][0]["topology"] == {"intra_bw": 1e10}
    assert shared["runs"][1]["topology"] == {"inter_bw": 1e9}
    with pytest.raises(ValueError, match="duplicate"):
        config_from_json({
            "runs": [
                {"config_id": "a", "mechanism": "ulysses", "seq_len": 16},
                {"config_id": "a", "mechanism": "ring_p2p", "seq_len": 16},
            ],
        })


def test_verify_suite() -> None:
    results = verify_suite(quick=True)
    assert [res["name"] for res in results] == list(CHECKS)
    failed = [res for res in results if not res["passed"]]
    assert not failed, failed
    assert all(res["detail"] for res in results)
