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
Runs a matrix of benchmark configurations and writes the reports. Every
configuration is repeated with derived seeds and the median of every metric
is reported. Failing runs are recorded and the matrix continues.
"""
import os
from typing import Any, get_args, Literal, TypeAlias, TypedDict

import numpy as np
import pandas as pd

from cpbench.misc.env import envload_maybe_int
from cpbench.misc.io import ensure_folder, open_write
from cpbench.misc.util import json_pretty, log_msg, progress
from cpbench.system.cpmech.common import get_mechanism, Mechanism
from cpbench.system.cpmech.driver import (
    max_abs_error,
    run_mechanism,
    run_oracle,
)
from cpbench.system.cpmech.plan import grid_from_json
from cpbench.system.fabric.topology import Topology, topology_from_json
from cpbench.system.masks.count import attention_flops
from cpbench.system.masks.pattern import (
    DOCUMENT_PATTERNS,
    get_mask_pattern,
    mask_from_json,
    MaskPattern,
    MaskSpec,
)
from cpbench.system.numcore import (
    create_head_layout,
    create_tensor,
    get_precision,
    HeadLayout,
    Precision,
    Tensor3,
)
from cpbench.system.report.charts import write_charts
from cpbench.system.report.memory import (
    attention_state_elements,
    create_memory_model,
    get_memory_class,
    MemoryClass,
    peak_activation_bytes,
    peak_activation_elements,
)
from cpbench.system.report.metrics import (
    Metric,
    METRIC_UNITS,
    METRICS,
    tflops_per_device,
)
from cpbench.system.workload.packing import batch_to_mask, pack_documents
from cpbench.system.workload.sampling import (
    length_distribution_from_json,
    LengthDistribution,
    sample_lengths,
)


RunKind: TypeAlias = Literal["mechanism", "memory"]
RUN_KINDS: tuple[RunKind, ...] = get_args(RunKind)

ReportFormat: TypeAlias = Literal["csv", "json", "svg"]
REPORT_FORMATS: tuple[ReportFormat, ...] = get_args(ReportFormat)


CSV_COLUMNS: list[str] = [
    "config_id",
    "mechanism",
    "pattern",
    "S",
    "N",
    "precision",
    "metric",
    "value",
    "unit",
]


RunConfig = TypedDict('RunConfig', {
    "config_id": str,
    "kind": RunKind,
    "mechanism": Mechanism | None,
    "kernel_class": MemoryClass | None,
    "pattern": MaskPattern,
    "mask_params": dict[str, Any],
    "documents": LengthDistribution | None,
    "seq_len": int,
    "world_size": int,
    "layout": HeadLayout,
    "grid": dict[str, int] | None,
    "topology": dict[str, Any] | None,
    "precision": Precision,
    "seed": int,
    "repeat": int,
    "warmup": int,
    "backward": bool,
    "batch": int,
    "check_oracle": bool,
    "kv_cap": int | None,
})
RunResult = TypedDict('RunResult', {
    "config_id": str,
    "mechanism": str,
    "pattern": MaskPattern,
    "seq_len": int,
    "world_size": int,
    "precision": Precision,
    "metrics": dict[str, float],
    "error": str | None,
    "comm_log": list[dict[str, Any]],
})
MatrixReport = TypedDict('MatrixReport', {
    "results": list[RunResult],
    "files": list[str],
    "failed": int,
})


def get_run_kind(text: str) -> RunKind:
    if text not in RUN_KINDS:
        raise ValueError(f"unknown run kind {text} not in {RUN_KINDS}")
    return text  # type: ignore


def get_report_format(text: str) -> ReportFormat:
    if text not in REPORT_FORMATS:
        raise ValueError(
            f"unknown report format {text} not in {REPORT_FORMATS}")
    return text  # type: ignore


def run_config_from_json(
        obj: dict[str, Any],
        *,
        topology: dict[str, Any] | None = None) -> RunConfig:
    """
    Parses and validates a run configuration.

    Args:
        obj (dict[str, Any]): The JSON object.
        topology (dict[str, Any] | None, optional): Topology overrides used
            when the run does not define its own.

    Returns:
        RunConfig: The configuration.
    """
    kind = get_run_kind(obj.get("kind", "mechanism"))
    required = [
        "config_id",
        "seq_len",
        "mechanism" if kind == "mechanism" else "kernel_class",
    ]
    missing = [key for key in required if key not in obj]
    if missing:
        raise ValueError(f"run config is missing {missing}: {obj}")
    mechanism = None
    kernel_class = None
    if kind == "mechanism":
        mechanism = get_mechanism(obj["mechanism"])
    else:
        kernel_class = get_memory_class(obj["kernel_class"])
    layout_obj = obj.get("layout", {})
    layout = create_head_layout(
        int(layout_obj.get("q_heads", 8)),
        int(layout_obj.get("kv_heads", 8)),
        int(layout_obj.get("head_dim", 128)))
    repeat = int(obj.get("repeat", 1))
    if repeat < 1:
        raise ValueError(f"repeat must be at least 1 got {repeat}")
    warmup = int(obj.get("warmup", 0))
    if warmup < 0:
        raise ValueError(f"warmup must not be negative got {warmup}")
    seq_len = int(obj["seq_len"])
    world_size = int(obj.get("world_size", 1))
    if seq_len < 1 or world_size < 1:
        raise ValueError(
            f"seq_len ({seq_len}) and world_size ({world_size}) must be "
            "positive")
    documents = obj.get("documents")
    kv_cap = obj.get("kv_cap")
    res: RunConfig = {
        "config_id": f"{obj['config_id']}",
        "kind": kind,
        "mechanism": mechanism,
        "kernel_class": kernel_class,
        "pattern": get_mask_pattern(obj.get("pattern", "Full")),
        "mask_params": dict(obj.get("mask_params", {})),
        "documents": (
            None if documents is None
            else length_distribution_from_json(documents)),
        "seq_len": seq_len,
        "world_size": world_size,
        "layout": layout,
        "grid": obj.get("grid"),
        "topology": obj.get("topology", topology),
        "precision": get_precision(obj.get("precision", "f64")),
        "seed": int(obj.get("seed", 0)),
        "repeat": repeat,
        "warmup": warmup,
        "backward": bool(obj.get("backward", False)),
        "batch": int(obj.get("batch", 1)),
        "check_oracle": bool(obj.get("check_oracle", True)),
        "kv_cap": None if kv_cap is None else int(kv_cap),
    }
    return res


def seed_override() -> int | None:
    """LONGCA_SEED replaces every run seed. CPBENCH_SEED is an alias."""
    seed = envload_maybe_int("LONGCA_SEED")
    if seed is None:
        seed = envload_maybe_int("CPBENCH_SEED")
    return seed


def derive_seed(seed: int, repetition: int) -> int:
    state = np.random.SeedSequence([seed, repetition]).generate_state(1)
    return int(state[0])


def default_documents(seq_len: int) -> LengthDistribution:
    return length_distribution_from_json({
        "components": [
            {
                "weight": 1.0,
                "kind": "uniform",
                "low": max(1, seq_len // 8),
                "high": max(1, seq_len // 2),
            },
        ],
        "max_len": seq_len,
    })


def build_mask(config: RunConfig, seed: int) -> MaskSpec:
    """
    Creates the mask of a run. Document patterns without explicit offsets
    pack sampled document lengths into the window and use the first one.

    Args:
        config (RunConfig): The run.
        seed (int): The seed of the repetition.

    Returns:
        MaskSpec: The mask.
    """
    pattern = config["pattern"]
    seq_len = config["seq_len"]
    params = dict(config["mask_params"])
    if pattern not in DOCUMENT_PATTERNS or "doc_offsets" in params:
        return mask_from_json({
            **params,
            "pattern": pattern,
            "seq_len": seq_len,
        })
    dist = config["documents"]
    if dist is None:
        dist = default_documents(seq_len)
    batch = pack_documents(sample_lengths(dist, seed, seq_len), seq_len)[0]
    prefix_lens = params.get("prefix_lens")
    if pattern == "PrefixLmDocument" and prefix_lens is None:
        offsets = batch["doc_offsets"]
        prefix_lens = [
            (end - start) // 2
            for start, end in zip(offsets[:-1], offsets[1:])
        ]
    return batch_to_mask(
        batch,
        pattern,
        prefix_lens=prefix_lens,
        block_size=params.get("block_size"))


def generate_inputs(
        layout: HeadLayout,
        seq_len: int,
        precision: Precision,
        seed: int) -> tuple[Tensor3, Tensor3, Tensor3, Tensor3]:
    """Standard normal q, k, v and output gradient."""
    rng = np.random.default_rng(seed)
    dim = layout["head_dim"]
    shapes = [
        (layout["q_heads"], seq_len, dim),
        (layout["kv_heads"], seq_len, dim),
        (layout["kv_heads"], seq_len, dim),
        (layout["q_heads"], seq_len, dim),
    ]
    q, k, v, d_out = (
        create_tensor(rng.standard_normal(shape), precision=precision)
        for shape in shapes)
    return q, k, v, d_out


def run_topology(config: RunConfig) -> Topology:
    return topology_from_json(config["world_size"], config["topology"])


def _run_mechanism_once(
        config: RunConfig,
        seed: int) -> tuple[dict[Metric, float], list[dict[str, Any]]]:
    mechanism = config["mechanism"]
    assert mechanism is not None
    layout = config["layout"]
    topology = run_topology(config)
    mask = build_mask(config, seed)
    q, k, v, d_out = generate_inputs(
        layout, config["seq_len"], config["precision"], seed)
    grid_obj = config["grid"]
    grid = (
        None if grid_obj is None
        else grid_from_json(topology, grid_obj))
    backward = config["backward"]
    run = run_mechanism(
        mechanism,
        topology,
        q,
        k,
        v,
        layout,
        mask,
        grid=grid,
        d_out=d_out if backward else None,
        kv_cap=config["kv_cap"])
    flops = attention_flops(mask, layout, "forward")
    sim_time = run["forward"]["timeline"].get_total_time()
    comm_bytes = run["forward"]["log"].total_bytes()
    events = run["forward"]["log"].to_json()
    bwd = run["backward"]
    if bwd is not None:
        flops += attention_flops(mask, layout, "backward")
        sim_time += bwd["timeline"].get_total_time()
        comm_bytes += bwd["log"].total_bytes()
        events.extend(bwd["log"].to_json())
    metrics: dict[Metric, float] = {
        "tflops": tflops_per_device(flops, sim_time, config["world_size"]),
        "sim_time": sim_time,
        "flops": float(flops),
        "comm_bytes": float(comm_bytes),
    }
    if config["check_oracle"]:
        oracle = run_oracle(
            q, k, v, layout, mask, d_out=d_out if backward else None)
        metrics["max_abs_err"] = max_abs_error(run, oracle)
    return metrics, events


def _run_memory_once(config: RunConfig) -> dict[Metric, float]:
    kernel_class = config["kernel_class"]
    assert kernel_class is not None
    layout = config["layout"]
    model = create_memory_model(
        kernel_class,
        batch=config["batch"],
        seq_len=config["seq_len"],
        heads=layout["q_heads"],
        head_dim=layout["head_dim"],
        bytes_per_element=8 if config["precision"] == "f64" else 4)
    return {
        "peak_activation": float(peak_activation_elements(model)),
        "peak_activation_bytes": float(peak_activation_bytes(model)),
        "attention_state": float(attention_state_elements(model)),
    }


def run_config(config: RunConfig, *, seed: int | None = None) -> RunResult:
    """
    Runs one configuration `repeat` times and reports the medians.

    Args:
        config (RunConfig): The run.
        seed (int | None, optional): Replaces the seed of the config.

    Returns:
        RunResult: The result. Errors are recorded instead of raised.
    """
    base_seed = config["seed"] if seed is None else seed
    name = (
        config["mechanism"] if config["kind"] == "mechanism"
        else config["kernel_class"])
    res: RunResult = {
        "config_id": config["config_id"],
        "mechanism": f"{name}",
        "pattern": config["pattern"],
        "seq_len": config["seq_len"],
        "world_size": config["world_size"],
        "precision": config["precision"],
        "metrics": {},
        "error": None,
        "comm_log": [],
    }
    samples: dict[Metric, list[float]] = {}
    try:
        for repetition in range(config["repeat"]):
            run_seed = derive_seed(base_seed, repetition)
            if config["kind"] == "mechanism":
                metrics, events = _run_mechanism_once(config, run_seed)
                res["comm_log"] = events
            else:
                metrics = _run_memory_once(config)
            for metric, value in metrics.items():
                samples.setdefault(metric, []).append(value)
    except Exception as err:  # pylint: disable=broad-exception-caught
        res["error"] = f"{type(err).__name__}: {err}"
        res["comm_log"] = []
        log_msg("REPORT", f"run {config['config_id']} failed: {res['error']}")
        return res
    res["metrics"] = {
        metric: float(np.median(samples[metric]))
        for metric in METRICS
        if metric in samples
    }
    return res


def results_frame(results: list[RunResult]) -> pd.DataFrame:
    rows: list[dict[str, Any]] = []
    for result in results:
        base = {
            "config_id": result["config_id"],
            "mechanism": result["mechanism"],
            "pattern": result["pattern"],
            "S": result["seq_len"],
            "N": result["world_size"],
            "precision": result["precision"],
        }
        if result["error"] is not None:
            rows.append({
                **base,
                "metric": "failed",
                "value": 1.0,
                "unit": METRIC_UNITS["failed"],
            })
            continue
        for metric in METRICS:
            value = result["metrics"].get(metric)
            if value is None:
                continue
            rows.append({
                **base,
                "metric": metric,
                "value": value,
                "unit": METRIC_UNITS[metric],
            })
    return pd.DataFrame(rows, columns=CSV_COLUMNS)


def write_csv(results: list[RunResult], fname: str) -> None:
    with open_write(fname, text=True) as fout:
        results_frame(results).to_csv(fout, index=False)


def write_json(results: list[RunResult], fname: str) -> None:
    with open_write(fname, text=True) as fout:
        print(json_pretty({"runs": results}), file=fout)


def run_matrix(
        configs: list[RunConfig],
        out_dir: str,
        *,
        formats: tuple[ReportFormat, ...] = ("csv", "json"),
        show_progress: bool = False) -> MatrixReport:
    """
    Runs every configuration and writes the requested reports.

    Args:
        configs (list[RunConfig]): The runs.
        out_dir (str): The output folder.
        formats (tuple[ReportFormat, ...], optional): Which reports to
            write. The CSV report is `results.csv`, the JSON bundle with
            the traffic logs `results.json` and charts go to `charts/`.
        show_progress (bool, optional): Whether to show a progress bar.

    Returns:
        MatrixReport: The results and the written files.
    """
    seed = seed_override()
    if seed is not None:
        log_msg("REPORT", f"seed override {seed}")
    results: list[RunResult] = []
    with progress(
            desc="runs", total=len(configs), show=show_progress) as advance:
        for config in configs:
            log_msg(
                "REPORT",
                f"run {config['config_id']} "
                f"({config['repeat']} repeats, {config['warmup']} warmup)")
            results.append(run_config(config, seed=seed))
            advance(1)
    ensure_folder(out_dir)
    files: list[str] = []
    if "csv" in formats:
        fname = os.path.join(out_dir, "results.csv")
        write_csv(results, fname)
        files.append(fname)
    if "json" in formats:
        fname = os.path.join(out_dir, "results.json")
        write_json(results, fname)
        files.append(fname)
    if "svg" in formats:
        files.extend(write_charts(
            results_frame(results), os.path.join(out_dir, "charts")))
    failed = sum(1 for result in results if result["error"] is not None)
    log_msg(
        "REPORT",
        f"finished {len(results)} runs with {failed} failures: "
        f"{', '.join(files) or 'no files'}")
    return {
        "results": results,
        "files": files,
        "failed": failed,
    }
