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
from typing import Any, TypedDict

from cpbench.misc.env import envload_path
from cpbench.misc.io import open_read, open_write
from cpbench.misc.util import json_load, log_msg
from cpbench.system.report.runner import run_config_from_json, RunConfig


Config = TypedDict('Config', {
    "runs": list[RunConfig],
    "topology": dict[str, Any] | None,
    "output": str,
})


CONFIG_PATH: str | None = None
DEFAULT_OUTPUT = "results/"


def get_config_path() -> str:
    global CONFIG_PATH  # pylint: disable=global-statement

    if CONFIG_PATH is None:
        CONFIG_PATH = envload_path("CONFIG_PATH", default="config.json")
    return CONFIG_PATH


def config_template() -> dict[str, Any]:
    return {
        "runs": [
            {
                "config_id": "ring-causal",
                "mechanism": "ring_p2p",
                "pattern": "Causal",
                "seq_len": 1024,
                "world_size": 8,
                "layout": {
                    "q_heads": 8,
                    "kv_heads": 8,
                    "head_dim": 64,
                },
                "precision": "f64",
                "seed": 0,
                "repeat": 1,
                "backward": False,
            },
            {
                "config_id": "memory-naive",
                "kind": "memory",
                "kernel_class": "naive_full_mask",
                "seq_len": 16384,
                "layout": {
                    "q_heads": 64,
                    "kv_heads": 64,
                    "head_dim": 128,
                },
            },
        ],
        "topology": {},
        "output": DEFAULT_OUTPUT,
    }


def create_config_and_err(config_path: str) -> None:
    with open_write(config_path, text=True) as fout:
        print(
            json.dumps(config_template(), indent=4, sort_keys=True),
            file=fout)
    raise ValueError(
        "config file missing. "
        f"new file was created at '{config_path}'. "
        "please correct values in file and run again")


def config_from_json(obj: dict[str, Any]) -> Config:
    """
    Validates a benchmark config. Runs without their own topology use the
    top level topology overrides.

    Args:
        obj (dict[str, Any]): The JSON object.

    Returns:
        Config: The config.
    """
    topology = obj.get("topology") or None
    runs = [
        run_config_from_json(run, topology=topology)
        for run in obj.get("runs", [])
    ]
    ids = [run["config_id"] for run in runs]
    if len(set(ids)) != len(ids):
        raise ValueError(f"duplicate config ids in {ids}")
    return {
        "runs": runs,
        "topology": topology,
        "output": obj.get("output", DEFAULT_OUTPUT),
    }


def load_config(config_path: str | None = None) -> Config:
    if config_path is None:
        config_path = get_config_path()
    log_msg("CONFIG", f"loading config file: {config_path}")
    if not os.path.exists(config_path):
        create_config_and_err(config_path)
    with open_read(config_path, text=True) as fin:
        obj = json_load(fin)
    if not obj:
        create_config_and_err(config_path)
    return config_from_json(obj)
