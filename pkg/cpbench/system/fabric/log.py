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
"""Records of simulated traffic and the per stage timing derived from it."""
import collections
from typing import Any, get_args, Literal, TypeAlias, TypedDict

import pandas as pd

from cpbench.misc.io import open_write
from cpbench.system.fabric.topology import Topology, transfer_time


CommKind: TypeAlias = Literal["p2p", "all_to_all", "all_gather"]
COMM_KINDS: tuple[CommKind, ...] = get_args(CommKind)


CommEvent = TypedDict('CommEvent', {
    "seq": int,
    "op": int,
    "kind": CommKind,
    "blocking": bool,
    "stream": str,
    "stage": int,
    "dst_stage": int,
    "src": int,
    "dst": int,
    "group": list[int] | None,
    "bytes": int,
    "modeled_time": float,
    "exposed": bool,
})
StageEntry = TypedDict('StageEntry', {
    "rank": int,
    "stage": int,
    "compute_time": float,
    "blocking_time": float,
    "async_time": float,
    "comm_time": float,
    "stage_time": float,
    "overlapped": bool,
    "pairs": int,
})


EVENT_COLUMNS: list[str] = list(CommEvent.__annotations__)
STAGE_COLUMNS: list[str] = list(StageEntry.__annotations__)


def model_time(topology: Topology, event: CommEvent) -> float:
    return transfer_time(topology, event["src"], event["dst"], event["bytes"])


class CommLog:
    def __init__(self, topology: Topology) -> None:
        self._topology = topology
        self._events: list[CommEvent] = []

    def get_topology(self) -> Topology:
        return self._topology

    def add_event(
            self,
            *,
            op: int,
            kind: CommKind,
            blocking: bool,
            stream: str,
            stage: int,
            src: int,
            dst: int,
            group: list[int] | None,
            num_bytes: int) -> CommEvent:
        if num_bytes <= 0:
            raise ValueError(f"events must carry bytes got {num_bytes}")
        event: CommEvent = {
            "seq": len(self._events),
            "op": op,
            "kind": kind,
            "blocking": blocking,
            "stream": stream,
            "stage": stage,
            "dst_stage": stage,
            "src": src,
            "dst": dst,
            "group": group,
            "bytes": num_bytes,
            "modeled_time": 0.0,
            "exposed": True,
        }
        event["modeled_time"] = model_time(self._topology, event)
        self._events.append(event)
        return event

    def get_events(self) -> list[CommEvent]:
        return list(self._events)

    def bytes_sent(self, rank: int, *, stage: int | None = None) -> int:
        return sum(
            event["bytes"]
            for event in self._events
            if event["src"] == rank
            and (stage is None or event["stage"] == stage))

    def bytes_received(self, rank: int, *, stage: int | None = None) -> int:
        return sum(
            event["bytes"]
            for event in self._events
            if event["dst"] == rank
            and (stage is None or event["dst_stage"] == stage))

    def total_bytes(self) -> int:
        return sum(event["bytes"] for event in self._events)

    def mark_exposure(self, compute: dict[tuple[int, int], float]) -> None:
        """
        Blocking traffic is always exposed. Asynchronous sends are hidden
        as long as the sender computes at least as long in that stage.

        Args:
            compute (dict[tuple[int, int], float]): Compute time per
                (rank, stage).
        """
        for event in self._events:
            if event["blocking"]:
                event["exposed"] = True
                continue
            own = compute.get((event["src"], event["stage"]), 0.0)
            event["exposed"] = event["modeled_time"] > own

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    **event,
                    "group": (
                        None if event["group"] is None
                        else ",".join(f"{rank}" for rank in event["group"])),
                }
                for event in self._events
            ],
            columns=EVENT_COLUMNS)

    def to_json(self) -> list[dict[str, Any]]:
        return [dict(event) for event in self._events]

    def write_csv(self, fname: str) -> None:
        with open_write(fname, text=True) as fout:
            self.to_frame().to_csv(fout, index=False)


class StageTimeline:
    """
    Timing of every (rank, stage). Blocking traffic adds to the stage while
    asynchronous traffic overlaps the compute of the stage. The total is
    the sum over stages of the slowest rank.
    """
    def __init__(
            self,
            log: CommLog,
            compute: dict[tuple[int, int], float],
            pairs: dict[tuple[int, int], int]) -> None:
        blocking: collections.defaultdict[tuple[int, int], float] = \
            collections.defaultdict(float)
        async_time: collections.defaultdict[tuple[int, int], float] = \
            collections.defaultdict(float)
        ops: dict[int, list[CommEvent]] = {}
        for event in log.get_events():
            if event["kind"] != "p2p":
                ops.setdefault(event["op"], []).append(event)
                continue
            ends = [
                (event["src"], event["stage"]),
                (event["dst"], event["dst_stage"]),
            ]
            for key in ends:
                if event["blocking"]:
                    blocking[key] += event["modeled_time"]
                else:
                    async_time[key] = max(
                        async_time[key], event["modeled_time"])
        for events in ops.values():
            # collectives take as long as their slowest pairwise transfer
            op_time = max(event["modeled_time"] for event in events)
            members: dict[int, int] = {}
            for event in events:
                members.setdefault(event["dst"], event["dst_stage"])
                members.setdefault(event["src"], event["stage"])
            for rank, stage in members.items():
                blocking[(rank, stage)] += op_time
        keys = sorted(
            set(compute) | set(pairs) | set(blocking) | set(async_time))
        self._entries: list[StageEntry] = []
        for rank, stage in keys:
            key = (rank, stage)
            comp = compute.get(key, 0.0)
            block = blocking.get(key, 0.0)
            asyn = async_time.get(key, 0.0)
            self._entries.append({
                "rank": rank,
                "stage": stage,
                "compute_time": comp,
                "blocking_time": block,
                "async_time": asyn,
                "comm_time": block + asyn,
                "stage_time": block + max(comp, asyn),
                "overlapped": block == 0.0,
                "pairs": pairs.get(key, 0),
            })

    def get_entries(self) -> list[StageEntry]:
        return list(self._entries)

    def get_stages(self) -> list[int]:
        return sorted({entry["stage"] for entry in self._entries})

    def get_stage_time(self, stage: int) -> float:
        return max(
            (
                entry["stage_time"]
                for entry in self._entries
                if entry["stage"] == stage
            ),
            default=0.0)

    def get_total_time(self) -> float:
        return sum(self.get_stage_time(stage) for stage in self.get_stages())

    def get_rank_pairs(self, rank: int) -> int:
        return sum(
            entry["pairs"] for entry in self._entries if entry["rank"] == rank)

    def get_compute_time(self) -> float:
        return sum(entry["compute_time"] for entry in self._entries)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self._entries, columns=STAGE_COLUMNS)

    def to_json(self) -> dict[str, Any]:
        return {
            "stages": [dict(entry) for entry in self._entries],
            "total_time": self.get_total_time(),
        }

    def write_csv(self, fname: str) -> None:
        with open_write(fname, text=True) as fout:
            self.to_frame().to_csv(fout, index=False)
