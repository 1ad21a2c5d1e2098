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
Single process simulation of a group of ranks. Every rank runs a generator
based program that yields blocking fabric requests. The driver resumes the
ranks round robin in rank order which makes the schedule deterministic.

A rank program looks like::

    def program(ctx: RankContext) -> RankGen:
        ctx.stage(0)
        handle = ctx.isend(right, payload)
        data = yield ctx.recv(left)
        yield ctx.wait(handle)
        return data
"""
import collections
from collections.abc import Callable, Generator, Hashable
from typing import Any

import numpy as np

from cpbench.misc.errors import DeadlockError, RankError, ShapeError
from cpbench.system.fabric.log import (
    CommEvent,
    CommKind,
    CommLog,
    StageTimeline,
)
from cpbench.system.fabric.topology import compute_time, Topology


MAIN_STREAM = "main"


def payload_nbytes(payload: Any) -> int:
    if payload is None:
        return 0
    if isinstance(payload, np.ndarray):
        return int(payload.nbytes)
    if isinstance(payload, (tuple, list)):
        return sum(payload_nbytes(elem) for elem in payload)
    if isinstance(payload, (int, float, np.number)):
        return 8
    raise TypeError(f"cannot send payload of type {type(payload)}")


def copy_payload(payload: Any) -> Any:
    if isinstance(payload, np.ndarray):
        return payload.copy()
    if isinstance(payload, tuple):
        return tuple(copy_payload(elem) for elem in payload)
    if isinstance(payload, list):
        return [copy_payload(elem) for elem in payload]
    return payload


def payload_shape(payload: Any) -> Any:
    if isinstance(payload, np.ndarray):
        return tuple(payload.shape)
    if isinstance(payload, (tuple, list)):
        return tuple(payload_shape(elem) for elem in payload)
    return ()


class Message:
    def __init__(
            self,
            *,
            src: int,
            dst: int,
            tag: Hashable,
            payload: Any,
            event: CommEvent | None) -> None:
        self._src = src
        self._dst = dst
        self._tag = tag
        self._payload = payload
        self._event = event
        self._delivered = False

    def get_dst(self) -> int:
        return self._dst

    def get_payload(self) -> Any:
        return self._payload

    def is_delivered(self) -> bool:
        return self._delivered

    def deliver(self, dst_stage: int) -> None:
        self._delivered = True
        if self._event is not None:
            self._event["dst_stage"] = dst_stage


class Handle:
    """Completion handle of an eager send."""
    def __init__(self, msg: Message) -> None:
        self._msg = msg

    def is_done(self) -> bool:
        return self._msg.is_delivered()

    def get_message(self) -> Message:
        return self._msg


class Request:
    def describe(self) -> str:
        raise NotImplementedError()


class SendRequest(Request):
    def __init__(self, dst: int, msg: Message) -> None:
        self._dst = dst
        self._msg = msg

    def get_message(self) -> Message:
        return self._msg

    def describe(self) -> str:
        return f"waits for rank {self._dst} to receive"


class RecvRequest(Request):
    def __init__(
            self,
            src: int,
            tag: Hashable,
            shape: tuple[int, ...] | None) -> None:
        self._src = src
        self._tag = tag
        self._shape = shape

    def get_src(self) -> int:
        return self._src

    def get_tag(self) -> Hashable:
        return self._tag

    def get_shape(self) -> tuple[int, ...] | None:
        return self._shape

    def describe(self) -> str:
        return f"waits to receive from rank {self._src} (tag {self._tag})"


class WaitRequest(Request):
    def __init__(self, dst: int, handle: Handle) -> None:
        self._dst = dst
        self._handle = handle

    def get_handle(self) -> Handle:
        return self._handle

    def describe(self) -> str:
        return f"waits for rank {self._dst} to receive its send"


class CollectiveRequest(Request):
    def __init__(
            self,
            kind: CommKind,
            group: tuple[int, ...],
            seq: int,
            payload: Any) -> None:
        self._kind = kind
        self._group = group
        self._seq = seq
        self._payload = payload

    def get_key(self) -> tuple[CommKind, tuple[int, ...], int]:
        return (self._kind, self._group, self._seq)

    def get_payload(self) -> Any:
        return self._payload

    def describe(self) -> str:
        return f"waits in {self._kind} of group {list(self._group)}"


RankGen = Generator[Request, Any, Any]
RankProgram = Callable[['RankContext'], RankGen]


class RankContext:
    def __init__(self, world: 'World', rank: int) -> None:
        self._world = world
        self._rank = rank
        self._stage = 0

    def get_rank(self) -> int:
        return self._rank

    def get_world_size(self) -> int:
        return self._world.get_world_size()

    def get_topology(self) -> Topology:
        return self._world.get_topology()

    def get_stage(self) -> int:
        return self._stage

    def stage(self, stage: int) -> None:
        if stage < self._stage:
            raise ValueError(
                f"rank {self._rank} stage went back from {self._stage} "
                f"to {stage}")
        self._stage = stage

    def compute(self, flops: int, *, pairs: int = 0) -> None:
        self._world.add_compute(self._rank, self._stage, flops, pairs)

    def send(self, dst: int, payload: Any, *, tag: Hashable = 0) -> Request:
        """Rendezvous send. Yield the request to block until received."""
        msg = self._world.post_message(
            self._rank, dst, tag, payload, blocking=True, stream=MAIN_STREAM)
        return SendRequest(dst, msg)

    def isend(
            self,
            dst: int,
            payload: Any,
            *,
            tag: Hashable = 0,
            stream: str = MAIN_STREAM) -> Handle:
        """Eager buffered send. Does not block."""
        return Handle(self._world.post_message(
            self._rank, dst, tag, payload, blocking=False, stream=stream))

    def wait(self, handle: Handle) -> Request:
        return WaitRequest(handle.get_message().get_dst(), handle)

    def recv(
            self,
            src: int,
            *,
            tag: Hashable = 0,
            shape: tuple[int, ...] | None = None) -> Request:
        return RecvRequest(src, tag, shape)

    def all_to_all(self, group: list[int], chunks: list[Any]) -> Request:
        if len(chunks) != len(group):
            raise ShapeError(
                f"all_to_all needs one chunk per peer ({len(group)}) "
                f"got {len(chunks)}")
        return self._world.post_collective(
            self._rank,
            "all_to_all",
            group,
            [copy_payload(chunk) for chunk in chunks])

    def all_gather(self, group: list[int], chunk: Any) -> Request:
        return self._world.post_collective(
            self._rank, "all_gather", group, copy_payload(chunk))


class _RankState:
    def __init__(self, ctx: RankContext, gen: RankGen) -> None:
        self.ctx = ctx
        self.gen = gen
        self.request: Request | None = None
        self.value: Any = None
        self.done = False
        self.result: Any = None


class World:
    def __init__(self, topology: Topology) -> None:
        self._topology = topology
        self._log = CommLog(topology)
        self._channels: dict[
            tuple[int, int, Hashable], collections.deque[Message]] = {}
        self._collectives: dict[
            tuple[CommKind, tuple[int, ...], int], dict[str, Any]] = {}
        self._coll_seq: collections.Counter[
            tuple[int, CommKind, tuple[int, ...]]] = collections.Counter()
        self._compute: dict[tuple[int, int], float] = {}
        self._pairs: dict[tuple[int, int], int] = {}
        self._op_count = 0
        self._ranks: list[_RankState] = []

    def get_world_size(self) -> int:
        return self._topology["world_size"]

    def get_topology(self) -> Topology:
        return self._topology

    def get_log(self) -> CommLog:
        return self._log

    def get_compute(self) -> dict[tuple[int, int], float]:
        return dict(self._compute)

    def get_pairs(self) -> dict[tuple[int, int], int]:
        return dict(self._pairs)

    def _check_rank(self, rank: int) -> None:
        if not 0 <= rank < self.get_world_size():
            raise ValueError(
                f"rank {rank} outside world of {self.get_world_size()}")

    def _next_op(self) -> int:
        res = self._op_count
        self._op_count += 1
        return res

    def _stage_of(self, rank: int) -> int:
        return self._ranks[rank].ctx.get_stage()

    def add_compute(
            self, rank: int, stage: int, flops: int, pairs: int) -> None:
        key = (rank, stage)
        self._compute[key] = (
            self._compute.get(key, 0.0) + compute_time(self._topology, flops))
        self._pairs[key] = self._pairs.get(key, 0) + pairs

    def post_message(
            self,
            src: int,
            dst: int,
            tag: Hashable,
            payload: Any,
            *,
            blocking: bool,
            stream: str) -> Message:
        self._check_rank(dst)
        if src == dst:
            raise ValueError(f"rank {src} cannot send to itself")
        num_bytes = payload_nbytes(payload)
        event = None
        if num_bytes > 0:
            event = self._log.add_event(
                op=self._next_op(),
                kind="p2p",
                blocking=blocking,
                stream=stream,
                stage=self._stage_of(src),
                src=src,
                dst=dst,
                group=None,
                num_bytes=num_bytes)
        msg = Message(
            src=src,
            dst=dst,
            tag=tag,
            payload=copy_payload(payload),
            event=event)
        self._channels.setdefault((src, dst, tag), collections.deque()).append(
            msg)
        return msg

    def post_collective(
            self,
            rank: int,
            kind: CommKind,
            group: list[int],
            payload: Any) -> CollectiveRequest:
        gkey = tuple(group)
        if rank not in gkey or len(set(gkey)) != len(gkey):
            raise ValueError(
                f"rank {rank} must be in group {group} without duplicates")
        for member in gkey:
            self._check_rank(member)
        seq_key = (rank, kind, gkey)
        seq = self._coll_seq[seq_key]
        self._coll_seq[seq_key] += 1
        req = CollectiveRequest(kind, gkey, seq, payload)
        entry = self._collectives.setdefault(
            req.get_key(), {"posted": {}, "stages": {}, "results": None})
        entry["posted"][rank] = payload
        entry["stages"][rank] = self._stage_of(rank)
        return req

    def _finish_collective(
            self,
            kind: CommKind,
            group: tuple[int, ...],
            entry: dict[str, Any]) -> dict[int, Any]:
        posted: dict[int, Any] = entry["posted"]
        stages: dict[int, int] = entry["stages"]
        if kind == "all_to_all":
            sizes = {
                payload_nbytes(chunk)
                for member in group
                for chunk in posted[member]
            }
        else:
            sizes = {payload_nbytes(posted[member]) for member in group}
        if len(sizes) > 1:
            raise ShapeError(
                f"ragged chunks in {kind} of group {list(group)}: "
                f"{sorted(sizes)} bytes")
        op = self._next_op()
        results: dict[int, Any] = {}
        for dix, dst in enumerate(group):
            received = []
            for src in group:
                chunk = (
                    posted[src][dix] if kind == "all_to_all"
                    else posted[src])
                num_bytes = payload_nbytes(chunk)
                if src != dst and num_bytes > 0:
                    event = self._log.add_event(
                        op=op,
                        kind=kind,
                        blocking=True,
                        stream=MAIN_STREAM,
                        stage=stages[src],
                        src=src,
                        dst=dst,
                        group=list(group),
                        num_bytes=num_bytes)
                    event["dst_stage"] = stages[dst]
                received.append(copy_payload(chunk))
            results[dst] = received
        return results

    def _try_complete(self, state: _RankState) -> bool:
        req = state.request
        rank = state.ctx.get_rank()
        if isinstance(req, SendRequest):
            if not req.get_message().is_delivered():
                return False
            state.value = None
        elif isinstance(req, WaitRequest):
            if not req.get_handle().is_done():
                return False
            state.value = None
        elif isinstance(req, RecvRequest):
            queue = self._channels.get((req.get_src(), rank, req.get_tag()))
            if not queue:
                return False
            msg = queue.popleft()
            msg.deliver(state.ctx.get_stage())
            payload = msg.get_payload()
            shape = req.get_shape()
            if shape is not None and payload_shape(payload) != shape:
                raise ShapeError(
                    f"rank {rank} expected shape {shape} from rank "
                    f"{req.get_src()} got {payload_shape(payload)}")
            state.value = payload
        elif isinstance(req, CollectiveRequest):
            key = req.get_key()
            entry = self._collectives[key]
            kind, group, _ = key
            if len(entry["posted"]) < len(group):
                return False
            if entry["results"] is None:
                entry["results"] = self._finish_collective(kind, group, entry)
            results: dict[int, Any] = entry["results"]
            state.value = results.pop(rank)
            if not results:
                self._collectives.pop(key)
        else:
            raise RankError(rank, TypeError(f"invalid request {req!r}"))
        state.request = None
        return True

    def _advance(self, state: _RankState) -> None:
        rank = state.ctx.get_rank()
        try:
            req = state.gen.send(state.value)
        except StopIteration as stop:
            state.done = True
            state.result = stop.value
            return
        except Exception as err:  # pylint: disable=broad-exception-caught
            raise RankError(rank, err) from err
        if not isinstance(req, Request):
            raise RankError(rank, TypeError(f"yielded non request {req!r}"))
        state.value = None
        state.request = req
        self._try_complete(state)

    def run(self, program: RankProgram) -> list[Any]:
        self._ranks = []
        for rank in range(self.get_world_size()):
            ctx = RankContext(self, rank)
            self._ranks.append(_RankState(ctx, program(ctx)))
        while not all(state.done for state in self._ranks):
            progress = False
            for state in self._ranks:
                if state.done:
                    continue
                if state.request is None:
                    self._advance(state)
                    progress = True
                elif self._try_complete(state):
                    progress = True
            if not progress:
                raise DeadlockError({
                    state.ctx.get_rank(): (
                        state.request.describe()
                        if state.request is not None else "is ready")
                    for state in self._ranks
                    if not state.done
                })
        return [state.result for state in self._ranks]


def spawn_world(
        topology: Topology,
        program: RankProgram) -> tuple[list[Any], CommLog, StageTimeline]:
    """
    Runs one program per rank to completion.

    Args:
        topology (Topology): The simulated cluster.
        program (RankProgram): Creates the generator of a rank from its
            context.

    Returns:
        tuple[list[Any], CommLog, StageTimeline]: The return value of every
        rank, the traffic and the stage timing.
    """
    world = World(topology)
    results = world.run(program)
    log = world.get_log()
    compute = world.get_compute()
    log.mark_exposure(compute)
    return results, log, StageTimeline(log, compute, world.get_pairs())
