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
"""Error types. Every error is a `ValueError` so callers that only know
about invalid input keep working."""


class ShapeError(ValueError):
    """Tensor or message shapes do not fit together."""


class SizeCapError(ValueError):
    """A dense materialization would exceed the configured cap."""


class RepresentationError(ValueError):
    """A mask cannot be expressed in the requested encoding."""

    def __init__(self, column: int, intervals: int) -> None:
        super().__init__(
            f"column {column} has {intervals} allowed row intervals "
            "but at most 2 can be represented")
        self.column = column
        self.intervals = intervals


class CapabilityError(ValueError):
    """A mechanism or kernel does not support the requested setup."""


class DivisibilityError(ValueError):
    """A size does not divide as required. Pad the sequence first."""


class MissingStateError(ValueError):
    """A backward pass was invoked without the matching forward state."""


class FabricError(ValueError):
    """Base class for failures while simulating the rank programs."""


class DeadlockError(FabricError):
    def __init__(self, wait_graph: dict[int, str]) -> None:
        edges = ", ".join(
            f"rank {rank} {desc}" for rank, desc in sorted(wait_graph.items()))
        super().__init__(f"deadlock: {edges}")
        self.wait_graph = wait_graph


class RankError(FabricError):
    def __init__(self, rank: int, err: BaseException) -> None:
        super().__init__(f"rank {rank} failed: {err!r}")
        self.rank = rank
        self.err = err
