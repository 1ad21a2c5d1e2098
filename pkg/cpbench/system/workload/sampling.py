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
import sys
from typing import Any, get_args, Literal, TypeAlias


if sys.version_info >= (3, 11):
    from typing import NotRequired, TypedDict
else:
    from typing_extensions import NotRequired, TypedDict

import numpy as np


LengthKind: TypeAlias = Literal["uniform", "lognormal", "point"]
LENGTH_KINDS: tuple[LengthKind, ...] = get_args(LengthKind)


LengthComponent = TypedDict('LengthComponent', {
    "weight": float,
    "kind": LengthKind,
    "low": NotRequired[int],
    "high": NotRequired[int],
    "mu": NotRequired[float],
    "sigma": NotRequired[float],
    "length": NotRequired[int],
})
LengthDistribution = TypedDict('LengthDistribution', {
    "components": list[LengthComponent],
    "max_len": int,
})


WEIGHT_TOLERANCE = 1e-9


def _check_component(comp: LengthComponent, max_len: int) -> None:
    kind = comp["kind"]
    if kind not in LENGTH_KINDS:
        raise ValueError(f"unknown length kind {kind} not in {LENGTH_KINDS}")
    if comp["weight"] < 0:
        raise ValueError(f"negative weight in {comp}")
    if kind == "uniform":
        low = comp.get("low")
        high = comp.get("high")
        if low is None or high is None or not 1 <= low <= high <= max_len:
            raise ValueError(
                f"uniform component needs 1 <= low <= high <= {max_len}: "
                f"{comp}")
    elif kind == "point":
        length = comp.get("length")
        if length is None or not 1 <= length <= max_len:
            raise ValueError(
                f"point component needs 1 <= length <= {max_len}: {comp}")
    elif comp.get("mu") is None or comp.get("sigma", -1.0) < 0:
        raise ValueError(f"lognormal component needs mu and sigma: {comp}")


def create_length_distribution(
        components: list[LengthComponent], max_len: int) -> LengthDistribution:
    if max_len < 1:
        raise ValueError(f"max_len must be positive got {max_len}")
    if not components:
        raise ValueError("distribution needs at least one component")
    for comp in components:
        _check_component(comp, max_len)
    total = sum(comp["weight"] for comp in components)
    if abs(total - 1.0) > WEIGHT_TOLERANCE:
        raise ValueError(f"weights must sum to 1 got {total}")
    return {
        "components": components,
        "max_len": max_len,
    }


def length_distribution_from_json(obj: dict[str, Any]) -> LengthDistribution:
    return create_length_distribution(
        [dict(comp) for comp in obj["components"]],  # type: ignore
        int(obj["max_len"]))


def sample_lengths(
        dist: LengthDistribution, seed: int, n: int) -> list[int]:
    """
    Draws document lengths. Component choices are drawn first, then all
    lengths of each component in component order.

    Args:
        dist (LengthDistribution): The mixture.
        seed (int): The seed.
        n (int): The number of lengths.

    Returns:
        list[int]: The lengths, each in [1, max_len].
    """
    if n < 1:
        raise ValueError(f"n must be positive got {n}")
    rng = np.random.default_rng(seed)
    comps = dist["components"]
    weights = np.array([comp["weight"] for comp in comps], dtype=np.float64)
    choice = rng.choice(len(comps), size=n, p=weights / weights.sum())
    res = np.zeros(n, dtype=np.int64)
    for cix, comp in enumerate(comps):
        where = np.flatnonzero(choice == cix)
        if not where.size:
            continue
        kind = comp["kind"]
        if kind == "point":
            vals = np.full(where.size, comp["length"], dtype=np.int64)
        elif kind == "uniform":
            vals = rng.integers(
                comp["low"], comp["high"], size=where.size, endpoint=True)
        else:
            vals = np.rint(rng.lognormal(
                comp["mu"], comp["sigma"], size=where.size)).astype(np.int64)
        res[where] = vals
    return [int(val) for val in np.clip(res, 1, dist["max_len"])]
