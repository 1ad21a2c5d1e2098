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
import os
from typing import Literal

from cpbench.misc.util import to_bool


EnvPath = Literal[
    "CONFIG_PATH",
]
EnvInt = Literal[
    "CPBENCH_DENSE_CAP",
    "CPBENCH_SEED",
    "LONGCA_SEED",
]
EnvBool = Literal[
    "CPBENCH_PROGRESS",
]


def _envload(key: str, default: str | None) -> str:
    res = os.environ.get(key)
    if res is not None:
        return res
    if default is not None:
        return default
    raise ValueError(f"env {key} must be set!")


def envload_path(key: EnvPath, *, default: str | None = None) -> str:
    return _envload(key, default)


def envload_int(key: EnvInt, *, default: int | None = None) -> int:
    return int(_envload(key, None if default is None else f"{default}"))


def envload_maybe_int(key: EnvInt) -> int | None:
    res = os.environ.get(key)
    if res is None or not res.strip():
        return None
    return int(res)


def envload_bool(key: EnvBool, *, default: bool | None = None) -> bool:
    return to_bool(_envload(key, None if default is None else f"{default}"))
