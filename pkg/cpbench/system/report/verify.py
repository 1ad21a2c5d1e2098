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
Self checks behind `verify`. Every check compares the simulated or analytic
results against an independent computation and reports the largest
deviation.
"""
import math
from collections.abc import Callable
from typing import TypedDict

import numpy as np

from cpbench.misc.util import log_msg, progress
from cpbench.system.attnref.partial import AttentionPartial, merge_partials
from cpbench.system.attnref.reference import (
    attention_backward,
    attention_forward,
    streaming_forward,
)
from cpbench.system.cpmech.common import Mechanism, MECHANISMS
from cpbench.system.cpmech.driver import run_mechanism
from cpbench.system.cpmech.meta import count_stage_pairs, create_varlen_meta
from cpbench.system.cpmech.plan import (
    create_process_grid,
    plan_zigzag,
    ProcessGrid,
)
from cpbench.system.fabric.topology import create_topology
from cpbench.system.masks.count import count_unmasked, count_unmasked_brute
from cpbench.system.masks.pattern import (
    create_mask_spec,
    DOCUMENT_PATTERNS,
    MASK_PATTERNS,
    MaskPattern,
    MaskSpec,
    PREFIX_PATTERNS,
    WINDOW_PATTERNS,
)
from cpbench.system.numcore import create_head_layout, HeadLayout
from cpbench.system.sparse.blocks import (
    block_mask_to_dense,
    DEFAULT_SPARSITY_RATIOS,
    sample_block_mask,
    selected_area,
    uniform_grid,
)


CheckResult = TypedDict('CheckResult', {
    "name": str,
    "passed": bool,
    "detail": str,
})


ORACLE_PATTERNS: tuple[MaskPattern, ...] = (
    "Full",
    "Causal",
    "FullDocument",
    "CausalDocument",
)
FORWARD_TOL = 1e-10
EXACT_FORWARD_TOL = 1e-12
BACKWARD_TOL = 1e-9
STREAM_TOL = 1e-12
VERIFY_HEAD_DIM = 8
VERIFY_SEED = 42


def fixed_documents(seq_len: int) -> list[int]:
    """Three uneven documents (fewer for tiny sequences)."""
    cuts = sorted({seq_len // 4, seq_len // 2 + 3})
    return [0] + [cut for cut in cuts if 0 < cut < seq_len] + [seq_len]


def oracle_mask(pattern: MaskPattern, seq_len: int) -> MaskSpec:
    doc_offsets = None
    if pattern in DOCUMENT_PATTERNS:
        doc_offsets = fixed_documents(seq_len)
    return create_mask_spec(pattern, seq_len, doc_offsets=doc_offsets)


def random_mask(
        pattern: MaskPattern,
        max_len: int,
        rng: np.random.Generator) -> MaskSpec:
    """
    Draws a random valid mask of the given pattern with trailing padding.

    Args:
        pattern (MaskPattern): The pattern.
        max_len (int): The largest sequence length.
        rng (np.random.Generator): The random source.

    Returns:
        MaskSpec: The mask.
    """
    seq_len = int(rng.integers(1, max_len + 1))
    pad_len = int(rng.integers(0, seq_len // 4 + 1))
    rlen = seq_len - pad_len
    doc_offsets = None
    window = None
    prefix_lens = None
    block_size = None
    global_len = None
    if pattern in DOCUMENT_PATTERNS:
        num_cuts = int(rng.integers(0, min(4, rlen)))
        cuts = rng.choice(
            np.arange(1, rlen), size=num_cuts, replace=False)
        doc_offsets = [0] + sorted(int(cut) for cut in cuts) + [rlen]
    if pattern in WINDOW_PATTERNS:
        window = int(rng.integers(1, rlen + 1))
    if pattern == "GlobalSliding":
        global_len = int(rng.integers(0, seq_len + 1))
    if pattern == "BlockCausalDocument":
        block_size = int(rng.integers(1, 9))
    if pattern in PREFIX_PATTERNS:
        bounds = doc_offsets if doc_offsets is not None else [0, rlen]
        prefix_lens = [
            int(rng.integers(0, end - start + 1))
            for start, end in zip(bounds[:-1], bounds[1:])
        ]
    return create_mask_spec(
        pattern,
        seq_len,
        doc_offsets=doc_offsets,
        window=window,
        prefix_lens=prefix_lens,
        block_size=block_size,
        global_len=global_len,
        pad_len=pad_len)


def random_qkv(
        layout: HeadLayout,
        seq_len: int,
        rng: np.random.Generator) -> tuple[np.ndarray, ...]:
    dim = layout["head_dim"]
    q_shape = (layout["q_heads"], seq_len, dim)
    kv_shape = (layout["kv_heads"], seq_len, dim)
    return (
        rng.standard_normal(q_shape),
        rng.standard_normal(kv_shape),
        rng.standard_normal(kv_shape),
        rng.standard_normal(q_shape),
    )


def _max_err(left: np.ndarray, right: np.ndarray) -> float:
    return float(np.max(np.abs(left - right)))


def oracle_runs(world_size: int) -> list[tuple[Mechanism, ProcessGrid]]:
    """
    Every mechanism on a grid with all-to-all groups of two. LoongTrain
    also runs with two outer windows when the ring size is even.
    """
    grid = create_process_grid(world_size, 2)
    res: list[tuple[Mechanism, ProcessGrid]] = [
        (mechanism, grid) for mechanism in MECHANISMS
    ]
    ring_size = grid["ring_size"]
    if ring_size % 2 == 0:
        res.append((
            "loongtrain",
            create_process_grid(
                world_size, 2, inner_window=ring_size // 2),
        ))
    return res


def check_oracle(*, quick: bool) -> tuple[bool, str]:
    """Every mechanism against the single device reference."""
    world_sizes = (2, 4) if quick else (2, 4, 8)
    seq_lens = (64,) if quick else (64, 256)
    layouts = [
        create_head_layout(8, 8, VERIFY_HEAD_DIM),
        create_head_layout(8, 2, VERIFY_HEAD_DIM),
    ]
    rng = np.random.default_rng(VERIFY_SEED)
    worst_fwd = 0.0
    worst_bwd = 0.0
    failures: list[str] = []
    for seq_len in seq_lens:
        for layout in layouts:
            q, k, v, d_out = random_qkv(layout, seq_len, rng)
            for pattern in ORACLE_PATTERNS:
                mask = oracle_mask(pattern, seq_len)
                ref = attention_forward(q, k, v, layout, mask)
                ref_grads = attention_backward(
                    q, k, v, ref, d_out, layout, mask)
                for world_size in world_sizes:
                    topology = create_topology(world_size)
                    for mechanism, grid in oracle_runs(world_size):
                        run = run_mechanism(
                            mechanism,
                            topology,
                            q,
                            k,
                            v,
                            layout,
                            mask,
                            grid=grid,
                            d_out=d_out)
                        fwd_err = _max_err(run["out"], ref["out"])
                        grads = run["grads"]
                        assert grads is not None
                        bwd_err = max(
                            _max_err(mine, other)
                            for mine, other in zip(grads, ref_grads))
                        fwd_tol = (
                            EXACT_FORWARD_TOL
                            if mechanism in ("ulysses", "ring_allgather")
                            else FORWARD_TOL)
                        worst_fwd = max(worst_fwd, fwd_err)
                        worst_bwd = max(worst_bwd, bwd_err)
                        if fwd_err > fwd_tol or bwd_err > BACKWARD_TOL:
                            failures.append(
                                f"{mechanism} {pattern} S={seq_len} "
                                f"N={world_size} "
                                f"w_out={grid['outer_window']} "
                                f"{layout['q_heads']}:{layout['kv_heads']}"
                                f" fwd={fwd_err:.3g} bwd={bwd_err:.3g}")
    detail = f"max forward {worst_fwd:.3g} max backward {worst_bwd:.3g}"
    if failures:
        detail = f"{detail}; failing: {', '.join(failures)}"
    return not failures, detail


def check_mask_counts(*, quick: bool) -> tuple[bool, str]:
    trials = 8 if quick else 84
    max_len = 64 if quick else 512
    rng = np.random.default_rng(VERIFY_SEED)
    failures: list[str] = []
    for pattern in MASK_PATTERNS:
        for _ in range(trials):
            spec = random_mask(pattern, max_len, rng)
            fast = count_unmasked(spec)
            brute = count_unmasked_brute(spec)
            if fast != brute:
                failures.append(f"{spec}: {fast} != {brute}")
    return (
        not failures,
        f"{trials * len(MASK_PATTERNS)} masks; "
        f"{len(failures)} mismatches {' '.join(failures[:3])}".strip())


def check_zigzag_balance(*, quick: bool) -> tuple[bool, str]:
    seq_len = 256 if quick else 1024
    spec = create_mask_spec("Causal", seq_len)
    details: list[str] = []
    passed = True
    for world_size in (2, 4, 8):
        meta = create_varlen_meta(plan_zigzag(seq_len, world_size), spec)
        per_rank = [sum(row) for row in count_stage_pairs(meta)]
        if len(set(per_rank)) != 1:
            passed = False
        details.append(f"N={world_size}: {per_rank}")
    return passed, "; ".join(details)


def _random_partial(
        rng: np.random.Generator,
        shape: tuple[int, int, int]) -> AttentionPartial:
    lse = rng.standard_normal(shape[:2])
    lse[rng.random(shape[:2]) < 0.2] = -np.inf
    out = np.where(
        np.isfinite(lse)[..., None], rng.standard_normal(shape), 0.0)
    return {
        "out": out,
        "lse": lse,
    }


def _partial_err(left: AttentionPartial, right: AttentionPartial) -> float:
    lse_same = (
        np.isneginf(left["lse"]) == np.isneginf(right["lse"])).all()
    if not lse_same:
        return math.inf
    finite = np.isfinite(left["lse"])
    lse_err = _max_err(
        np.where(finite, left["lse"], 0.0),
        np.where(finite, right["lse"], 0.0))
    return max(lse_err, _max_err(left["out"], right["out"]))


def check_streaming(*, quick: bool) -> tuple[bool, str]:
    """Random chunkings match the one shot result and merge is a monoid."""
    chunkings = 10 if quick else 100
    seq_len = 48
    layout = create_head_layout(4, 2, VERIFY_HEAD_DIM)
    rng = np.random.default_rng(VERIFY_SEED)
    q, k, v, _ = random_qkv(layout, seq_len, rng)
    worst = 0.0
    for ix in range(chunkings):
        mask = oracle_mask(ORACLE_PATTERNS[ix % len(ORACLE_PATTERNS)], seq_len)
        ref = attention_forward(q, k, v, layout, mask)
        num_cuts = int(rng.integers(0, 8))
        cuts = sorted(
            int(cut) for cut in rng.choice(
                np.arange(1, seq_len), size=num_cuts, replace=False))
        bounds = [0] + cuts + [seq_len]
        chunks = [
            (k[:, start:end], v[:, start:end])
            for start, end in zip(bounds[:-1], bounds[1:])
        ]
        res = streaming_forward(q, chunks, layout, mask)
        worst = max(worst, _partial_err(res, ref))
    for _ in range(chunkings):
        parts = [_random_partial(rng, (2, 5, 3)) for _ in range(3)]
        first, second, third = parts
        worst = max(
            worst,
            _partial_err(
                merge_partials(first, second),
                merge_partials(second, first)),
            _partial_err(
                merge_partials(merge_partials(first, second), third),
                merge_partials(first, merge_partials(second, third))))
    return worst <= STREAM_TOL, f"max deviation {worst:.3g}"


def check_block_sparsity(*, quick: bool) -> tuple[bool, str]:
    seeds = 10 if quick else 100
    grid = uniform_grid(256, 16)
    num_k = len(grid["k_block_sizes"])
    failures: list[str] = []
    for ratio in DEFAULT_SPARSITY_RATIOS:
        expected = max(1, math.floor(ratio * num_k + 0.5))
        for seed in range(seeds):
            mask = sample_block_mask(grid, ratio, 2, seed)
            for group in range(mask["groups"]):
                sizes = {len(sel) for sel in mask["selected"][group]}
                dense = block_mask_to_dense(mask, group)
                if sizes != {expected}:
                    failures.append(f"ratio={ratio} seed={seed} {sizes}")
                if int(dense.sum()) != selected_area(mask, group):
                    failures.append(f"ratio={ratio} seed={seed} area")
    return not failures, f"{len(failures)} failures {failures[:3]}"


CHECKS: dict[str, Callable[..., tuple[bool, str]]] = {
    "oracle": check_oracle,
    "mask_counts": check_mask_counts,
    "zigzag_balance": check_zigzag_balance,
    "streaming": check_streaming,
    "block_sparsity": check_block_sparsity,
}


def verify_suite(
        *,
        quick: bool = False,
        show_progress: bool = False) -> list[CheckResult]:
    """
    Runs all checks. Exceptions count as failures.

    Args:
        quick (bool, optional): Smaller matrices and fewer trials.
        show_progress (bool, optional): Whether to show a progress bar.

    Returns:
        list[CheckResult]: One result per check.
    """
    res: list[CheckResult] = []
    with progress(
            desc="checks", total=len(CHECKS), show=show_progress) as advance:
        for name, check in CHECKS.items():
            try:
                passed, detail = check(quick=quick)
            except Exception as err:  # pylint: disable=broad-exception-caught
                passed = False
                detail = f"{type(err).__name__}: {err}"
            log_msg(
                "VERIFY", f"{name} {'ok' if passed else 'FAILED'}: {detail}")
            res.append({
                "name": name,
                "passed": passed,
                "detail": detail,
            })
            advance(1)
    return res
