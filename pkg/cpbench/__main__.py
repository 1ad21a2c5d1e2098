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
import argparse
import os
import sys

from dotenv import load_dotenv

from cpbench.misc.env import envload_bool
from cpbench.misc.util import log_msg, python_module
from cpbench.system.config import load_config
from cpbench.system.masks.export import render_ascii
from cpbench.system.masks.kernels import (
    capability_frame,
    dense_kernel_capabilities,
)
from cpbench.system.masks.pattern import create_mask_spec, get_mask_pattern
from cpbench.system.report.runner import get_report_format, run_matrix
from cpbench.system.report.verify import verify_suite
from cpbench.system.sparse.kernels import (
    sparse_capability_frame,
    sparse_kernel_capabilities,
)


def parse_int_list(text: str | None) -> list[int] | None:
    if text is None:
        return None
    return [int(elem) for elem in text.split(",") if elem.strip()]


def parse_args_run(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--config",
        default=None,
        type=str,
        help=(
            "The benchmark config file. Defaults to the CONFIG_PATH env "
            "variable or config.json."))
    parser.add_argument(
        "--out",
        default=None,
        type=str,
        help="The output folder. Overrides the folder of the config.")
    parser.add_argument(
        "--format",
        default=None,
        action="append",
        choices=["csv", "json", "svg"],
        help=(
            "Which reports to write. Can be given multiple times. "
            "Defaults to csv and json."))


def parse_args_masks(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "action",
        choices=["show"],
        help="show prints an ascii preview of the mask")
    parser.add_argument(
        "--pattern",
        required=True,
        type=str,
        help="The mask pattern.")
    parser.add_argument(
        "--seq-len",
        required=True,
        type=int,
        help="The number of tokens including padding.")
    parser.add_argument(
        "--doc-offsets",
        default=None,
        type=str,
        help="Comma separated document boundaries, e.g. 0,5,12.")
    parser.add_argument(
        "--window",
        default=None,
        type=int,
        help="The sliding window size.")
    parser.add_argument(
        "--prefix-lens",
        default=None,
        type=str,
        help="Comma separated prefix lengths per document.")
    parser.add_argument(
        "--block-size",
        default=None,
        type=int,
        help="The block size of BlockCausalDocument.")
    parser.add_argument(
        "--global-len",
        default=None,
        type=int,
        help="The number of global tokens of GlobalSliding.")
    parser.add_argument(
        "--pad-len",
        default=0,
        type=int,
        help="The number of trailing pad tokens.")


def parse_args_verify(parser: argparse.ArgumentParser) -> None:
    parser.add_argument(
        "--quick",
        default=False,
        action="store_true",
        help="runs smaller matrices")


def parse_args() -> argparse.Namespace:
    parser = argparse.ArgumentParser(
        prog=f"python -m {python_module()}",
        description="Simulated context parallel attention benchmark")
    parser.add_argument(
        "--env",
        default=None,
        help="loads the given env file at startup")
    parser.add_argument(
        "--progress",
        default=None,
        action="store_true",
        help=(
            "shows progress bars. defaults to the CPBENCH_PROGRESS env "
            "variable"))
    subparser = parser.add_subparsers(title="Commands", required=True)

    subparser_run = subparser.add_parser("run")
    subparser_run.set_defaults(func=run_bench)
    parse_args_run(subparser_run)

    subparser_masks = subparser.add_parser("masks")
    subparser_masks.set_defaults(func=run_masks)
    parse_args_masks(subparser_masks)

    subparser_verify = subparser.add_parser("verify")
    subparser_verify.set_defaults(func=run_verify)
    parse_args_verify(subparser_verify)

    subparser_capabilities = subparser.add_parser("capabilities")
    subparser_capabilities.set_defaults(func=run_capabilities)
    return parser.parse_args()


def show_progress(args: argparse.Namespace) -> bool:
    if args.progress is not None:
        return bool(args.progress)
    return envload_bool("CPBENCH_PROGRESS", default=False)


def run_bench(args: argparse.Namespace) -> int:
    config = load_config(args.config)
    formats = tuple(
        get_report_format(fmt) for fmt in (args.format or ["csv", "json"]))
    report = run_matrix(
        config["runs"],
        args.out or config["output"],
        formats=formats,
        show_progress=show_progress(args))
    for fname in report["files"]:
        print(fname)
    return 1 if report["failed"] else 0


def run_masks(args: argparse.Namespace) -> int:
    spec = create_mask_spec(
        get_mask_pattern(args.pattern),
        args.seq_len,
        doc_offsets=parse_int_list(args.doc_offsets),
        window=args.window,
        prefix_lens=parse_int_list(args.prefix_lens),
        block_size=args.block_size,
        global_len=args.global_len,
        pad_len=args.pad_len)
    print(render_ascii(spec))
    return 0


def run_verify(args: argparse.Namespace) -> int:
    results = verify_suite(quick=args.quick, show_progress=show_progress(args))
    failed = [result["name"] for result in results if not result["passed"]]
    if failed:
        log_msg("VERIFY", f"failed checks: {', '.join(failed)}")
        return 1
    log_msg("VERIFY", f"all {len(results)} checks passed")
    return 0


def run_capabilities(_args: argparse.Namespace) -> int:
    dense = capability_frame(dense_kernel_capabilities())
    print(dense.map(lambda val: "yes" if val else "no").to_string())
    print()
    print(sparse_capability_frame(sparse_kernel_capabilities()).to_string())
    return 0


def run() -> None:
    args = parse_args()
    env_file: str | None = args.env
    if env_file:
        if not os.path.exists(env_file):
            print(f"could not load env! {env_file} does not exist!")
        else:
            print(f"loading env {env_file}")
            load_dotenv(env_file)
    try:
        code = args.func(args)
    except ValueError as err:
        log_msg("MAIN", f"{type(err).__name__}: {err}")
        code = 2
    sys.exit(code)


if __name__ == "__main__":
    run()
