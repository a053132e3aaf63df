"""Command-line entry point: ``attnmem <command> [--config FILE] [--a.b.c=value ...]``."""

from __future__ import annotations

import argparse
import logging
import os
import sys

from threadpoolctl import threadpool_limits

from . import config as C
from . import runner
from .errors import AttnMemError, ConfigError

THREADS_ENV = "ATTNMEM_THREADS"

COMMANDS = {
    "synth-data": runner.cmd_synth_data,
    "tokenizer-fit": runner.cmd_tokenizer_fit,
    "train": runner.cmd_train,
    "exp1": runner.cmd_exp1,
    "exp2": runner.cmd_exp2,
}
_OWN_FLAGS = {"config", "out", "verbose"}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="attnmem", description="Attention-as-memory experiments on a toy transformer.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", help="YAML config file; omitted keys keep their defaults")
    r = sub.add_parser("report")
    r.add_argument("runs", nargs="+", help="finished exp1/exp2 run directories")
    r.add_argument("--out", required=True, help="directory for the merged tables and plot data")
    sub.add_parser("show-config").add_argument("--config")
    return p


def _split_overrides(argv: list[str]) -> tuple[list[str], dict[str, str]]:
    """Pull ``--dotted.path=value`` flags out of ``argv``."""
    rest, overrides = [], {}
    for arg in argv:
        key = arg[2:].split("=", 1)[0]
        if arg.startswith("--") and "=" in arg and key not in _OWN_FLAGS:
            overrides[key] = arg.split("=", 1)[1]
        else:
            rest.append(arg)
    return rest, overrides


def _threads() -> int | None:
    raw = os.environ.get(THREADS_ENV)
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError(f"{THREADS_ENV} must be a positive integer, got {raw!r}")
    return n


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    rest, overrides = _split_overrides(argv)
    args = _parser().parse_args(rest)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        with threadpool_limits(limits=_threads()):
            if args.command == "report":
                if overrides:
                    raise ConfigError("report takes no config overrides")
                print(runner.cmd_report(args.runs, args.out))
                return 0
            cfg = C.load(args.config, overrides)
            if args.command == "show-config":
                print(cfg.dump(), end="")
                return 0
            print(COMMANDS[args.command](cfg))
            return 0
    except AttnMemError as exc:
        print(f"attnmem: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
