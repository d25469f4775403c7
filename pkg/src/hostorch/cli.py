"""Command-line entry points.

Exit codes: 0 success, 1 diff mismatch or invalid input, 2 usage error
(bad arguments, missing files).
"""
from __future__ import annotations

import argparse
import asyncio
import logging
import sys
from typing import List, Optional

from .config import ConfigError, load_config, parse_duration
from .metrics import compute_metrics
from .sim import ScenarioError, load_scenario, run_scenario
from .trace import TraceError, TraceSink, first_divergence, iter_host, read_trace

OK, FAILED, USAGE = 0, 1, 2


def _duration(text: str) -> int:
    try:
        return parse_duration(text)
    except ConfigError as e:
        raise argparse.ArgumentTypeError(str(e)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hostorch", description="On-demand host orchestration.")
    sub = p.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("sim", help="deterministic simulator").add_subparsers(
        dest="sim_command", required=True
    )
    run = sim.add_parser("run", help="run a scenario and write its trace")
    run.add_argument("--config", required=True, help="platform config file")
    run.add_argument("--scenario", required=True, help="scripts and stimuli")
    run.add_argument("--seed", type=int, default=0, help="jitter seed (default 0)")
    run.add_argument("--trace", required=True, help="output trace file")
    run.add_argument("--horizon", type=_duration, default=None,
                     help="stop at this virtual time, e.g. 30s; default: run to quiescence")
    diff = sim.add_parser("diff", help="compare a trace with a golden trace")
    diff.add_argument("--golden", required=True)
    diff.add_argument("--trace", required=True)

    proc = sub.add_parser("proc", help="local process backend").add_subparsers(
        dest="proc_command", required=True
    )
    up = proc.add_parser("up", help="serve configured hosts as local processes")
    up.add_argument("--config", required=True, help="config with [process] and [hosts] sections")
    up.add_argument("--trace", required=True, help="output trace file")
    up.add_argument("--portmap", default="portmap.txt", help="where to write <hostname> <port> lines")
    up.add_argument("--duration", type=float, default=None, help="seconds; default until SIGINT")

    m = sub.add_parser("metrics", help="resource usage recomputed from a trace")
    m.add_argument("--trace", required=True)

    ins = sub.add_parser("inspect", help="records of one host")
    ins.add_argument("--trace", required=True)
    ins.add_argument("--host", required=True)
    return p


def cmd_sim_run(args) -> int:
    config = load_config(args.config)
    scenario = load_scenario(args.scenario)
    with open(args.trace, "w", encoding="utf-8") as out:
        run_scenario(config, scenario, args.seed, args.horizon, TraceSink(out))
    return OK


def cmd_sim_diff(args) -> int:
    golden = read_trace(args.golden)
    trace = read_trace(args.trace)
    i = first_divergence(golden, trace)
    if i is None:
        print(f"identical ({len(golden)} records)")
        return OK
    print(f"first divergence at record {i}")
    print("golden: " + (golden[i].format() if i < len(golden) else "<end of trace>"))
    print("trace:  " + (trace[i].format() if i < len(trace) else "<end of trace>"))
    return FAILED


def cmd_proc_up(args) -> int:
    from .process import serve

    config = load_config(args.config)
    with open(args.trace, "w", encoding="utf-8") as out:
        asyncio.run(serve(config, TraceSink(out), args.portmap, args.duration))
    return OK


def cmd_metrics(args) -> int:
    print(compute_metrics(read_trace(args.trace)).format(), end="")
    return OK


def cmd_inspect(args) -> int:
    n = 0
    for rec in iter_host(read_trace(args.trace), args.host):
        print(rec.format())
        n += 1
    if n == 0:
        print(f"no records for host {args.host}", file=sys.stderr)
        return FAILED
    return OK


COMMANDS = {
    ("sim", "run"): cmd_sim_run,
    ("sim", "diff"): cmd_sim_diff,
    ("proc", "up"): cmd_proc_up,
    ("metrics", None): cmd_metrics,
    ("inspect", None): cmd_inspect,
}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return USAGE if e.code else OK
    sub = getattr(args, "sim_command", None) or getattr(args, "proc_command", None)
    try:
        return COMMANDS[(args.command, sub)](args)
    except FileNotFoundError as e:
        print(f"error: {e.filename}: no such file", file=sys.stderr)
        return USAGE
    except (ConfigError, ScenarioError, TraceError) as e:
        print(f"error: {e}", file=sys.stderr)
        return FAILED


if __name__ == "__main__":
    sys.exit(main())
