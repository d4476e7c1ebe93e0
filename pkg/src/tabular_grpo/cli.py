"""Command line entry point: ``tabular-grpo <subcommand> ...``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from . import harness
from .bounds import SLACK_TOLERANCE, counterexample_search, load_counterexample, random_instances
from .plots import PLOT_KINDS, PlotError, plot
from .policy_core import ConfigError


def _cmd_train(args) -> int:
    return harness.run(args.config, args.set)


def _cmd_check_bounds(args) -> int:
    if args.replay:
        status = 0
        for path in args.replay:
            ce = load_counterexample(path)
            orig, small = ce.instance.report().min_slack, ce.shrunk.report().min_slack
            bad = min(orig, small) < -args.tolerance
            status |= bad
            print(f"{path}: min slack {orig:.6e} (shrunk {small:.6e}) -> {'VIOLATION' if bad else 'holds'}")
        return int(status)

    start = time.perf_counter()
    worst = float("inf")
    found = []
    for inst in random_instances(
        args.instances, args.prompts, args.responses, args.var_epsilon, args.seed, binary=not args.real_rewards
    ):
        slack = inst.report().min_slack
        worst = min(worst, slack)
        if slack < -args.tolerance:
            found += counterexample_search([inst], tolerance=args.tolerance)
    elapsed = time.perf_counter() - start
    print(f"instances: {args.instances}")
    print(f"min slack: {worst:.6e}")
    print(f"counterexamples: {len(found)}")
    print(f"runtime: {elapsed:.2f} s")
    if found and args.replay_dir:
        out = Path(args.replay_dir)
        out.mkdir(parents=True, exist_ok=True)
        for n, ce in enumerate(found):
            print(f"  wrote {ce.save(out / f'counterexample_{n:04d}.json')}")
    return 1 if found else 0


def _cmd_plot(args) -> int:
    out = Path(args.output)
    out.parent.mkdir(parents=True, exist_ok=True)
    plot(args.kind, args.files, out)
    print(f"wrote {out}")
    return 0


def _cmd_compare(args) -> int:
    rows = harness.compare(args.runs, args.metric)
    table = harness.format_table(rows, args.metric)
    sys.stdout.write(table)
    if args.output:
        Path(args.output).write_text(table)
    return 0


def _cmd_eval(args) -> int:
    res = harness.evaluate_checkpoint(args.checkpoint, args.samples, args.config, args.seed)
    print(json.dumps(res, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tabular-grpo", description="Tabular GRPO experiments and bound checks.")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="run an experiment from a config file")
    t.add_argument("config")
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE", help="override a config value")
    t.set_defaults(func=_cmd_train)

    c = sub.add_parser("check-bounds", help="search random instances for violations of the improvement bound")
    c.add_argument("--instances", type=int, default=1000)
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--tolerance", type=float, default=SLACK_TOLERANCE)
    c.add_argument("--prompts", type=int, default=4)
    c.add_argument("--responses", type=int, default=6)
    c.add_argument("--var-epsilon", type=float, default=1e-4)
    c.add_argument("--real-rewards", action="store_true", help="rewards uniform in [0,1] instead of binary")
    c.add_argument("--replay-dir", help="write counterexample replay files here")
    c.add_argument("--replay", nargs="+", metavar="FILE", help="re-evaluate saved counterexample files")
    c.set_defaults(func=_cmd_check_bounds)

    pl = sub.add_parser("plot", help="render an SVG chart")
    pl.add_argument("--kind", required=True, choices=PLOT_KINDS)
    pl.add_argument("files", nargs="*", help="metrics files or run directories")
    pl.add_argument("--output", "-o", default="plot.svg")
    pl.set_defaults(func=_cmd_plot)

    cm = sub.add_parser("compare", help="min/max/median/mean of a metric across runs")
    cm.add_argument("runs", nargs="+")
    cm.add_argument("--metric", default="mean_reward")
    cm.add_argument("--output", "-o")
    cm.set_defaults(func=_cmd_compare)

    e = sub.add_parser("eval", help="pass@1 of a saved checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--samples", type=int, required=True)
    e.add_argument("--config", help="config file (defaults to the echo next to the checkpoint)")
    e.add_argument("--seed", type=int, default=0)
    e.set_defaults(func=_cmd_eval)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, PlotError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
