"""Command-line entry point: ``mqt <subcommand>``.

Exit codes: 0 success, 1 contract/config error, 2 acceptance failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys

from . import flops as flops_mod
from .model import ConfigError
from .serialization import FormatError
from .synth import DatasetError, generate_scene, read_dataset, write_dataset
from .tensor import ContractError, DimensionError
from .train import (
    CheckpointError,
    RunConfig,
    evaluate,
    format_report,
    gradcheck,
    load_checkpoint,
    train,
)

EXIT_OK, EXIT_ERROR, EXIT_FAILED = 0, 1, 2
_REQUIRE = re.compile(r"^(\w+)\.(\w+)\s*(>=|<=)\s*([-+0-9.eE]+)$")


def _cmd_train(args) -> int:
    cfg = RunConfig.from_json(args.config)
    if args.iterations is not None:
        cfg.iterations = args.iterations
    if args.checkpoint:
        cfg.checkpoint = args.checkpoint
    state = None
    if args.resume:
        state, _ = load_checkpoint(args.resume, cfg.tasks)
    state = train(cfg, state=state)
    last = f"{state.loss_trace[-1]:.6f}" if state.loss_trace else "n/a"
    print(f"trained {state.step} steps, final loss {last}")
    return EXIT_OK


def _cmd_eval(args) -> int:
    state, _ = load_checkpoint(args.checkpoint)
    scenes = read_dataset(args.data)
    report = evaluate(state.model, scenes)
    print(format_report(report))
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    failed = []
    for req in args.require or []:
        m = _REQUIRE.match(req)
        if not m:
            raise ConfigError(f"cannot parse requirement {req!r}; use task.metric>=value")
        task, metric, op, value = m.group(1), m.group(2), m.group(3), float(m.group(4))
        try:
            got = report[task][metric]
        except KeyError:
            raise ConfigError(f"report has no {task}.{metric}") from None
        ok = got >= value if op == ">=" else got <= value
        print(f"{'PASS' if ok else 'FAIL'} {req} (got {got:.6f})")
        if not ok:
            failed.append(req)
    return EXIT_FAILED if failed else EXIT_OK


def _cmd_gradcheck(args) -> int:
    report = gradcheck(tolerance=args.tolerance, samples=args.samples, seed=args.seed)
    print(report.format())
    print("PASS" if report.passed else f"FAIL: {', '.join(report.failing_groups())}")
    return EXIT_OK if report.passed else EXIT_FAILED


def _cmd_flops(args) -> int:
    sizes = [(args.h, args.w)] if args.h and args.w else [(64, 64), (128, 128)]
    if args.scheme == "model":
        cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
        report = flops_mod.flops_model(cfg.model, cfg.tasks, sizes[0])
        for name, value in report.items.items():
            print(f"{name:<34}{value / 1e9:>14.6f} GFLOPs")
        print(f"{'total':<34}{report.gflops:>14.6f} GFLOPs")
        payload = report.to_dict()
    else:
        rows = flops_mod.comparison_table(C=args.c, N=args.n, K=args.k, TN=args.tn, S=args.s, sizes=sizes)
        if args.scheme != "all":
            label = dict(zip(flops_mod.SCHEMES, [r[0] for r in rows]))[args.scheme]
            rows = [r for r in rows if r[0] == label]
        print(flops_mod.format_comparison_table(rows, sizes))
        payload = {
            "sizes": [list(s) for s in sizes],
            "rows": [{"method": r[0], "complexity": r[1], "gflops": r[2]} for r in rows],
            "convention": flops_mod.CROSS_TASK_CONVENTION,
        }
    if args.json:
        with open(args.json, "w", encoding="utf-8") as fh:
            json.dump(payload, fh, indent=2)
    return EXIT_OK


def _cmd_synth(args) -> int:
    scenes = [
        generate_scene(args.seed + i, args.size, args.size, args.classes) for i in range(args.count)
    ]
    write_dataset(args.out, scenes)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mqt", description="Multi-query transformer toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train from a JSON run config")
    p.add_argument("--config", required=True)
    p.add_argument("--iterations", type=int)
    p.add_argument("--checkpoint")
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a scene directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--json", help="also write the report as JSON")
    p.add_argument("--require", action="append", help="e.g. 'seg.mIoU>=0.9' (repeatable)")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference check of the full model")
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--samples", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=_cmd_gradcheck)

    p = sub.add_parser("flops", help="analytical FLOP table")
    p.add_argument("--scheme", default="all", choices=("all", "model") + flops_mod.SCHEMES)
    p.add_argument("--h", type=int)
    p.add_argument("--w", type=int)
    p.add_argument("--c", type=int, default=256)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--k", type=int, default=9)
    p.add_argument("--tn", type=int, default=2)
    p.add_argument("--s", type=int, default=2)
    p.add_argument("--config", help="run config for --scheme model")
    p.add_argument("--json")
    p.set_defaults(func=_cmd_flops)

    p = sub.add_parser("synth-data", help="write a synthetic scene directory")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.set_defaults(func=_cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ConfigError, ContractError, DimensionError, FormatError, DatasetError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
