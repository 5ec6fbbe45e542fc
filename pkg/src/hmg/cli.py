"""Command-line surface: synth, train, gradcheck, eval.

Exit codes are stable: 0 success, 2 bad arguments or config, 3 data
validation failure, 4 training aborted (or a failed gradient check).
"""

from __future__ import annotations

import argparse
import json
import sys
from enum import IntEnum
from pathlib import Path

import numpy as np

from hmg.graph import GraphError, load_graph, split_edges
from hmg.gradcheck import TOLERANCE, run_gradcheck
from hmg.synthgen import SynthConfig, describe, generate
from hmg.training import (ConfigError, TrainConfig, TrainingAbortedError,
                          cross_validate, evaluate, load_model, save_model)


class ExitStatus(IntEnum):
    OK = 0
    USAGE = 2
    DATA = 3
    TRAINING = 4


def _print_stats(stats: dict, as_json: bool) -> None:
    if as_json:
        print(json.dumps(stats, indent=2))
        return
    width = max(len(k) for k in stats)
    for key, value in stats.items():
        print(f"{key:<{width}}  {value}")


def cmd_synth(args) -> ExitStatus:
    try:
        config = SynthConfig.from_json(args.config) if args.config else SynthConfig()
        if args.seed is not None:
            config.seed = args.seed
        config.validate()
    except (GraphError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.USAGE
    try:
        generate(config, args.out)
        stats = describe(args.out)
    except (GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.DATA
    _print_stats(stats, args.json)
    return ExitStatus.OK


def cmd_train(args) -> ExitStatus:
    try:
        config = TrainConfig.from_json(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            config.seed = args.seed
        for ablation in args.ablate:
            if ablation == "no-comments":
                config.use_comments = False
            elif ablation == "no-ac":
                config.use_ac = False
        config.validate()
    except (ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.USAGE
    try:
        graph = load_graph(args.data)
    except (GraphError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.DATA
    sink = None
    if args.model_out:
        out = Path(args.model_out)
        out.mkdir(parents=True, exist_ok=True)
        sink = lambda fold, model: save_model(model, out / f"model_fold{fold}.hmgm")
    try:
        report = cross_validate(graph, config, model_sink=sink)
    except TrainingAbortedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.TRAINING
    except (GraphError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.DATA
    if args.report:
        report.to_json(args.report)
    if args.json:
        print(report.to_json())
    else:
        name = "model"
        if not config.use_comments or not config.use_ac:
            dropped = [tag for tag, on in (("T", config.use_comments),
                                           ("AC", config.use_ac)) if not on]
            name = f"model -{{{', '.join(dropped)}}}"
        print(f"{name} ({config.folds} folds, seed {config.seed})")
        for row in report.summary_rows():
            print(row)
    return ExitStatus.OK


def cmd_gradcheck(args) -> ExitStatus:
    groups, ok = run_gradcheck(seed=args.seed if args.seed is not None else 0,
                               corrupt=args.corrupt)
    width = max(len(g) for g in groups)
    for group in sorted(groups):
        flag = "ok" if groups[group] < TOLERANCE else "FAIL"
        print(f"{group:<{width}}  max rel err {groups[group]:.3e}  {flag}")
    if not ok:
        worst = max(groups, key=groups.get)
        print(f"error: gradient check failed for parameter group {worst!r}",
              file=sys.stderr)
        return ExitStatus.TRAINING
    return ExitStatus.OK


def cmd_eval(args) -> ExitStatus:
    try:
        graph = load_graph(args.data)
        model = load_model(args.model)
        split = split_edges(graph, model.config.split, seed=model.fill_seed)
        edges = getattr(split, args.split)
        result = evaluate(model, graph, edges)
    except (GraphError, ConfigError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return ExitStatus.DATA
    payload = result.to_dict()
    if args.json:
        print(json.dumps(payload, indent=2))
    else:
        for avg in ("weighted", "macro"):
            row = payload[avg]
            print(f"{avg:>9}: F1 {row['f1']:.4f}  P {row['precision']:.4f}  "
                  f"R {row['recall']:.4f}")
        print(f"{'accuracy':>9}: {payload['accuracy']:.4f}  ({payload['count']} edges)")
    return ExitStatus.OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmg",
                                     description="heterogeneous multimodal graph engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic graph bundle")
    p.add_argument("--config", help="SynthConfig JSON file")
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("train", help="cross-validated training on a bundle")
    p.add_argument("--data", required=True, help="bundle directory")
    p.add_argument("--config", help="TrainConfig JSON file")
    p.add_argument("--report", help="write the TrainReport JSON here")
    p.add_argument("--model-out", help="directory for per-fold model files")
    p.add_argument("--ablate", action="append", default=[],
                   choices=["no-comments", "no-ac"])
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--corrupt", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("eval", help="score a saved model on a bundle split")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--json", action="store_true")
    p.set_defaults(fn=cmd_eval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return int(args.fn(args))


if __name__ == "__main__":
    sys.exit(main())
