"""Command line interface: ``fatt train|prune|compare|report|compact``.

Exit codes: 0 success, 1 usage/config error, 2 data or file-format error,
3 run failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig
from .criteria import CRITERIA
from .data import FormatError
from .masking import ConfigError
from .nn import load_checkpoint, save_checkpoint
from .reports import emit_reports
from .scheduler import ExperimentLog, WarmupError, compact_model, run_attenuation_pruning, warmup

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUN = 0, 1, 2, 3

log = logging.getLogger("filter_attenuation")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _add_run_flags(p, method_flag=False):
    p.add_argument("--config", type=Path, help="JSON run configuration")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, help="output directory (overrides output_dir)")
    p.add_argument("--criterion", help=f"importance criterion: {', '.join(CRITERIA)}")
    p.add_argument("--fa", type=float, help="attenuation factor in (0, 1)")
    p.add_argument("--a", type=int, help="per-round increment of k")
    p.add_argument("--t1", type=float, help="permitted accuracy drop")
    p.add_argument("--t2", type=float, help="relative near-zero L1 prune threshold")
    p.add_argument("--target", type=float, help="target pruned-filter fraction")
    if method_flag:
        p.add_argument("--method", choices=["attenuate", "hard"], default="attenuate")
        p.add_argument("--checkpoint", type=Path, help="start from this (warmed-up) checkpoint")


def build_parser():
    parser = _Parser(prog="fatt", description="CNN filter pruning with filter attenuation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="warm-up training; writes warmup.npz")
    _add_run_flags(p)
    p = sub.add_parser("prune", help="run attenuation or hard pruning")
    _add_run_flags(p, method_flag=True)
    p = sub.add_parser("compare", help="run both methods with a shared seed")
    _add_run_flags(p)
    p = sub.add_parser("report", help="regenerate reports from stored logs")
    p.add_argument("--log", type=Path, nargs="+", required=True)
    p.add_argument("--out", type=Path, required=True)
    p = sub.add_parser("compact", help="physically remove pruned filters from a checkpoint")
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--out", type=Path, required=True, help="output checkpoint path")
    return parser


def _run_config(args):
    if args.criterion is not None and args.criterion not in CRITERIA:
        raise UsageError(f"unknown criterion {args.criterion!r}; choose from {', '.join(CRITERIA)}")
    if getattr(args, "method", None) == "hard" and args.fa is not None:
        raise UsageError("--fa has no effect with --method hard; drop one of them")
    cfg = RunConfig.load(args.config) if args.config else RunConfig.from_dict({})
    overrides = {"criterion": args.criterion, "fa": args.fa, "a": args.a, "t1": args.t1,
                 "t2": args.t2, "target_prune_fraction": args.target}
    overrides = {k: v for k, v in overrides.items() if v is not None}
    try:
        cfg.prune = dataclasses.replace(cfg.prune, **overrides)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
        cfg.train = dataclasses.replace(cfg.train, rng_seed=args.seed)
    if args.out is not None:
        cfg.output_dir = args.out
    return cfg


def _load_data(cfg):
    try:
        return cfg.splits()
    except (FormatError, FileNotFoundError) as exc:
        raise DataError(str(exc)) from exc


def _load_model(path):
    if not Path(path).is_file():
        raise DataError(f"checkpoint {path} not found; run `fatt train` first")
    try:
        return load_checkpoint(path)
    except (ValueError, KeyError, OSError) as exc:
        raise DataError(f"cannot read checkpoint {path}: {exc}") from exc


def cmd_train(args):
    cfg = _run_config(args)
    train, val, _ = _load_data(cfg)
    model = cfg.build_model(train)
    acc, epochs = warmup(model, train, val, cfg.prune, cfg.train,
                         np.random.default_rng(cfg.seed))
    out = cfg.output_dir / "warmup.npz"
    save_checkpoint(model, out)
    print(json.dumps({"checkpoint": str(out), "val_accuracy": acc, "epochs": epochs}))


def _prune_one(cfg, method, data, model=None):
    train, val, test = data
    if model is None:
        model = cfg.build_model(train)
    final, xlog = run_attenuation_pruning(model, train, val, cfg.prune, cfg.train, test, method)
    xlog.save(cfg.output_dir / f"log_{method}.jsonl")
    save_checkpoint(final, cfg.output_dir / f"model_{method}.npz")
    return xlog


def cmd_prune(args):
    cfg = _run_config(args)
    data = _load_data(cfg)
    model = None
    if args.checkpoint is not None:
        model = _load_model(args.checkpoint)
        cfg.prune = dataclasses.replace(cfg.prune, warmup_epochs=0)
    xlog = _prune_one(cfg, args.method, data, model)
    emit_reports([xlog], cfg.output_dir / "reports")
    print(json.dumps({k: xlog.summary[k] for k in
                      ("method", "termination", "final_pruned", "final_accuracy")}))


def cmd_compare(args):
    cfg = _run_config(args)
    data = _load_data(cfg)
    logs = [_prune_one(cfg, method, data) for method in ("attenuate", "hard")]
    emit_reports(logs, cfg.output_dir / "reports")
    print(json.dumps({x.summary["method"]: x.summary["test_accuracy"] for x in logs}))


def cmd_report(args):
    logs = []
    for path in args.log:
        if not path.is_file():
            raise DataError(f"log {path} not found")
        try:
            logs.append(ExperimentLog.load(path))
        except (ValueError, KeyError) as exc:
            raise DataError(f"cannot parse log {path}: {exc}") from exc
    emit_reports(logs, args.out)


def cmd_compact(args):
    model = _load_model(args.checkpoint)
    compacted, report = compact_model(model)
    save_checkpoint(compacted, args.out)
    print(json.dumps({"params_before": model.parameter_count(),
                      "macs_before": model.mac_count(), **dataclasses.asdict(report)}))


COMMANDS = {"train": cmd_train, "prune": cmd_prune, "compare": cmd_compare,
            "report": cmd_report, "compact": cmd_compact}


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"fatt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DataError as exc:
        print(f"fatt {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (WarmupError, FloatingPointError, OSError, RuntimeError, ValueError) as exc:
        print(f"fatt {args.command}: run failed: {exc}", file=sys.stderr)
        return EXIT_RUN
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
