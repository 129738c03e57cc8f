"""``sharpqos`` command-line entry point."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment
from .balancing import BALANCING_MODES
from .config import ConfigError, bundled_config, load_config
from .qosdata import ColdStartSpec
from .trainloop import strict_determinism

log = logging.getLogger("sharpqos")

COMMANDS = {
    "preprocess": "load the dataset, subsample and split it",
    "features": "compute initial NMF and autoencoder features",
    "train": "train the model and write the checkpoint",
    "eval": "evaluate the checkpoint on the test split",
    "coldstart": "full run with users and/or services made cold (default CB:10)",
    "outliers": "full run with isolation-forest test outliers removed (default 5%%)",
    "report": "re-render summary.md from report.json and print a comparison table",
    "run": "preprocess, features, train and eval in one go",
}


def _config_path(text):
    path = Path(text)
    if path.exists():
        return path
    try:
        return bundled_config(path.name)
    except FileNotFoundError:
        raise ConfigError(f"config file {text} not found") from None


def _common(p):
    p.add_argument("--config", required=True, help="TOML config (bundled: tiny.toml)")
    p.add_argument("--output", help="output directory (default: [output] from the config)")
    p.add_argument("--seed", type=int, help="seed for splitting, features and training")
    p.add_argument("--td", type=float, help="training density in percent")
    p.add_argument("--balancing", choices=BALANCING_MODES)
    p.add_argument("--cold-start", metavar="KIND:PCT", help="CU, CS or CB with a percentage, e.g. CB:10")
    p.add_argument("--outlier-frac", type=float, metavar="PCT", help="percent of test entries dropped")
    p.add_argument("--epochs", type=int, help="maximum training epochs")
    p.add_argument("--strict-determinism", action="store_true",
                   help="single-threaded deterministic kernels")
    p.add_argument("--dump-graphs", action="store_true", help="write edges_<name>.csv per graph")


def build_parser():
    parser = argparse.ArgumentParser(prog="sharpqos", description="Joint multi-task QoS prediction.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, help_text in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("-v", "--verbose", action="count", default=argparse.SUPPRESS)
        if name == "report":
            p.add_argument("dirs", nargs="*", help="output directories to compare")
            p.add_argument("--config", help="config whose [output] is used when no directory is given")
            p.add_argument("--output")
        else:
            _common(p)
    return parser


def apply_overrides(cfg, args):
    if args.seed is not None:
        cfg.split.seed = cfg.features.seed = cfg.train.seed = args.seed
    if args.td is not None:
        cfg.split.td = args.td
    if args.balancing:
        cfg.train.balancing = args.balancing
    if args.cold_start:
        ColdStartSpec.parse(args.cold_start)
        cfg.split.cold_start = args.cold_start
    if args.outlier_frac is not None:
        cfg.split.outlier_frac = args.outlier_frac
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    if args.strict_determinism:
        cfg.train.strict = True
    if args.output:
        cfg.output = args.output
    return cfg


def _variant_output(cfg, args, suffix):
    if not args.output:
        cfg.output = f"{cfg.output}-{suffix}"


def comparison_table(reports):
    rows = ["| run | task | MAE | RMSE | baseline MAE | I_MAE (%) |", "|---|---|---|---|---|---|"]
    for label, rep in reports:
        for task, t in rep["tasks"].items():
            b = t.get("baseline") or {}
            rows.append(f"| {label} | {task} | {t['mae']:.4f} | {t['rmse']:.4f} | "
                        f"{experiment._fmt(b.get('mae'))} | {experiment._fmt(b.get('improvement_mae'), 2)} |")
    return "\n".join(rows)


def _report(args):
    dirs = list(args.dirs)
    if args.output:
        dirs.append(args.output)
    if not dirs:
        if not args.config:
            raise ConfigError("report needs output directories or --config")
        dirs = [load_config(_config_path(args.config)).output]
    reports = [(d, experiment.rerender(d)) for d in dirs]
    print(comparison_table(reports))


def _run(args):
    cfg = apply_overrides(load_config(_config_path(args.config)), args)
    if args.command == "coldstart":
        if not cfg.split.cold_start:
            cfg.split.cold_start = "CB:10"
        _variant_output(cfg, args, "cold-" + cfg.split.cold_start.replace(":", ""))
    elif args.command == "outliers":
        if not cfg.split.outlier_frac:
            cfg.split.outlier_frac = 5.0
        _variant_output(cfg, args, f"outliers-{cfg.split.outlier_frac:g}")

    out = Path(cfg.output)
    with strict_determinism(cfg.train.strict):
        if args.command == "preprocess":
            experiment.preprocess(cfg, out)
        elif args.command == "features":
            experiment.features(cfg, out)
        elif args.command == "train":
            experiment.train(cfg, out, dump_graphs=args.dump_graphs)
        elif args.command == "eval":
            experiment.evaluate(cfg, out)
        else:
            experiment.run_experiment(cfg, out, dump_graphs=args.dump_graphs)
    if args.command in ("eval", "run", "coldstart", "outliers"):
        print((out / "summary.md").read_text())
    print(json.dumps({"output": str(out), "stage": args.command, "status": "ok"}))


def main(argv=None):
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "report":
            _report(args)
        else:
            _run(args)
    except (ConfigError, ValueError, FileNotFoundError) as exc:
        print(f"sharpqos: error: {exc}", file=sys.stderr)
        return 2
    except experiment.StageError as exc:
        print(f"sharpqos: stage failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
