"""Command line entry point: ``incgan {gen-data,run,budget-sweep,ablate,eval}``.

Exit status: 0 on success, 2 on configuration errors, 1 on runtime failures.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
from dataclasses import replace
from pathlib import Path

from .config import ExperimentConfig, apply_overrides, format_config, load_config
from .datagen import write_container
from .errors import ConfigError, FormatError, IncganError
from .experiment import (
    ABLATION_LAMBDAS,
    ABLATION_TEMPERATURES,
    ABLATION_VARIANTS,
    DEFAULT_BUDGETS,
    ablation,
    ablation_table,
    budget_label,
    budget_sweep,
    build_dataset,
    confusion_table,
    load_checkpoint,
    load_or_generate,
    run_stream,
    sweep_table,
    write_run_outputs,
)
from .learner import evaluate
from .model import VARIANTS
from .report import csv_text, write_atomic

log = logging.getLogger("incgan")


def _floats(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"expected a comma-separated list of numbers, got {text!r}") from None


def _budgets(text: str) -> list[float]:
    out = []
    for item in (x.strip() for x in text.split(",")):
        if item.lower() == "inf":
            out.append(math.inf)
        elif item.isdigit():
            out.append(int(item))
        else:
            raise ConfigError(f"bad memory budget {item!r}; use non-negative integers or inf")
    return out


def _variants(text: str) -> list[str]:
    names = [x.strip() for x in text.split(",") if x.strip()]
    for name in names:
        if name not in VARIANTS:
            raise ConfigError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    return names


def resolve_config(args) -> ExperimentConfig:
    config = load_config(args.config) if args.config else ExperimentConfig()
    config = apply_overrides(config, args.set or [])
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is not None:
        config = replace(config, output_dir=args.out)
    return config


def cmd_gen_data(args) -> int:
    config = resolve_config(args)
    out = Path(args.data or Path(config.output_dir) / "data")
    data = build_dataset(config)
    write_container(data, out)
    write_atomic(out / "config.txt", format_config(config.resolved()))
    for line in data.summary():
        print(line)
    print(f"wrote {sum(len(b) for b in data.blocks.values())} samples to {out}")
    return 0


def cmd_run(args) -> int:
    config = resolve_config(args)
    data = load_or_generate(config, args.data)
    result = run_stream(config, data)
    out = write_run_outputs(result, config.output_dir)
    print(csv_text(*_short_metrics(result)), end="")
    print(f"outputs in {out} ({result.seconds:.1f} s CPU)")
    return 0


def _short_metrics(result):
    header = ["step", "seen_architectures", "detection_acc", "classification_acc", "epochs_run"]
    rows = [
        [m.step, len(m.architectures), m.detection_acc, m.classification_acc, s.epochs_run]
        for m, s in zip(result.metrics, result.steps)
    ]
    return header, rows


def cmd_budget_sweep(args) -> int:
    config = resolve_config(args)
    budgets = _budgets(args.budgets)
    variants = _variants(args.variants)
    data = load_or_generate(config, args.data)
    out = Path(config.output_dir)

    def save_cell(variant, budget, result):
        write_run_outputs(result, out / f"{variant}_M{budget_label(budget)}")

    grid = budget_sweep(config, budgets, variants, data, on_cell=save_cell)
    text = csv_text(*sweep_table(grid, budgets))
    write_atomic(out / "budget_sweep.csv", text)
    write_atomic(out / "config.txt", format_config(config))
    print(text, end="")
    return 0


def cmd_ablate(args) -> int:
    config = resolve_config(args)
    lambdas = _floats(args.lambdas)
    temperatures = _floats(args.temperatures)
    variants = _variants(args.variants)
    data = load_or_generate(config, args.data)
    grid = ablation(config, lambdas, temperatures, variants, data)
    out = Path(config.output_dir)
    text = csv_text(*ablation_table(grid, lambdas, temperatures))
    write_atomic(out / "ablation.csv", text)
    write_atomic(out / "config.txt", format_config(config))
    print(text, end="")
    return 0


def cmd_eval(args) -> int:
    checkpoint = Path(args.checkpoint)
    _, ckpt_config = load_checkpoint(checkpoint)
    data = load_or_generate(ckpt_config, args.data)
    state, _ = load_checkpoint(checkpoint, data)
    metrics = evaluate(state, data, split=args.split)
    header = ["step", "seen_architectures", "detection_acc", "classification_acc", "rule"]
    if metrics.aux_detector_acc is not None:
        header.append("aux_detector_acc")
    row = [metrics.step, len(metrics.architectures), metrics.detection_acc, metrics.classification_acc, metrics.rule]
    if metrics.aux_detector_acc is not None:
        row.append(metrics.aux_detector_acc)
    text = csv_text(header, [row])
    print(text, end="")
    if args.out:
        write_atomic(Path(args.out) / "eval_metrics.csv", text)
        write_atomic(Path(args.out) / "eval_confusion.csv", csv_text(*confusion_table(metrics)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="incgan", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data_help="dataset container directory (generated in memory when omitted)"):
        p.add_argument("--config", help="key = value config file")
        p.add_argument("--out", help="output directory (overrides output_dir)")
        p.add_argument("--seed", type=int, help="run seed (overrides seed)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key; repeatable")
        p.add_argument("--data", help=data_help)

    p = sub.add_parser("gen-data", help="write a synthetic dataset container")
    common(p, "container directory to write (default: <output_dir>/data)")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="run one incremental stream")
    common(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("budget-sweep", help="final detection accuracy per variant and memory budget")
    common(p)
    p.add_argument("--budgets", default=",".join(budget_label(b) for b in DEFAULT_BUDGETS))
    p.add_argument("--variants", default=",".join(VARIANTS))
    p.set_defaults(func=cmd_budget_sweep)

    p = sub.add_parser("ablate", help="lambda x temperature grid after the third architecture")
    common(p)
    p.add_argument("--lambdas", default=",".join(f"{x:g}" for x in ABLATION_LAMBDAS))
    p.add_argument("--temperatures", default=",".join(f"{x:g}" for x in ABLATION_TEMPERATURES))
    p.add_argument("--variants", default=",".join(ABLATION_VARIANTS))
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("eval", help="metrics from a saved checkpoint")
    p.add_argument("--checkpoint", required=True, help="checkpoint directory written by run")
    p.add_argument("--data", help="dataset container (regenerated from the checkpoint config when omitted)")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--out", help="directory for eval_metrics.csv / eval_confusion.csv")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, FormatError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except IncganError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - any other failure is a runtime error
        log.debug("unhandled", exc_info=True)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
