#!/usr/bin/env python3
"""Paired-run comparison: full precision vs trained ternary vs stochastic binary.

Trains the three weight formats with identical budgets and seeds on both
synthetic tasks and prints validation errors (raw and moving-averaged).
"""

import argparse
from pathlib import Path

from ternq.config import load_config
from ternq.training import train

CONFIGS = Path(__file__).parent.parent / "configs"
TASKS = {"blobs": "ttq_blobs.toml", "patterns": "ttq_patterns.toml"}
KINDS = ("none", "ttq", "stochastic_binary")


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--task", choices=[*TASKS, "all"], default="all")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    args = parser.parse_args()

    tasks = list(TASKS) if args.task == "all" else [args.task]
    for task in tasks:
        print(f"== {task} ==")
        print(f"{'weights':<20}{'val err':>9}{'val err (avg)':>15}")
        for kind in KINDS:
            overrides = [] if kind == "ttq" else [f"quantize.default='{kind}'"]
            if args.seed is not None:
                overrides.append(f"seed={args.seed}")
            cfg = load_config(CONFIGS / TASKS[task], overrides)
            _, report = train(cfg.build_model(), cfg.make_dataset(), cfg.train)
            last = report.epochs[-1]
            label = {"none": "full precision", "ttq": "trained ternary",
                     "stochastic_binary": "stochastic binary"}[kind]
            print(f"{label:<20}{last.val_err:>9.2%}{last.val_err_avg:>15.2%}")
        print()


if __name__ == "__main__":
    main()
