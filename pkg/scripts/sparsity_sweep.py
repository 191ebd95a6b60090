#!/usr/bin/env python3
"""Accuracy-vs-sparsity sweep on the capacity-squeeze moons setup.

One trained model per target sparsity r, identical seed and budget; prints
the error table with an ASCII bar chart of the moving-averaged validation
error.
"""

import argparse
from pathlib import Path

from ternq.config import load_config
from ternq.training import sparsity_sweep

CONFIGS = Path(__file__).parent.parent / "configs"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--r", default="0,0.2,0.4,0.6,0.8,0.9",
                        help="comma-separated sparsity targets")
    parser.add_argument("--config", default=str(CONFIGS / "sweep_moons.toml"))
    args = parser.parse_args()

    cfg = load_config(args.config)
    r_values = [float(v) for v in args.r.split(",")]
    rows = sparsity_sweep(cfg.model, cfg.make_dataset(), r_values, cfg.train)

    worst = max(row["val_err_avg"] for row in rows)
    print(f"{'r':>5}  {'train err':>9}  {'val err':>8}  {'val avg':>8}")
    for row in rows:
        bar = "#" * max(1, round(40 * row["val_err_avg"] / worst)) if worst else ""
        print(f"{row['r']:>5.2f}  {row['train_err']:>9.2%}  {row['val_err']:>8.2%}  "
              f"{row['val_err_avg']:>8.2%}  {bar}")


if __name__ == "__main__":
    main()
