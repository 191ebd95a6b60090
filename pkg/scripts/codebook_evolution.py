#!/usr/bin/env python3
"""Trace the two scaling coefficients and the layer sparsity during training.

Trains the blobs MLP and prints, for each quantized layer, how (w_pos,
w_neg) drift apart and how the zero fraction moves, sampled every few
steps. The asymmetry between the two coefficients is the extra capacity
the trained quantizer buys over a symmetric ternary scale.
"""

import argparse
from pathlib import Path

from ternq.config import load_config
from ternq.training import train

CONFIGS = Path(__file__).parent.parent / "configs"


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--config", default=str(CONFIGS / "ttq_blobs.toml"))
    parser.add_argument("--every", type=int, default=60, help="print every Nth step")
    args = parser.parse_args()

    cfg = load_config(args.config)
    model, report = train(cfg.build_model(), cfg.make_dataset(), cfg.train)

    layers = sorted({s.layer for s in report.layer_steps})
    for name in layers:
        trace = report.layer_trace(name)
        print(f"== {name} ==")
        print(f"{'step':>6}  {'w_pos':>8}  {'w_neg':>8}  {'sparsity':>8}  {'churn':>7}")
        for rec in trace[:: args.every] + [trace[-1]]:
            print(f"{rec.step:>6}  {rec.w_pos:>8.4f}  {rec.w_neg:>8.4f}  "
                  f"{rec.sparsity:>8.2%}  {rec.churn:>7.2%}")
        print()


if __name__ == "__main__":
    main()
