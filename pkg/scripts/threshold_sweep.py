"""Accuracy and query proportion of the cascade across a threshold grid, on the test split."""

import argparse

from shuntgate.backends import CostLedger
from shuntgate.experiments import cascade_dominance_config
from shuntgate.harness import build_backend, load_splits
from shuntgate.router import MaxAccuracy, calibrate_delta, parse_grid


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid", default="0.85:0.99:0.01")
    args = p.parse_args()

    cfg = cascade_dominance_config(args.seed)
    splits = load_splits(cfg)
    specific, _ = build_backend(cfg, "specific_small", cfg.backends.specific_small, splits, None)
    large, _ = build_backend(cfg, "large", cfg.backends.large, splits, CostLedger())
    result = calibrate_delta(splits.test, specific, parse_grid(args.grid), MaxAccuracy(),
                             large=large, candidates=splits.candidates)
    print(f"{'delta':>5}  {'accuracy':>8}  {'query':>7}")
    for pt in result.sweep:
        print(f"{pt.delta:>5.2f}  {pt.accuracy:>8.2%}  {pt.query_proportion:>7.2%}")


if __name__ == "__main__":
    main()
