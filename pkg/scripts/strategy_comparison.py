"""Confidence routing against the two auxiliary-model strategies at a fixed threshold."""

import argparse
import tempfile

from shuntgate.experiments import cascade_dominance_config
from shuntgate.harness import run_experiment

STRATEGIES = ("confidence", "distribution_model", "prediction_model")


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--delta", type=float, default=0.9)
    args = p.parse_args()

    print(f"{'strategy':<20}  {'accuracy':>8}  {'query':>7}  {'cost':>12}")
    with tempfile.TemporaryDirectory() as tmp:
        for strategy in STRATEGIES:
            cfg = cascade_dominance_config(
                args.seed, name=strategy,
                calibration={"enabled": False},
                policy={"delta": args.delta, "strategy": strategy},
            )
            rep = run_experiment(cfg, tmp).report
            print(f"{strategy:<20}  {rep.overall_accuracy:>8.2%}  {rep.overall_query_proportion:>7.2%}  "
                  f"{rep.total_cost:>12}")


if __name__ == "__main__":
    main()
