"""Cascade vs large-only on the head-skewed synthetic task, several seeds."""

import argparse
import tempfile

from shuntgate.experiments import cascade_dominance_config
from shuntgate.harness import ingest, run_experiment
from shuntgate.router import Tier


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--run-root", help="keep run directories here instead of a temp dir")
    args = p.parse_args()

    print(f"{'seed':>4}  {'delta':>5}  {'DS+':>7}  {'large':>7}  {'query':>7}  {'kept acc':>8}  {'cost':>12}  {'large cost':>12}")
    with tempfile.TemporaryDirectory() as tmp:
        for seed in args.seeds:
            res = run_experiment(cascade_dominance_config(seed), args.run_root or tmp)
            rep = res.report
            gold = {s.id: s.gold_label for s in ingest(res.run_dir / "test.jsonl")}
            kept = [o for o in res.outcomes if o.tier is Tier.SPECIFIC_SMALL]
            kept_acc = sum(o.prediction == gold[o.sample_id] for o in kept) / max(len(kept), 1)
            print(f"{seed:>4}  {res.delta:>5.2f}  {rep.overall_accuracy:>7.2%}  "
                  f"{rep.baseline_comparisons['large']['overall']:>7.2%}  {rep.overall_query_proportion:>7.2%}  "
                  f"{kept_acc:>8.2%}  {rep.total_cost:>12}  {res.baseline_large_cost:>12}")


if __name__ == "__main__":
    main()
