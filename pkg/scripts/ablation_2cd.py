"""Two-stage distillation ablation on the two-cluster task."""

import argparse

from shuntgate.experiments import run_two_cluster

VARIANTS = {
    "full": {},
    "large teacher only": {"use_small_teacher": False},
    "small teacher only": {"use_large_teacher": False},
    "full, forward KL": {"kl_order": "forward"},
}


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()

    print(f"{'variant':<22}  {'seed':>4}  {'A before':>8}  {'A after':>8}  {'forget':>7}  {'B before':>8}  {'B after':>8}")
    for name, kw in VARIANTS.items():
        for seed in args.seeds:
            r = run_two_cluster(seed, **kw)
            print(f"{name:<22}  {seed:>4}  {r.a_before:>8.2%}  {r.a_after:>8.2%}  {r.forgetting:>7.3f}  "
                  f"{r.b_before:>8.2%}  {r.b_after:>8.2%}")


if __name__ == "__main__":
    main()
