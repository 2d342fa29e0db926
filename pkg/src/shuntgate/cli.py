"""``shuntgate`` command line.

Exit codes: 0 success, 1 validation error, 2 transport error, 3 training error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness
from .backends import CostLedger
from .distillation import DistillationPlan, Schedule, TrainableClassifier, distill, parse_ratio, partition
from .errors import ShuntError
from .metrics import evaluate
from .router import MatchLargeAccuracy, MaxAccuracy, ShuntPolicy, Strategy, calibrate_delta, parse_grid, route_dataset

log = logging.getLogger("shuntgate")


def _emit(data) -> None:
    print(json.dumps(data, indent=2, sort_keys=True))


def cmd_ingest(args) -> int:
    ds = harness.ingest(args.input, args.format)
    if args.output:
        harness.write_dataset(ds, args.output)
    _emit({"samples": len(ds), "labels": ds.labels()})
    return 0


def cmd_synth(args) -> int:
    skew = tuple(float(p) for p in args.skew.split(":"))
    spec = harness.SyntheticTaskSpec(
        n_classes=args.n_classes, n_samples=args.n_samples, separation=args.separation,
        skew=skew, label_noise=args.noise, seed=args.seed, n_features=args.n_features,
    )
    ds = harness.generate_synthetic(spec)
    harness.write_dataset(ds, args.output)
    _emit({"samples": len(ds), "output": str(args.output)})
    return 0


def _setup(config_path):
    cfg = harness.ExperimentConfig.load(config_path)
    splits = harness.load_splits(cfg)
    return cfg, splits


def cmd_calibrate(args) -> int:
    cfg, splits = _setup(args.config)
    ledger = CostLedger()
    specific, _ = harness.build_backend(cfg, "specific_small", cfg.backends.specific_small, splits, None)
    large, _ = harness.build_backend(cfg, "large", cfg.backends.large, splits, ledger)
    objective = {
        "match-large": MatchLargeAccuracy(args.target),
        "max-accuracy": MaxAccuracy(),
    }[args.objective]
    data = splits.validation if args.split == "validation" else splits.train
    result = calibrate_delta(
        data, specific, parse_grid(args.grid), objective, large=large, candidates=splits.candidates
    )
    out = result.to_record()
    out["large_cost"] = ledger.total_micro()
    if args.output:
        Path(args.output).write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    _emit(out)
    return 0


def cmd_plan(args) -> int:
    cfg, splits = _setup(args.config)
    ledger = CostLedger()
    specific, _ = harness.build_backend(cfg, "specific_small", cfg.backends.specific_small, splits, None)
    large, _ = harness.build_backend(cfg, "large", cfg.backends.large, splits, ledger)
    source = splits.train if cfg.distillation.split == "train" else splits.validation
    delta = args.delta if args.delta is not None else cfg.policy.delta
    plan = partition(source, specific, large, delta, splits.candidates, cfg.distillation.schedule)
    plan.save(args.output)
    _emit({"x1": len(plan.x1), "x2": len(plan.x2), "x3": len(plan.x3), "large_calls": ledger.calls()})
    return 0


def cmd_distill(args) -> int:
    plan = DistillationPlan.load(args.plan)
    model = TrainableClassifier.load(args.init)
    schedule = Schedule(
        parse_ratio(args.ratio) if args.ratio else plan.schedule.ratio,
        args.epochs or plan.schedule.epochs,
        args.batch_size or plan.schedule.batch_size,
    )
    report = distill(plan, model, schedule=schedule, kl_order=args.kl_order, learning_rate=args.learning_rate)
    model.save(args.output)
    _emit(report.to_record())
    return 0


def cmd_route(args) -> int:
    cfg, splits = _setup(args.config)
    ledger = CostLedger()
    b = cfg.backends
    specific, _ = harness.build_backend(cfg, "specific_small", b.specific_small, splits, None)
    learnable = None
    if b.learnable_small is not None:
        learnable, _ = harness.build_backend(cfg, "learnable_small", b.learnable_small, splits, None)
    large, _ = harness.build_backend(cfg, "large", b.large, splits, ledger)
    records = harness.ingest(args.input)
    policy = ShuntPolicy(
        args.delta if args.delta is not None else cfg.policy.delta,
        Strategy.CONFIDENCE, on_large_failure=cfg.policy.on_large_failure,
    )
    prompter = harness.build_prompter(cfg, splits.validation, specific, splits.candidates)
    outcomes = route_dataset(
        records, policy, specific, learnable, large, splits.candidates,
        prompter=prompter, workers=cfg.workers,
    )
    harness.write_outcomes(Path(args.output), outcomes)
    _emit({"routed": len(outcomes), "large_calls": ledger.calls(), "cost": ledger.total_micro()})
    return 0


def cmd_report(args) -> int:
    outcomes = harness.read_outcomes(args.outcomes)
    gold = harness.ingest(args.gold)
    report = evaluate(outcomes, gold)
    text = report.to_table() if args.format == "table" else report.to_jsonl()
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    cfg = harness.ExperimentConfig.load(args.config)
    result = harness.run_experiment(cfg, args.run_root)
    sys.stdout.write(result.report.to_table())
    print(f"run directory: {result.run_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="shuntgate", description="Confidence-based small/large model cascade")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("ingest", help="validate a dataset file")
    s.add_argument("--input", required=True)
    s.add_argument("--format", choices=["jsonl", "csv"])
    s.add_argument("--output", help="write the normalized dataset as jsonl")
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("synth", help="generate a long-tailed Gaussian-cluster dataset")
    s.add_argument("--n-classes", type=int, default=9)
    s.add_argument("--n-samples", type=int, default=3000)
    s.add_argument("--n-features", type=int)
    s.add_argument("--separation", type=float, default=4.0)
    s.add_argument("--skew", default="100:10:1")
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("calibrate", help="sweep the shunt threshold on held-out data")
    s.add_argument("--config", required=True)
    s.add_argument("--grid", default="0.85:0.99:0.01")
    s.add_argument("--objective", choices=["match-large", "max-accuracy"], default="match-large")
    s.add_argument("--target", type=float)
    s.add_argument("--split", choices=["validation", "train"], default="validation")
    s.add_argument("--output")
    s.set_defaults(func=cmd_calibrate)

    s = sub.add_parser("plan", help="partition data for distillation and save the plan")
    s.add_argument("--config", required=True)
    s.add_argument("--delta", type=float)
    s.add_argument("--output", required=True)
    s.set_defaults(func=cmd_plan)

    s = sub.add_parser("distill", help="run two-stage confidence distillation on a saved plan")
    s.add_argument("--plan", required=True)
    s.add_argument("--init", required=True, help="checkpoint of the specific small model")
    s.add_argument("--output", required=True, help="where to write the learnable checkpoint")
    s.add_argument("--epochs", type=int)
    s.add_argument("--ratio")
    s.add_argument("--batch-size", type=int)
    s.add_argument("--learning-rate", type=float)
    s.add_argument("--kl-order", choices=["reverse", "forward"], default="reverse")
    s.set_defaults(func=cmd_distill)

    s = sub.add_parser("route", help="route records through the cascade")
    s.add_argument("--config", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--delta", type=float)
    s.set_defaults(func=cmd_route)

    s = sub.add_parser("report", help="score routing outcomes against gold labels")
    s.add_argument("--outcomes", required=True)
    s.add_argument("--gold", required=True)
    s.add_argument("--format", choices=["table", "jsonl"], default="table")
    s.add_argument("--output")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("run", help="end-to-end experiment from a config")
    s.add_argument("--config", required=True)
    s.add_argument("--run-root")
    s.set_defaults(func=cmd_run)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ShuntError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
