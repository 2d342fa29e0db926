"""Desk-scale experiment recipes shared by the scripts and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass, field

from .backends import CostLedger, CostProfile, LinearBackend, SimulatedOracle, SimulatedOracleConfig
from .distillation import (
    DistillationReport,
    Schedule,
    TrainableClassifier,
    accuracy_on,
    distill,
    forgetting_audit,
    make_learnable,
    partition,
)
from .harness import ExperimentConfig, TwoClusterSpec, derive_seed, generate_two_cluster


@dataclass(frozen=True)
class TwoClusterSetup:
    """Cluster A is known to the specific small model; cluster B is taught by the large one."""

    n_train_per_class: int = 150
    n_test_per_class: int = 300
    classes_per_cluster: int = 4
    separation: float = 4.0
    small_epochs: int = 200
    small_learning_rate: float = 0.5
    large_accuracy: float = 0.95
    large_confidence_when_correct: tuple[float, float] = (0.98, 1.0)
    large_confidence_when_wrong: tuple[float, float] = (0.6, 1.0)
    delta: float = 0.97
    schedule: Schedule = field(default_factory=lambda: Schedule((1, 1), 50, 32))
    distill_learning_rate: float = 0.05


@dataclass(frozen=True)
class TwoClusterResult:
    seed: int
    a_before: float
    a_after: float
    b_before: float
    b_after: float
    forgetting: float  # percentage points on cluster A
    x1: int
    x3: int
    large_calls: int
    report: DistillationReport

    @property
    def b_gain(self) -> float:
        return 100.0 * (self.b_after - self.b_before)


def run_two_cluster(
    seed: int,
    setup: TwoClusterSetup = TwoClusterSetup(),
    *,
    use_large_teacher: bool = True,
    use_small_teacher: bool = True,
    kl_order: str = "reverse",
) -> TwoClusterResult:
    ccount = setup.classes_per_cluster
    train = generate_two_cluster(TwoClusterSpec(ccount, setup.n_train_per_class, setup.separation,
                                                 seed=derive_seed(seed, "train")))
    test = generate_two_cluster(TwoClusterSpec(ccount, setup.n_test_per_class, setup.separation,
                                                seed=derive_seed(seed, "test")))
    labels = [f"a{i}" for i in range(ccount)] + [f"b{i}" for i in range(ccount)]
    known = train.filter(lambda s: s.category == "A")
    specific = TrainableClassifier.zeros(labels, len(train[0].payload), setup.small_learning_rate,
                                         derive_seed(seed, "specific_small"))
    specific.fit(known.features(), [s.gold_label for s in known], setup.small_epochs)

    ledger = CostLedger()
    large = SimulatedOracle(
        "large",
        SimulatedOracleConfig(
            default_accuracy=setup.large_accuracy,
            confidence_when_correct=setup.large_confidence_when_correct,
            confidence_when_wrong=setup.large_confidence_when_wrong,
            seed=derive_seed(seed, "large"),
        ),
        cost_profile=CostProfile(1.0),
        ledger=ledger,
    )
    plan = partition(train, LinearBackend("specific_small", specific), large, setup.delta, labels,
                     setup.schedule)
    learnable = make_learnable(specific)
    report = distill(
        plan, learnable, kl_order=kl_order, learning_rate=setup.distill_learning_rate,
        use_large_teacher=use_large_teacher, use_small_teacher=use_small_teacher,
        seed=derive_seed(seed, "distill"),
    )
    test_a = test.filter(lambda s: s.category == "A")
    test_b = test.filter(lambda s: s.category == "B")
    return TwoClusterResult(
        seed=seed,
        a_before=accuracy_on(specific, test_a),
        a_after=accuracy_on(learnable, test_a),
        b_before=accuracy_on(specific, test_b),
        b_after=accuracy_on(learnable, test_b),
        forgetting=forgetting_audit(specific, learnable, test_a),
        x1=len(plan.x1),
        x3=len(plan.x3),
        large_calls=ledger.calls(),
        report=report,
    )


def cascade_dominance_config(seed: int, name: str = "dominance", **overrides) -> ExperimentConfig:
    """Head-skewed synthetic task, 90%-accurate simulated large model at 1.0 per token,
    delta calibrated to match the large model on validation data."""
    data = {
        "seed": seed,
        "data": {"synthetic": {"n_classes": 9, "n_samples": 3000, "separation": 2.5,
                               "skew": [100, 10, 1]}},
        "backends": {
            "specific_small": {"kind": "local", "epochs": 200, "learning_rate": 0.5},
            "large": {"kind": "simulated", "accuracy": 0.9, "price_per_input_token": 1.0},
        },
        "calibration": {"enabled": True, "grid": "0.85:0.99:0.01", "objective": "match-large"},
        "output": {"baselines": True, "name": name},
    }
    for key, value in overrides.items():
        data[key] = value
    return ExperimentConfig.from_mapping(data)
