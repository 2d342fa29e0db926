"""Inference-time shunting across the small/large cascade, and threshold calibration.

A sample is answered by the first tier whose confidence is strictly above the
threshold ``delta``: the frozen specific small model, then the learnable small
model (if deployed), then the large model. Equality falls through to the next
tier.
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from decimal import Decimal
from enum import Enum
from typing import Callable, Mapping, Protocol, Sequence

from .backends import Dataset, LinearBackend, ModelBackend, Sample
from .core import ProbabilityVector, entropy
from .errors import ConfigurationError, DomainError, RoutingError, TransportError
from .prompting import PromptRecord


class Tier(str, Enum):
    SPECIFIC_SMALL = "specific_small"
    LEARNABLE_SMALL = "learnable_small"
    LARGE = "large"


class Strategy(str, Enum):
    CONFIDENCE = "confidence"
    DISTRIBUTION_MODEL = "distribution_model"
    PREDICTION_MODEL = "prediction_model"


TIER_ORDER = (Tier.SPECIFIC_SMALL, Tier.LEARNABLE_SMALL, Tier.LARGE)


@dataclass(frozen=True)
class ShuntPolicy:
    delta: float = 0.97
    strategy: Strategy = Strategy.CONFIDENCE
    tier_order: tuple[Tier, ...] = TIER_ORDER
    # "fallback": answer with the best small tier; "raise": RoutingError
    on_large_failure: str = "fallback"

    def __post_init__(self):
        if not (0.0 < self.delta < 1.0):
            raise DomainError(f"delta must lie in (0, 1), got {self.delta}")
        try:
            object.__setattr__(self, "strategy", Strategy(self.strategy))
        except ValueError:
            raise DomainError(f"unknown strategy {self.strategy!r}") from None
        if tuple(self.tier_order) != TIER_ORDER:
            raise DomainError(f"tier order is fixed to {[t.value for t in TIER_ORDER]}")
        if self.on_large_failure not in ("fallback", "raise"):
            raise DomainError(f"unknown failure mode {self.on_large_failure!r}")


@dataclass(frozen=True)
class RoutingOutcome:
    sample_id: str
    tier: Tier
    prediction: str
    confidence: float
    cost: int = 0
    prompt_used: PromptRecord | None = None
    # set when the large tier failed and a small tier answered instead
    degraded: bool = False

    def to_record(self) -> dict:
        return {
            "sample_id": self.sample_id,
            "tier": self.tier.value,
            "prediction": self.prediction,
            "confidence": self.confidence,
            "cost": self.cost,
            "prompt_used": None if self.prompt_used is None else self.prompt_used.to_record(),
            "degraded": self.degraded,
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "RoutingOutcome":
        prompt = rec.get("prompt_used")
        return cls(
            sample_id=rec["sample_id"],
            tier=Tier(rec["tier"]),
            prediction=rec["prediction"],
            confidence=float(rec["confidence"]),
            cost=int(rec.get("cost", 0)),
            prompt_used=None if prompt is None else PromptRecord.from_record(prompt),
            degraded=bool(rec.get("degraded", False)),
        )


# (sample, specific-small confidences, candidates) -> (record, candidates for the large call)
Prompter = Callable[[Sample, ProbabilityVector, Sequence[str]], "tuple[PromptRecord, Sequence[str]]"]


# --------------------------------------------------------------------------
# strategies


class ShuntStrategy(Protocol):
    kind: Strategy

    def keeps(self, sample: Sample, probs: ProbabilityVector, delta: float) -> bool:
        """True when the small tier that produced ``probs`` should answer."""


def confidence_score(probs: ProbabilityVector, reduction: str = "max") -> float:
    if reduction == "max":
        return probs.max()
    if reduction == "margin":
        top = sorted(probs.probs, reverse=True)
        return top[0] - (top[1] if len(top) > 1 else 0.0)
    if reduction == "entropy":
        n = len(probs)
        return 1.0 if n == 1 else 1.0 - entropy(probs) / math.log(n)
    raise DomainError(f"unknown confidence reduction {reduction!r}")


@dataclass(frozen=True)
class ConfidenceStrategy:
    reduction: str = "max"
    kind: Strategy = field(default=Strategy.CONFIDENCE, init=False)

    def keeps(self, sample, probs, delta):
        return confidence_score(probs, self.reduction) > delta


@dataclass(frozen=True)
class DistributionStrategy:
    """Keeps samples an auxiliary model assigns to the small model's regions."""

    region_model: ModelBackend
    regions: tuple[str, ...]
    small_regions: frozenset[str] = frozenset({"head"})
    kind: Strategy = field(default=Strategy.DISTRIBUTION_MODEL, init=False)

    def region(self, sample: Sample) -> str:
        return self.region_model.classify(sample, self.regions).argmax()

    def keeps(self, sample, probs, delta):
        return self.region(sample) in self.small_regions


@dataclass(frozen=True)
class PredictionStrategy:
    """Keeps samples an auxiliary model expects the small model to get right."""

    correctness_model: ModelBackend
    threshold: float = 0.5
    kind: Strategy = field(default=Strategy.PREDICTION_MODEL, init=False)

    def p_correct(self, sample: Sample) -> float:
        return self.correctness_model.classify(sample, ("wrong", "right")).prob("right")

    def keeps(self, sample, probs, delta):
        return self.p_correct(sample) > self.threshold


def fit_region_model(train: Dataset, *, seed: int = 0, epochs: int = 200, learning_rate: float = 0.5):
    """Linear classifier from features to each sample's category tag."""
    from .distillation import TrainableClassifier

    tagged = train.filter(lambda s: s.category is not None)
    if not len(tagged):
        raise ConfigurationError("no category tags to train a region model on")
    regions = sorted({s.category for s in tagged})
    model = TrainableClassifier.zeros(regions, len(tagged[0].payload), learning_rate=learning_rate, seed=seed)
    model.fit(tagged.features(), [s.category for s in tagged], epochs=epochs)
    return DistributionStrategy(LinearBackend("region-model", model), tuple(regions))


def fit_correctness_model(
    train: Dataset,
    small: ModelBackend,
    candidates: Sequence[str],
    *,
    seed: int = 0,
    epochs: int = 200,
    learning_rate: float = 0.5,
    threshold: float = 0.5,
):
    """Linear classifier predicting whether ``small`` answers a sample correctly."""
    from .distillation import TrainableClassifier

    labelled = train.filter(lambda s: s.gold_label is not None)
    if not len(labelled):
        raise ConfigurationError("correctness model needs gold labels")
    y = [
        "right" if small.classify(s, candidates).argmax() == s.gold_label else "wrong"
        for s in labelled
    ]
    model = TrainableClassifier.zeros(("wrong", "right"), len(labelled[0].payload), learning_rate=learning_rate, seed=seed)
    model.fit(labelled.features(), y, epochs=epochs)
    return PredictionStrategy(LinearBackend("correctness-model", model), threshold)


# --------------------------------------------------------------------------
# routing


def _route(
    sample: Sample,
    policy: ShuntPolicy,
    strategy: ShuntStrategy,
    specific_small: ModelBackend,
    learnable_small: ModelBackend | None,
    large: ModelBackend,
    candidates: Sequence[str],
    prompter: Prompter | None,
) -> RoutingOutcome:
    candidates = tuple(candidates)
    c1 = specific_small.classify(sample, candidates)
    if strategy.keeps(sample, c1, policy.delta):
        return RoutingOutcome(sample.id, Tier.SPECIFIC_SMALL, c1.argmax(), c1.max())
    best_tier, best = Tier.SPECIFIC_SMALL, c1
    if learnable_small is not None:
        c2 = learnable_small.classify(sample, candidates)
        if strategy.keeps(sample, c2, policy.delta):
            return RoutingOutcome(sample.id, Tier.LEARNABLE_SMALL, c2.argmax(), c2.max())
        if c2.max() > c1.max():
            best_tier, best = Tier.LEARNABLE_SMALL, c2

    record, large_candidates, prompt = None, candidates, None
    if prompter is not None:
        record, large_candidates = prompter(sample, c1, candidates)
        prompt = record.rendered
    try:
        answer = large.invoke(sample, large_candidates, prompt)
    except TransportError as exc:
        fallback = RoutingOutcome(
            sample.id, best_tier, best.argmax(), best.max(), 0, record, degraded=True
        )
        if policy.on_large_failure == "raise":
            raise RoutingError(f"large tier failed for {sample.id}: {exc}", fallback) from exc
        return fallback
    return RoutingOutcome(
        sample.id, Tier.LARGE, answer.probs.argmax(), answer.probs.max(), answer.cost_micro, record
    )


def route(
    sample: Sample,
    policy: ShuntPolicy,
    specific_small: ModelBackend,
    learnable_small: ModelBackend | None,
    large: ModelBackend,
    candidates: Sequence[str],
    prompter: Prompter | None = None,
) -> RoutingOutcome:
    """Confidence shunting: max probability strictly above ``policy.delta`` stays small."""
    return _route(
        sample, policy, ConfidenceStrategy(), specific_small, learnable_small, large, candidates, prompter
    )


def route_with_strategy(
    sample: Sample,
    policy: ShuntPolicy,
    specific_small: ModelBackend,
    learnable_small: ModelBackend | None,
    large: ModelBackend,
    candidates: Sequence[str],
    strategy: ShuntStrategy | None = None,
    prompter: Prompter | None = None,
) -> RoutingOutcome:
    if strategy is None:
        if policy.strategy is not Strategy.CONFIDENCE:
            raise ConfigurationError(f"strategy {policy.strategy.value} needs its auxiliary model")
        strategy = ConfidenceStrategy()
    elif strategy.kind is not policy.strategy:
        raise ConfigurationError(
            f"policy asks for {policy.strategy.value}, got a {strategy.kind.value} strategy"
        )
    return _route(
        sample, policy, strategy, specific_small, learnable_small, large, candidates, prompter
    )


def route_dataset(
    dataset: Dataset,
    policy: ShuntPolicy,
    specific_small: ModelBackend,
    learnable_small: ModelBackend | None,
    large: ModelBackend,
    candidates: Sequence[str],
    *,
    strategy: ShuntStrategy | None = None,
    prompter: Prompter | None = None,
    workers: int = 1,
) -> list[RoutingOutcome]:
    """Route every sample; output order always matches ``dataset``."""

    def one(sample):
        return route_with_strategy(
            sample, policy, specific_small, learnable_small, large, candidates, strategy, prompter
        )

    if workers <= 1:
        return [one(s) for s in dataset]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(one, dataset))


def tier_counts(outcomes: Sequence[RoutingOutcome]) -> dict[Tier, int]:
    counts = {t: 0 for t in TIER_ORDER}
    for o in outcomes:
        counts[o.tier] += 1
    return counts


def query_proportion(outcomes: Sequence[RoutingOutcome]) -> float:
    if not outcomes:
        return 0.0
    return tier_counts(outcomes)[Tier.LARGE] / len(outcomes)


# --------------------------------------------------------------------------
# calibration


@dataclass(frozen=True)
class MatchLargeAccuracy:
    """Smallest delta whose cascade accuracy reaches ``target``.

    With ``target=None`` the target is the large model's own accuracy on the
    validation set, which costs one large call per validation sample.
    """

    target: float | None = None
    tolerance: float = 0.0


@dataclass(frozen=True)
class MaxAccuracy:
    pass


@dataclass(frozen=True)
class CalibrationPoint:
    delta: float
    accuracy: float
    query_proportion: float


@dataclass(frozen=True)
class CalibrationResult:
    chosen_delta: float
    sweep: tuple[CalibrationPoint, ...]
    met: bool = True
    target: float | None = None

    def point(self, delta: float) -> CalibrationPoint:
        for p in self.sweep:
            if p.delta == delta:
                return p
        raise DomainError(f"delta {delta} not in the sweep")

    def to_record(self) -> dict:
        return {
            "chosen_delta": self.chosen_delta,
            "met": self.met,
            "target": self.target,
            "sweep": [
                {"delta": p.delta, "accuracy": p.accuracy, "query_proportion": p.query_proportion}
                for p in self.sweep
            ],
        }


def parse_grid(text: str) -> list[float]:
    """``"start:stop:step"`` (inclusive of stop) or a comma-separated list."""
    if ":" in text:
        try:
            start, stop, step = (Decimal(p) for p in text.split(":"))
        except Exception:
            raise DomainError(f"bad grid {text!r}; expected start:stop:step") from None
        if step <= 0 or stop < start:
            raise DomainError(f"bad grid {text!r}")
        out, v = [], start
        while v <= stop:
            out.append(float(v))
            v += step
        return out
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError:
        raise DomainError(f"bad grid {text!r}") from None


def calibrate_delta(
    validation: Dataset,
    specific_small: ModelBackend,
    grid: Sequence[float],
    objective: MatchLargeAccuracy | MaxAccuracy = MatchLargeAccuracy(),
    *,
    large: ModelBackend | None = None,
    large_answers: Mapping[str, str] | None = None,
    candidates: Sequence[str] | None = None,
    prompter: Prompter | None = None,
) -> CalibrationResult:
    """Sweep ``grid`` with two-tier routing (specific small vs large) on ``validation``.

    Large-model answers come from ``large_answers`` when cached there, otherwise
    from ``large``; each sample is asked at most once. Ties go to the smaller
    (cheaper) delta.
    """
    grid = sorted(set(float(d) for d in grid))
    if not grid:
        raise DomainError("empty delta grid")
    if not all(0.0 < d < 1.0 for d in grid):
        raise DomainError("every delta must lie in (0, 1)")
    if any(s.gold_label is None for s in validation):
        raise DomainError("calibration needs gold labels on every validation sample")
    if not len(validation):
        raise DomainError("empty validation set")
    candidates = tuple(candidates or validation.labels())
    answers = dict(large_answers or {})

    def large_answer(sample: Sample) -> str:
        if sample.id not in answers:
            if large is None:
                raise ConfigurationError(f"no large-model answer for {sample.id}")
            cands, prompt = candidates, None
            if prompter is not None:
                record, cands = prompter(sample, small[sample.id], candidates)
                prompt = record.rendered
            answers[sample.id] = large.classify(sample, cands, prompt).argmax()
        return answers[sample.id]

    small = {s.id: specific_small.classify(s, candidates) for s in validation}
    n = len(validation)
    top = grid[-1]
    need_all = isinstance(objective, MatchLargeAccuracy) and objective.target is None
    for s in validation:
        if need_all or not small[s.id].max() > top:
            large_answer(s)

    sweep = []
    for d in grid:
        correct = routed = 0
        for s in validation:
            c = small[s.id]
            if c.max() > d:
                pred = c.argmax()
            else:
                routed += 1
                pred = answers[s.id]
            correct += pred == s.gold_label
        sweep.append(CalibrationPoint(d, correct / n, routed / n))

    best = max(sweep, key=lambda p: (p.accuracy, -p.delta))
    if isinstance(objective, MaxAccuracy):
        return CalibrationResult(best.delta, tuple(sweep), True, None)
    if objective.target is None:
        target = sum(answers[s.id] == s.gold_label for s in validation) / n
    else:
        target = objective.target
    for p in sweep:
        if p.accuracy >= target - objective.tolerance:
            return CalibrationResult(p.delta, tuple(sweep), True, target)
    return CalibrationResult(best.delta, tuple(sweep), False, target)
