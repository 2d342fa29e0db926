"""Evaluation reports and BLEU."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping, Sequence

from .backends import Dataset
from .errors import DomainError
from .router import RoutingOutcome, Tier

NO_CATEGORY = "-"
PRECISION = 6


@dataclass(frozen=True)
class CategoryStats:
    n: int
    correct: int
    routed_large: int

    @property
    def accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    @property
    def query_proportion(self) -> float:
        return self.routed_large / self.n if self.n else 0.0


@dataclass(frozen=True)
class EvaluationReport:
    per_category: Mapping[str, CategoryStats]
    n: int
    correct: int
    routed_large: int
    total_cost: int
    unscored: int = 0
    tier_counts: Mapping[str, int] = field(default_factory=dict)
    # name -> {category or "overall": accuracy}
    baseline_comparisons: Mapping[str, Mapping[str, float]] = field(default_factory=dict)

    @property
    def overall_accuracy(self) -> float:
        return self.correct / self.n if self.n else 0.0

    @property
    def overall_query_proportion(self) -> float:
        return self.routed_large / self.n if self.n else 0.0

    @property
    def exact_accuracy(self) -> Fraction:
        return Fraction(self.correct, self.n) if self.n else Fraction(0)

    def to_jsonl(self) -> str:
        lines = []
        for cat in sorted(self.per_category):
            st = self.per_category[cat]
            rec = {
                "category": cat,
                "n": st.n,
                "correct": st.correct,
                "routed_large": st.routed_large,
                "accuracy": round(st.accuracy, PRECISION),
                "query_proportion": round(st.query_proportion, PRECISION),
            }
            for name, accs in sorted(self.baseline_comparisons.items()):
                if cat in accs:
                    rec[f"{name}_accuracy"] = round(accs[cat], PRECISION)
            lines.append(json.dumps(rec, sort_keys=True))
        overall = {
            "category": "overall",
            "n": self.n,
            "correct": self.correct,
            "routed_large": self.routed_large,
            "accuracy": round(self.overall_accuracy, PRECISION),
            "query_proportion": round(self.overall_query_proportion, PRECISION),
            "total_cost": self.total_cost,
            "unscored": self.unscored,
            "tier_counts": dict(sorted(self.tier_counts.items())),
        }
        for name, accs in sorted(self.baseline_comparisons.items()):
            if "overall" in accs:
                overall[f"{name}_accuracy"] = round(accs["overall"], PRECISION)
        lines.append(json.dumps(overall, sort_keys=True))
        return "\n".join(lines) + "\n"

    def to_table(self, label: str = "DS+") -> str:
        """Aligned text table; the cascade column reads ``accuracy|query``."""
        names = sorted(self.baseline_comparisons)
        header = ["Category", *names, label, "n"]
        rows = []
        for cat in sorted(self.per_category):
            st = self.per_category[cat]
            rows.append([
                cat,
                *[_pct(self.baseline_comparisons[b].get(cat)) for b in names],
                f"{_pct(st.accuracy)}|{_pct(st.query_proportion)}",
                str(st.n),
            ])
        rows.append([
            "Overall",
            *[_pct(self.baseline_comparisons[b].get("overall")) for b in names],
            _pct(self.overall_accuracy),
            str(self.n),
        ])
        rows.append([
            "Query Proportion",
            *["" for _ in names],
            _pct(self.overall_query_proportion),
            "",
        ])
        widths = [max(len(r[i]) for r in [header, *rows]) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        out = [fmt(header), "  ".join("-" * w for w in widths)]
        out += [fmt(r) for r in rows]
        out.append(f"total cost (micro-units): {self.total_cost}")
        if self.unscored:
            out.append(f"unscored samples: {self.unscored}")
        return "\n".join(out) + "\n"


def _pct(x: float | None) -> str:
    return "" if x is None else f"{100 * x:.2f}%"


def evaluate(
    outcomes: Sequence[RoutingOutcome],
    gold: Dataset,
    baselines: Mapping[str, Mapping[str, float]] | None = None,
) -> EvaluationReport:
    """Score routed outcomes against gold labels, per category and overall."""
    stats: dict[str, list[int]] = {}
    unscored = 0
    tiers = {t.value: 0 for t in Tier}
    cost = 0
    for o in outcomes:
        if o.sample_id not in gold:
            raise DomainError(f"outcome for unknown sample {o.sample_id!r}")
        cost += o.cost
        tiers[o.tier.value] += 1
        s = gold.get(o.sample_id)
        if s.gold_label is None:
            unscored += 1
            continue
        st = stats.setdefault(s.category or NO_CATEGORY, [0, 0, 0])
        st[0] += 1
        st[1] += o.prediction == s.gold_label
        st[2] += o.tier is Tier.LARGE
    per_cat = {c: CategoryStats(*v) for c, v in stats.items()}
    return EvaluationReport(
        per_category=per_cat,
        n=sum(v.n for v in per_cat.values()),
        correct=sum(v.correct for v in per_cat.values()),
        routed_large=sum(v.routed_large for v in per_cat.values()),
        total_cost=cost,
        unscored=unscored,
        tier_counts=tiers,
        baseline_comparisons=dict(baselines or {}),
    )


def category_accuracy(predictions: Mapping[str, str], gold: Dataset) -> dict[str, float]:
    """Per-category and overall accuracy of a single model's predictions."""
    hits: dict[str, list[int]] = {}
    for s in gold:
        if s.gold_label is None or s.id not in predictions:
            continue
        h = hits.setdefault(s.category or NO_CATEGORY, [0, 0])
        h[0] += predictions[s.id] == s.gold_label
        h[1] += 1
    out = {c: a / n for c, (a, n) in hits.items()}
    total = sum(n for _, n in hits.values())
    out["overall"] = sum(a for a, _ in hits.values()) / total if total else 0.0
    return out


# --------------------------------------------------------------------------
# BLEU


@dataclass(frozen=True)
class BleuScore:
    """Cumulative BLEU-1..BLEU-max_n with shared brevity penalty."""

    scores: tuple[float, ...]
    precisions: tuple[float, ...]
    brevity_penalty: float
    hypothesis_length: int
    reference_length: int
    short: bool = False

    @property
    def mean(self) -> float:
        return math.fsum(self.scores) / len(self.scores)

    def __getitem__(self, n: int) -> float:
        """BLEU-n, 1-based."""
        if not 1 <= n <= len(self.scores):
            raise IndexError(n)
        return self.scores[n - 1]

    def to_record(self) -> dict:
        rec = {f"bleu_{i + 1}": s for i, s in enumerate(self.scores)}
        rec.update(
            mean=self.mean, brevity_penalty=self.brevity_penalty, short=self.short,
            precisions=list(self.precisions),
        )
        return rec


def _tokens(text) -> list[str]:
    return text.split() if isinstance(text, str) else list(text)


def _ngrams(tokens: Sequence[str], n: int) -> Counter:
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def corpus_bleu(
    pairs: Sequence[tuple[Sequence[str] | str, Sequence[Sequence[str] | str]]],
    max_n: int = 4,
) -> BleuScore:
    """Corpus-level BLEU: clipped n-gram counts and lengths summed over all pairs.

    Levels whose hypotheses hold no n-grams at all score 0 and set ``short``.
    No smoothing.
    """
    if not 1 <= max_n <= 4:
        raise DomainError(f"max_n must be in 1..4, got {max_n}")
    if not pairs:
        raise DomainError("no hypotheses")
    matched = [0] * max_n
    totals = [0] * max_n
    hyp_len = ref_len = 0
    for hyp, refs in pairs:
        hyp = _tokens(hyp)
        refs = [_tokens(r) for r in refs]
        if not hyp:
            raise DomainError("empty hypothesis")
        if not refs:
            raise DomainError("need at least one reference")
        hyp_len += len(hyp)
        # closest reference length, ties to the shorter one
        ref_len += min((abs(len(r) - len(hyp)), len(r)) for r in refs)[1]
        for n in range(1, max_n + 1):
            counts = _ngrams(hyp, n)
            max_ref: Counter = Counter()
            for r in refs:
                max_ref |= _ngrams(r, n)
            matched[n - 1] += sum(min(c, max_ref[g]) for g, c in counts.items())
            totals[n - 1] += sum(counts.values())
    short = any(t == 0 for t in totals)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matched, totals))
    bp = 1.0 if hyp_len >= ref_len else math.exp(1.0 - ref_len / hyp_len)
    scores = []
    log_sum = 0.0
    for n, p in enumerate(precisions, start=1):
        if p == 0.0 or log_sum == -math.inf:
            log_sum = -math.inf
            scores.append(0.0)
            continue
        log_sum += math.log(p)
        scores.append(bp * math.exp(log_sum / n))
    return BleuScore(tuple(scores), precisions, bp, hyp_len, ref_len, short)


def bleu(hypothesis, references, max_n: int = 4) -> BleuScore:
    return corpus_bleu([(hypothesis, references)], max_n)
