import json
import math
import random
from collections import Counter
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuntgate.backends import Dataset, Sample
from shuntgate.errors import DomainError
from shuntgate.metrics import BleuScore, bleu, category_accuracy, corpus_bleu, evaluate
from shuntgate.router import RoutingOutcome, Tier


def outcome(i, tier, pred, cost=0):
    return RoutingOutcome(f"s{i}", tier, pred, 0.9, cost)


# --- evaluate --------------------------------------------------------------

def test_all_correct_none_routed():
    gold = Dataset(Sample(f"s{i}", "t", "a", "x") for i in range(5))
    rep = evaluate([outcome(i, Tier.SPECIFIC_SMALL, "a") for i in range(5)], gold)
    assert rep.overall_accuracy == 1.0
    assert rep.overall_query_proportion == 0.0
    assert rep.total_cost == 0


def test_recount_against_independent_oracle():
    rng = random.Random(0)
    cats = ["head", "med", "tail", None]
    samples, outs = [], []
    for i in range(500):
        gold_label = rng.choice("abc") if rng.random() > 0.05 else None
        samples.append(Sample(f"s{i}", "t", gold_label, rng.choice(cats)))
        tier = rng.choice(list(Tier))
        outs.append(outcome(i, tier, rng.choice("abc"), cost=1000 if tier is Tier.LARGE else 0))
    gold = Dataset(samples)
    rep = evaluate(outs, gold)
    scored = [(s, o) for s, o in zip(samples, outs) if s.gold_label is not None]
    assert rep.unscored == 500 - len(scored)
    assert sum(c.n for c in rep.per_category.values()) == rep.n == len(scored)
    assert rep.exact_accuracy == Fraction(sum(s.gold_label == o.prediction for s, o in scored), len(scored))
    weighted = sum(Fraction(c.correct, 1) for c in rep.per_category.values()) / rep.n
    assert weighted == rep.exact_accuracy
    assert rep.routed_large == sum(o.tier is Tier.LARGE for _, o in scored)
    assert rep.total_cost == sum(o.cost for o in outs)
    assert sum(rep.tier_counts.values()) == 500
    assert "-" in rep.per_category


def test_unknown_sample_is_rejected():
    with pytest.raises(DomainError):
        evaluate([outcome(9, Tier.LARGE, "a")], Dataset([Sample("s0", "t", "a")]))


def test_table_layout():
    samples, outs = [], []
    for i, (cat, tier, pred) in enumerate([
        ("head", Tier.SPECIFIC_SMALL, "a"), ("head", Tier.SPECIFIC_SMALL, "a"),
        ("med", Tier.LARGE, "b"), ("med", Tier.SPECIFIC_SMALL, "a"),
        ("tail", Tier.LARGE, "c"), ("tail", Tier.LARGE, "a"),
    ]):
        samples.append(Sample(f"s{i}", "t", {"head": "a", "med": "b", "tail": "c"}[cat], cat))
        outs.append(outcome(i, tier, pred, 5 if tier is Tier.LARGE else 0))
    gold = Dataset(samples)
    baselines = {"small": {"head": 1.0, "med": 0.5, "tail": 0.0, "overall": 0.5},
                 "large": {"head": 0.9, "med": 0.9, "tail": 0.9, "overall": 0.9}}
    rep = evaluate(outs, gold, baselines)
    table = rep.to_table().splitlines()
    assert table[0].split() == ["Category", "large", "small", "DS+", "n"]
    firsts = [line.split()[0] for line in table[2:]]
    assert firsts[:5] == ["head", "med", "tail", "Overall", "Query"]
    assert "100.00%|0.00%" in table[2]
    assert "50.00%|50.00%" in table[3]
    assert "50.00%|100.00%" in table[4]
    assert table[5].split()[-2] == "66.67%"
    assert table[6].split()[-1] == "50.00%"
    assert table[-1] == "total cost (micro-units): 15"

    lines = [json.loads(l) for l in rep.to_jsonl().splitlines()]
    assert [l["category"] for l in lines] == ["head", "med", "tail", "overall"]
    assert lines[-1]["query_proportion"] == 0.5
    assert lines[-1]["large_accuracy"] == 0.9
    assert lines[0]["small_accuracy"] == 1.0


def test_report_rendering_is_deterministic():
    gold = Dataset(Sample(f"s{i}", "t", "a", "c") for i in range(7))
    outs = [outcome(i, Tier.LARGE if i % 3 else Tier.SPECIFIC_SMALL, "a" if i % 2 else "b") for i in range(7)]
    a, b = evaluate(outs, gold), evaluate(list(outs), gold)
    assert a.to_jsonl() == b.to_jsonl() and a.to_table() == b.to_table()
    assert json.loads(a.to_jsonl().splitlines()[0])["accuracy"] == round(3 / 7, 6)


def test_category_accuracy():
    gold = Dataset([Sample("a", "t", "x", "h"), Sample("b", "t", "y", "h"), Sample("c", "t", "x", "t")])
    acc = category_accuracy({"a": "x", "b": "x", "c": "x"}, gold)
    assert acc == {"h": 0.5, "t": 1.0, "overall": pytest.approx(2 / 3)}


# --- BLEU ------------------------------------------------------------------

def test_identity_scores_one():
    text = "the quick brown fox jumps over the lazy dog".split()
    s = bleu(text, [text])
    assert s.scores == (1.0, 1.0, 1.0, 1.0)
    assert s.mean == 1.0
    assert not s.short


def test_clipped_unigram_fixture():
    s = bleu("the the the the", ["the cat"], max_n=1)
    assert s.precisions[0] == Fraction(1, 4)
    assert s[1] == 0.25


def test_brevity_penalty_fixture():
    s = bleu("a b", ["a b c d"], max_n=1)
    assert s.brevity_penalty == pytest.approx(math.exp(-1), abs=1e-15)
    assert s[1] == pytest.approx(math.exp(1 - 4 / 2), abs=1e-12)


def test_short_hypothesis_flags_levels():
    s = bleu("a b", ["a b c"], max_n=4)
    assert s.short
    assert s[3] == 0.0 and s[4] == 0.0
    assert s[2] > 0


def test_closest_reference_length():
    s = bleu("a b c", ["a b c d e", "a b"], max_n=1)
    # both references are two tokens away; the shorter one is used
    assert s.reference_length == 2
    assert s.brevity_penalty == 1.0


def test_bleu_input_validation():
    with pytest.raises(DomainError):
        bleu("", ["a"])
    with pytest.raises(DomainError):
        bleu("a", [])
    with pytest.raises(DomainError):
        bleu("a", ["a"], max_n=5)
    with pytest.raises(DomainError):
        corpus_bleu([])
    with pytest.raises(IndexError):
        bleu("a b", ["a b"])[0]


def test_corpus_bleu_pools_counts():
    pairs = [("a b c d", ["a b c d"]), ("x y", ["x z"])]
    s = corpus_bleu(pairs, max_n=2)
    assert s.precisions == (5 / 6, 3 / 4)


def _oracle_bleu(hyp, refs, max_n):
    """Straight transcription of the textbook definition for one sentence."""
    precisions = []
    for n in range(1, max_n + 1):
        grams = [tuple(hyp[i:i + n]) for i in range(len(hyp) - n + 1)]
        counts = Counter(grams)
        clip = 0
        for g, c in counts.items():
            clip += min(c, max(Counter(tuple(r[i:i + n]) for i in range(len(r) - n + 1))[g] for r in refs))
        precisions.append(Fraction(clip, len(grams)) if grams else Fraction(0))
    c = len(hyp)
    r = min(refs, key=lambda ref: (abs(len(ref) - c), len(ref)))
    bp = 1.0 if c >= len(r) else math.exp(1 - len(r) / c)
    out = []
    for n in range(1, max_n + 1):
        ps = precisions[:n]
        out.append(0.0 if min(ps) == 0 else bp * math.exp(sum(math.log(p) for p in ps) / n))
    return out


tokens = st.lists(st.sampled_from("abcde"), min_size=1, max_size=12)


@settings(max_examples=300)
@given(tokens, st.lists(tokens, min_size=1, max_size=3))
def test_bleu_matches_oracle_and_bounds(hyp, refs):
    s = bleu(hyp, refs)
    for got, want in zip(s.scores, _oracle_bleu(hyp, refs, 4)):
        assert got == pytest.approx(want, abs=1e-12)
        assert 0.0 <= got <= 1.0
    assert s.mean == pytest.approx(sum(s.scores) / 4, abs=1e-9)


@given(tokens, st.lists(tokens, min_size=1, max_size=4), st.randoms())
def test_bleu_reference_permutation_invariant(hyp, refs, rnd):
    shuffled = list(refs)
    rnd.shuffle(shuffled)
    assert bleu(hyp, refs).scores == bleu(hyp, shuffled).scores


@given(tokens, tokens)
def test_matched_ngrams_non_increasing_in_n(hyp, ref):
    s = bleu(hyp, [ref])
    matched = [round(p * max(len(hyp) - n, 0)) for n, p in enumerate(s.precisions)]
    assert matched == sorted(matched, reverse=True)


def test_record_export():
    rec = bleu("a b c", ["a b c"], max_n=2).to_record()
    assert rec["bleu_1"] == rec["bleu_2"] == 1.0
    assert rec["mean"] == 1.0
    assert isinstance(BleuScore((0.5,), (0.5,), 1.0, 1, 1).to_record()["precisions"], list)
