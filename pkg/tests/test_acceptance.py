"""Acceptance criteria 1-9. Each test carries a ``criterion`` marker; the
terminal summary prints one PASS/FAIL line per criterion."""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from shuntgate import cli
from shuntgate.backends import CostLedger, Dataset, PrecomputedBackend, Sample
from shuntgate.core import (
    JointDistribution,
    ProbabilityVector,
    conditional_entropy,
    entropy,
    entropy_rows,
    max_entropy_bound,
)
from shuntgate.distillation import TrainableClassifier
from shuntgate.experiments import cascade_dominance_config, run_two_cluster
from shuntgate.fixtures import dispute_pipeline, dispute_sample
from shuntgate.harness import ingest, run_experiment
from shuntgate.metrics import bleu
from shuntgate.prompting import ProficiencySet, hard_prompter, run_transfer_pipeline
from shuntgate.router import ShuntPolicy, Tier, parse_grid, query_proportion, route_dataset, tier_counts

pytestmark = pytest.mark.acceptance

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def criterion(number, title):
    return pytest.mark.criterion(number, title)


class Budget:
    """Wall-clock guard for a criterion's runtime limit."""

    def __init__(self, seconds):
        self.seconds = seconds

    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.start
        if exc[0] is None:
            assert self.elapsed < self.seconds, f"took {self.elapsed:.2f} s, limit {self.seconds} s"


# --- 1 ---------------------------------------------------------------------

def _oracle_entropies(table):
    """H(X) and H(X|Y) straight from the definitions, one cell at a time."""
    rows, cols = len(table), len(table[0])
    px = [math.fsum(table[x][y] for y in range(cols)) for x in range(rows)]
    py = [math.fsum(table[x][y] for x in range(rows)) for y in range(cols)]
    h_x = -math.fsum(p * math.log(p) for p in px if p > 0)
    h_xy = 0.0
    for y in range(cols):
        if py[y] == 0:
            continue
        cond = [table[x][y] / py[y] for x in range(rows)]
        h_xy += py[y] * -math.fsum(c * math.log(c) for c in cond if c > 0)
    return h_x, h_xy


@criterion(1, "information theory")
def test_information_theory():
    rng = np.random.default_rng(2024)
    with Budget(5):
        for i in range(1000):
            r, c = rng.integers(1, 9, size=2)
            t = rng.dirichlet(np.full(r * c, rng.choice([0.1, 1.0, 5.0]))).reshape(r, c)
            if i % 5 == 0:
                t[rng.random(t.shape) < 0.3] = 0.0
                if t.sum() == 0:
                    t[0, 0] = 1.0
                t /= t.sum()
            h_x, h_xy = _oracle_entropies(t.tolist())
            assert h_xy <= h_x + 1e-9
            rep = conditional_entropy(JointDistribution(t))
            assert rep.h_x == pytest.approx(h_x, abs=1e-9)
            assert rep.h_x_given_y == pytest.approx(h_xy, abs=1e-9)
            assert rep.h_x_given_y <= rep.h_x + 1e-9

            px, py = rng.dirichlet(np.ones(r)), rng.dirichlet(np.ones(c))
            prod = np.outer(px, py)
            h_x, h_xy = _oracle_entropies(prod.tolist())
            assert abs(h_x - h_xy) <= 1e-9
            rep = conditional_entropy(JointDistribution.product(px, py))
            assert abs(rep.h_x - rep.h_x_given_y) <= 1e-9

        for n in (2, 10, 100):
            p = rng.dirichlet(np.ones(n), size=100_000)
            # sparse rows exercise the 0 log 0 convention
            p[::7] = rng.dirichlet(np.full(n, 0.05), size=len(p[::7]))
            h = entropy_rows(p)
            direct = -np.sum(np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0), axis=1)
            assert np.all(direct <= math.log(n) + 1e-9)
            assert np.all(h <= max_entropy_bound(n))
            uniform = np.full((1, n), 1.0 / n)
            assert abs(entropy_rows(uniform)[0] - math.log(n)) <= 1e-9
            assert abs(entropy([1.0 / n] * n) - math.log(n)) <= 1e-9
            assert abs(-n * (1.0 / n) * math.log(1.0 / n) - math.log(n)) <= 1e-9


# --- 2 ---------------------------------------------------------------------

@criterion(2, "hard-prompt entropy bound")
def test_hard_prompt_bound_fuzz():
    rng = np.random.default_rng(7)
    universe = np.array([f"class{i}" for i in range(200)])
    cases = []
    for _ in range(10_000):
        n = int(rng.integers(2, 60))
        cands = tuple(rng.choice(universe, size=n, replace=False).tolist())
        proficient = frozenset(universe[rng.random(len(universe)) < rng.random()].tolist())
        cases.append((n, cands, proficient))
    sample = Sample("q", "text")
    pruned_cases = 0
    with Budget(2):
        for n, cands, proficient in cases:
            c_s = ProbabilityVector.uniform(cands)
            rec, surviving = hard_prompter("Pick one of: {candidates}.", ProficiencySet(proficient))(
                sample, c_s, cands
            )
            assert surviving == rec.surviving_candidates
            assert set(rec.pruned_candidates) | set(surviving) == set(cands)
            if rec.pruned_candidates:
                pruned_cases += 1
                m = len(surviving)
                assert 1 <= m < n
                assert max_entropy_bound(m) < max_entropy_bound(n)
            else:
                assert len(surviving) == n
    assert pruned_cases > 5_000


# --- 3 ---------------------------------------------------------------------

def _confidence_table(n, rng, labels):
    table = {}
    grid = parse_grid("0.85:0.99:0.01")
    for i in range(n):
        u = rng.random()
        if u < 0.1:
            top = float(rng.choice(grid))  # exact ties with grid thresholds
        elif u < 0.5:
            top = rng.uniform(0.85, 1.0)
        else:
            top = rng.uniform(1 / len(labels), 1.0)
        j = int(rng.integers(len(labels)))
        rest = (1 - top) / (len(labels) - 1)
        table[f"s{i}"] = ProbabilityVector(tuple(top if k == j else rest for k in range(len(labels))), labels)
    return table


@criterion(3, "routing exactness")
def test_routing_exactness():
    n = 10_000
    labels = ("a", "b", "c", "d")
    rng = np.random.default_rng(3)
    with Budget(10):
        t1 = _confidence_table(n, rng, labels)
        t2 = _confidence_table(n, rng, labels)
        tl = {k: ProbabilityVector.uniform(labels) for k in t1}
        ds = Dataset(Sample(k, "t", "a") for k in t1)
        s1, s2, large = PrecomputedBackend("s1", t1), PrecomputedBackend("s2", t2), PrecomputedBackend("l", tl)

        outs = route_dataset(ds, ShuntPolicy(0.97), s1, s2, large, labels)
        counts = tier_counts(outs)
        assert sum(counts.values()) == n
        assert sorted(o.sample_id for o in outs) == sorted(t1)
        brute_small = sum(1 for k in t1 if t1[k].max() > 0.97)
        brute_learn = sum(1 for k in t1 if t1[k].max() <= 0.97 < t2[k].max())
        brute_large = n - brute_small - brute_learn
        assert counts[Tier.SPECIFIC_SMALL] == brute_small
        assert counts[Tier.LEARNABLE_SMALL] == brute_learn
        assert counts[Tier.LARGE] == brute_large
        assert query_proportion(outs) == brute_large / n

        qps = []
        for d in parse_grid("0.85:0.99:0.01"):
            qp = query_proportion(route_dataset(ds, ShuntPolicy(d), s1, None, large, labels))
            assert qp == sum(1 for p in t1.values() if p.max() <= d) / n
            qps.append(qp)
        assert all(a <= b for a, b in zip(qps, qps[1:]))
        assert qps[0] < qps[-1]


# --- 4 ---------------------------------------------------------------------

@criterion(4, "cascade dominance")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_cascade_dominance(seed, tmp_path):
    with Budget(60):
        result = run_experiment(cascade_dominance_config(seed), tmp_path)
    rep = result.report
    large_only = rep.baseline_comparisons["large"]["overall"]
    kept = [o for o in result.outcomes if o.tier is Tier.SPECIFIC_SMALL]
    gold = _gold(result.run_dir)
    kept_acc = sum(o.prediction == gold[o.sample_id] for o in kept) / len(kept)
    print(f"seed {seed}: DS+ {rep.overall_accuracy:.4f} large {large_only:.4f} "
          f"qp {rep.overall_query_proportion:.4f} cost {rep.total_cost} vs {result.baseline_large_cost} "
          f"kept {kept_acc:.4f} delta {result.delta}")
    assert kept_acc > 0.90
    assert rep.overall_accuracy >= large_only - 0.002
    assert rep.overall_query_proportion <= 0.80
    assert rep.total_cost < result.baseline_large_cost


def _gold(run_dir):
    return {s.id: s.gold_label for s in ingest(run_dir / "test.jsonl")}


# --- 5 ---------------------------------------------------------------------

@criterion(5, "2CD learning without forgetting")
@pytest.mark.parametrize("seed", [0, 1, 2])
def test_two_stage_distillation(seed):
    with Budget(120):
        full = run_two_cluster(seed)
        ls_only = run_two_cluster(seed, use_small_teacher=False)
    print(f"seed {seed}: B gain {full.b_gain:.2f} pts, forgetting full {full.forgetting:.3f} "
          f"vs ls-only {ls_only.forgetting:.3f}")
    assert full.b_gain >= 10
    assert full.forgetting < 1.0
    assert ls_only.forgetting > full.forgetting


# --- 6 ---------------------------------------------------------------------

def _rel_err(a, b):
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-12)))


def _oracle_kl(w, b, x, t, order):
    """KL between softmax(w x + b) and the teacher in extended precision."""
    z = w @ x + b
    z = z - z.max()
    s = np.exp(z) / np.exp(z).sum()
    if order == "reverse":
        return np.sum(s * np.log(s / t))
    return np.sum(t * np.log(t / s))


@criterion(6, "KL gradient correctness")
@pytest.mark.parametrize("order", ["reverse", "forward"])
def test_gradient_against_finite_differences(order):
    rng = np.random.default_rng(11)
    ld = np.longdouble
    eps = ld(1e-6)
    with Budget(5):
        for _ in range(100):
            k, d = int(rng.integers(2, 7)), int(rng.integers(1, 6))
            m = TrainableClassifier.random([f"c{i}" for i in range(k)], d, scale=1.0,
                                           seed=int(rng.integers(1 << 30)))
            m.bias = rng.normal(size=k)
            x = rng.normal(size=(1, d))
            t = rng.dirichlet(np.ones(k), size=1)
            loss, g_w, g_b = m.kl_loss_and_grad(x, t, order)
            w, b = m.weights.astype(ld), m.bias.astype(ld)
            xl, tl = x[0].astype(ld), t[0].astype(ld)
            assert abs(loss - float(_oracle_kl(w, b, xl, tl, order))) < 1e-12
            for arr, grad in ((w, g_w), (b, g_b)):
                num = np.zeros(arr.shape, dtype=ld)
                for idx in np.ndindex(*arr.shape):
                    v0 = arr[idx]
                    arr[idx] = v0 + eps
                    up = _oracle_kl(w, b, xl, tl, order)
                    arr[idx] = v0 - eps
                    down = _oracle_kl(w, b, xl, tl, order)
                    arr[idx] = v0
                    num[idx] = (up - down) / (2 * eps)
                assert _rel_err(grad, num.astype(float)) < 1e-5


# --- 7 ---------------------------------------------------------------------

@criterion(7, "BLEU fixtures")
def test_bleu_fixtures():
    with Budget(1):
        text = "a small model keeps the easy cases and forwards the rest".split()
        s = bleu(text, [text])
        assert all(s[n] == 1.0 for n in range(1, 5))
        assert bleu("the the the the", ["the cat"], max_n=1)[1] == 0.25
        assert abs(bleu("a b", ["a b c d"], max_n=1)[1] - math.exp(-1)) <= 1e-9


# --- 8 ---------------------------------------------------------------------

@criterion(8, "transfer-pipeline token accounting")
def test_transfer_pipeline_accounting():
    with Budget(1):
        ledger = CostLedger()
        _, rec = run_transfer_pipeline(dispute_pipeline(ledger), dispute_sample())
    assert rec.token_count_in == 216
    assert rec.token_count_out == 53
    assert ledger.input_tokens("judge") == 53
    assert ledger.total_micro("judge") == 53 * 1_000_000


# --- 9 ---------------------------------------------------------------------

@criterion(9, "reproducibility")
def test_run_twice_is_byte_identical(tmp_path, capsys):
    config = CONFIGS / "example.yaml"
    with Budget(60):
        assert cli.main(["run", "--config", str(config), "--run-root", str(tmp_path)]) == 0
        assert cli.main(["run", "--config", str(config), "--run-root", str(tmp_path)]) == 0
    first, second = sorted(p for p in tmp_path.iterdir() if p.is_dir())
    files = sorted(p.name for p in first.iterdir())
    assert files == sorted(p.name for p in second.iterdir())
    for name in ("outcomes.jsonl", "report.jsonl", "report.txt"):
        assert name in files
    for name in files:
        assert (first / name).read_bytes() == (second / name).read_bytes(), name
