import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shuntgate.backends import (
    CostLedger,
    CostProfile,
    Dataset,
    LinearBackend,
    PrecomputedBackend,
    Sample,
    SimulatedOracle,
    SimulatedOracleConfig,
)
from shuntgate.core import ProbabilityVector, kl_divergence, softmax
from shuntgate.distillation import (
    DistillationPlan,
    Schedule,
    TrainableClassifier,
    accuracy_on,
    distill,
    forgetting_audit,
    kl_rows,
    make_learnable,
    parse_ratio,
    partition,
)
from shuntgate.errors import DomainError, InfeasibleError, TrainingError
from shuntgate.experiments import run_two_cluster
from shuntgate.harness import SyntheticTaskSpec, class_ids, generate_synthetic


# --- KL kernel and gradients -----------------------------------------------

def test_kl_rows_match_scalar_kl():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(30, 4)) * 3
    t = rng.dirichlet(np.ones(4), size=30)
    rev, _ = kl_rows(z, t, "reverse")
    conv, _ = kl_rows(z, t, "forward")
    for zi, ti, kp, kc in zip(z, t, rev, conv):
        s = softmax(zi).probs
        assert kp == pytest.approx(kl_divergence(s, ti), abs=1e-12)
        assert kc == pytest.approx(kl_divergence(ti, s), abs=1e-12)


def test_kl_rows_support_violation():
    kl, g = kl_rows(np.zeros((1, 2)), np.array([[1.0, 0.0]]), "reverse")
    assert kl[0] == math.inf
    assert np.all(g == 0)
    with pytest.raises(DomainError):
        kl_rows(np.zeros((1, 2)), np.array([[0.5, 0.5]]), "sideways")


def relative_error(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


@pytest.mark.parametrize("order", ["reverse", "forward"])
def test_gradient_matches_central_differences(order):
    rng = np.random.default_rng(1)
    eps = 1e-6
    for _ in range(30):
        k, d, n = rng.integers(2, 6), rng.integers(1, 5), rng.integers(1, 4)
        m = TrainableClassifier.random([f"c{i}" for i in range(k)], d, scale=1.0, seed=int(rng.integers(1 << 30)))
        m.bias = rng.normal(size=k)
        X = rng.normal(size=(n, d))
        T = rng.dirichlet(np.ones(k), size=n)
        _, gW, gb = m.kl_loss_and_grad(X, T, order)
        num_W = np.zeros_like(m.weights)
        for idx in np.ndindex(*m.weights.shape):
            w0 = m.weights[idx]
            m.weights[idx] = w0 + eps
            up = m.kl_loss(X, T, order)
            m.weights[idx] = w0 - eps
            down = m.kl_loss(X, T, order)
            m.weights[idx] = w0
            num_W[idx] = (up - down) / (2 * eps)
        num_b = np.zeros_like(m.bias)
        for i in range(k):
            b0 = m.bias[i]
            m.bias[i] = b0 + eps
            up = m.kl_loss(X, T, order)
            m.bias[i] = b0 - eps
            down = m.kl_loss(X, T, order)
            m.bias[i] = b0
            num_b[i] = (up - down) / (2 * eps)
        assert relative_error(gW, num_W) < 1e-5
        assert relative_error(gb, num_b) < 1e-5


# --- classifier and checkpoints --------------------------------------------

def test_classifier_shape_validation():
    with pytest.raises(DomainError):
        TrainableClassifier(("a", "b"), np.zeros((3, 2)), np.zeros(2))
    with pytest.raises(DomainError):
        TrainableClassifier(("a", "a"), np.zeros((2, 2)), np.zeros(2))


def test_fit_learns_separable_data():
    ds = generate_synthetic(SyntheticTaskSpec(n_classes=3, n_samples=600, skew=(1, 1, 1), separation=5.0, seed=2))
    m = TrainableClassifier.zeros(class_ids(3), 3)
    losses = m.fit(ds.features(), [s.gold_label for s in ds], epochs=100)
    assert losses[-1] < losses[0]
    assert accuracy_on(m, ds) > 0.95
    with pytest.raises(DomainError):
        m.fit(ds.features()[:2], ["c00", "nope"])


def test_checkpoint_round_trip_is_bit_exact(tmp_path):
    m = TrainableClassifier.random(["x", "y", "z"], 5, scale=1.7, learning_rate=0.3, seed=42)
    m.bias = np.array([0.1, -1e-300, 3.141592653589793])
    path = tmp_path / "m.json"
    m.save(path)
    r = TrainableClassifier.load(path)
    assert r.class_ids == m.class_ids
    assert np.array_equal(r.weights, m.weights) and np.array_equal(r.bias, m.bias)
    assert (r.seed, r.learning_rate) == (42, 0.3)
    data = json.loads(path.read_text())
    assert data["shape"] == [3, 5] and data["version"] == 1
    data["version"] = 9
    with pytest.raises(DomainError):
        TrainableClassifier.from_checkpoint(data)
    data["version"] = 1
    data["shape"] = [3, 4]
    with pytest.raises(DomainError):
        TrainableClassifier.from_checkpoint(data)


def test_schedule_and_ratio():
    assert parse_ratio("2:1") == (2, 1)
    for bad in ("2", "a:b", "1:2:3"):
        with pytest.raises(DomainError):
            parse_ratio(bad)
    with pytest.raises(DomainError):
        Schedule((0, 0))
    with pytest.raises(DomainError):
        Schedule((1, 1), epochs=0)


# --- partition -------------------------------------------------------------

def _setup(seed=0, n=400, separation=3.0):
    ds = generate_synthetic(SyntheticTaskSpec(n_classes=4, n_samples=n, skew=(4, 2, 1), separation=separation, seed=seed))
    labels = class_ids(4)
    m = TrainableClassifier.zeros(labels, 4, seed=seed)
    m.fit(ds.features(), [s.gold_label for s in ds], epochs=60)
    return ds, labels, m


def test_partition_recount_and_billing():
    ds, labels, m = _setup()
    ledger = CostLedger()
    large = SimulatedOracle("l", SimulatedOracleConfig(seed=1), cost_profile=CostProfile(0.5), ledger=ledger)
    plan = partition(ds, LinearBackend("s", m), large, 0.9, labels)
    small = LinearBackend("s", m)
    conf = {s.id: small.classify(s, labels).max() for s in ds}
    assert set(plan.x1) == {i for i, c in conf.items() if c > 0.9}
    assert set(plan.x2) == {i for i, c in conf.items() if c <= 0.9}
    assert len(plan.x1) + len(plan.x2) == len(ds)
    assert set(plan.x3) <= set(plan.x2)
    assert ledger.calls() == len(plan.x2)
    assert set(ledger.sample_ids()) == set(plan.x2)
    assert plan.x1_teacher.shape == (len(plan.x1), 4)
    assert np.all(plan.x3_teacher.max(axis=1) > 0.9)


def test_partition_with_confident_small_has_no_x2():
    ds = Dataset(Sample(f"s{i}", (float(i),), "a") for i in range(10))
    table = {s.id: ProbabilityVector((0.99, 0.01), ("a", "b")) for s in ds}
    large = PrecomputedBackend("l", table)
    plan = partition(ds, PrecomputedBackend("s", table), large, 0.97, ("a", "b"))
    assert plan.x2 == () and plan.x3 == ()
    assert len(plan.x1) == 10
    assert large.calls == 0


def test_partition_is_deterministic():
    ds, labels, m = _setup(3)
    make = lambda: partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=5)), 0.9, labels)
    a, b = make(), make()
    assert a.x1 == b.x1 and a.x3 == b.x3
    assert np.array_equal(a.x3_teacher, b.x3_teacher)


def test_partition_infeasible():
    ds = Dataset(Sample(f"s{i}", (1.0,), "a") for i in range(5))
    flat = {s.id: ProbabilityVector((0.5, 0.5), ("a", "b")) for s in ds}
    with pytest.raises(InfeasibleError):
        partition(ds, PrecomputedBackend("s", flat), PrecomputedBackend("l", flat), 0.9, ("a", "b"))
    with pytest.raises(DomainError):
        partition(ds, PrecomputedBackend("s", flat), PrecomputedBackend("l", flat), 1.0, ("a", "b"))


def test_plan_json_round_trip(tmp_path):
    ds, labels, m = _setup(4)
    plan = partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=0)), 0.9, labels,
                     Schedule((2, 1), 7, 16))
    plan.save(tmp_path / "plan.json")
    back = DistillationPlan.load(tmp_path / "plan.json")
    assert back.x1 == plan.x1 and back.x2 == plan.x2 and back.x3 == plan.x3
    assert np.array_equal(back.x1_teacher, plan.x1_teacher)
    assert back.samples == plan.samples
    assert back.schedule == Schedule((2, 1), 7, 16)


def test_plan_invariants():
    ds = Dataset([Sample("a", (1.0,)), Sample("b", (2.0,))])
    with pytest.raises(DomainError):
        DistillationPlan(0.9, ("p", "q"), ds, ("a",), ("a",), (), np.zeros((1, 2)), np.zeros((0, 2)))
    with pytest.raises(DomainError):
        DistillationPlan(0.9, ("p", "q"), ds, ("a",), ("b",), ("a",), np.zeros((1, 2)), np.zeros((1, 2)))


# --- distill ---------------------------------------------------------------

def test_self_distillation_preserves_behavior():
    ds, labels, m = _setup(5)
    small = LinearBackend("s", m)
    flat = {s.id: ProbabilityVector.uniform(labels) for s in ds}
    plan = partition(ds, small, PrecomputedBackend("l", flat), 0.8, labels, Schedule((1, 1), 20, 32))
    assert plan.x3 == () and plan.x1
    before = m.copy()
    learnable = make_learnable(m)
    report = distill(plan, learnable)
    X1 = plan.features(plan.x1)
    agree = np.mean(np.array(learnable.predict(X1)) == np.array(m.predict(X1)))
    assert agree >= 0.99
    assert forgetting_audit(before, learnable, plan.slice(plan.x1)) <= 1.0
    assert np.array_equal(before.weights, m.weights) and np.array_equal(before.bias, m.bias)
    assert report.hard_accuracy_pre is None


def test_losses_are_logged_nonnegative_and_finite():
    ds, labels, m = _setup(6)
    plan = partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=2)), 0.9, labels,
                     Schedule((1, 1), 10, 32))
    report = distill(plan, make_learnable(m))
    for v in report.loss_ls_curve + report.loss_s1s2_curve:
        assert math.isfinite(v) and v >= -1e-9
    assert len(report.loss_ls_curve) == report.epochs_run + 1
    assert report.loss_s1s2_curve[0] == pytest.approx(0.0, abs=1e-12)  # learnable starts as an exact copy
    rec = report.to_record()
    assert isinstance(rec["loss_ls_curve"], list)


@pytest.mark.parametrize("use_large", [True, False])
def test_single_loss_full_batch_curve_is_non_increasing(use_large):
    ds, labels, m = _setup(7)
    plan = partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=3)), 0.9, labels)
    if not use_large:
        # perturb the copy so the self-distillation loss starts above zero
        m2 = m.copy()
        m2.weights += np.random.default_rng(0).normal(0, 0.5, m2.weights.shape)
        learnable = m2
    else:
        learnable = make_learnable(m)
    full = Schedule((1, 1), 30, len(ds))
    report = distill(plan, learnable, schedule=full, learning_rate=0.05,
                     use_large_teacher=use_large, use_small_teacher=not use_large)
    curve = report.loss_ls_curve if use_large else report.loss_s1s2_curve
    assert curve[-1] < curve[0]
    assert all(b <= a + 1e-12 for a, b in zip(curve, curve[1:]))


def test_plateau_stops_early():
    ds, labels, m = _setup(8)
    flat = {s.id: ProbabilityVector.uniform(labels) for s in ds}
    plan = partition(ds, LinearBackend("s", m), PrecomputedBackend("l", flat), 0.8, labels, Schedule((1, 1), 500, 64))
    report = distill(plan, make_learnable(m), plateau_tol=1e-3)
    assert report.epochs_run < 500


def test_divergence_raises_with_checkpoint():
    ds, labels, m = _setup(9)
    plan = partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=3)), 0.9, labels)
    with pytest.raises(TrainingError) as info:
        distill(plan, make_learnable(m), learning_rate=1e308, kl_order="forward")
    ck = info.value.checkpoint
    assert np.all(np.isfinite(ck.weights))
    assert info.value.exit_code == 3


def test_distill_rejects_mismatched_classes():
    ds, labels, m = _setup(10)
    plan = partition(ds, LinearBackend("s", m), SimulatedOracle("l", SimulatedOracleConfig(seed=3)), 0.9, labels)
    with pytest.raises(DomainError):
        distill(plan, TrainableClassifier.zeros(["x", "y"], 4))
    with pytest.raises(InfeasibleError):
        distill(plan, make_learnable(m), use_large_teacher=False, use_small_teacher=False)


def test_forgetting_audit_contract():
    ds, labels, m = _setup(11)
    assert forgetting_audit(m, m.copy(), ds) == 0.0
    with pytest.raises(DomainError):
        forgetting_audit(m, m, Dataset())
    with pytest.raises(DomainError):
        forgetting_audit(m, TrainableClassifier.zeros(labels, 2), ds)


def test_two_cluster_learning_without_forgetting():
    full = run_two_cluster(0)
    ls_only = run_two_cluster(0, use_small_teacher=False)
    self_only = run_two_cluster(0, use_large_teacher=False)
    assert full.b_gain >= 10
    assert full.forgetting < 1.0
    assert ls_only.forgetting > full.forgetting
    assert self_only.forgetting <= 1.0
    assert full.x3 <= full.large_calls


def test_forward_order_also_learns():
    r = run_two_cluster(1, kl_order="forward")
    assert r.b_gain >= 10


def test_support_violating_rows_are_skipped_not_fatal():
    m = TrainableClassifier.random(["a", "b"], 2, scale=1.0, seed=0)
    X = np.array([[1.0, 0.0], [0.0, 1.0]])
    T = np.array([[1.0, 0.0], [0.3, 0.7]])
    loss, gW, gb = m.kl_loss_and_grad(X, T, "reverse")
    only, gW1, gb1 = m.kl_loss_and_grad(X[1:], T[1:], "reverse")
    assert loss == only
    assert np.array_equal(gW, gW1) and np.array_equal(gb, gb1)
    # the forward order is finite for the same teacher
    assert math.isfinite(m.kl_loss(X, T, "forward"))


def test_reverse_order_divergence_is_detected():
    m = TrainableClassifier.random(["a", "b"], 2, scale=1.0, seed=0)
    m.weights[:] = [[1e308, -1e308], [-1e308, 1e308]]
    with np.errstate(over="ignore", invalid="ignore"):
        loss = m.kl_loss(np.array([[10.0, -10.0]]), np.array([[0.5, 0.5]]), "reverse")
    assert not math.isfinite(loss)
