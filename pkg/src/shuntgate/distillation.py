"""Two-stage confidence distillation into a learnable copy of the small model.

Samples the frozen specific small model is sure about (``x1``) keep teaching
the learnable copy what it already knew; samples it is unsure about but the
large model is sure about (``x3``) teach it something new. Both losses are
KL divergences with the student distribution as the first argument, and the
two are optimized in alternating mini-batches.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .backends import Dataset, ModelBackend, Sample
from .core import softmax_rows
from .errors import DomainError, InfeasibleError, TrainingError

CHECKPOINT_FORMAT = "shuntgate-linear"
CHECKPOINT_VERSION = 1


def _log_softmax(z: np.ndarray) -> np.ndarray:
    shifted = z - z.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def kl_rows(student_logits: np.ndarray, teacher: np.ndarray, order: str = "reverse"):
    """Per-row KL and its gradient with respect to the student logits.

    ``order="reverse"`` is KL(student || teacher); ``"forward"`` is
    KL(teacher || student). Rows whose KL is infinite (teacher has zeros where
    the student has mass) come back as ``inf`` with a zero gradient.
    """
    log_s = _log_softmax(student_logits)
    s = np.exp(log_s)
    teacher = np.asarray(teacher, dtype=float)
    if order == "reverse":
        with np.errstate(divide="ignore"):
            log_t = np.log(teacher)
        finite = np.all(teacher > 0, axis=1)
        safe_log_t = np.where(teacher > 0, log_t, 0.0)
        diff = log_s - safe_log_t
        kl = np.sum(s * diff, axis=1)
        grad = s * (diff - kl[:, None])
        kl = np.where(finite, kl, np.inf)
        grad[~finite] = 0.0
    elif order == "forward":
        with np.errstate(divide="ignore", invalid="ignore"):
            t_log_t = np.where(teacher > 0, teacher * np.log(np.where(teacher > 0, teacher, 1.0)), 0.0)
        kl = np.sum(t_log_t - teacher * log_s, axis=1)
        grad = s - teacher
    else:
        raise DomainError(f"unknown KL order {order!r}")
    return np.maximum(kl, 0.0), grad


@dataclass
class TrainableClassifier:
    """Linear-softmax classifier: ``softmax(W x + b)``."""

    class_ids: tuple[str, ...]
    weights: np.ndarray
    bias: np.ndarray
    learning_rate: float = 0.5
    seed: int = 0

    def __post_init__(self):
        self.class_ids = tuple(str(c) for c in self.class_ids)
        self.weights = np.array(self.weights, dtype=float)
        self.bias = np.array(self.bias, dtype=float)
        k = len(self.class_ids)
        if self.weights.ndim != 2 or self.weights.shape[0] != k or self.bias.shape != (k,):
            raise DomainError(
                f"weights {self.weights.shape} / bias {self.bias.shape} do not fit {k} classes"
            )
        if len(set(self.class_ids)) != k:
            raise DomainError("duplicate class ids")

    @classmethod
    def zeros(cls, class_ids: Sequence[str], n_features: int, learning_rate: float = 0.5, seed: int = 0):
        k = len(class_ids)
        return cls(tuple(class_ids), np.zeros((k, n_features)), np.zeros(k), learning_rate, seed)

    @classmethod
    def random(
        cls, class_ids: Sequence[str], n_features: int, scale: float = 0.01,
        learning_rate: float = 0.5, seed: int = 0,
    ):
        rng = np.random.default_rng(seed)
        k = len(class_ids)
        return cls(
            tuple(class_ids), scale * rng.standard_normal((k, n_features)),
            np.zeros(k), learning_rate, seed,
        )

    @property
    def n_features(self) -> int:
        return self.weights.shape[1]

    def copy(self) -> "TrainableClassifier":
        return TrainableClassifier(
            self.class_ids, self.weights.copy(), self.bias.copy(), self.learning_rate, self.seed
        )

    def same_architecture(self, other: "TrainableClassifier") -> bool:
        return self.class_ids == other.class_ids and self.weights.shape == other.weights.shape

    def logits(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x, dtype=float) @ self.weights.T + self.bias

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax_rows(self.logits(np.atleast_2d(X)))

    def predict(self, X: np.ndarray) -> list[str]:
        idx = np.argmax(self.logits(np.atleast_2d(X)), axis=1)
        return [self.class_ids[i] for i in idx]

    def accuracy(self, X: np.ndarray, y: Sequence[str]) -> float:
        if not len(y):
            raise DomainError("accuracy of an empty slice")
        pred = self.predict(X)
        return sum(p == t for p, t in zip(pred, y)) / len(y)

    def _one_hot(self, y: Sequence[str]) -> np.ndarray:
        index = {c: i for i, c in enumerate(self.class_ids)}
        out = np.zeros((len(y), len(self.class_ids)))
        for r, label in enumerate(y):
            try:
                out[r, index[label]] = 1.0
            except KeyError:
                raise DomainError(f"label {label!r} is not one of {self.class_ids}") from None
        return out

    def fit(
        self, X: np.ndarray, y: Sequence[str], epochs: int = 100,
        batch_size: int | None = None, l2: float = 0.0,
    ) -> list[float]:
        """Supervised cross-entropy training by mini-batch gradient descent.

        Returns the mean training loss after each epoch.
        """
        X = np.asarray(X, dtype=float)
        Y = self._one_hot(y)
        n = len(X)
        if n == 0:
            raise DomainError("no training data")
        rng = np.random.default_rng(self.seed)
        bs = batch_size or n
        losses = []
        for _ in range(epochs):
            order = rng.permutation(n) if bs < n else np.arange(n)
            for start in range(0, n, bs):
                idx = order[start:start + bs]
                P = softmax_rows(self.logits(X[idx]))
                G = (P - Y[idx]) / len(idx)
                self.weights -= self.learning_rate * (G.T @ X[idx] + l2 * self.weights)
                self.bias -= self.learning_rate * G.sum(axis=0)
            logp = _log_softmax(self.logits(X))
            losses.append(float(-np.mean(np.sum(Y * logp, axis=1))))
        return losses

    def kl_loss_and_grad(self, X: np.ndarray, teacher: np.ndarray, order: str = "reverse"):
        """Mean KL over rows the teacher fully supports, and its gradient w.r.t. (W, b)."""
        X = np.atleast_2d(np.asarray(X, dtype=float))
        teacher = np.asarray(teacher, dtype=float)
        kl, gz = kl_rows(self.logits(X), teacher, order)
        # only support violations are skipped; a diverged row must surface as nan/inf
        keep = np.all(teacher > 0, axis=1) if order == "reverse" else np.ones(len(kl), dtype=bool)
        m = int(keep.sum())
        if m == 0:
            return 0.0, np.zeros_like(self.weights), np.zeros_like(self.bias)
        gz = gz[keep] / m
        return float(kl[keep].mean()), gz.T @ X[keep], gz.sum(axis=0)

    def kl_loss(self, X: np.ndarray, teacher: np.ndarray, order: str = "reverse") -> float:
        return self.kl_loss_and_grad(X, teacher, order)[0]

    # checkpoints

    def to_checkpoint(self) -> dict:
        return {
            "format": CHECKPOINT_FORMAT,
            "version": CHECKPOINT_VERSION,
            "seed": self.seed,
            "learning_rate": self.learning_rate,
            "class_ids": list(self.class_ids),
            "shape": list(self.weights.shape),
            "weights": self.weights.ravel().tolist(),
            "bias": self.bias.tolist(),
        }

    @classmethod
    def from_checkpoint(cls, data: dict) -> "TrainableClassifier":
        if data.get("format") != CHECKPOINT_FORMAT:
            raise DomainError(f"not a {CHECKPOINT_FORMAT} checkpoint")
        if data.get("version") != CHECKPOINT_VERSION:
            raise DomainError(f"unsupported checkpoint version {data.get('version')!r}")
        k, d = data["shape"]
        weights = np.array(data["weights"], dtype=float)
        if weights.size != k * d:
            raise DomainError("checkpoint weights do not match their shape header")
        return cls(
            tuple(data["class_ids"]), weights.reshape(k, d), np.array(data["bias"], dtype=float),
            data.get("learning_rate", 0.5), data["seed"],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_checkpoint()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TrainableClassifier":
        return cls.from_checkpoint(json.loads(Path(path).read_text(encoding="utf-8")))


def make_learnable(specific: TrainableClassifier) -> TrainableClassifier:
    return specific.copy()


# --------------------------------------------------------------------------
# partition


@dataclass(frozen=True)
class Schedule:
    """``ratio=(a, b)``: a mini-batches of large-teacher data, then b of
    small-teacher data, repeated."""

    ratio: tuple[int, int] = (1, 1)
    epochs: int = 50
    batch_size: int = 32

    def __post_init__(self):
        a, b = self.ratio
        if a < 0 or b < 0 or a + b == 0:
            raise DomainError(f"bad alternation ratio {self.ratio}")
        if self.epochs < 1 or self.batch_size < 1:
            raise DomainError("epochs and batch_size must be >= 1")
        object.__setattr__(self, "ratio", (int(a), int(b)))


def parse_ratio(text: str) -> tuple[int, int]:
    try:
        a, b = (int(p) for p in text.split(":"))
    except ValueError:
        raise DomainError(f"ratio must look like a:b, got {text!r}") from None
    return a, b


@dataclass(frozen=True)
class DistillationPlan:
    """Frozen teacher targets.

    ``x1`` samples keep the specific small model's distribution as target,
    ``x3`` samples (a subset of ``x2``) take the large model's. Teacher rows
    are ordered like ``candidates``.
    """

    delta: float
    candidates: tuple[str, ...]
    samples: Dataset
    x1: tuple[str, ...]
    x2: tuple[str, ...]
    x3: tuple[str, ...]
    x1_teacher: np.ndarray
    x3_teacher: np.ndarray
    schedule: Schedule = field(default_factory=Schedule)

    def __post_init__(self):
        if set(self.x1) & set(self.x2):
            raise DomainError("x1 and x2 overlap")
        if not set(self.x3) <= set(self.x2):
            raise DomainError("x3 must be a subset of x2")
        for name, ids, t in (("x1", self.x1, self.x1_teacher), ("x3", self.x3, self.x3_teacher)):
            t = np.array(t, dtype=float).reshape(len(ids), len(self.candidates))
            t.setflags(write=False)
            object.__setattr__(self, f"{name}_teacher", t)

    @property
    def feasible(self) -> bool:
        return bool(self.x1 or self.x3)

    def features(self, ids: Sequence[str]) -> np.ndarray:
        if not ids:
            return np.zeros((0, len(self.samples[0].payload) if len(self.samples) else 0))
        return np.stack([self.samples.get(i).features for i in ids])

    def slice(self, ids: Sequence[str]) -> Dataset:
        return Dataset(self.samples.get(i) for i in ids)

    def with_schedule(self, schedule: Schedule) -> "DistillationPlan":
        return DistillationPlan(
            self.delta, self.candidates, self.samples, self.x1, self.x2, self.x3,
            self.x1_teacher, self.x3_teacher, schedule,
        )

    def to_json(self) -> dict:
        return {
            "delta": self.delta,
            "candidates": list(self.candidates),
            "samples": [s.to_record() for s in self.samples],
            "x1": list(self.x1),
            "x2": list(self.x2),
            "x3": list(self.x3),
            "x1_teacher": self.x1_teacher.tolist(),
            "x3_teacher": self.x3_teacher.tolist(),
            "schedule": {
                "ratio": list(self.schedule.ratio),
                "epochs": self.schedule.epochs,
                "batch_size": self.schedule.batch_size,
            },
        }

    @classmethod
    def from_json(cls, data: dict) -> "DistillationPlan":
        from .harness import sample_from_record

        sched = data.get("schedule", {})
        return cls(
            delta=data["delta"],
            candidates=tuple(data["candidates"]),
            samples=Dataset(sample_from_record(r) for r in data["samples"]),
            x1=tuple(data["x1"]),
            x2=tuple(data["x2"]),
            x3=tuple(data["x3"]),
            x1_teacher=np.array(data["x1_teacher"], dtype=float),
            x3_teacher=np.array(data["x3_teacher"], dtype=float),
            schedule=Schedule(tuple(sched.get("ratio", (1, 1))), sched.get("epochs", 50), sched.get("batch_size", 32)),
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "DistillationPlan":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def partition(
    dataset: Dataset,
    specific_small: ModelBackend,
    large: ModelBackend,
    delta: float,
    candidates: Sequence[str] | None = None,
    schedule: Schedule | None = None,
) -> DistillationPlan:
    """Split ``dataset`` by specific-small confidence and query the large model
    only where that confidence is not above ``delta``."""
    if not (0.0 < delta < 1.0):
        raise DomainError(f"delta must lie in (0, 1), got {delta}")
    candidates = tuple(candidates or dataset.labels())
    x1, x2, x3, t1, t3 = [], [], [], [], []
    for s in dataset:
        c1 = specific_small.classify(s, candidates)
        if c1.max() > delta:
            x1.append(s.id)
            t1.append(c1.probs)
        else:
            x2.append(s.id)
    for sid in x2:
        cl = large.classify(dataset.get(sid), candidates)
        if cl.max() > delta:
            x3.append(sid)
            t3.append(cl.probs)
    if not x1 and not x3:
        raise InfeasibleError("nothing to distill: no confident small or large predictions")
    k = len(candidates)
    return DistillationPlan(
        delta, candidates, dataset, tuple(x1), tuple(x2), tuple(x3),
        np.array(t1, dtype=float).reshape(-1, k), np.array(t3, dtype=float).reshape(-1, k),
        schedule or Schedule(),
    )


# --------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class DistillationReport:
    loss_ls_curve: tuple[float, ...]
    loss_s1s2_curve: tuple[float, ...]
    easy_accuracy_pre: float | None
    easy_accuracy_post: float | None
    hard_accuracy_pre: float | None
    hard_accuracy_post: float | None
    forgetting_delta: float | None
    epochs_run: int
    steps: int

    def to_record(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(self).items()}


def _slice_accuracy(model: TrainableClassifier, X: np.ndarray, samples: Dataset, teacher: np.ndarray, candidates):
    if not len(samples):
        return None
    y = [
        s.gold_label if s.gold_label is not None else candidates[int(np.argmax(t))]
        for s, t in zip(samples, teacher)
    ]
    return model.accuracy(X, y)


def _interleave(n_a: int, n_b: int, ratio: tuple[int, int]):
    """Yield "a"/"b" tags: ratio[0] a's then ratio[1] b's, skipping exhausted streams."""
    a_left, b_left = n_a, n_b
    ra, rb = ratio
    if ra == 0:
        a_left = 0
    if rb == 0:
        b_left = 0
    while a_left or b_left:
        for _ in range(ra):
            if a_left:
                a_left -= 1
                yield "a"
        for _ in range(rb):
            if b_left:
                b_left -= 1
                yield "b"


# divergence is detected from the loss values and reported as TrainingError
@np.errstate(over="ignore", invalid="ignore")
def distill(
    plan: DistillationPlan,
    learnable: TrainableClassifier,
    *,
    schedule: Schedule | None = None,
    kl_order: str = "reverse",
    use_large_teacher: bool = True,
    use_small_teacher: bool = True,
    learning_rate: float | None = None,
    plateau_tol: float = 1e-4,
    plateau_patience: int = 3,
    seed: int | None = None,
) -> DistillationReport:
    """Train ``learnable`` in place on the plan's two KL objectives.

    Stops after ``schedule.epochs`` or once the summed epoch loss changes by
    less than ``plateau_tol`` (relative) for ``plateau_patience`` epochs.
    Turning one teacher off gives the single-loss ablations.
    """
    if not plan.feasible:
        raise InfeasibleError("plan has neither x1 nor x3 samples")
    if set(plan.candidates) != set(learnable.class_ids):
        raise DomainError("plan candidates and model classes differ")
    schedule = schedule or plan.schedule
    lr = learnable.learning_rate if learning_rate is None else learning_rate
    # reorder teacher columns into the model's class order
    cols = [plan.candidates.index(c) for c in learnable.class_ids]
    X3, T3 = plan.features(plan.x3), plan.x3_teacher[:, cols]
    X1, T1 = plan.features(plan.x1), plan.x1_teacher[:, cols]
    if not use_large_teacher:
        X3, T3 = X3[:0], T3[:0]
    if not use_small_teacher:
        X1, T1 = X1[:0], T1[:0]
    if not len(X1) and not len(X3):
        raise InfeasibleError("no data left for the enabled losses")

    easy, hard = plan.slice(plan.x1), plan.slice(plan.x3)
    Xe, Xh = plan.features(plan.x1), plan.features(plan.x3)
    easy_pre = _slice_accuracy(learnable, Xe, easy, plan.x1_teacher, plan.candidates)
    hard_pre = _slice_accuracy(learnable, Xh, hard, plan.x3_teacher, plan.candidates)

    def epoch_losses():
        ls = learnable.kl_loss(X3, T3, kl_order) if len(X3) else 0.0
        ss = learnable.kl_loss(X1, T1, kl_order) if len(X1) else 0.0
        return ls, ss

    rng = np.random.default_rng(learnable.seed if seed is None else seed)
    ls0, ss0 = epoch_losses()
    curve_ls, curve_ss = [ls0], [ss0]
    good = learnable.copy()
    bs = schedule.batch_size
    steps = 0
    stalled = 0
    epochs_run = 0
    for epoch in range(schedule.epochs):
        order3 = rng.permutation(len(X3))
        order1 = rng.permutation(len(X1))
        batches3 = [order3[i:i + bs] for i in range(0, len(X3), bs)]
        batches1 = [order1[i:i + bs] for i in range(0, len(X1), bs)]
        it3, it1 = iter(batches3), iter(batches1)
        for tag in _interleave(len(batches3), len(batches1), schedule.ratio):
            if tag == "a":
                idx = next(it3)
                _, gW, gb = learnable.kl_loss_and_grad(X3[idx], T3[idx], kl_order)
            else:
                idx = next(it1)
                _, gW, gb = learnable.kl_loss_and_grad(X1[idx], T1[idx], kl_order)
            learnable.weights -= lr * gW
            learnable.bias -= lr * gb
            steps += 1
        ls, ss = epoch_losses()
        epochs_run = epoch + 1
        if not (math.isfinite(ls) and math.isfinite(ss)):
            raise TrainingError(f"loss diverged at epoch {epochs_run}", checkpoint=good)
        good = learnable.copy()
        prev = curve_ls[-1] + curve_ss[-1]
        curve_ls.append(ls)
        curve_ss.append(ss)
        total = ls + ss
        if abs(prev - total) <= plateau_tol * max(abs(prev), 1e-12):
            stalled += 1
            if stalled >= plateau_patience:
                break
        else:
            stalled = 0

    easy_post = _slice_accuracy(learnable, Xe, easy, plan.x1_teacher, plan.candidates)
    hard_post = _slice_accuracy(learnable, Xh, hard, plan.x3_teacher, plan.candidates)
    forgetting = None if easy_pre is None else 100.0 * (easy_pre - easy_post)
    return DistillationReport(
        tuple(curve_ls), tuple(curve_ss), easy_pre, easy_post, hard_pre, hard_post,
        forgetting, epochs_run, steps,
    )


def accuracy_on(model: TrainableClassifier, data: Dataset) -> float:
    labelled = data.filter(lambda s: s.gold_label is not None)
    if not len(labelled):
        raise DomainError("slice has no labelled samples")
    return model.accuracy(labelled.features(), [s.gold_label for s in labelled])


def forgetting_audit(
    before: TrainableClassifier, after: TrainableClassifier, easy_slice: Dataset
) -> float:
    """Accuracy lost on ``easy_slice``, in percentage points (positive = forgot)."""
    if not before.same_architecture(after):
        raise DomainError("models differ in architecture")
    if not len(easy_slice):
        raise DomainError("empty easy slice")
    return 100.0 * (accuracy_on(before, easy_slice) - accuracy_on(after, easy_slice))
