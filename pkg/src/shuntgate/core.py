"""Probability and information-theory kernels.

All logarithms are natural, so every quantity is in nats. ``0 * log 0`` is
taken as 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import DomainError

#: Absolute tolerance for every probability-mass check in the package.
PROB_TOL = 1e-9


@dataclass(frozen=True)
class LogitVector:
    values: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if not values:
            raise DomainError("logit vector is empty")
        if not all(math.isfinite(v) for v in values):
            raise DomainError(f"non-finite logit in {values}")
        object.__setattr__(self, "values", values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class ProbabilityVector:
    """A normalized distribution over named candidate classes."""

    probs: tuple[float, ...]
    class_ids: tuple[str, ...]

    def __post_init__(self):
        probs = tuple(float(p) for p in self.probs)
        class_ids = tuple(str(c) for c in self.class_ids)
        if not probs:
            raise DomainError("probability vector is empty")
        if len(probs) != len(class_ids):
            raise DomainError(
                f"{len(probs)} probabilities for {len(class_ids)} class ids"
            )
        if len(set(class_ids)) != len(class_ids):
            raise DomainError(f"duplicate class ids in {class_ids}")
        for p in probs:
            if not (math.isfinite(p) and -PROB_TOL <= p <= 1 + PROB_TOL):
                raise DomainError(f"probability {p} outside [0, 1]")
        total = math.fsum(probs)
        if abs(total - 1.0) > PROB_TOL:
            raise DomainError(f"probabilities sum to {total!r}, not 1")
        object.__setattr__(self, "probs", probs)
        object.__setattr__(self, "class_ids", class_ids)

    @classmethod
    def from_mapping(cls, mapping: dict[str, float]) -> "ProbabilityVector":
        return cls(tuple(mapping.values()), tuple(mapping.keys()))

    @classmethod
    def uniform(cls, class_ids: Sequence[str]) -> "ProbabilityVector":
        n = len(class_ids)
        if n == 0:
            raise DomainError("no classes")
        return cls((1.0 / n,) * n, tuple(class_ids))

    def __len__(self):
        return len(self.probs)

    def as_dict(self) -> dict[str, float]:
        return dict(zip(self.class_ids, self.probs))

    def prob(self, class_id: str) -> float:
        try:
            return self.probs[self.class_ids.index(class_id)]
        except ValueError:
            raise DomainError(f"unknown class {class_id!r}") from None

    def argmax(self) -> str:
        # first maximal entry wins, matching numpy.argmax
        best = max(range(len(self.probs)), key=lambda i: (self.probs[i], -i))
        return self.class_ids[best]

    def max(self) -> float:
        return max(self.probs)

    def restrict(self, class_ids: Sequence[str]) -> "ProbabilityVector":
        """Condition on a subset of classes and renormalize."""
        sub = [self.prob(c) for c in class_ids]
        total = math.fsum(sub)
        if total <= 0:
            return ProbabilityVector.uniform(class_ids)
        return ProbabilityVector(tuple(p / total for p in sub), tuple(class_ids))


@dataclass(frozen=True)
class JointDistribution:
    """Probability mass ``p(x, y)`` laid out with x on rows and y on columns."""

    table: np.ndarray

    def __post_init__(self):
        table = np.array(self.table, dtype=float)
        if table.ndim != 2 or table.size == 0:
            raise DomainError("joint table must be a non-empty 2-D array")
        if not np.all(np.isfinite(table)) or np.any(table < 0):
            raise DomainError("joint table entries must be finite and >= 0")
        total = math.fsum(table.ravel())
        if abs(total - 1.0) > PROB_TOL:
            raise DomainError(f"joint mass {total!r} does not sum to 1")
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    @classmethod
    def product(cls, px: Sequence[float], py: Sequence[float]) -> "JointDistribution":
        return cls(np.outer(px, py))


@dataclass(frozen=True)
class EntropyReport:
    h_x: float
    h_x_given_y: float
    mutual_information: float


def _as_pv(p) -> ProbabilityVector:
    if isinstance(p, ProbabilityVector):
        return p
    probs = tuple(p)
    return ProbabilityVector(probs, tuple(str(i) for i in range(len(probs))))


def softmax(logits, class_ids: Sequence[str] | None = None) -> ProbabilityVector:
    """Max-shifted softmax over a logit vector.

    ``class_ids`` defaults to the positional indices ``"0", "1", ...``.
    """
    if not isinstance(logits, LogitVector):
        logits = LogitVector(tuple(logits))
    z = logits.values
    if class_ids is None:
        class_ids = tuple(str(i) for i in range(len(z)))
    if len(class_ids) != len(z):
        raise DomainError("class_ids length does not match logits")
    top = max(z)
    exps = [math.exp(v - top) for v in z]
    total = math.fsum(exps)
    return ProbabilityVector(tuple(e / total for e in exps), tuple(class_ids))


def softmax_rows(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a 2-D logit array."""
    z = np.asarray(z, dtype=float)
    shifted = z - z.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def _plogp(p: float) -> float:
    return p * math.log(p) if p > 0 else 0.0


def entropy(p) -> float:
    pv = _as_pv(p)
    h = -math.fsum(_plogp(c) for c in pv.probs)
    # clamp round-off so the result stays inside [0, log N]
    return min(max(h, 0.0), math.log(len(pv)))


def entropy_rows(p: np.ndarray) -> np.ndarray:
    """Entropy of every row of a 2-D array of distributions."""
    p = np.asarray(p, dtype=float)
    if p.ndim != 2:
        raise DomainError("expected a 2-D array")
    if np.any(p < -PROB_TOL) or np.any(np.abs(p.sum(axis=1) - 1) > PROB_TOL):
        raise DomainError("rows are not probability distributions")
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return np.clip(-terms.sum(axis=1), 0.0, math.log(p.shape[1]))


def conditional_entropy(j) -> EntropyReport:
    """H(X), H(X|Y) and I(X;Y) for a joint table by direct summation."""
    if not isinstance(j, JointDistribution):
        j = JointDistribution(np.asarray(j, dtype=float))
    t = j.table
    px = t.sum(axis=1)
    py = t.sum(axis=0)
    h_x = -math.fsum(_plogp(float(v)) for v in px)
    # H(X|Y) = -sum p(x,y) log p(x|y)
    terms = []
    for (x, y), pxy in np.ndenumerate(t):
        if pxy > 0:
            terms.append(pxy * math.log(pxy / py[y]))
    h_xy = -math.fsum(terms)
    h_x = max(h_x, 0.0)
    # round-off can push H(X|Y) a hair above H(X) on product tables
    h_xy = min(max(h_xy, 0.0), h_x)
    return EntropyReport(h_x=h_x, h_x_given_y=h_xy, mutual_information=h_x - h_xy)


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats; ``math.inf`` where q misses mass that p has."""
    p, q = _as_pv(p), _as_pv(q)
    if len(p) != len(q):
        raise DomainError(f"length mismatch: {len(p)} vs {len(q)}")
    terms = []
    for pi, qi in zip(p.probs, q.probs):
        if pi <= 0:
            continue
        if qi <= 0:
            return math.inf
        terms.append(pi * math.log(pi / qi))
    return max(math.fsum(terms), 0.0)


def max_entropy_bound(n_candidates: int) -> float:
    """Largest entropy any distribution over ``n_candidates`` classes can have."""
    if int(n_candidates) != n_candidates or n_candidates < 1:
        raise DomainError(f"need a positive candidate count, got {n_candidates!r}")
    return math.log(int(n_candidates))


def confidence(p: ProbabilityVector) -> float:
    """The routing confidence of a prediction: its largest component."""
    return p.max()
