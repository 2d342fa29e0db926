"""Model backends: local small models, a simulated large model, a remote client.

Every backend answers ``classify`` with a :class:`ProbabilityVector` over the
requested candidates, in request order, and bills each call to an optional
:class:`CostLedger`. Money is kept in integer micro-units.
"""

from __future__ import annotations

import abc
import hashlib
import json
import logging
import math
import threading
import time
import urllib.error
import urllib.request
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from typing import Callable, Iterable, Iterator, Mapping, Sequence

import numpy as np

from .core import PROB_TOL, ProbabilityVector, softmax
from .errors import DomainError, ProtocolError, TransportError

log = logging.getLogger(__name__)

MICRO = 1_000_000

Tokenizer = Callable[[str], Sequence[str]]


def whitespace_tokenize(text: str) -> list[str]:
    return text.split()


def count_tokens(text: str, tokenizer: Tokenizer | None = None) -> int:
    return len((tokenizer or whitespace_tokenize)(text))


# --------------------------------------------------------------------------
# samples


@dataclass(frozen=True)
class Sample:
    """One input record. ``payload`` is either text or a dense feature vector."""

    id: str
    payload: str | tuple[float, ...]
    gold_label: str | None = None
    category: str | None = None

    def __post_init__(self):
        if not isinstance(self.id, str) or not self.id:
            raise DomainError(f"sample id must be a non-empty string, got {self.id!r}")
        payload = self.payload
        if isinstance(payload, str):
            if not payload:
                raise DomainError(f"sample {self.id}: empty payload")
        else:
            payload = tuple(float(v) for v in payload)
            if not payload:
                raise DomainError(f"sample {self.id}: empty payload")
            object.__setattr__(self, "payload", payload)
        if self.gold_label is not None:
            object.__setattr__(self, "gold_label", str(self.gold_label))

    @property
    def is_text(self) -> bool:
        return isinstance(self.payload, str)

    @property
    def features(self) -> np.ndarray:
        if self.is_text:
            raise DomainError(f"sample {self.id} carries text, not features")
        return np.asarray(self.payload, dtype=float)

    def payload_text(self) -> str:
        if self.is_text:
            return self.payload
        return json.dumps(list(self.payload))

    def to_record(self) -> dict:
        rec = {"id": self.id, "payload": self.payload if self.is_text else list(self.payload)}
        if self.gold_label is not None:
            rec["gold_label"] = self.gold_label
        if self.category is not None:
            rec["category"] = self.category
        return rec


class Dataset(Sequence[Sample]):
    """An ordered collection of samples with unique ids."""

    def __init__(self, samples: Iterable[Sample] = ()):
        self._samples = tuple(samples)
        self._index: dict[str, int] = {}
        for i, s in enumerate(self._samples):
            if s.id in self._index:
                raise DomainError(f"duplicate sample id {s.id!r}")
            self._index[s.id] = i

    def __len__(self) -> int:
        return len(self._samples)

    def __getitem__(self, i):
        if isinstance(i, slice):
            return Dataset(self._samples[i])
        return self._samples[i]

    def __iter__(self) -> Iterator[Sample]:
        return iter(self._samples)

    def __eq__(self, other) -> bool:
        return isinstance(other, Dataset) and self._samples == other._samples

    def __repr__(self) -> str:
        return f"Dataset(n={len(self)})"

    def get(self, sample_id: str) -> Sample:
        try:
            return self._samples[self._index[sample_id]]
        except KeyError:
            raise DomainError(f"no sample {sample_id!r}") from None

    def __contains__(self, sample_id) -> bool:
        if isinstance(sample_id, Sample):
            sample_id = sample_id.id
        return sample_id in self._index

    def labels(self) -> list[str]:
        """Distinct gold labels in first-seen order."""
        seen: dict[str, None] = {}
        for s in self._samples:
            if s.gold_label is not None:
                seen.setdefault(s.gold_label)
        return list(seen)

    def filter(self, pred: Callable[[Sample], bool]) -> "Dataset":
        return Dataset(s for s in self._samples if pred(s))

    def features(self) -> np.ndarray:
        return np.stack([s.features for s in self._samples])


# --------------------------------------------------------------------------
# cost accounting


def _micro(amount) -> Decimal:
    return Decimal(str(amount)) * MICRO


@dataclass(frozen=True)
class CostProfile:
    """Prices in currency units: per input token, per output token, per call."""

    price_per_input_token: float = 0.0
    price_per_output_token: float = 0.0
    fixed_per_call: float = 0.0

    def __post_init__(self):
        for name in ("price_per_input_token", "price_per_output_token", "fixed_per_call"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DomainError(f"{name} must be finite and >= 0, got {v}")

    def charge(self, input_tokens: int, output_tokens: int) -> int:
        """Exact price of one call in integer micro-units (half-even rounding)."""
        total = (
            input_tokens * _micro(self.price_per_input_token)
            + output_tokens * _micro(self.price_per_output_token)
            + _micro(self.fixed_per_call)
        )
        return int(total.quantize(Decimal(1), rounding=ROUND_HALF_EVEN))

    @property
    def is_free(self) -> bool:
        return not (self.price_per_input_token or self.price_per_output_token or self.fixed_per_call)


FREE = CostProfile()


@dataclass(frozen=True)
class LedgerEntry:
    backend: str
    sample_id: str
    input_tokens: int
    output_tokens: int
    cost_micro: int


class CostLedger:
    """Append-only, thread-safe record of billed backend calls."""

    def __init__(self):
        self._lock = threading.Lock()
        self._entries: list[LedgerEntry] = []

    def record(self, entry: LedgerEntry) -> None:
        with self._lock:
            self._entries.append(entry)

    @property
    def entries(self) -> list[LedgerEntry]:
        with self._lock:
            return list(self._entries)

    def total_micro(self, backend: str | None = None) -> int:
        return sum(e.cost_micro for e in self.entries if backend in (None, e.backend))

    def calls(self, backend: str | None = None) -> int:
        return sum(1 for e in self.entries if backend in (None, e.backend))

    def input_tokens(self, backend: str | None = None) -> int:
        return sum(e.input_tokens for e in self.entries if backend in (None, e.backend))

    def sample_ids(self, backend: str | None = None) -> list[str]:
        return [e.sample_id for e in self.entries if backend in (None, e.backend)]

    def __len__(self) -> int:
        with self._lock:
            return len(self._entries)


# --------------------------------------------------------------------------
# backend interface


@dataclass(frozen=True)
class Completion:
    probs: ProbabilityVector
    input_tokens: int = 0
    output_tokens: int = 0
    cost_micro: int = 0


@dataclass(frozen=True)
class Generation:
    text: str
    tokens: tuple[str, ...] = ()
    token_probs: tuple[ProbabilityVector, ...] = ()
    input_tokens: int = 0
    output_tokens: int = 0
    cost_micro: int = 0


class ModelBackend(abc.ABC):
    """Common surface of small and large models.

    Subclasses implement ``_classify`` (and optionally ``_generate``);
    validation and billing happen here.
    """

    def __init__(
        self,
        name: str,
        cost_profile: CostProfile = FREE,
        ledger: CostLedger | None = None,
        tokenizer: Tokenizer | None = None,
    ):
        self.name = name
        self.cost_profile = cost_profile
        self.ledger = ledger
        self.tokenizer = tokenizer or whitespace_tokenize

    def count_tokens(self, text: str) -> int:
        return len(self.tokenizer(text))

    def input_tokens(self, sample: Sample, prompt: str | None) -> int:
        """Tokens sent for one call: the prompt if any, else the payload."""
        if prompt is not None:
            return self.count_tokens(prompt)
        if sample.is_text:
            return self.count_tokens(sample.payload)
        return len(sample.payload)

    @abc.abstractmethod
    def _classify(
        self, sample: Sample, candidates: Sequence[str], prompt: str | None
    ) -> tuple[ProbabilityVector, int, int]:
        """Return (distribution, input tokens, output tokens)."""

    def _generate(self, text: str) -> Generation:
        raise DomainError(f"backend {self.name!r} cannot generate text")

    def _bill(self, sample_id: str, input_tokens: int, output_tokens: int) -> int:
        cost = self.cost_profile.charge(input_tokens, output_tokens)
        if self.ledger is not None:
            self.ledger.record(LedgerEntry(self.name, sample_id, input_tokens, output_tokens, cost))
        return cost

    def invoke(
        self, sample: Sample, candidates: Sequence[str], prompt: str | None = None
    ) -> Completion:
        candidates = tuple(candidates)
        if not candidates:
            raise DomainError("candidate list is empty")
        probs, n_in, n_out = self._classify(sample, candidates, prompt)
        if probs.class_ids != candidates:
            raise DomainError(
                f"backend {self.name!r} answered over {probs.class_ids}, asked for {candidates}"
            )
        cost = self._bill(sample.id, n_in, n_out) if self.billable else 0
        return Completion(probs, n_in, n_out, cost)

    def classify(
        self, sample: Sample, candidates: Sequence[str], prompt: str | None = None
    ) -> ProbabilityVector:
        return self.invoke(sample, candidates, prompt).probs

    def generate(self, text: str, sample_id: str = "-") -> Generation:
        g = self._generate(text)
        n_in = g.input_tokens or self.count_tokens(text)
        n_out = g.output_tokens or len(g.tokens) or self.count_tokens(g.text)
        cost = self._bill(sample_id, n_in, n_out) if self.billable else 0
        return Generation(g.text, g.tokens, g.token_probs, n_in, n_out, cost)

    @property
    def billable(self) -> bool:
        return not self.cost_profile.is_free

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


def classify(
    backend: ModelBackend, sample: Sample, candidates: Sequence[str], prompt: str | None = None
) -> ProbabilityVector:
    return backend.classify(sample, candidates, prompt)


class LinearBackend(ModelBackend):
    """Wraps a softmax-linear model (anything with ``class_ids`` and ``logits``)."""

    def __init__(self, name: str, model, **kw):
        super().__init__(name, **kw)
        self.model = model

    def _classify(self, sample, candidates, prompt):
        index = {c: i for i, c in enumerate(self.model.class_ids)}
        missing = [c for c in candidates if c not in index]
        if missing:
            raise DomainError(f"backend {self.name!r} does not know classes {missing}")
        z = self.model.logits(sample.features)
        return softmax([z[index[c]] for c in candidates], candidates), 0, 0


class PrecomputedBackend(ModelBackend):
    """Serves fixed per-sample distributions, restricted to the requested candidates."""

    def __init__(self, name: str, table: Mapping[str, ProbabilityVector], **kw):
        super().__init__(name, **kw)
        self.table = dict(table)
        self.calls = 0

    def _classify(self, sample, candidates, prompt):
        self.calls += 1
        try:
            pv = self.table[sample.id]
        except KeyError:
            raise DomainError(f"backend {self.name!r} has no answer for {sample.id!r}") from None
        if pv.class_ids != candidates:
            pv = pv.restrict(candidates)
        return pv, self.input_tokens(sample, prompt), 1


class FunctionBackend(ModelBackend):
    """Adapter for plain callables: ``classify_fn(sample, candidates, prompt)`` and/or
    ``generate_fn(text) -> str``."""

    def __init__(self, name: str, classify_fn=None, generate_fn=None, **kw):
        super().__init__(name, **kw)
        self.classify_fn = classify_fn
        self.generate_fn = generate_fn

    def _classify(self, sample, candidates, prompt):
        if self.classify_fn is None:
            raise DomainError(f"backend {self.name!r} cannot classify")
        pv = self.classify_fn(sample, candidates, prompt)
        return pv, self.input_tokens(sample, prompt), 1

    def _generate(self, text):
        if self.generate_fn is None:
            return super()._generate(text)
        out = self.generate_fn(text)
        return Generation(out, tuple(self.tokenizer(out)))


# --------------------------------------------------------------------------
# simulated large model


def stable_seed(*parts) -> int:
    """64-bit seed derived from the parts' text, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256("\x1f".join(map(str, parts)).encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class SimulatedOracleConfig:
    """Behavior of a stand-in large model.

    ``per_class_accuracy`` maps a gold class to the chance of answering it
    correctly; classes not listed use ``default_accuracy``. Confidences are drawn
    uniformly from the given (low, high) ranges.
    """

    per_class_accuracy: Mapping[str, float] = field(default_factory=dict)
    default_accuracy: float = 0.9
    confidence_when_correct: tuple[float, float] = (0.9, 1.0)
    confidence_when_wrong: tuple[float, float] = (0.5, 0.9)
    seed: int = 0

    def __post_init__(self):
        accs = list(self.per_class_accuracy.values()) + [self.default_accuracy]
        if not all(0.0 <= a <= 1.0 for a in accs):
            raise DomainError("accuracies must lie in [0, 1]")
        for rng in (self.confidence_when_correct, self.confidence_when_wrong):
            lo, hi = rng
            if not (0.0 <= lo <= hi <= 1.0):
                raise DomainError(f"confidence range {rng} not inside [0, 1]")

    def accuracy(self, label: str | None) -> float:
        if label is None:
            return 0.0
        return self.per_class_accuracy.get(label, self.default_accuracy)


class SimulatedOracle(ModelBackend):
    """Seeded stand-in for an expensive model.

    Each sample's randomness comes from ``(seed, sample id)`` alone, so results
    do not depend on call order, concurrency or the candidate list; the
    correctness draw is made before candidates are consulted.
    """

    def __init__(self, name: str, config: SimulatedOracleConfig, **kw):
        super().__init__(name, **kw)
        self.config = config

    def _classify(self, sample, candidates, prompt):
        cfg = self.config
        rng = np.random.default_rng(stable_seed(cfg.seed, sample.id))
        u, c_right, c_wrong, pick = rng.random(4)
        correct = u < cfg.accuracy(sample.gold_label) and sample.gold_label in candidates
        k = len(candidates)
        if correct:
            lo, hi = cfg.confidence_when_correct
            predicted = candidates.index(sample.gold_label)
            conf = lo + (hi - lo) * c_right
        else:
            lo, hi = cfg.confidence_when_wrong
            wrong = [i for i, c in enumerate(candidates) if c != sample.gold_label] or [0]
            predicted = wrong[min(int(pick * len(wrong)), len(wrong) - 1)]
            conf = lo + (hi - lo) * c_wrong
        if k == 1:
            probs = [1.0]
        else:
            conf = max(conf, 1.0 / k)
            rest = (1.0 - conf) / (k - 1)
            probs = [rest] * k
            probs[predicted] = conf
        n_in = self.input_tokens(sample, prompt)
        return ProbabilityVector(tuple(probs), candidates), n_in, 1


# --------------------------------------------------------------------------
# sequence confidence


def aggregate_sequence_confidence(
    token_probs: Sequence[ProbabilityVector], chosen: Sequence[str]
) -> float:
    """Mean probability the model gave to each token it actually emitted."""
    if len(token_probs) != len(chosen):
        raise DomainError(f"{len(token_probs)} steps but {len(chosen)} chosen tokens")
    if not token_probs:
        raise DomainError("empty token sequence")
    return math.fsum(pv.prob(t) for pv, t in zip(token_probs, chosen)) / len(chosen)


# --------------------------------------------------------------------------
# remote backend


@dataclass(frozen=True)
class RemoteConfig:
    url: str
    timeout: float = 30.0
    retries: int = 2
    backoff: float = 0.5
    token: str | None = None

    def __post_init__(self):
        if not self.url.startswith(("http://", "https://")):
            raise DomainError(f"endpoint must be an http(s) URL, got {self.url!r}")
        if self.retries < 0 or self.timeout <= 0:
            raise DomainError("retries must be >= 0 and timeout > 0")


@dataclass(frozen=True)
class ClassifyRequest:
    id: str
    payload: str
    candidates: tuple[str, ...]
    prompt: str | None = None

    def to_json(self) -> bytes:
        body = {
            "id": self.id,
            "payload": self.payload,
            "candidates": list(self.candidates),
            "prompt": self.prompt,
        }
        return json.dumps(body).encode("utf-8")


@dataclass(frozen=True)
class RemoteResponse:
    probs: ProbabilityVector
    input_tokens: int
    output_tokens: int


RENORMALIZE_BAND = 0.05


def parse_response(raw: bytes | str, candidates: Sequence[str]) -> RemoteResponse:
    """Validate a wire response and align it to ``candidates``."""
    try:
        body = json.loads(raw)
    except (ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(f"response is not JSON: {exc}") from None
    if not isinstance(body, dict):
        raise ProtocolError("response body must be a JSON object")
    try:
        probs = body["probs"]
        class_ids = body["class_ids"]
        n_in = body["input_tokens"]
        n_out = body["output_tokens"]
    except KeyError as exc:
        raise ProtocolError(f"response missing field {exc}") from None
    if not isinstance(probs, list) or not isinstance(class_ids, list):
        raise ProtocolError("probs and class_ids must be arrays")
    if len(probs) != len(class_ids):
        raise ProtocolError(f"{len(probs)} probs for {len(class_ids)} class ids")
    if len(probs) != len(candidates):
        raise ProtocolError(f"asked for {len(candidates)} candidates, got {len(probs)}")
    if set(map(str, class_ids)) != set(candidates) or len(set(class_ids)) != len(class_ids):
        raise ProtocolError(f"class ids {class_ids} do not match candidates {list(candidates)}")
    for name, v in (("input_tokens", n_in), ("output_tokens", n_out)):
        if isinstance(v, bool) or not isinstance(v, int) or v < 0:
            raise ProtocolError(f"{name} must be a non-negative integer, got {v!r}")
    values = []
    for p in probs:
        if isinstance(p, bool) or not isinstance(p, (int, float)) or not math.isfinite(p) or p < 0:
            raise ProtocolError(f"bad probability {p!r}")
        values.append(float(p))
    total = math.fsum(values)
    if abs(total - 1.0) > RENORMALIZE_BAND:
        raise ProtocolError(f"probabilities sum to {total}, outside renormalization band")
    if abs(total - 1.0) > PROB_TOL:
        log.warning("renormalizing remote probabilities that sum to %r", total)
        values = [v / total for v in values]
    by_id = dict(zip(map(str, class_ids), values))
    pv = ProbabilityVector(tuple(by_id[c] for c in candidates), tuple(candidates))
    return RemoteResponse(pv, n_in, n_out)


def call_remote(endpoint: RemoteConfig, request: ClassifyRequest) -> RemoteResponse:
    """POST one classification request, retrying transport failures.

    Timeouts, connection errors and 5xx responses are retried ``endpoint.retries``
    times before a :class:`TransportError`; anything else malformed is a
    :class:`ProtocolError`.
    """
    headers = {"Content-Type": "application/json"}
    if endpoint.token:
        headers["Authorization"] = f"Bearer {endpoint.token}"
    data = request.to_json()
    last: Exception | None = None
    for attempt in range(endpoint.retries + 1):
        if attempt:
            time.sleep(endpoint.backoff * 2 ** (attempt - 1))
        req = urllib.request.Request(endpoint.url, data=data, headers=headers, method="POST")
        try:
            with urllib.request.urlopen(req, timeout=endpoint.timeout) as resp:
                raw = resp.read()
        except urllib.error.HTTPError as exc:
            if exc.code >= 500:
                last = exc
                continue
            raise ProtocolError(f"endpoint answered HTTP {exc.code}") from None
        except (urllib.error.URLError, TimeoutError, ConnectionError, OSError) as exc:
            last = exc
            continue
        return parse_response(raw, request.candidates)
    raise TransportError(
        f"{endpoint.url} unreachable after {endpoint.retries + 1} attempts: {last}"
    )


class RemoteBackend(ModelBackend):
    def __init__(self, name: str, endpoint: RemoteConfig, **kw):
        super().__init__(name, **kw)
        self.endpoint = endpoint

    def _classify(self, sample, candidates, prompt):
        req = ClassifyRequest(sample.id, sample.payload_text(), tuple(candidates), prompt)
        resp = call_remote(self.endpoint, req)
        return resp.probs, resp.input_tokens, resp.output_tokens

    @property
    def billable(self) -> bool:
        # token counts are reported by the server, so always record them
        return self.ledger is not None
