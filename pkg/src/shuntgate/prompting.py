"""Prompts built from small-model output.

Pruning refines what the large model chooses between: a *soft* prompt
annotates the classes the small model is good at with its confidences, a
*hard* prompt drops those classes from the candidate list. Transfer pipelines
let small models condense the input before a single large-model call.

Templates use ``{name}`` slots; literal braces are written doubled.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field
from decimal import ROUND_HALF_EVEN, Decimal
from enum import Enum
from pathlib import Path
from typing import Callable, Mapping, Sequence

from .backends import Dataset, ModelBackend, Sample, Tokenizer, whitespace_tokenize
from .core import ProbabilityVector
from .errors import ConfigurationError, DomainError, StageError


class PromptMode(str, Enum):
    SOFT = "soft"
    HARD = "hard"
    TRANSFER = "transfer"


DEFAULT_TEMPLATE = "Choose the class that fits the input best. Candidates: {candidates}."
ANNOTATION = "{label} with probability {confidence}"


@dataclass(frozen=True)
class StageTrace:
    name: str
    executor: str
    input_tokens: int
    output_tokens: int


@dataclass(frozen=True)
class PromptRecord:
    """What was sent to the large model and how it was derived.

    ``token_count_in`` counts the input before small-model help (the unpruned
    prompt, or the raw text entering a pipeline); ``token_count_out`` counts
    what the large model actually received from the small side.
    """

    template: str
    rendered: str
    mode: PromptMode
    injected_confidences: Mapping[str, float] = field(default_factory=dict)
    pruned_candidates: tuple[str, ...] = ()
    surviving_candidates: tuple[str, ...] = ()
    token_count_in: int = 0
    token_count_out: int = 0
    stages: tuple[StageTrace, ...] = ()

    def __post_init__(self):
        if self.token_count_in < 0 or self.token_count_out < 0:
            raise DomainError("token counts must be >= 0")
        object.__setattr__(self, "mode", PromptMode(self.mode))

    @property
    def noop(self) -> bool:
        return self.mode is PromptMode.HARD and not self.pruned_candidates

    def to_record(self) -> dict:
        return {
            "template": self.template,
            "rendered": self.rendered,
            "mode": self.mode.value,
            "injected_confidences": dict(self.injected_confidences),
            "pruned_candidates": list(self.pruned_candidates),
            "surviving_candidates": list(self.surviving_candidates),
            "token_count_in": self.token_count_in,
            "token_count_out": self.token_count_out,
            "stages": [vars(s) for s in self.stages],
        }

    @classmethod
    def from_record(cls, rec: Mapping) -> "PromptRecord":
        return cls(
            template=rec["template"],
            rendered=rec["rendered"],
            mode=PromptMode(rec["mode"]),
            injected_confidences=dict(rec.get("injected_confidences", {})),
            pruned_candidates=tuple(rec.get("pruned_candidates", ())),
            surviving_candidates=tuple(rec.get("surviving_candidates", ())),
            token_count_in=rec.get("token_count_in", 0),
            token_count_out=rec.get("token_count_out", 0),
            stages=tuple(StageTrace(**s) for s in rec.get("stages", ())),
        )


# --------------------------------------------------------------------------
# templates


def template_slots(template: str) -> list[str]:
    """Slot names in order of first appearance. Only bare ``{name}`` slots are legal."""
    slots: list[str] = []
    try:
        parsed = list(string.Formatter().parse(template))
    except ValueError as exc:
        raise DomainError(f"malformed template: {exc}") from None
    for _, name, spec, conv in parsed:
        if name is None:
            continue
        if not name.isidentifier() or spec or conv:
            raise DomainError(f"unsupported slot {{{name}}} in template")
        if name not in slots:
            slots.append(name)
    return slots


def render(template: str, **values) -> str:
    missing = [s for s in template_slots(template) if s not in values]
    if missing:
        raise DomainError(f"template slots {missing} have no value")
    return template.format(**values)


def load_template(path: str | Path) -> str:
    text = Path(path).read_text(encoding="utf-8")
    template_slots(text)
    return text.rstrip("\n")


def format_confidence(value: float) -> str:
    """Two decimals, round-half-even on the shortest decimal repr of ``value``."""
    return str(Decimal(repr(float(value))).quantize(Decimal("0.01"), rounding=ROUND_HALF_EVEN))


# --------------------------------------------------------------------------
# proficiency


@dataclass(frozen=True)
class AccuracyAbove:
    threshold: float = 0.95


@dataclass(frozen=True)
class TopKByValidationAccuracy:
    k: int


@dataclass(frozen=True)
class ProficiencySet:
    classes: frozenset[str]
    rule: AccuracyAbove | TopKByValidationAccuracy = AccuracyAbove()

    def __contains__(self, class_id) -> bool:
        return class_id in self.classes


def per_class_accuracy(
    validation: Dataset,
    small: ModelBackend,
    candidates: Sequence[str],
    min_confidence: float | None = None,
) -> dict[str, float]:
    """Per gold class, the share of samples ``small`` gets right.

    With ``min_confidence`` a right answer only counts when its confidence is
    strictly above it.
    """
    hits: dict[str, int] = {c: 0 for c in candidates}
    seen: dict[str, int] = {c: 0 for c in candidates}
    for s in validation:
        if s.gold_label not in seen:
            continue
        pv = small.classify(s, candidates)
        ok = pv.argmax() == s.gold_label
        if min_confidence is not None:
            ok = ok and pv.max() > min_confidence
        seen[s.gold_label] += 1
        hits[s.gold_label] += ok
    return {c: hits[c] / seen[c] for c in candidates if seen[c]}


def proficiency_from_accuracy(
    accuracy: Mapping[str, float], rule: AccuracyAbove | TopKByValidationAccuracy
) -> ProficiencySet:
    if isinstance(rule, AccuracyAbove):
        classes = {c for c, a in accuracy.items() if a > rule.threshold}
    else:
        order = sorted(accuracy, key=lambda c: -accuracy[c])  # stable: ties keep input order
        classes = set(order[: rule.k])
    return ProficiencySet(frozenset(classes), rule)


def proficiency_from_validation(
    validation: Dataset,
    small: ModelBackend,
    candidates: Sequence[str],
    rule: AccuracyAbove | TopKByValidationAccuracy = AccuracyAbove(),
    min_confidence: float | None = None,
) -> ProficiencySet:
    return proficiency_from_accuracy(
        per_class_accuracy(validation, small, candidates, min_confidence), rule
    )


# --------------------------------------------------------------------------
# pruning


def _count(text: str, tokenizer: Tokenizer | None) -> int:
    return len((tokenizer or whitespace_tokenize)(text))


def build_soft_prompt(
    base: str,
    c_s: ProbabilityVector,
    proficient: ProficiencySet,
    candidates: Sequence[str] | None = None,
    *,
    annotation: str = ANNOTATION,
    tokenizer: Tokenizer | None = None,
    **slots,
) -> PromptRecord:
    candidates = tuple(candidates if candidates is not None else c_s.class_ids)
    missing = sorted(c for c in proficient.classes if c not in c_s.class_ids)
    if missing:
        raise DomainError(f"small-model confidences missing for proficient classes {missing}")
    injected: dict[str, float] = {}
    parts = []
    for c in candidates:
        if c in proficient:
            conf = format_confidence(c_s.prob(c))
            injected[c] = float(conf)
            parts.append(render(annotation, label=c, confidence=conf))
        else:
            parts.append(c)
    plain = render(base, candidates=", ".join(candidates), **slots)
    rendered = render(base, candidates=", ".join(parts), **slots)
    return PromptRecord(
        template=base,
        rendered=rendered,
        mode=PromptMode.SOFT,
        injected_confidences=injected,
        surviving_candidates=candidates,
        token_count_in=_count(plain, tokenizer),
        token_count_out=_count(rendered, tokenizer),
    )


def build_hard_prompt(
    base: str,
    c_s: ProbabilityVector,
    proficient: ProficiencySet,
    candidates: Sequence[str],
    *,
    tokenizer: Tokenizer | None = None,
    **slots,
) -> PromptRecord:
    candidates = tuple(candidates)
    surviving = tuple(c for c in candidates if c not in proficient)
    pruned = tuple(c for c in candidates if c in proficient)
    if not surviving:
        raise DomainError("hard pruning would remove every candidate")
    plain = render(base, candidates=", ".join(candidates), **slots)
    rendered = render(base, candidates=", ".join(surviving), **slots)
    return PromptRecord(
        template=base,
        rendered=rendered,
        mode=PromptMode.HARD,
        pruned_candidates=pruned,
        surviving_candidates=surviving,
        token_count_in=_count(plain, tokenizer),
        token_count_out=_count(rendered, tokenizer),
    )


def soft_prompter(base: str, proficient: ProficiencySet, **kw):
    """Router hook: annotate proficient classes, keep every candidate."""

    def prompter(sample: Sample, c_s: ProbabilityVector, candidates: Sequence[str]):
        record = build_soft_prompt(base, c_s, proficient, candidates, **kw)
        return record, tuple(candidates)

    return prompter


def hard_prompter(base: str, proficient: ProficiencySet, **kw):
    """Router hook: drop proficient classes from what the large model may answer.

    If every candidate is proficient nothing is pruned for that request.
    """

    def prompter(sample: Sample, c_s: ProbabilityVector, candidates: Sequence[str]):
        keep = ProficiencySet(frozenset(proficient.classes & set(candidates)), proficient.rule)
        if len(keep.classes) == len(set(candidates)):
            keep = ProficiencySet(frozenset(), proficient.rule)
        record = build_hard_prompt(base, c_s, keep, candidates, **kw)
        return record, record.surviving_candidates

    return prompter


# --------------------------------------------------------------------------
# transfer pipelines


class Executor(str, Enum):
    SMALL_MODEL = "small_model"
    LARGE_MODEL = "large_model"
    PURE_FUNCTION = "pure_function"


PIPELINE_SLOTS = {"stage_output", "input"}


@dataclass(frozen=True)
class PipelineStage:
    """One link of a transfer chain.

    The stage renders ``template`` with the previous stage's text as
    ``{stage_output}`` (the raw input for the first stage; ``{input}`` is
    always the raw input) and hands it to its executor.
    """

    name: str
    executor: Executor
    template: str = "{stage_output}"
    backend: ModelBackend | None = None
    fn: Callable[[str], str] | None = None

    def __post_init__(self):
        object.__setattr__(self, "executor", Executor(self.executor))
        if self.executor is Executor.PURE_FUNCTION:
            if self.fn is None:
                raise ConfigurationError(f"stage {self.name!r}: pure function stage needs fn")
        elif self.backend is None:
            raise ConfigurationError(f"stage {self.name!r}: model stage needs a backend")
        bad = set(template_slots(self.template)) - PIPELINE_SLOTS
        if bad:
            raise ConfigurationError(f"stage {self.name!r}: unknown slots {sorted(bad)}")


def validate_chain(stages: Sequence[PipelineStage]) -> None:
    if not stages:
        raise ConfigurationError("pipeline has no stages")
    names = [s.name for s in stages]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"duplicate stage names in {names}")
    large = [i for i, s in enumerate(stages) if s.executor is Executor.LARGE_MODEL]
    if len(large) > 1 or (large and large[0] != len(stages) - 1):
        raise ConfigurationError("only the final stage may call the large model")


def run_transfer_pipeline(
    stages: Sequence[PipelineStage],
    sample: Sample,
    tokenizer: Tokenizer | None = None,
) -> tuple[str, PromptRecord]:
    validate_chain(stages)
    if not sample.is_text:
        raise DomainError("transfer pipelines run on text payloads")
    entry = sample.payload
    current = entry
    traces = []
    last_prompt = entry
    template = stages[-1].template
    handed_over = entry
    for stage in stages:
        try:
            prompt = render(stage.template, stage_output=current, input=entry)
            if stage.executor is Executor.PURE_FUNCTION:
                out = stage.fn(prompt)
            else:
                out = stage.backend.generate(prompt, sample.id).text
        except Exception as exc:
            raise StageError(stage.name, exc) from exc
        if stage.executor is Executor.LARGE_MODEL:
            handed_over, last_prompt = current, prompt
        traces.append(
            StageTrace(stage.name, stage.executor.value, _count(prompt, tokenizer), _count(out, tokenizer))
        )
        current = out
    if stages[-1].executor is not Executor.LARGE_MODEL:
        handed_over = last_prompt = current
    record = PromptRecord(
        template=template,
        rendered=last_prompt,
        mode=PromptMode.TRANSFER,
        token_count_in=_count(entry, tokenizer),
        token_count_out=_count(handed_over, tokenizer),
        stages=tuple(traces),
    )
    return current, record


def truncate_tokens(limit: int, tokenizer: Tokenizer | None = None) -> Callable[[str], str]:
    """Pure-function stage keeping the first ``limit`` tokens."""

    def fn(text: str) -> str:
        return " ".join((tokenizer or whitespace_tokenize)(text)[:limit])

    return fn


PURE_FUNCTIONS: dict[str, Callable[..., Callable[[str], str]]] = {
    "truncate": lambda limit: truncate_tokens(int(limit)),
    "strip": lambda: str.strip,
}


def load_pipeline(
    definition: Mapping | str | Path,
    backends: Mapping[str, ModelBackend],
    base_dir: str | Path | None = None,
) -> list[PipelineStage]:
    """Build stages from a definition like::

        {"stages": [
            {"name": "summarize", "executor": "small_model", "backend": "summarizer",
             "template_file": "summarize.txt"},
            {"name": "judge", "executor": "large_model", "backend": "judge"}]}

    Pure-function stages name a builtin as ``"function": "truncate:100"``.
    """
    if not isinstance(definition, Mapping):
        path = Path(definition)
        base_dir = base_dir or path.parent
        definition = json.loads(path.read_text(encoding="utf-8"))
    base = Path(base_dir or ".")
    unknown = set(definition) - {"stages"}
    if unknown:
        raise ConfigurationError(f"unknown pipeline keys {sorted(unknown)}")
    stages = []
    allowed = {"name", "executor", "backend", "template", "template_file", "function"}
    for spec in definition.get("stages", []):
        extra = set(spec) - allowed
        if extra:
            raise ConfigurationError(f"unknown stage keys {sorted(extra)}")
        template = spec.get("template", "{stage_output}")
        if "template_file" in spec:
            template = load_template(base / spec["template_file"])
        backend = fn = None
        executor = Executor(spec["executor"])
        if executor is Executor.PURE_FUNCTION:
            fname, _, arg = spec["function"].partition(":")
            if fname not in PURE_FUNCTIONS:
                raise ConfigurationError(f"unknown pure function {fname!r}")
            fn = PURE_FUNCTIONS[fname](*([arg] if arg else []))
        else:
            try:
                backend = backends[spec["backend"]]
            except KeyError:
                raise ConfigurationError(f"stage {spec['name']!r}: unknown backend") from None
        stages.append(PipelineStage(spec["name"], executor, template, backend, fn))
    validate_chain(stages)
    return stages
