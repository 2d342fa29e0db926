"""Datasets, synthetic tasks, experiment configs and the end-to-end run."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import numpy as np
import yaml

from .backends import (
    CostLedger,
    CostProfile,
    Dataset,
    LinearBackend,
    ModelBackend,
    RemoteBackend,
    RemoteConfig,
    Sample,
    SimulatedOracle,
    SimulatedOracleConfig,
    stable_seed,
)
from .distillation import (
    DistillationPlan,
    Schedule,
    TrainableClassifier,
    distill,
    make_learnable,
    parse_ratio,
    partition,
)
from .errors import ConfigurationError, DomainError, ShuntError
from .metrics import EvaluationReport, category_accuracy, evaluate
from .prompting import (
    DEFAULT_TEMPLATE,
    AccuracyAbove,
    TopKByValidationAccuracy,
    hard_prompter,
    load_template,
    proficiency_from_validation,
    soft_prompter,
)
from .router import (
    MatchLargeAccuracy,
    MaxAccuracy,
    ShuntPolicy,
    Strategy,
    Tier,
    calibrate_delta,
    fit_correctness_model,
    fit_region_model,
    parse_grid,
    route_dataset,
)

log = logging.getLogger(__name__)

SEED_ENV = "SHUNTGATE_SEED"


def derive_seed(global_seed: int, component: str) -> int:
    """Per-component seed; adding components never shifts existing streams."""
    return stable_seed(global_seed, component) & 0xFFFFFFFF


# --------------------------------------------------------------------------
# ingestion

SAMPLE_KEYS = {"id", "payload", "gold_label", "category"}


def sample_from_record(rec: Mapping) -> Sample:
    if not isinstance(rec, Mapping):
        raise DomainError("record is not an object")
    extra = set(rec) - SAMPLE_KEYS
    if extra:
        raise DomainError(f"unknown fields {sorted(extra)}")
    if "id" not in rec:
        raise DomainError("record has no id")
    if "payload" not in rec or rec["payload"] in ("", [], None):
        raise DomainError(f"record {rec['id']!r} has no payload")
    payload = rec["payload"]
    if not isinstance(payload, str):
        if not isinstance(payload, list) or not all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in payload
        ):
            raise DomainError(f"record {rec['id']!r}: payload must be text or a list of numbers")
    return Sample(
        id=str(rec["id"]),
        payload=payload,
        gold_label=rec.get("gold_label"),
        category=rec.get("category"),
    )


def _read_jsonl(text: str) -> list[Sample]:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(sample_from_record(json.loads(line)))
        except (ValueError, DomainError) as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
    return out


def _read_csv(text: str) -> list[Sample]:
    reader = csv.DictReader(io.StringIO(text))
    if reader.fieldnames is None:
        return []
    cols = reader.fieldnames
    feature_cols = [c for c in cols if c.startswith("x") and c[1:].isdigit()]
    feature_cols.sort(key=lambda c: int(c[1:]))
    out = []
    for lineno, row in enumerate(reader, start=2):
        try:
            rec: dict[str, Any] = {"id": row.get("id") or None}
            if rec["id"] is None:
                raise DomainError("record has no id")
            if feature_cols:
                rec["payload"] = [float(row[c]) for c in feature_cols]
            else:
                rec["payload"] = row.get("payload") or ""
            for key in ("gold_label", "category"):
                if row.get(key):
                    rec[key] = row[key]
            out.append(sample_from_record(rec))
        except (ValueError, DomainError) as exc:
            raise DomainError(f"line {lineno}: {exc}") from None
    return out


def ingest(path: str | Path, format: str | None = None) -> Dataset:
    """Read a jsonl or csv file of samples. Duplicate ids are rejected."""
    path = Path(path)
    format = format or path.suffix.lstrip(".").lower()
    text = path.read_text(encoding="utf-8")
    if format == "jsonl":
        samples = _read_jsonl(text)
    elif format == "csv":
        samples = _read_csv(text)
    else:
        raise DomainError(f"unknown dataset format {format!r}")
    return Dataset(samples)


def dumps_dataset(dataset: Dataset) -> str:
    return "".join(json.dumps(s.to_record(), sort_keys=True) + "\n" for s in dataset)


def write_dataset(dataset: Dataset, path: str | Path) -> None:
    Path(path).write_text(dumps_dataset(dataset), encoding="utf-8")


# --------------------------------------------------------------------------
# synthetic tasks

REGIONS = ("head", "med", "tail")


@dataclass(frozen=True)
class SyntheticTaskSpec:
    """Gaussian class clusters with a long-tailed class frequency.

    Classes are split into consecutive head/med/tail thirds and every class in
    a region gets a share of ``n_samples`` proportional to that region's skew
    weight. Class ``i`` is centered at ``separation * e_i``.
    """

    n_classes: int = 9
    n_samples: int = 3000
    separation: float = 4.0
    skew: tuple[float, float, float] = (100.0, 10.0, 1.0)
    label_noise: float = 0.0
    seed: int = 0
    n_features: int | None = None
    noise_std: float = 1.0

    def __post_init__(self):
        if self.n_classes < 1 or self.n_samples < 0:
            raise DomainError("need n_classes >= 1 and n_samples >= 0")
        if len(self.skew) != 3 or not all(w > 0 for w in self.skew):
            raise DomainError(f"skew must be three positive weights, got {self.skew}")
        if not (0.0 <= self.label_noise < 1.0):
            raise DomainError("label noise must lie in [0, 1)")
        if self.n_features is not None and self.n_features < self.n_classes:
            raise DomainError("n_features must be >= n_classes")
        object.__setattr__(self, "skew", tuple(float(w) for w in self.skew))


def class_ids(n: int) -> list[str]:
    width = max(2, len(str(n - 1)))
    return [f"c{i:0{width}d}" for i in range(n)]


def class_regions(n_classes: int) -> list[str]:
    """Region of each class index: consecutive thirds (head gets any remainder first)."""
    sizes = [n_classes // 3 + (1 if r < n_classes % 3 else 0) for r in range(3)]
    out = []
    for region, size in zip(REGIONS, sizes):
        out += [region] * size
    return out


def apportion(total: int, weights: Sequence[float]) -> list[int]:
    """Largest-remainder split of ``total`` in proportion to ``weights``."""
    w = np.asarray(weights, dtype=float)
    exact = total * w / w.sum()
    counts = np.floor(exact).astype(int)
    remainder = total - counts.sum()
    # ties go to the lower index
    order = sorted(range(len(w)), key=lambda i: (-(exact[i] - counts[i]), i))
    for i in order[:remainder]:
        counts[i] += 1
    return counts.tolist()


def generate_synthetic(spec: SyntheticTaskSpec) -> Dataset:
    labels = class_ids(spec.n_classes)
    regions = class_regions(spec.n_classes)
    weights = [spec.skew[REGIONS.index(r)] for r in regions]
    counts = apportion(spec.n_samples, weights)
    if spec.n_samples and min(counts) == 0:
        raise DomainError(f"skew {spec.skew} leaves some class with no samples")
    d = spec.n_features or spec.n_classes
    rng = np.random.default_rng(spec.seed)
    y = np.repeat(np.arange(spec.n_classes), counts)
    X = rng.normal(0.0, spec.noise_std, size=(len(y), d))
    X[np.arange(len(y)), y] += spec.separation
    noisy = rng.random(len(y)) < spec.label_noise
    shift = rng.integers(1, max(spec.n_classes, 2), size=len(y))
    observed = np.where(noisy, (y + shift) % spec.n_classes, y)
    order = rng.permutation(len(y))
    samples = [
        Sample(
            id=f"s{k:06d}",
            payload=tuple(X[i].tolist()),
            gold_label=labels[observed[i]],
            category=regions[y[i]],
        )
        for k, i in enumerate(order)
    ]
    return Dataset(samples)


@dataclass(frozen=True)
class TwoClusterSpec:
    """Two disjoint groups of classes living in disjoint feature blocks.

    Group ``A`` classes occupy the first block, group ``B`` the second, so a
    model trained on ``A`` alone has no signal on ``B``.
    """

    classes_per_cluster: int = 4
    n_per_class: int = 200
    separation: float = 4.0
    noise_std: float = 1.0
    seed: int = 0


def generate_two_cluster(spec: TwoClusterSpec) -> Dataset:
    k = spec.classes_per_cluster
    labels = [f"a{i}" for i in range(k)] + [f"b{i}" for i in range(k)]
    rng = np.random.default_rng(spec.seed)
    y = np.repeat(np.arange(2 * k), spec.n_per_class)
    X = rng.normal(0.0, spec.noise_std, size=(len(y), 2 * k))
    X[np.arange(len(y)), y] += spec.separation
    order = rng.permutation(len(y))
    return Dataset(
        Sample(
            id=f"t{n:06d}",
            payload=tuple(X[i].tolist()),
            gold_label=labels[y[i]],
            category="A" if y[i] < k else "B",
        )
        for n, i in enumerate(order)
    )


def split_dataset(dataset: Dataset, fractions: Sequence[float], seed: int) -> list[Dataset]:
    """Shuffle once and cut into consecutive parts with the given fractions."""
    counts = apportion(len(dataset), fractions)
    order = np.random.default_rng(seed).permutation(len(dataset))
    parts, start = [], 0
    for c in counts:
        parts.append(Dataset(dataset[int(i)] for i in sorted(order[start:start + c])))
        start += c
    return parts


# --------------------------------------------------------------------------
# configuration


def _from_mapping(cls, data: Mapping | None, where: str, nested: Mapping[str, Any] = {}):
    if data is None:
        data = {}
    if not isinstance(data, Mapping):
        raise ConfigurationError(f"{where}: expected a mapping")
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for k, v in data.items():
        if k in nested and v is not None:
            v = nested[k](v, f"{where}.{k}")
        kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from None


@dataclass(frozen=True)
class DataConfig:
    train: str | None = None
    validation: str | None = None
    test: str | None = None
    format: str = "jsonl"
    # SyntheticTaskSpec fields; replaces the file paths when given
    synthetic: Mapping | None = None
    split: tuple[float, float, float] = (0.6, 0.2, 0.2)


@dataclass(frozen=True)
class BackendSpec:
    kind: str = "local"
    id: str | None = None
    # local
    checkpoint: str | None = None
    epochs: int = 200
    learning_rate: float = 0.5
    batch_size: int | None = None
    l2: float = 0.0
    # simulated
    accuracy: float = 0.9
    per_class_accuracy: Mapping[str, float] = field(default_factory=dict)
    confidence_when_correct: tuple[float, float] = (0.9, 1.0)
    confidence_when_wrong: tuple[float, float] = (0.5, 0.9)
    # remote
    url: str | None = None
    timeout: float = 30.0
    retries: int = 2
    token: str | None = None
    # pricing
    price_per_input_token: float = 0.0
    price_per_output_token: float = 0.0
    fixed_per_call: float = 0.0

    def __post_init__(self):
        if self.kind not in ("local", "simulated", "remote"):
            raise ConfigurationError(f"unknown backend kind {self.kind!r}")
        if self.kind == "remote" and not self.url:
            raise ConfigurationError("remote backend needs a url")

    @property
    def cost_profile(self) -> CostProfile:
        return CostProfile(self.price_per_input_token, self.price_per_output_token, self.fixed_per_call)


@dataclass(frozen=True)
class BackendsConfig:
    specific_small: BackendSpec
    large: BackendSpec
    learnable_small: BackendSpec | None = None


@dataclass(frozen=True)
class PolicyConfig:
    delta: float = 0.97
    strategy: str = "confidence"
    on_large_failure: str = "fallback"


@dataclass(frozen=True)
class CalibrationConfig:
    enabled: bool = False
    grid: str = "0.85:0.99:0.01"
    objective: str = "match-large"
    target: float | None = None
    tolerance: float = 0.0
    split: str = "validation"

    def build_objective(self):
        if self.objective == "match-large":
            return MatchLargeAccuracy(self.target, self.tolerance)
        if self.objective == "max-accuracy":
            return MaxAccuracy()
        raise ConfigurationError(f"unknown calibration objective {self.objective!r}")


@dataclass(frozen=True)
class PromptingConfig:
    mode: str = "none"
    template: str = DEFAULT_TEMPLATE
    template_file: str | None = None
    rule: str = "accuracy-above"
    threshold: float = 0.95
    k: int = 1

    def __post_init__(self):
        if self.mode not in ("none", "soft", "hard"):
            raise ConfigurationError(f"unknown prompting mode {self.mode!r}")
        if self.rule not in ("accuracy-above", "top-k"):
            raise ConfigurationError(f"unknown proficiency rule {self.rule!r}")


@dataclass(frozen=True)
class DistillationConfig:
    enabled: bool = False
    epochs: int = 50
    ratio: str = "1:1"
    batch_size: int = 32
    learning_rate: float | None = None
    kl_order: str = "reverse"
    split: str = "train"

    def __post_init__(self):
        if self.kl_order not in ("reverse", "forward"):
            raise ConfigurationError(f"unknown kl_order {self.kl_order!r}; expected reverse or forward")
        if self.split not in ("train", "validation"):
            raise ConfigurationError(f"unknown distillation split {self.split!r}")

    @property
    def schedule(self) -> Schedule:
        return Schedule(parse_ratio(self.ratio), self.epochs, self.batch_size)


@dataclass(frozen=True)
class OutputConfig:
    run_root: str = "runs"
    name: str = "run"
    baselines: bool = False


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int
    data: DataConfig
    backends: BackendsConfig
    policy: PolicyConfig = PolicyConfig()
    calibration: CalibrationConfig = CalibrationConfig()
    prompting: PromptingConfig = PromptingConfig()
    distillation: DistillationConfig = DistillationConfig()
    output: OutputConfig = OutputConfig()
    workers: int = 1
    # directory relative paths are resolved against
    base_dir: str = "."

    @classmethod
    def from_mapping(cls, data: Mapping, base_dir: str | Path = ".") -> "ExperimentConfig":
        if not isinstance(data, Mapping):
            raise ConfigurationError("config must be a mapping")
        if "seed" not in data:
            raise ConfigurationError("config needs a seed")
        backend = lambda v, w: _from_mapping(BackendSpec, v, w)
        nested = {
            "data": lambda v, w: _from_mapping(DataConfig, v, w),
            "backends": lambda v, w: _from_mapping(
                BackendsConfig, v, w,
                {"specific_small": backend, "large": backend, "learnable_small": backend},
            ),
            "policy": lambda v, w: _from_mapping(PolicyConfig, v, w),
            "calibration": lambda v, w: _from_mapping(CalibrationConfig, v, w),
            "prompting": lambda v, w: _from_mapping(PromptingConfig, v, w),
            "distillation": lambda v, w: _from_mapping(DistillationConfig, v, w),
            "output": lambda v, w: _from_mapping(OutputConfig, v, w),
        }
        if "base_dir" in data:
            raise ConfigurationError("config: unknown keys ['base_dir']")
        for required in ("data", "backends"):
            if required not in data:
                raise ConfigurationError(f"config needs a {required!r} section")
        cfg = _from_mapping(cls, {**data, "base_dir": str(base_dir)}, "config", nested)
        if not isinstance(cfg.seed, int) or isinstance(cfg.seed, bool):
            raise ConfigurationError("seed must be an integer")
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "ExperimentConfig":
        path = Path(path)
        text = path.read_text(encoding="utf-8")
        data = json.loads(text) if path.suffix == ".json" else yaml.safe_load(text)
        cfg = cls.from_mapping(data or {}, path.parent)
        env = os.environ.get(SEED_ENV)
        if env is not None:
            try:
                cfg = dataclasses.replace(cfg, seed=int(env))
            except ValueError:
                raise ConfigurationError(f"{SEED_ENV} must be an integer, got {env!r}") from None
        return cfg

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def validate(self) -> None:
        d = self.data
        if d.synthetic is None:
            for name in ("validation", "test"):
                if getattr(d, name) is None:
                    raise ConfigurationError(f"data.{name} is required without data.synthetic")
        for name in ("train", "validation", "test"):
            rel = getattr(d, name)
            if rel is not None and not self.resolve(rel).exists():
                raise ConfigurationError(f"data.{name}: {rel} does not exist")
        specs = {"specific_small": self.backends.specific_small, "large": self.backends.large}
        if self.backends.learnable_small is not None:
            specs["learnable_small"] = self.backends.learnable_small
        ids = [s.id or role for role, s in specs.items()]
        if len(set(ids)) != len(ids):
            raise ConfigurationError(f"backend ids must be unique, got {ids}")
        for role, s in specs.items():
            if s.checkpoint and not self.resolve(s.checkpoint).exists():
                raise ConfigurationError(f"backends.{role}.checkpoint does not exist")
        if self.prompting.template_file and not self.resolve(self.prompting.template_file).exists():
            raise ConfigurationError("prompting.template_file does not exist")
        ShuntPolicy(self.policy.delta, self.policy.strategy, on_large_failure=self.policy.on_large_failure)
        self.calibration.build_objective()
        parse_grid(self.calibration.grid)
        self.distillation.schedule
        if self.distillation.enabled and self.backends.specific_small.kind != "local":
            raise ConfigurationError("distillation needs a local specific small model")
        if self.distillation.enabled and self.backends.learnable_small is not None:
            raise ConfigurationError("learnable_small comes from distillation; do not configure both")

    def snapshot(self) -> dict:
        out = dataclasses.asdict(self)
        out.pop("base_dir")
        return out


# --------------------------------------------------------------------------
# assembly


@dataclass
class Splits:
    train: Dataset | None
    validation: Dataset
    test: Dataset
    candidates: tuple[str, ...]


def load_splits(cfg: ExperimentConfig) -> Splits:
    d = cfg.data
    if d.synthetic is not None:
        spec_data = dict(d.synthetic)
        spec_data.setdefault("seed", derive_seed(cfg.seed, "data"))
        spec = _from_mapping(SyntheticTaskSpec, spec_data, "data.synthetic")
        full = generate_synthetic(spec)
        train, val, test = split_dataset(full, d.split, derive_seed(cfg.seed, "split"))
        return Splits(train, val, test, tuple(class_ids(spec.n_classes)))
    train = ingest(cfg.resolve(d.train), d.format) if d.train else None
    val = ingest(cfg.resolve(d.validation), d.format)
    test = ingest(cfg.resolve(d.test), d.format)
    labels: dict[str, None] = {}
    for part in (train, val, test):
        for lab in (part.labels() if part is not None else []):
            labels.setdefault(lab)
    return Splits(train, val, test, tuple(sorted(labels)))


def build_backend(
    cfg: ExperimentConfig, role: str, spec: BackendSpec, splits: Splits, ledger: CostLedger | None
) -> tuple[ModelBackend, TrainableClassifier | None]:
    name = spec.id or role
    kw = {"cost_profile": spec.cost_profile, "ledger": ledger}
    if spec.kind == "local":
        if spec.checkpoint:
            model = TrainableClassifier.load(cfg.resolve(spec.checkpoint))
        else:
            if splits.train is None or not len(splits.train):
                raise ConfigurationError(f"{role}: no checkpoint and no training data")
            model = TrainableClassifier.zeros(
                splits.candidates, len(splits.train[0].payload), spec.learning_rate,
                derive_seed(cfg.seed, role),
            )
            labelled = splits.train.filter(lambda s: s.gold_label is not None)
            model.fit(labelled.features(), [s.gold_label for s in labelled], spec.epochs, spec.batch_size, spec.l2)
        return LinearBackend(name, model, **kw), model
    if spec.kind == "simulated":
        oc = SimulatedOracleConfig(
            dict(spec.per_class_accuracy), spec.accuracy,
            tuple(spec.confidence_when_correct), tuple(spec.confidence_when_wrong),
            derive_seed(cfg.seed, role),
        )
        return SimulatedOracle(name, oc, **kw), None
    endpoint = RemoteConfig(spec.url, spec.timeout, spec.retries, token=spec.token)
    return RemoteBackend(name, endpoint, **kw), None


def build_prompter(cfg: ExperimentConfig, validation: Dataset, small: ModelBackend, candidates):
    p = cfg.prompting
    if p.mode == "none":
        return None
    template = load_template(cfg.resolve(p.template_file)) if p.template_file else p.template
    rule = AccuracyAbove(p.threshold) if p.rule == "accuracy-above" else TopKByValidationAccuracy(p.k)
    proficient = proficiency_from_validation(validation, small, candidates, rule)
    return (soft_prompter if p.mode == "soft" else hard_prompter)(template, proficient)


class ExperimentError(ShuntError):
    def __init__(self, stage: str, cause: BaseException, run_dir: Path | None):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
        self.run_dir = run_dir
        self.exit_code = getattr(cause, "exit_code", 1)


def new_run_dir(root: Path, name: str) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    n = 1
    while True:
        path = root / f"{name}-{n:04d}"
        try:
            path.mkdir()
            return path
        except FileExistsError:
            n += 1


def _write_json(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _write_ledger(path: Path, ledgers: Mapping[str, CostLedger]) -> None:
    with path.open("w", encoding="utf-8") as fh:
        for stage, ledger in ledgers.items():
            # parallel routing bills in completion order; sort for stable files
            lines = sorted(json.dumps({"stage": stage, **dataclasses.asdict(e)}, sort_keys=True)
                           for e in ledger.entries)
            fh.writelines(line + "\n" for line in lines)


def write_outcomes(path: Path, outcomes) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for o in outcomes:
            fh.write(json.dumps(o.to_record(), sort_keys=True) + "\n")


def read_outcomes(path: Path):
    from .router import RoutingOutcome

    out = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), start=1):
        if line.strip():
            try:
                out.append(RoutingOutcome.from_record(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise DomainError(f"{path}:{lineno}: bad outcome record: {exc}") from None
    return out


@dataclass
class RunResult:
    report: EvaluationReport
    run_dir: Path
    delta: float
    outcomes: list
    ledgers: dict[str, CostLedger]
    baseline_large_cost: int | None = None


def run_experiment(cfg: ExperimentConfig, run_root: str | Path | None = None) -> RunResult:
    """Train or load, calibrate, optionally distill, route the test split and report.

    Every artifact lands in a fresh directory under ``run_root`` (default
    ``output.run_root``).
    """
    root = Path(run_root) if run_root is not None else cfg.resolve(cfg.output.run_root)
    run_dir = new_run_dir(root, cfg.output.name)
    _write_json(run_dir / "config.json", cfg.snapshot())
    ledgers = {s: CostLedger() for s in ("calibrate", "distill", "route", "baseline")}
    stage = "data"
    try:
        splits = load_splits(cfg)
        write_dataset(splits.test, run_dir / "test.jsonl")
        cands = splits.candidates

        stage = "specific_small"
        b = cfg.backends
        specific, specific_model = build_backend(cfg, "specific_small", b.specific_small, splits, None)
        if specific_model is not None:
            specific_model.save(run_dir / "specific_small.json")
        large, _ = build_backend(cfg, "large", b.large, splits, None)

        stage = "prompting"
        prompter = build_prompter(cfg, splits.validation, specific, cands)

        delta = cfg.policy.delta
        if cfg.calibration.enabled:
            stage = "calibrate"
            large.ledger = ledgers["calibrate"]
            calib_data = splits.validation if cfg.calibration.split == "validation" else splits.train
            result = calibrate_delta(
                calib_data, specific, parse_grid(cfg.calibration.grid),
                cfg.calibration.build_objective(), large=large, candidates=cands, prompter=prompter,
            )
            _write_json(run_dir / "calibration.json", result.to_record())
            delta = result.chosen_delta

        learnable = None
        if cfg.distillation.enabled:
            stage = "distill"
            large.ledger = ledgers["distill"]
            dc = cfg.distillation
            source = splits.train if dc.split == "train" else splits.validation
            plan = partition(source, specific, large, delta, cands, dc.schedule)
            plan.save(run_dir / "plan.json")
            model = make_learnable(specific_model)
            model.seed = derive_seed(cfg.seed, "learnable_small")
            report = distill(plan, model, kl_order=dc.kl_order, learning_rate=dc.learning_rate)
            _write_json(run_dir / "distillation.json", report.to_record())
            model.save(run_dir / "learnable_small.json")
            learnable = LinearBackend("learnable_small", model)
        elif b.learnable_small is not None:
            learnable, _ = build_backend(cfg, "learnable_small", b.learnable_small, splits, None)

        stage = "route"
        large.ledger = ledgers["route"]
        policy = ShuntPolicy(delta, Strategy(cfg.policy.strategy), on_large_failure=cfg.policy.on_large_failure)
        strategy = None
        if policy.strategy is Strategy.DISTRIBUTION_MODEL:
            strategy = fit_region_model(splits.train, seed=derive_seed(cfg.seed, "region_model"))
        elif policy.strategy is Strategy.PREDICTION_MODEL:
            strategy = fit_correctness_model(
                splits.train, specific, cands, seed=derive_seed(cfg.seed, "correctness_model")
            )
        outcomes = route_dataset(
            splits.test, policy, specific, learnable, large, cands,
            strategy=strategy, prompter=prompter, workers=cfg.workers,
        )
        write_outcomes(run_dir / "outcomes.jsonl", outcomes)

        stage = "report"
        baselines = None
        baseline_cost = None
        if cfg.output.baselines:
            large.ledger = ledgers["baseline"]
            small_pred = {s.id: specific.classify(s, cands).argmax() for s in splits.test}
            large_pred = {s.id: large.classify(s, cands).argmax() for s in splits.test}
            baselines = {
                "small": category_accuracy(small_pred, splits.test),
                "large": category_accuracy(large_pred, splits.test),
            }
            baseline_cost = ledgers["baseline"].total_micro()
        report = evaluate(outcomes, splits.test, baselines)
        (run_dir / "report.jsonl").write_text(report.to_jsonl(), encoding="utf-8")
        (run_dir / "report.txt").write_text(report.to_table(), encoding="utf-8")
        _write_ledger(run_dir / "ledger.jsonl", ledgers)
    except ShuntError as exc:
        _write_ledger(run_dir / "ledger.jsonl", ledgers)
        raise ExperimentError(stage, exc, run_dir) from exc
    return RunResult(report, run_dir, delta, outcomes, ledgers, baseline_cost)
