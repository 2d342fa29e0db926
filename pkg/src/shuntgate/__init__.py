"""Route inputs between small and large models by prediction confidence."""

from .backends import (
    CostLedger,
    CostProfile,
    Dataset,
    LinearBackend,
    ModelBackend,
    PrecomputedBackend,
    RemoteBackend,
    RemoteConfig,
    Sample,
    SimulatedOracle,
    SimulatedOracleConfig,
    aggregate_sequence_confidence,
    call_remote,
)
from .core import (
    PROB_TOL,
    EntropyReport,
    JointDistribution,
    LogitVector,
    ProbabilityVector,
    conditional_entropy,
    entropy,
    kl_divergence,
    max_entropy_bound,
    softmax,
)
from .distillation import (
    DistillationPlan,
    DistillationReport,
    Schedule,
    TrainableClassifier,
    distill,
    forgetting_audit,
    partition,
)
from .metrics import BleuScore, EvaluationReport, bleu, corpus_bleu, evaluate
from .prompting import (
    PipelineStage,
    ProficiencySet,
    PromptRecord,
    build_hard_prompt,
    build_soft_prompt,
    run_transfer_pipeline,
)
from .router import (
    CalibrationResult,
    RoutingOutcome,
    ShuntPolicy,
    Strategy,
    Tier,
    calibrate_delta,
    route,
    route_with_strategy,
)

__version__ = "0.1.0"
