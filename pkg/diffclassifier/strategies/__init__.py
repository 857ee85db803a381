from .main import (
    StrategyKind,
    TimestepStrategy,
    EvalPoint,
    SampleSet,
    StagePlan,
    PlanDiagnostic,
    PlanReport,
    PruneConfig,
    parse_timesteps,
    make_sample_set,
    validate_plan,
    prune_candidates,
)

__all__ = [
    "StrategyKind",
    "TimestepStrategy",
    "EvalPoint",
    "SampleSet",
    "StagePlan",
    "PlanDiagnostic",
    "PlanReport",
    "PruneConfig",
    "parse_timesteps",
    "make_sample_set",
    "validate_plan",
    "prune_candidates",
]
