from .main import (
    LossKind,
    ObjectiveKind,
    GuidanceConfig,
    TraceRecord,
    ClassificationResult,
    crop_residual,
    eps_error,
    eps_errors,
    apply_guidance,
    vlb_weight,
    point_errors,
    estimate_errors,
    posterior_from_errors,
    classify_naive,
    classify_adaptive,
)

__all__ = [
    "LossKind",
    "ObjectiveKind",
    "GuidanceConfig",
    "TraceRecord",
    "ClassificationResult",
    "crop_residual",
    "eps_error",
    "eps_errors",
    "apply_guidance",
    "vlb_weight",
    "point_errors",
    "estimate_errors",
    "posterior_from_errors",
    "classify_naive",
    "classify_adaptive",
]
