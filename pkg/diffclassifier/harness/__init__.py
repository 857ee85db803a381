from .main import (
    DatasetKind,
    GmmParams,
    TemplateParams,
    SyntheticDataset,
    ClassifierSettings,
    ExperimentReport,
    VarianceReport,
    ScoreMatrix,
    COMPOSITIONAL_PAIRS,
    derive_seed,
    standard_gmm_params,
    standard_template_params,
    compositional_template_params,
    gen_dataset,
    oracle_prune_scores,
    classify_one,
    run_benchmark,
    scaling_curve,
    default_timestep_grid,
    timestep_accuracy_curve,
    variance_report,
    winoground_text_score,
    winoground_image_score,
    winoground_group_score,
    winoground_report,
    read_score_matrices,
    compositional_score_matrices,
)

__all__ = [
    "DatasetKind",
    "GmmParams",
    "TemplateParams",
    "SyntheticDataset",
    "ClassifierSettings",
    "ExperimentReport",
    "VarianceReport",
    "ScoreMatrix",
    "COMPOSITIONAL_PAIRS",
    "derive_seed",
    "standard_gmm_params",
    "standard_template_params",
    "compositional_template_params",
    "gen_dataset",
    "oracle_prune_scores",
    "classify_one",
    "run_benchmark",
    "scaling_curve",
    "default_timestep_grid",
    "timestep_accuracy_curve",
    "variance_report",
    "winoground_text_score",
    "winoground_image_score",
    "winoground_group_score",
    "winoground_report",
    "read_score_matrices",
    "compositional_score_matrices",
]
