from .main import (
    BayesReport,
    ElboCurve,
    class_log_densities,
    bayes_posterior_gmm,
    bayes_labels,
    bayes_accuracy_on,
    bayes_accuracy,
    analytic_expected_error,
    brute_force_elbo,
    write_curves_csv,
)

__all__ = [
    "BayesReport",
    "ElboCurve",
    "class_log_densities",
    "bayes_posterior_gmm",
    "bayes_labels",
    "bayes_accuracy_on",
    "bayes_accuracy",
    "analytic_expected_error",
    "brute_force_elbo",
    "write_curves_csv",
]
