from .main import (
    Denoiser,
    GaussianComponent,
    GaussianClassModel,
    GaussianDenoiser,
    MlpDenoiser,
    TrainingResult,
    GradcheckReport,
    gmm_predict_eps,
    mlp_predict_eps,
    timestep_embedding,
    train_denoiser,
    finite_diff_gradcheck,
)

__all__ = [
    "Denoiser",
    "GaussianComponent",
    "GaussianClassModel",
    "GaussianDenoiser",
    "MlpDenoiser",
    "TrainingResult",
    "GradcheckReport",
    "gmm_predict_eps",
    "mlp_predict_eps",
    "timestep_embedding",
    "train_denoiser",
    "finite_diff_gradcheck",
]
