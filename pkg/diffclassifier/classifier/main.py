from dataclasses import dataclass
from enum import Enum
from typing import List, Optional

import numpy as np
from agentlogger import log
from scipy.special import softmax

from diffclassifier.diffusion import NoiseVariant, forward_noise
from diffclassifier.errors import ConfigurationError, NumericError
from diffclassifier.strategies import TimestepStrategy, make_sample_set, validate_plan


class LossKind(str, Enum):
    SQUARED_L2 = "squared_l2"
    L1 = "l1"
    HUBER = "huber"


class ObjectiveKind(str, Enum):
    UNIFORM_L2 = "uniform_l2"
    VLB = "vlb"
    SUM = "sum"


@dataclass(frozen=True)
class GuidanceConfig:
    """Classifier-free guidance: eps = (1 + w) eps(x_t, c) - w eps(x_t)."""

    w: float = 0.0
    enabled: bool = False

    @property
    def active(self):
        if self.w < 0:
            raise ConfigurationError("classifier.guidance.w", f"guidance weight must be >= 0, got {self.w}")
        return self.enabled and self.w != 0


@dataclass
class TraceRecord:
    class_id: int
    trial: int
    t: int
    error: float
    sample_hash: str


@dataclass
class ClassificationResult:
    classes: List[int]
    mean_errors: np.ndarray
    trial_counts: np.ndarray
    posterior: np.ndarray
    predicted: int
    eliminated_at_stage: List[Optional[int]]
    n_evaluations: int


def crop_residual(residual, crop):
    """Keep the [crop:-crop, crop:-crop] window of a batch of spatial tensors (n, H, W, ...)."""
    if crop == 0:
        return residual
    if crop < 0:
        raise ConfigurationError("classifier.crop", f"crop must be >= 0, got {crop}")
    if residual.ndim < 3:
        raise ConfigurationError("classifier.crop", "cropping needs spatial (H, W) samples")
    height, width = residual.shape[1], residual.shape[2]
    if 2 * crop >= min(height, width):
        raise ConfigurationError("classifier.crop", f"crop {crop} leaves nothing of a {height}x{width} sample")
    return residual[:, crop:-crop, crop:-crop]


def elementwise_loss(residual, loss):
    loss = LossKind(loss)
    if loss is LossKind.SQUARED_L2:
        return residual ** 2
    if loss is LossKind.L1:
        return np.abs(residual)
    # squared below 1, absolute from 1 on
    magnitude = np.abs(residual)
    return np.where(magnitude < 1.0, residual ** 2, magnitude)


def eps_errors(eps, eps_hat, loss=LossKind.SQUARED_L2, crop=0, weights=None):
    """Per-sample mean loss for a batch of (n, ...) noise tensors and predictions."""
    eps = np.asarray(eps, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if eps.shape != eps_hat.shape:
        raise ConfigurationError("eps_hat", f"shape {eps_hat.shape} does not match eps shape {eps.shape}")
    values = elementwise_loss(eps - eps_hat, loss)
    if weights is not None:
        values = values * weights
    values = crop_residual(values, crop)
    return values.reshape(values.shape[0], -1).mean(axis=1)


def eps_error(eps, eps_hat, loss=LossKind.SQUARED_L2, crop=0, weights=None):
    """Mean (not summed) loss of eps - eps_hat, restricted to the center crop when crop > 0."""
    eps = np.asarray(eps, dtype=np.float64)
    if weights is not None:
        weights = np.asarray(weights)[None]
    return float(eps_errors(eps[None], np.asarray(eps_hat)[None], loss, crop, weights)[0])


def apply_guidance(eps_cond, eps_uncond, w):
    eps_cond = np.asarray(eps_cond, dtype=np.float64)
    eps_uncond = np.asarray(eps_uncond, dtype=np.float64)
    if eps_cond.shape != eps_uncond.shape:
        raise ConfigurationError("guidance", f"conditional {eps_cond.shape} and unconditional {eps_uncond.shape} shapes differ")
    if w < 0:
        raise ConfigurationError("classifier.guidance.w", f"guidance weight must be >= 0, got {w}")
    return (1.0 + w) * eps_cond - w * eps_uncond


def vlb_weight(t, sched):
    """beta_t^2 / (2 sigma_t^2 alpha_t (1 - alpha_bar_t)) with sigma_t^2 the clipped beta tilde."""
    beta = sched.beta_at(t)
    alpha_bar = sched.alpha_bar_at(t)
    sigma2 = sched.clipped_posterior_variance(t)
    weight = beta ** 2 / (2.0 * sigma2 * (1.0 - beta) * (1.0 - alpha_bar))
    return float(weight) if np.ndim(t) == 0 else weight


def point_errors(x, classes, denoiser, sched, sample_set, loss=LossKind.SQUARED_L2,
                 objective=ObjectiveKind.UNIFORM_L2, guidance=GuidanceConfig(), crop=0,
                 trace=None, trial_offset=0):
    """Error of every class at every (t, eps) point of one shared sample set.

    Returns an array of shape (len(classes), len(sample_set)).
    """
    objective = ObjectiveKind(objective)
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise NumericError("input has non-finite entries")
    if len(sample_set) == 0:
        raise ConfigurationError("sample_set", "sample set is empty")
    if len(classes) == 0:
        raise ConfigurationError("classes", "no classes to score")
    if objective is not ObjectiveKind.UNIFORM_L2 and not denoiser.supports_variance:
        raise ConfigurationError("objective", f"{objective.value} needs a denoiser that predicts variances")

    timesteps = sample_set.timesteps
    n = len(sample_set)
    x_t = forward_noise(x, timesteps, sample_set.noise, sched).reshape(n, -1)

    uncond = None
    if guidance.active:
        if not denoiser.supports_unconditional:
            raise ConfigurationError("classifier.guidance", "denoiser cannot predict unconditionally")
        uncond = denoiser.predict(x_t, timesteps, None)
    if objective is not ObjectiveKind.UNIFORM_L2:
        fixed_weight = (vlb_weight(timesteps, sched) * sched.clipped_posterior_variance(timesteps))[:, None]

    errors = np.empty((len(classes), n))
    for row, c in enumerate(classes):
        eps_hat = denoiser.predict(x_t, timesteps, c)
        if uncond is not None:
            eps_hat = apply_guidance(eps_hat, uncond, guidance.w)
        eps_hat = eps_hat.reshape(sample_set.noise.shape)

        total = np.zeros(n)
        if objective is not ObjectiveKind.VLB:
            total = total + eps_errors(sample_set.noise, eps_hat, loss, crop)
        if objective is not ObjectiveKind.UNIFORM_L2:
            # inverse predicted variance stands in for 1 / sigma_t^2
            weights = (fixed_weight / denoiser.predict_variance(x_t, timesteps, c)).reshape(sample_set.noise.shape)
            total = total + eps_errors(sample_set.noise, eps_hat, loss, crop, weights)
        if not np.all(np.isfinite(total)):
            raise NumericError(f"non-finite eps error for class {c}", class_index=int(c))
        errors[row] = total

    if trace is not None:
        hashes = sample_set.point_hashes()
        for row, c in enumerate(classes):
            for j in range(n):
                trace.append(TraceRecord(int(c), trial_offset + j + 1, int(timesteps[j]), float(errors[row, j]), hashes[j]))
    return errors


def estimate_errors(x, classes, denoiser, sched, sample_set, loss=LossKind.SQUARED_L2,
                    objective=ObjectiveKind.UNIFORM_L2, guidance=GuidanceConfig(), crop=0, trace=None):
    # Monte Carlo ELBO surrogate, one mean per class
    errors = point_errors(x, classes, denoiser, sched, sample_set, loss, objective, guidance, crop, trace)
    return errors.sum(axis=1) / errors.shape[1]


def posterior_from_errors(mean_errors):
    return softmax(-np.asarray(mean_errors, dtype=np.float64))


def _result(classes, sums, counts, alive, eliminated, n_evaluations):
    means = sums / np.maximum(counts, 1)
    posterior = np.zeros(len(classes))
    posterior[alive] = posterior_from_errors(means[alive])
    best = alive[int(np.argmin(means[alive]))]
    return ClassificationResult(
        classes=list(classes),
        mean_errors=means,
        trial_counts=counts,
        posterior=posterior,
        predicted=classes[best],
        eliminated_at_stage=eliminated,
        n_evaluations=int(n_evaluations),
    )


def classify_naive(x, classes, denoiser, sched, strategy=TimestepStrategy(), n_trials=64,
                   loss=LossKind.SQUARED_L2, objective=ObjectiveKind.UNIFORM_L2, guidance=GuidanceConfig(),
                   seed=0, crop=0, noise=NoiseVariant(), trace=None):
    """Score every class on one shared sample set of n_trials points and return the argmin."""
    classes = list(classes)
    x = np.asarray(x, dtype=np.float64)
    sample_set = make_sample_set(strategy, n_trials, sched.T, seed, x.shape, noise)
    errors = point_errors(x, classes, denoiser, sched, sample_set, loss, objective, guidance, crop, trace)
    counts = np.full(len(classes), n_trials, dtype=np.int64)
    return _result(classes, errors.sum(axis=1), counts, list(range(len(classes))),
                   [None] * len(classes), errors.size)


def classify_adaptive(x, classes, denoiser, sched, plan, loss=LossKind.SQUARED_L2,
                      objective=ObjectiveKind.UNIFORM_L2, guidance=GuidanceConfig(), seed=0,
                      strategy=TimestepStrategy(), crop=0, noise=NoiseVariant(), trace=None):
    """Staged elimination: after stage i only the plan.keep[i] lowest running means survive.

    All plan.trials[-1] points are drawn up front from `seed`; stage i consumes
    points trials[i-1]:trials[i], shared by every surviving class. Running
    means accumulate across stages. eliminated_at_stage is 1-based.
    """
    classes = list(classes)
    x = np.asarray(x, dtype=np.float64)
    report = validate_plan(plan, len(classes))
    if not report.ok:
        raise ConfigurationError("classifier.plan", "; ".join(d.message for d in report.diagnostics if d.severity == "error"))

    sample_set = make_sample_set(strategy, plan.trials[-1], sched.T, seed, x.shape, noise)
    sums = np.zeros(len(classes))
    counts = np.zeros(len(classes), dtype=np.int64)
    eliminated = [None] * len(classes)
    alive = list(range(len(classes)))
    previous = 0
    n_evaluations = 0

    for stage, (keep, trials) in enumerate(zip(plan.keep, plan.trials), start=1):
        chunk = sample_set.slice(previous, trials)
        errors = point_errors(x, [classes[i] for i in alive], denoiser, sched, chunk, loss, objective,
                              guidance, crop, trace, trial_offset=previous)
        sums[alive] += errors.sum(axis=1)
        counts[alive] += len(chunk)
        n_evaluations += errors.size

        means = sums[alive] / counts[alive]
        order = np.argsort(means, kind="stable")
        survivors = sorted(alive[i] for i in order[:keep])
        for i in alive:
            if i not in survivors:
                eliminated[i] = stage
        log(f"Stage {stage}: kept {len(survivors)} of {len(alive)} classes after {trials} trials", type="debug")
        alive = survivors
        previous = trials

    return _result(classes, sums, counts, alive, eliminated, n_evaluations)
