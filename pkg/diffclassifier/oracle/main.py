import csv
from dataclasses import dataclass
from typing import Optional

import numpy as np
from agentlogger import log
from scipy.special import logsumexp, softmax
from scipy.stats import multivariate_normal

from diffclassifier.classifier import LossKind, point_errors
from diffclassifier.denoisers import gmm_predict_eps
from diffclassifier.diffusion import forward_noise
from diffclassifier.errors import ConfigurationError, NumericError
from diffclassifier.strategies import TimestepStrategy, make_sample_set


@dataclass
class BayesReport:
    log_densities: np.ndarray
    posterior: np.ndarray
    label: int


def _prior(model, prior):
    if prior is None:
        return np.full(model.n_classes, 1.0 / model.n_classes)
    prior = np.asarray(prior, dtype=np.float64)
    if prior.shape != (model.n_classes,) or np.any(prior < 0) or not np.isclose(prior.sum(), 1.0):
        raise ConfigurationError("prior", "prior must be a probability vector over the classes")
    return prior


def class_log_densities(model, X):
    """log p(x | k) for every row of X and every class; shape (N, K)."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64).reshape(-1, model.dim))
    out = np.empty((X.shape[0], model.n_classes))
    for k, class_components in enumerate(model.components):
        try:
            parts = [np.log(comp.weight) + np.atleast_1d(multivariate_normal.logpdf(X, comp.mean, comp.full_cov()))
                     for comp in class_components]
        except np.linalg.LinAlgError:
            raise NumericError(f"covariance of class {k} is singular", class_index=k)
        out[:, k] = logsumexp(np.stack(parts, axis=0), axis=0)
    return out


def bayes_posterior_gmm(model, x, prior=None):
    """Exact posterior over classes for one point under the known class conditionals."""
    prior = _prior(model, prior)
    log_densities = class_log_densities(model, x)[0]
    with np.errstate(divide="ignore"):
        posterior = softmax(log_densities + np.log(prior))
    return BayesReport(log_densities=log_densities, posterior=posterior, label=int(np.argmax(posterior)))


def bayes_labels(model, X, prior=None):
    prior = _prior(model, prior)
    with np.errstate(divide="ignore"):
        return np.argmax(class_log_densities(model, X) + np.log(prior)[None], axis=1)


def bayes_accuracy_on(model, X, labels, prior=None):
    return float(np.mean(bayes_labels(model, X, prior) == np.asarray(labels)))


def bayes_accuracy(model, prior, n_test, seed):
    if n_test < 1:
        raise ConfigurationError("n_test", f"need at least one test point, got {n_test}")
    prior = _prior(model, prior)
    rng = np.random.default_rng(seed)
    labels = rng.choice(model.n_classes, size=n_test, p=prior)
    X = model.sample(labels, rng)
    accuracy = bayes_accuracy_on(model, X, labels, prior)
    log(f"Bayes accuracy over {n_test} sampled points: {accuracy:.4f}", type="info")
    return accuracy


def analytic_expected_error(model, c, x, t, sched, loss=LossKind.SQUARED_L2, n_quadrature=4096, seed=0):
    """E_eps of the mean squared eps error of the Bayes-optimal denoiser at fixed (x, t).

    Single Gaussians use the closed form
    (||A sqrt(ab) (x - mu)||^2 + ||I - sqrt(1 - ab) A||_F^2) / d,
    A = sqrt(1 - ab) (ab Sigma + (1 - ab) I)^-1. Mixtures fall back to
    seeded Monte Carlo quadrature with n_quadrature draws. `t` may be a vector.
    """
    if LossKind(loss) is not LossKind.SQUARED_L2:
        raise ConfigurationError("loss", "only squared_l2 has a closed-form expected error")
    model.check_class(c)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    scalar = np.ndim(t) == 0
    ab = np.atleast_1d(sched.alpha_bar_at(t))

    if model.is_single_gaussian(c):
        comp = model.components[c][0]
        diff = x - comp.mean
        proj = diff if comp.basis is None else comp.basis.T @ diff
        m = ab[:, None] * comp.eigvals[None] + (1.0 - ab)[:, None]
        gain = np.sqrt(1.0 - ab)[:, None] / m
        bias = np.sum((gain * np.sqrt(ab)[:, None] * proj[None]) ** 2, axis=1)
        spread = np.sum((ab[:, None] * comp.eigvals[None] / m) ** 2, axis=1)
        value = (bias + spread) / model.dim
    else:
        rng = np.random.default_rng(seed)
        eps = rng.standard_normal((n_quadrature, model.dim))
        value = np.empty(len(ab))
        for i, step in enumerate(np.atleast_1d(t)):
            x_t = forward_noise(x, np.full(n_quadrature, step), eps, sched)
            eps_hat = gmm_predict_eps(model, x_t, np.full(n_quadrature, step), c, sched)
            value[i] = np.mean((eps - eps_hat) ** 2)
    return float(value[0]) if scalar else value


@dataclass
class ElboCurve:
    class_id: int
    timesteps: np.ndarray
    errors: np.ndarray
    stderr: np.ndarray
    expected: Optional[np.ndarray] = None

    @property
    def mean(self):
        return float(np.mean(self.errors))


def brute_force_elbo(x, c, denoiser, sched, n_eps_per_t, seed=0, timesteps=None, loss=LossKind.SQUARED_L2):
    """Evaluate the eps error at every timestep (or the given subset) with fresh draws per t."""
    if n_eps_per_t < 1:
        raise ConfigurationError("n_eps_per_t", "need at least one eps draw per timestep")
    x = np.asarray(x, dtype=np.float64)
    grid = np.arange(1, sched.T + 1) if timesteps is None else np.asarray(timesteps, dtype=np.int64)
    sample_set = make_sample_set(TimestepStrategy.explicit(grid), len(grid) * n_eps_per_t, sched.T, seed, x.shape)
    errors = point_errors(x, [c], denoiser, sched, sample_set, loss)[0].reshape(n_eps_per_t, len(grid))

    if n_eps_per_t > 1:
        stderr = errors.std(axis=0, ddof=1) / np.sqrt(n_eps_per_t)
    else:
        stderr = np.full(len(grid), np.nan)
    return ElboCurve(class_id=int(c), timesteps=grid, errors=errors.mean(axis=0), stderr=stderr)


def write_curves_csv(curves, path):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["t", "class", "error", "stderr", "expected"])
        for curve in curves:
            expected = [None] * len(curve.timesteps) if curve.expected is None else curve.expected
            for t, error, stderr, exact in zip(curve.timesteps, curve.errors, curve.stderr, expected):
                writer.writerow([int(t), curve.class_id, repr(float(error)), repr(float(stderr)),
                                 "" if exact is None else repr(float(exact))])
    log(f"Wrote {len(curves)} ELBO curves to {path}", type="info")
