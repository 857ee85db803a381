import sys
sys.path.append('.')

import csv

import numpy as np
import pytest
from scipy.stats import norm

from diffclassifier.classifier import LossKind, estimate_errors, point_errors
from diffclassifier.denoisers import GaussianClassModel, GaussianComponent, GaussianDenoiser
from diffclassifier.diffusion import ScheduleKind, build_schedule
from diffclassifier.errors import ConfigurationError
from diffclassifier.oracle import (
    analytic_expected_error,
    bayes_accuracy,
    bayes_accuracy_on,
    bayes_posterior_gmm,
    brute_force_elbo,
    write_curves_csv,
)
from diffclassifier.strategies import TimestepStrategy, make_sample_set


@pytest.fixture(scope="module")
def sched():
    return build_schedule(ScheduleKind.LINEAR, 1000)


@pytest.fixture(scope="module")
def correlated():
    cov = np.array([[1.5, 0.4, 0.0], [0.4, 0.8, 0.1], [0.0, 0.1, 0.5]])
    return GaussianClassModel([
        [GaussianComponent([1.0, -0.5, 2.0], cov)],
        [GaussianComponent([-1.0, 0.5, 0.0], np.array([0.6, 1.2, 0.9]))],
    ])


# Bayes posterior ////////////////////////////////////////////////////////////////////////////////////////
def test_symmetric_classes_at_origin():
    model = GaussianClassModel.isotropic([[2.0, 1.0], [-2.0, -1.0]])
    report = bayes_posterior_gmm(model, np.zeros(2))
    assert np.allclose(report.posterior, [0.5, 0.5]), f"Expected [0.5, 0.5], but got {report.posterior}"


def test_well_separated_mean_is_certain():
    model = GaussianClassModel.isotropic([[0.0, 0.0], [6.0, 0.0]])
    report = bayes_posterior_gmm(model, np.zeros(2))
    assert report.posterior[0] > 0.999 and report.label == 0
    assert abs(report.log_densities[0] - report.log_densities[1] - 18.0) < 1e-9


def test_single_class_posterior():
    report = bayes_posterior_gmm(GaussianClassModel.isotropic([[1.0, 1.0]]), np.array([5.0, -3.0]))
    assert np.array_equal(report.posterior, [1.0]) and report.label == 0


def test_prior_must_be_probability_vector():
    model = GaussianClassModel.isotropic([[0.0], [1.0]])
    with pytest.raises(ConfigurationError):
        bayes_posterior_gmm(model, np.zeros(1), prior=[0.7, 0.7])


def test_prior_shifts_the_decision():
    model = GaussianClassModel.isotropic([[-1.0], [1.0]])
    report = bayes_posterior_gmm(model, np.array([0.1]), prior=[0.9, 0.1])
    assert report.label == 0, f"a strong prior on class 0 should win near the boundary, got {report.posterior}"


# Bayes accuracy /////////////////////////////////////////////////////////////////////////////////////////
def test_overlapping_classes_are_chance():
    model = GaussianClassModel.isotropic([[0.0, 0.0], [0.0, 0.0]])
    accuracy = bayes_accuracy(model, None, 10000, seed=0)
    assert abs(accuracy - 0.5) < 4 * np.sqrt(0.25 / 10000), f"Expected about 0.5, but got {accuracy}"


def test_six_sigma_separation():
    model = GaussianClassModel.isotropic([[0.0, 0.0], [6.0, 0.0]])
    n = 100000
    accuracy = bayes_accuracy(model, None, n, seed=1)
    expected = norm.cdf(3.0)
    assert abs(accuracy - expected) < 4 * np.sqrt(expected * (1 - expected) / n), f"Expected ~{expected}, got {accuracy}"


def test_bayes_accuracy_is_deterministic():
    model = GaussianClassModel.isotropic([[0.0], [1.0]])
    assert bayes_accuracy(model, None, 500, seed=3) == bayes_accuracy(model, None, 500, seed=3)


def test_bayes_accuracy_needs_points():
    with pytest.raises(ConfigurationError):
        bayes_accuracy(GaussianClassModel.isotropic([[0.0]]), None, 0, seed=0)


def test_bayes_accuracy_on_given_points():
    model = GaussianClassModel.isotropic([[-5.0], [5.0]])
    X = np.array([[-4.0], [4.5], [0.5], [-0.5]])
    assert bayes_accuracy_on(model, X, [0, 1, 0, 1]) == 0.5


# Closed-form expected error /////////////////////////////////////////////////////////////////////////////
def test_expected_error_at_mean_with_identity_covariance(sched):
    model = GaussianClassModel.isotropic([[0.5, -1.0, 2.0]])
    for t in (1, 10, 300, 1000):
        ab = sched.alpha_bar_at(t)
        value = analytic_expected_error(model, 0, np.array([0.5, -1.0, 2.0]), t, sched)
        assert abs(value - ab ** 2) < 1e-12, f"t={t}: expected {ab ** 2}, but got {value}"


def test_expected_error_continuous_at_first_step(sched):
    model = GaussianClassModel.isotropic([[0.0, 0.0]])
    x = np.array([1.0, -2.0])
    values = analytic_expected_error(model, 0, x, np.array([1, 2]), sched)
    assert abs(values[0] - values[1]) < 1e-3 and abs(values[0] - 1.0) < 1e-3, f"got {values}"


def test_expected_error_matches_monte_carlo(sched, correlated):
    rng = np.random.default_rng(0)
    denoiser = GaussianDenoiser(correlated, sched)
    n = 10000
    for pair in range(20):
        c, t = pair % 2, int(rng.integers(1, sched.T + 1))
        x = rng.standard_normal(3)
        sample_set = make_sample_set(TimestepStrategy.fixed_single(t), n, sched.T, int(rng.integers(1 << 30)), (3,))
        per_point = point_errors(x, [c], denoiser, sched, sample_set)[0]
        stderr = per_point.std(ddof=1) / np.sqrt(n)
        estimate = estimate_errors(x, [c], denoiser, sched, sample_set)[0]
        exact = analytic_expected_error(correlated, c, x, t, sched)
        assert abs(estimate - exact) < 3 * stderr, f"c={c}, t={t}: {estimate} vs {exact} (stderr {stderr})"


def test_expected_error_rejects_non_l2(sched, correlated):
    with pytest.raises(ConfigurationError):
        analytic_expected_error(correlated, 0, np.zeros(3), 10, sched, loss=LossKind.L1)


def test_mixture_falls_back_to_quadrature(sched):
    model = GaussianClassModel([[GaussianComponent([2.0], [0.5], 0.5), GaussianComponent([-2.0], [0.5], 0.5)]])
    a = analytic_expected_error(model, 0, np.array([0.3]), 400, sched, n_quadrature=2000, seed=4)
    b = analytic_expected_error(model, 0, np.array([0.3]), 400, sched, n_quadrature=2000, seed=4)
    assert a == b and 0.0 < a < 2.0


def test_true_class_has_lower_expected_error_when_certain(sched):
    rng = np.random.default_rng(7)
    grid = np.arange(1, 1001, 10)
    checked = 0
    for _ in range(50):
        means = rng.normal(scale=3.0, size=(2, 4))
        model = GaussianClassModel.isotropic(means, sigma=rng.uniform(0.5, 1.5))
        x = model.sample(np.array([0]), rng)[0]
        report = bayes_posterior_gmm(model, x)
        if report.posterior.max() <= 0.99:
            continue
        checked += 1
        gap = np.mean(analytic_expected_error(model, 0, x, grid, sched) - analytic_expected_error(model, 1, x, grid, sched))
        assert np.sign(-gap) == np.sign(report.log_densities[0] - report.log_densities[1]), f"ordering mismatch at {x}"
    assert checked > 10


# Brute-force ELBO curves ////////////////////////////////////////////////////////////////////////////////
def test_brute_force_curve_matches_closed_form(sched, correlated):
    denoiser = GaussianDenoiser(correlated, sched)
    x = np.array([0.2, 0.1, 1.0])
    grid = np.array([5, 100, 400, 800])
    curve = brute_force_elbo(x, 0, denoiser, sched, 4000, seed=2, timesteps=grid)
    exact = analytic_expected_error(correlated, 0, x, grid, sched)
    assert np.all(np.abs(curve.errors - exact) < 3 * curve.stderr), f"{curve.errors} vs {exact}"


def test_brute_force_needs_draws(sched, correlated):
    with pytest.raises(ConfigurationError):
        brute_force_elbo(np.zeros(3), 0, GaussianDenoiser(correlated, sched), sched, 0)


def test_class_separation_peaks_at_intermediate_noise():
    sched = build_schedule(ScheduleKind.LINEAR, 200)
    model = GaussianClassModel.isotropic([[3.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]])
    denoiser = GaussianDenoiser(model, sched)
    x = np.array([3.0, 0.0, 0.0, 0.0])
    right = brute_force_elbo(x, 0, denoiser, sched, 200, seed=0)
    wrong = brute_force_elbo(x, 1, denoiser, sched, 200, seed=0)
    peak = int(right.timesteps[np.argmax(wrong.errors - right.errors)])
    assert 0.2 * sched.T <= peak <= 0.8 * sched.T, f"separation peaks at t={peak}"


def test_curve_mean_matches_uniform_estimate(sched, correlated):
    denoiser = GaussianDenoiser(correlated, sched)
    x = np.array([0.5, 0.5, 0.5])
    curve = brute_force_elbo(x, 1, denoiser, sched, 4, seed=1)
    sample_set = make_sample_set(TimestepStrategy.uniform(), 20000, sched.T, 9, (3,))
    per_point = point_errors(x, [1], denoiser, sched, sample_set)[0]
    combined = np.sqrt(np.nanmean(curve.stderr ** 2) / sched.T + per_point.var(ddof=1) / len(per_point))
    assert abs(curve.mean - per_point.mean()) < 3 * combined


def test_write_curves_csv(tmp_path, sched, correlated):
    denoiser = GaussianDenoiser(correlated, sched)
    curve = brute_force_elbo(np.zeros(3), 1, denoiser, sched, 2, seed=0, timesteps=[10, 20])
    path = tmp_path / "curves.csv"
    write_curves_csv([curve], path)
    with open(path) as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["t", "class", "error", "stderr", "expected"]
    assert [row[:2] for row in rows[1:]] == [["10", "1"], ["20", "1"]]
    assert all(row[4] == "" for row in rows[1:])
