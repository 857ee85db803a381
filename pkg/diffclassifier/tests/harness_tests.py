import sys
sys.path.append('.')

import numpy as np
import pytest
import torch

from diffclassifier.denoisers import GaussianClassModel, GaussianDenoiser, MlpDenoiser, train_denoiser
from diffclassifier.diffusion import NoiseKind, NoiseVariant, ScheduleKind, build_schedule
from diffclassifier.errors import ConfigurationError, NumericError
from diffclassifier.harness import (
    ClassifierSettings,
    GmmParams,
    ScoreMatrix,
    classify_one,
    compositional_score_matrices,
    compositional_template_params,
    derive_seed,
    gen_dataset,
    read_score_matrices,
    run_benchmark,
    scaling_curve,
    standard_gmm_params,
    standard_template_params,
    timestep_accuracy_curve,
    variance_report,
    winoground_group_score,
    winoground_image_score,
    winoground_report,
    winoground_text_score,
)
from diffclassifier.oracle import bayes_accuracy_on
from diffclassifier.strategies import TimestepStrategy


@pytest.fixture(scope="module")
def sched():
    return build_schedule(ScheduleKind.LINEAR, 1000)


@pytest.fixture(scope="module")
def standard():
    return gen_dataset(standard_gmm_params(), 125, seed=11)


@pytest.fixture(scope="module")
def standard_denoiser(standard, sched):
    return GaussianDenoiser(standard.class_model(), sched)


# Seeds and datasets /////////////////////////////////////////////////////////////////////////////////////
def test_derive_seed_is_splitmix64():
    assert derive_seed(0, 0) == 0xE220A8397B1DCDAF, f"got {derive_seed(0, 0):#x}"


def test_derive_seed_streams_differ():
    seeds = {derive_seed(42, i) for i in range(1000)}
    assert len(seeds) == 1000 and all(0 <= s < 1 << 64 for s in seeds)


def test_gen_dataset_counts_and_order():
    dataset = gen_dataset(standard_gmm_params(n_classes=3, dim=4), 5, seed=0)
    assert len(dataset) == 15 and dataset.sample_shape == (4,)
    assert dataset.labels.tolist() == [0] * 5 + [1] * 5 + [2] * 5


def test_gen_dataset_is_deterministic():
    params = standard_template_params(n_classes=3, size=4)
    a = gen_dataset(params, 4, seed=9)
    b = gen_dataset(params, 4, seed=9)
    assert np.array_equal(a.X, b.X) and np.array_equal(a.labels, b.labels)


def test_noiseless_templates_equal_their_templates():
    params = standard_template_params(n_classes=2, size=6, sigma=0.0)
    dataset = gen_dataset(params, 3, seed=1)
    assert np.array_equal(dataset.X, params.templates[dataset.labels]), "sigma = 0 samples differ from templates"


def test_noiseless_templates_have_no_density():
    with pytest.raises(NumericError):
        standard_template_params(sigma=0.0).class_model()


def test_gen_dataset_needs_samples():
    with pytest.raises(ConfigurationError):
        gen_dataset(standard_gmm_params(), 0, seed=0)


def test_gmm_params_rejects_mismatched_covs():
    with pytest.raises(ConfigurationError):
        GmmParams(means=np.zeros((2, 3)), covs=np.ones((2, 4)))


def test_compositional_classes_share_parts():
    templates = compositional_template_params(size=8).templates
    assert templates.shape == (4, 8, 8)
    # every class uses the same pixel values, only placed differently
    counts = [sorted(np.unique(t, return_counts=True)[1].tolist()) for t in templates]
    assert all(c == counts[0] for c in counts), f"part pixel counts differ: {counts}"
    assert len({t.tobytes() for t in templates}) == 4


# Benchmarks /////////////////////////////////////////////////////////////////////////////////////////////
def test_benchmark_agrees_with_bayes_oracle(standard, standard_denoiser, sched):
    settings = ClassifierSettings(strategy=TimestepStrategy.uniform(), n_trials=64)
    report = run_benchmark(standard, settings, standard_denoiser, sched, seed=0)
    bayes = bayes_accuracy_on(standard.class_model(), standard.X, standard.labels)
    accuracy = report.rows[0]["accuracy"]
    assert abs(accuracy - bayes) < 0.02, f"diffusion classifier {accuracy} vs Bayes {bayes}"
    assert report.rows[0]["evaluations"] == 500 * 4 * 64


def test_single_class_single_sample(sched):
    dataset = gen_dataset(standard_gmm_params(n_classes=1, dim=2), 1, seed=0)
    report = run_benchmark(dataset, ClassifierSettings(n_trials=4), GaussianDenoiser(dataset.class_model(), sched),
                           sched, seed=0)
    assert report.rows[0]["accuracy"] == 1.0 and report.rows[0]["mean_per_class_accuracy"] == 1.0


def test_benchmark_rejects_zero_workers(standard, standard_denoiser, sched):
    with pytest.raises(ConfigurationError):
        run_benchmark(standard.subset([0]), ClassifierSettings(n_trials=2), standard_denoiser, sched, seed=0, workers=0)


def test_benchmark_report_is_deterministic(tmp_path, standard, standard_denoiser, sched):
    subset = standard.subset(np.arange(0, 500, 25))
    settings = ClassifierSettings(n_trials=8)
    paths = []
    for run in range(2):
        report = run_benchmark(subset, settings, standard_denoiser, sched, seed=5)
        paths.append(tmp_path / f"run{run}.csv")
        report.to_csv(paths[-1])
    assert paths[0].read_bytes() == paths[1].read_bytes(), "reruns with the same seed differ"
    assert b"wall_time" not in paths[0].read_bytes()


def test_csv_includes_timing_on_request(tmp_path, standard, standard_denoiser, sched):
    report = run_benchmark(standard.subset([0, 200]), ClassifierSettings(n_trials=2), standard_denoiser, sched, seed=0)
    path = tmp_path / "timed.csv"
    report.to_csv(path, timing=True)
    header = path.read_text().splitlines()[0].split(",")
    assert header[:2] == ["config_hash", "seed"] and "wall_time" in header


def test_workers_do_not_change_results(standard, standard_denoiser, sched):
    subset = standard.subset(np.arange(0, 500, 10))
    settings = ClassifierSettings(n_trials=8)
    serial = run_benchmark(subset, settings, standard_denoiser, sched, seed=3, workers=1)
    threaded = run_benchmark(subset, settings, standard_denoiser, sched, seed=3, workers=4)
    assert [r.predicted for r in serial.results] == [r.predicted for r in threaded.results]
    assert all(np.array_equal(a.mean_errors, b.mean_errors) for a, b in zip(serial.results, threaded.results))


def test_benchmark_traces(standard, standard_denoiser, sched):
    report = run_benchmark(standard.subset([0, 1]), ClassifierSettings(n_trials=3), standard_denoiser, sched,
                           seed=0, trace=True)
    assert [len(records) for records in report.traces] == [12, 12]


def test_config_hash_tracks_settings():
    assert ClassifierSettings(n_trials=8).config_hash() == ClassifierSettings(n_trials=8).config_hash()
    assert ClassifierSettings(n_trials=8).config_hash() != ClassifierSettings(n_trials=16).config_hash()


# Pruning ////////////////////////////////////////////////////////////////////////////////////////////////
def test_pruning_to_all_classes_changes_nothing(standard, standard_denoiser, sched):
    model = standard.class_model()
    for i in range(0, 500, 50):
        plain = classify_one(standard.X[i], standard_denoiser, sched, ClassifierSettings(n_trials=16), seed=i)
        pruned = classify_one(standard.X[i], standard_denoiser, sched, ClassifierSettings(n_trials=16, prune_k=4),
                              seed=i, class_model=model)
        assert plain.predicted == pruned.predicted and np.array_equal(plain.mean_errors, pruned.mean_errors)


def test_pruning_needs_class_model(standard, standard_denoiser, sched):
    with pytest.raises(ConfigurationError):
        classify_one(standard.X[0], standard_denoiser, sched, ClassifierSettings(prune_k=2), seed=0)


def test_pruning_37_classes_halves_evaluations(sched):
    dataset = gen_dataset(standard_gmm_params(n_classes=37, dim=37), 2, seed=4)
    denoiser = GaussianDenoiser(dataset.class_model(), sched)
    full = run_benchmark(dataset, ClassifierSettings(n_trials=32), denoiser, sched, seed=1).rows[0]
    pruned = run_benchmark(dataset, ClassifierSettings(n_trials=32, prune_k=5, label_noise=0.2), denoiser, sched,
                           seed=1).rows[0]
    assert pruned["evaluations"] <= 0.5 * full["evaluations"], f"{pruned['evaluations']} vs {full['evaluations']}"
    assert full["accuracy"] - pruned["accuracy"] < 0.02, f"accuracy {full['accuracy']} -> {pruned['accuracy']}"


# Noise variants /////////////////////////////////////////////////////////////////////////////////////////
def test_zero_noise_reduces_to_nearest_mean(standard, standard_denoiser, sched):
    # with an exact denoiser and shared isotropic covariance, eps = 0 ranks classes by distance to the mean
    settings = ClassifierSettings(n_trials=16, noise=NoiseVariant(NoiseKind.ZERO))
    accuracy = run_benchmark(standard, settings, standard_denoiser, sched, seed=0).rows[0]["accuracy"]
    bayes = bayes_accuracy_on(standard.class_model(), standard.X, standard.labels)
    assert abs(accuracy - bayes) <= 1.0 / len(standard), f"zero noise {accuracy} vs Bayes {bayes}"


def test_zero_noise_is_worse_when_scales_differ(sched):
    params = GmmParams(means=np.zeros((2, 8)), covs=np.array([[0.25] * 8, [4.0] * 8]))
    dataset = gen_dataset(params, 100, seed=2)
    denoiser = GaussianDenoiser(dataset.class_model(), sched)
    standard = run_benchmark(dataset, ClassifierSettings(n_trials=64), denoiser, sched, seed=0).rows[0]["accuracy"]
    zero = run_benchmark(dataset, ClassifierSettings(n_trials=64, noise=NoiseVariant(NoiseKind.ZERO)), denoiser,
                         sched, seed=0).rows[0]["accuracy"]
    assert zero == 0.5, f"zero noise should always pick the wider class, got accuracy {zero}"
    assert standard > 0.8 and zero <= standard, f"standard {standard} vs zero {zero}"


# Studies ////////////////////////////////////////////////////////////////////////////////////////////////
def test_scaling_rejects_bad_budgets(standard, standard_denoiser, sched):
    for budgets in ([], [0, 4], [4, 4], [8, 2]):
        with pytest.raises(ConfigurationError):
            scaling_curve(standard, [TimestepStrategy.uniform()], budgets, 0, standard_denoiser, sched)


def test_scaling_single_row(standard, standard_denoiser, sched):
    report = scaling_curve(standard.subset([0, 130]), [TimestepStrategy.evenly_spaced(0)], [4], 0,
                           standard_denoiser, sched)
    assert len(report.rows) == 1
    assert report.rows[0]["strategy"] == "evenly_spaced" and report.rows[0]["trials"] == 4


def test_timestep_curve_with_exact_denoiser(sched):
    params = standard_template_params(n_classes=4, size=8, sigma=1.0, seed=0)
    dataset = gen_dataset(params, 50, seed=3)
    denoiser = GaussianDenoiser(dataset.class_model(), sched)
    report = timestep_accuracy_curve(dataset, 0, denoiser, sched)
    accuracy = {row["t"]: row["accuracy"] for row in report.rows}
    assert len(report.rows) == 11 and report.rows[0]["t"] == 1 and report.rows[-1]["t"] == sched.T
    # at t = 1 the class signal is buried under the shared noise term
    assert accuracy[1] < 0.5 and accuracy[301] > 0.95, f"{accuracy}"
    best = max(report.rows, key=lambda row: row["accuracy"])
    assert best["t"] >= 0.2 * sched.T, f"curve peaks at t={best['t']}: {accuracy}"


def test_variance_identical_classes_pair_exactly(sched):
    denoiser = GaussianDenoiser(GaussianClassModel.isotropic([[1.0, 0.0], [1.0, 0.0]]), sched)
    report = variance_report(np.array([0.5, 0.5]), [0, 1], denoiser, sched, n_sample_sets=10, set_size=4, seed=0)
    assert report.paired_variance == 0.0 and report.unpaired_variance > 0.0


def test_paired_estimator_has_lower_variance(standard, standard_denoiser, sched):
    subset = standard.subset(np.arange(0, 500, 5))
    wins = 0
    for i, (x, label) in enumerate(subset.samples):
        report = variance_report(x, [label, (label + 1) % 4], standard_denoiser, sched,
                                 n_sample_sets=40, set_size=16, seed=derive_seed(0, i))
        wins += report.paired_variance < report.unpaired_variance
    assert wins >= 95, f"paired variance was lower for only {wins} of 100 inputs"


def test_variance_with_single_point_sets(standard, standard_denoiser, sched):
    report = variance_report(standard.X[0], [0, 1], standard_denoiser, sched, n_sample_sets=5, set_size=1, seed=0)
    assert np.isfinite(report.paired_variance) and np.isfinite(report.unpaired_variance)


def test_variance_needs_two_classes(standard, standard_denoiser, sched):
    with pytest.raises(ConfigurationError):
        variance_report(standard.X[0], [0], standard_denoiser, sched, n_sample_sets=5, set_size=4, seed=0)


# Winoground /////////////////////////////////////////////////////////////////////////////////////////////
def test_text_score_examples():
    examples = [ScoreMatrix([[2, 1], [1, 2]]), ScoreMatrix([[1, 2], [2, 1]]), ScoreMatrix([[1, 1], [1, 2]])]
    assert [winoground_text_score([e]) for e in examples] == [1.0, 0.0, 0.0]
    assert abs(winoground_text_score(examples) - 1 / 3) < 1e-12


def test_text_score_ignores_per_image_shifts():
    rng = np.random.default_rng(0)
    examples = [ScoreMatrix(rng.standard_normal((2, 2))) for _ in range(200)]
    shifted = [ScoreMatrix(e.scores + rng.normal(scale=10.0, size=(1, 2))) for e in examples]
    assert winoground_text_score(examples) == winoground_text_score(shifted)


def test_image_and_group_scores():
    # text correct, image wrong
    example = ScoreMatrix([[1, 2], [0, 3]])
    assert (winoground_text_score([example]), winoground_image_score([example]), winoground_group_score([example])) \
        == (1.0, 0.0, 0.0)


def test_empty_examples_score_zero():
    assert winoground_text_score([]) == 0.0


def test_score_matrix_rejects_bad_shapes():
    with pytest.raises(ConfigurationError):
        ScoreMatrix([[1, 2, 3], [4, 5, 6]])
    with pytest.raises(ConfigurationError):
        ScoreMatrix([[1, np.nan], [0, 1]])


def test_read_score_matrices(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text(
        "example-id,i,j,score,tag\n"
        "a,0,0,2,object\n"
        "a,0,1,1,object\n"
        "a,1,0,1,object\n"
        "a,1,1,2,object\n"
        "b,0,0,1,\n"
        "b,0,1,2,\n"
        "b,1,0,2,\n"
        "b,1,1,1,\n"
    )
    examples = read_score_matrices(path)
    assert [e.example_id for e in examples] == ["a", "b"]
    assert examples[0].tag == "object" and examples[1].tag is None
    report = winoground_report(examples)
    rows = {row["tag"]: row for row in report.rows}
    assert rows["all"]["text_score"] == 0.5 and rows["object"]["text_score"] == 1.0


def test_read_score_matrices_missing_entry(tmp_path):
    path = tmp_path / "scores.csv"
    path.write_text("a,0,0,1\na,0,1,1\na,1,0,1\n")
    with pytest.raises(ConfigurationError):
        read_score_matrices(path)


def test_compositional_score_matrices(sched):
    params = compositional_template_params(size=8, sigma=0.5)
    denoiser = GaussianDenoiser(params.class_model(), sched)
    examples = compositional_score_matrices(params, denoiser, sched, 1, seed=0, settings=ClassifierSettings(n_trials=32))
    assert len(examples) == 6 and {e.tag for e in examples} == {"object", "relation", "both"}
    assert winoground_text_score(examples) >= 5 / 6, f"text score {winoground_text_score(examples)}"
    again = compositional_score_matrices(params, denoiser, sched, 1, seed=0, settings=ClassifierSettings(n_trials=32))
    assert all(np.array_equal(a.scores, b.scores) for a, b in zip(examples, again))


# Acceptance-scale runs //////////////////////////////////////////////////////////////////////////////////
@pytest.mark.slow
def test_timestep_curve_with_trained_mlp(sched):
    params = standard_template_params(n_classes=4, size=8, sigma=1.0, seed=0)
    train = gen_dataset(params, 256, seed=1)
    torch.manual_seed(0)
    net = MlpDenoiser(64, 4, sched, hidden=(256, 256))
    train_denoiser(net, train.X, train.labels, sched, steps=4000, batch_size=128, learning_rate=1e-3, seed=0,
                   log_every=500)
    test = gen_dataset(params, 50, seed=2)
    report = timestep_accuracy_curve(test, 0, net, sched)
    accuracy = {row["t"]: row["accuracy"] for row in report.rows}
    best = max(report.rows, key=lambda row: row["accuracy"])
    assert 0.2 * sched.T <= best["t"] <= 0.8 * sched.T, f"curve peaks at t={best['t']}: {accuracy}"
    assert best["accuracy"] - accuracy[1] >= 0.1 and best["accuracy"] - accuracy[sched.T] >= 0.1, f"{accuracy}"


@pytest.mark.slow
def test_scaling_direction(standard, standard_denoiser, sched):
    strategies = [TimestepStrategy.uniform(), TimestepStrategy.evenly_spaced(0), TimestepStrategy.window(500, 25)]
    report = scaling_curve(standard, strategies, [1, 4, 16, 64], 0, standard_denoiser, sched)
    by_strategy = {}
    for row in report.rows:
        by_strategy.setdefault(row["strategy"], []).append(row["accuracy"])
    for label, accuracies in by_strategy.items():
        assert all(b >= a - 0.01 - 1e-9 for a, b in zip(accuracies, accuracies[1:])), f"{label} drops: {accuracies}"
    assert by_strategy["evenly_spaced"][-1] >= by_strategy["window(500,25)"][-1] - 0.01 - 1e-9, f"{by_strategy}"
