import argparse
import csv
import os

import numpy as np
import torch
from agentlogger import log

from diffclassifier.commands.checkpoint import load_checkpoint, save_checkpoint
from diffclassifier.commands.config import COMPOSITIONAL, apply_overrides, parse_config
from diffclassifier.denoisers import GaussianDenoiser, MlpDenoiser, finite_diff_gradcheck, train_denoiser
from diffclassifier.errors import CheckpointError, ConfigurationError, NumericError
from diffclassifier.harness import (
    compositional_score_matrices,
    compositional_template_params,
    default_timestep_grid,
    derive_seed,
    gen_dataset,
    read_score_matrices,
    run_benchmark,
    scaling_curve,
    timestep_accuracy_curve,
    variance_report,
    winoground_report,
)
from diffclassifier.oracle import analytic_expected_error, bayes_accuracy_on, brute_force_elbo, write_curves_csv
from diffclassifier.strategies import parse_timesteps

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERIC = 3

# seed streams derived from the master seed
TRAIN_STREAM = 1
TEST_STREAM = 2
CLASSIFY_STREAM = 3


def write_csv(path, headers, rows):
    with open(path, "w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(headers)
        writer.writerows(rows)
    log(f"Saved results to {path}", type="info")


def _output(config, name):
    os.makedirs(config.output_dir, exist_ok=True)
    return os.path.join(config.output_dir, name)


def build_mlp(config, sched, params):
    section = config.denoiser
    torch.manual_seed(config.seed)
    return MlpDenoiser(
        data_dim=int(np.prod(params.sample_shape)),
        n_classes=params.n_classes,
        sched=sched,
        hidden=section["hidden"],
        time_dim=section["time_dim"],
        activation=section["activation"],
        supports_unconditional=section["supports_unconditional"],
        learn_variance=section["learn_variance"],
        zero_init_output=section["zero_init_output"],
    )


def train_mlp(config, sched, params):
    training = config.denoiser["training"]
    data = gen_dataset(params, training["n_per_class"], derive_seed(config.seed, TRAIN_STREAM))
    net = build_mlp(config, sched, params)
    return train_denoiser(
        net, data.X, data.labels, sched,
        steps=training["steps"],
        batch_size=training["batch_size"],
        learning_rate=training["learning_rate"],
        seed=config.seed,
        p_uncond=training["p_uncond"],
        weight_decay=training["weight_decay"],
        log_every=training["log_every"],
        vlb_lambda=training["vlb_lambda"],
    )


def resolve_denoiser(config, sched, params):
    # MLP without a checkpoint is trained in-process
    if config.denoiser["kind"] == "analytic":
        return GaussianDenoiser(params.class_model(), sched), sched
    path = config.denoiser["checkpoint"]
    if path is None:
        return train_mlp(config, sched, params).net, sched
    net, _ = load_checkpoint(path)
    if net.n_classes != params.n_classes or net.data_dim != int(np.prod(params.sample_shape)):
        raise ConfigurationError("denoiser.checkpoint", "checkpoint does not match the dataset shape or class count")
    return net, net.sched


def _test_data(config):
    params = config.dataset_params()
    sched = config.noise_schedule()
    denoiser, sched = resolve_denoiser(config, sched, params)
    dataset = gen_dataset(params, config.dataset["n_per_class"], derive_seed(config.seed, TEST_STREAM))
    return dataset, denoiser, sched


# COMMANDS
def train_command(config, args):
    if config.denoiser["kind"] != "mlp":
        raise ConfigurationError("denoiser.kind", "train needs an mlp denoiser")
    params = config.dataset_params()
    result = train_mlp(config, config.noise_schedule(), params)
    save_checkpoint(result.net, config, _output(config, "denoiser.dck"))
    write_csv(_output(config, "train_loss.csv"), ["step", "loss"], [[step, repr(loss)] for step, loss in result.trace])
    return EXIT_OK


def classify_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    report = run_benchmark(dataset, config.settings(), denoiser, sched, derive_seed(config.seed, CLASSIFY_STREAM),
                           config.workers, trace=args.trace, name="classify")
    rows = [
        [i, int(label), int(result.predicted), repr(float(np.max(result.posterior))), result.n_evaluations]
        for i, (label, result) in enumerate(zip(dataset.labels, report.results))
    ]
    write_csv(_output(config, "predictions.csv"), ["sample", "label", "predicted", "posterior", "evaluations"], rows)
    if args.trace:
        trace_rows = [
            [i, record.class_id, record.trial, record.t, repr(record.error), record.sample_hash]
            for i, records in enumerate(report.traces)
            for record in records
        ]
        write_csv(_output(config, "trace.csv"), ["sample", "class", "trial", "t", "error", "sample_hash"], trace_rows)
    return EXIT_OK


def bayes_yardstick(dataset):
    try:
        model = dataset.class_model()
    except NumericError as error:
        log(f"No Bayes accuracy for this dataset: {error}", type="warning", color="yellow")
        return float("nan")
    return bayes_accuracy_on(model, dataset.X, dataset.labels)


def benchmark_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    report = run_benchmark(dataset, config.settings(), denoiser, sched, derive_seed(config.seed, CLASSIFY_STREAM),
                           config.workers)
    bayes = bayes_yardstick(dataset)
    log(f"Bayes accuracy on the same samples: {bayes:.4f}", type="info")
    report.rows[0]["bayes_accuracy"] = bayes
    report.columns.insert(report.columns.index("accuracy") + 1, "bayes_accuracy")
    report.to_csv(_output(config, "benchmark.csv"), timing=config.timing)
    return EXIT_OK


def sweep_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    grid = config.sweep["grid"]
    if grid is None:
        grid = default_timestep_grid(sched.T, config.sweep["n_points"])
    report = timestep_accuracy_curve(dataset, derive_seed(config.seed, CLASSIFY_STREAM), denoiser, sched, grid,
                                     config.settings(), config.workers)
    report.to_csv(_output(config, "timesteps.csv"))
    return EXIT_OK


def scaling_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    report = scaling_curve(dataset, config.scaling_strategies(), config.scaling["budgets"],
                           derive_seed(config.seed, CLASSIFY_STREAM), denoiser, sched, config.settings(), config.workers)
    report.to_csv(_output(config, "scaling.csv"), timing=config.timing)
    return EXIT_OK


def curves_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    section = config.oracle
    if section["sample"] >= len(dataset):
        raise ConfigurationError("oracle.sample", f"index {section['sample']} is past the {len(dataset)} test samples")
    grid = config.sweep["grid"]
    if grid is None:
        grid = default_timestep_grid(sched.T, config.sweep["n_points"])
    x = dataset.X[section["sample"]]
    seed = derive_seed(config.seed, CLASSIFY_STREAM)
    loss = config.settings().loss
    # closed form only for the analytic backend under squared L2
    model = denoiser.model if isinstance(denoiser, GaussianDenoiser) and loss.value == "squared_l2" else None

    curves = []
    for c in range(dataset.n_classes):
        curve = brute_force_elbo(x, c, denoiser, sched, section["n_eps_per_t"], derive_seed(seed, c), grid, loss)
        if model is not None:
            curve.expected = analytic_expected_error(model, c, x, curve.timesteps, sched,
                                                     n_quadrature=section["n_quadrature"],
                                                     seed=derive_seed(seed, dataset.n_classes + c))
        curves.append(curve)
    write_curves_csv(curves, _output(config, "curves.csv"))
    return EXIT_OK


def variance_command(config, args):
    dataset, denoiser, sched = _test_data(config)
    section = config.variance
    n_classes = dataset.n_classes
    if n_classes < 2:
        raise ConfigurationError("dataset.n_classes", "variance needs at least two classes")
    n_inputs = min(section["n_inputs"], len(dataset))
    # spread the inputs over all classes
    picks = np.linspace(0, len(dataset) - 1, n_inputs).astype(np.int64)
    rows = []
    for i in picks:
        label = int(dataset.labels[i])
        report = variance_report(dataset.X[i], [label, (label + 1) % n_classes], denoiser, sched,
                                 section["n_sample_sets"], section["set_size"], derive_seed(config.seed, int(i)),
                                 config.settings())
        rows.append([int(i), *report.classes, repr(report.paired_variance), repr(report.unpaired_variance), repr(report.reduction)])
    wins = sum(1 for row in rows if float(row[3]) < float(row[4]))
    log(f"Paired variance below unpaired for {wins} of {len(rows)} inputs", type="info")
    write_csv(_output(config, "variance.csv"),
              ["sample", "class_a", "class_b", "paired_variance", "unpaired_variance", "ratio"], rows)
    return EXIT_OK


def winoground_command(config, args):
    section = config.winoground
    if section["scores"] is not None:
        examples = read_score_matrices(section["scores"])
    else:
        params = compositional_template_params(section["size"], section["sigma"])
        if config.denoiser["kind"] == "mlp" and config.dataset["kind"] != COMPOSITIONAL:
            raise ConfigurationError("dataset.kind", "winoground with an mlp denoiser needs the compositional dataset")
        if config.denoiser["kind"] == "mlp":
            params = config.dataset_params()
        denoiser, sched = resolve_denoiser(config, config.noise_schedule(), params)
        examples = compositional_score_matrices(params, denoiser, sched, section["n_per_pair"],
                                                derive_seed(config.seed, CLASSIFY_STREAM), config.settings())
    report = winoground_report(examples, config.seed, config.settings().config_hash())
    report.to_csv(_output(config, "winoground.csv"))
    return EXIT_OK


def gradcheck_command(config, args):
    params = config.dataset_params()
    sched = config.noise_schedule()
    net = build_mlp(config, sched, params)
    data = gen_dataset(params, 2, derive_seed(config.seed, TRAIN_STREAM))
    report = finite_diff_gradcheck(net, (data.X, data.labels), sched, seed=config.seed)
    write_csv(_output(config, "gradcheck.csv"), ["max_rel_deviation", "n_parameters", "tolerance", "passed"],
              [[repr(report.max_rel_deviation), report.n_parameters, report.tolerance, report.passed]])
    if not report.passed:
        raise NumericError(f"gradient check failed: deviation {report.max_rel_deviation:.3e} >= {report.tolerance}")
    return EXIT_OK


def _common_arguments():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=str, required=True, help="JSON run config")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--workers", type=int, default=None, help="parallel workers over test samples")
    common.add_argument("--output-dir", type=str, default=None, help="directory for CSV reports and checkpoints")
    common.add_argument("--timesteps", type=str, default=None, help="comma-separated explicit timesteps, e.g. 100,500,900")
    return common


# Define every subcommand here and bind it to its handler
def register_commands(subparsers):
    common = _common_arguments()
    commands = {
        "train": (train_command, "train an MLP denoiser and write a checkpoint"),
        "classify": (classify_command, "classify the test set and write per-sample predictions"),
        "benchmark": (benchmark_command, "accuracy of the configured classifier next to the Bayes accuracy"),
        "curves": (curves_command, "per-timestep eps error of every class for one test input"),
        "sweep-timesteps": (sweep_command, "accuracy of single-timestep classifiers over a grid of t"),
        "scaling": (scaling_command, "accuracy per timestep strategy and trial budget"),
        "variance": (variance_command, "paired vs unpaired variance of error differences"),
        "winoground": (winoground_command, "text, image and group scores"),
        "gradcheck": (gradcheck_command, "finite-difference check of the MLP gradients"),
    }
    for name, (handler, help_text) in commands.items():
        parser = subparsers.add_parser(name, parents=[common], help=help_text)
        parser.set_defaults(handler=handler)
        if name == "classify":
            parser.add_argument("--trace", action="store_true", help="write per-trial records to trace.csv")


def build_parser():
    parser = argparse.ArgumentParser(prog="diffclassifier", description="Diffusion models as zero-shot classifiers")
    subparsers = parser.add_subparsers(dest="command", required=True)
    register_commands(subparsers)
    return parser


def run(argv=None):
    args = build_parser().parse_args(argv)
    try:
        config = parse_config(args.config)
        timesteps = parse_timesteps(args.timesteps) if args.timesteps is not None else None
        config = apply_overrides(config, args.seed, args.workers, args.output_dir, timesteps)
        log(f"Running {args.command} with seed {config.seed}", type="info")
        return args.handler(config, args)
    except ConfigurationError as error:
        log(f"Configuration error: {error}", type="error", color="red")
        return EXIT_CONFIG
    except (NumericError, CheckpointError) as error:
        log(f"Numeric failure: {error}", type="error", color="red")
        return EXIT_NUMERIC
