import csv
import hashlib
import json
import time
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import List, Optional

import numpy as np
from agentlogger import log

from diffclassifier.classifier import (
    GuidanceConfig,
    LossKind,
    ObjectiveKind,
    classify_adaptive,
    classify_naive,
    estimate_errors,
)
from diffclassifier.denoisers import GaussianClassModel, GaussianComponent
from diffclassifier.diffusion import NoiseVariant
from diffclassifier.errors import ConfigurationError, NumericError
from diffclassifier.oracle import class_log_densities
from diffclassifier.strategies import PruneConfig, StagePlan, StrategyKind, TimestepStrategy, make_sample_set

MASK64 = (1 << 64) - 1


def derive_seed(master, index):
    """Per-item seed: one splitmix64 step over master + (index + 1) * golden gamma."""
    z = (int(master) + (int(index) + 1) * 0x9E3779B97F4A7C15) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


# DATASETS
class DatasetKind(str, Enum):
    GMM_VECTORS = "gmm_vectors"
    TEMPLATE_IMAGES = "template_images"


@dataclass
class GmmParams:
    """Class conditionals for GMMVectors.

    `means` is (K, d) for one Gaussian per class or (K, M, d) for equally
    weighted M-component mixtures. `covs` holds matching diagonals (or full
    (d, d) matrices); when omitted every component gets sigma^2 I.
    """

    means: np.ndarray
    covs: Optional[np.ndarray] = None
    sigma: float = 1.0

    kind = DatasetKind.GMM_VECTORS

    def __post_init__(self):
        self.means = np.asarray(self.means, dtype=np.float64)
        single = self.means.ndim == 2
        if single:
            self.means = self.means[:, None, :]
        if self.means.ndim != 3 or self.means.shape[0] < 1:
            raise ConfigurationError("dataset.means", f"expected (K, d) or (K, M, d) means, got shape {self.means.shape}")
        if self.covs is None:
            if self.sigma <= 0:
                raise ConfigurationError("dataset.sigma", f"sigma must be positive, got {self.sigma}")
            self.covs = np.full(self.means.shape, self.sigma ** 2)
            return
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if single:
            self.covs = self.covs[:, None]
        d = self.means.shape[2]
        if self.covs.shape not in (self.means.shape, self.means.shape + (d,)):
            raise ConfigurationError("dataset.covs", f"covariances of shape {self.covs.shape} do not match the means")

    @property
    def n_classes(self):
        return self.means.shape[0]

    @property
    def sample_shape(self):
        return (self.means.shape[2],)

    def class_model(self):
        n_components = self.means.shape[1]
        return GaussianClassModel([
            [GaussianComponent(mu, cov, 1.0 / n_components) for mu, cov in zip(means, covs)]
            for means, covs in zip(self.means, self.covs)
        ])


@dataclass
class TemplateParams:
    """Class templates of shape (K, H, W) plus i.i.d. N(0, sigma^2) pixel noise, clipped to [-clip, clip]."""

    templates: np.ndarray
    sigma: float = 0.5
    clip: float = 4.0

    kind = DatasetKind.TEMPLATE_IMAGES

    def __post_init__(self):
        self.templates = np.asarray(self.templates, dtype=np.float64)
        if self.templates.ndim != 3 or self.templates.shape[0] < 1:
            raise ConfigurationError("dataset.templates", f"expected (K, H, W) templates, got shape {self.templates.shape}")
        if self.sigma < 0:
            raise ConfigurationError("dataset.sigma", f"sigma must be >= 0, got {self.sigma}")
        if not self.clip > 0:
            raise ConfigurationError("dataset.clip", f"clip must be positive, got {self.clip}")

    @property
    def n_classes(self):
        return self.templates.shape[0]

    @property
    def sample_shape(self):
        return self.templates.shape[1:]

    def class_model(self):
        # clipping is ignored; at sigma << clip it is never active
        if self.sigma <= 0:
            raise NumericError("zero-noise templates have no density", class_index=0)
        flat = self.templates.reshape(self.n_classes, -1)
        return GaussianClassModel.isotropic(flat, self.sigma)


def standard_gmm_params(n_classes=4, dim=8, separation=6.0, sigma=1.0):
    """Classes at (separation / sqrt(2)) e_k, so every pair of means is `separation` apart."""
    if n_classes > dim:
        raise ConfigurationError("dataset.n_classes", f"{n_classes} orthogonal means do not fit in {dim} dimensions")
    means = np.zeros((n_classes, dim))
    means[np.arange(n_classes), np.arange(n_classes)] = separation / np.sqrt(2.0)
    return GmmParams(means=means, sigma=sigma)


def standard_template_params(n_classes=4, size=8, sigma=0.5, seed=0):
    """Random +-1 templates, fixed by `seed`."""
    rng = np.random.default_rng(seed)
    templates = rng.choice([-1.0, 1.0], size=(n_classes, size, size))
    return TemplateParams(templates=templates, sigma=sigma)


# caption pair -> swap type, over the four compositional classes
COMPOSITIONAL_PAIRS = [
    (0, 1, "object"),
    (2, 3, "object"),
    (0, 2, "relation"),
    (1, 3, "relation"),
    (0, 3, "both"),
    (1, 2, "both"),
]


def compositional_template_params(size=8, sigma=0.5):
    """Four classes built from the same two parts.

    Part P is a solid block and part Q a checkerboard. Classes 0/1 place them
    side by side (P left, then Q left), classes 2/3 stack them (P on top, then
    Q on top).
    """
    if size < 4 or size % 4:
        raise ConfigurationError("dataset.size", f"compositional templates need a size divisible by 4, got {size}")
    half, quarter = size // 2, size // 4
    solid = np.ones((half, half))
    checker = np.where((np.add.outer(np.arange(half), np.arange(half)) % 2) == 0, 1.0, -1.0)

    templates = np.zeros((4, size, size))
    band = slice(quarter, quarter + half)
    for k, (first, second) in enumerate([(solid, checker), (checker, solid)]):
        templates[k, band, :half] = first
        templates[k, band, half:] = second
        templates[k + 2, :half, band] = first
        templates[k + 2, half:, band] = second
    return TemplateParams(templates=templates, sigma=sigma)


@dataclass
class SyntheticDataset:
    kind: DatasetKind
    X: np.ndarray
    labels: np.ndarray
    params: object
    seed: int

    def __len__(self):
        return len(self.labels)

    @property
    def samples(self):
        return list(zip(self.X, (int(label) for label in self.labels)))

    @property
    def n_classes(self):
        return self.params.n_classes

    @property
    def sample_shape(self):
        return tuple(self.X.shape[1:])

    def class_model(self):
        return self.params.class_model()

    def subset(self, indices):
        indices = np.asarray(indices, dtype=np.int64)
        return SyntheticDataset(self.kind, self.X[indices], self.labels[indices], self.params, self.seed)


def _noisy_templates(params, labels, rng):
    X = params.templates[labels] + params.sigma * rng.standard_normal((len(labels),) + params.sample_shape)
    return np.clip(X, -params.clip, params.clip)


def gen_dataset(params, n_per_class, seed):
    if n_per_class < 1:
        raise ConfigurationError("dataset.n_per_class", f"need at least one sample per class, got {n_per_class}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(params.n_classes), n_per_class)
    if params.kind is DatasetKind.GMM_VECTORS:
        X = params.class_model().sample(labels, rng)
    else:
        X = _noisy_templates(params, labels, rng)
    log(f"Generated {params.kind.value} dataset: {len(labels)} samples, {params.n_classes} classes", type="debug")
    return SyntheticDataset(kind=params.kind, X=X, labels=labels, params=params, seed=seed)


# BENCHMARKS
@dataclass(frozen=True)
class ClassifierSettings:
    """Everything a benchmark needs to classify one input, except the seed.

    A plan switches from classify_naive to classify_adaptive. prune_k turns
    on the oracle pruner, which keeps the top prune_k candidates.
    """

    strategy: TimestepStrategy = field(default_factory=TimestepStrategy)
    n_trials: int = 64
    plan: Optional[StagePlan] = None
    loss: LossKind = LossKind.SQUARED_L2
    objective: ObjectiveKind = ObjectiveKind.UNIFORM_L2
    guidance: GuidanceConfig = field(default_factory=GuidanceConfig)
    noise: NoiseVariant = field(default_factory=NoiseVariant)
    crop: int = 0
    prune_k: Optional[int] = None
    label_noise: float = 0.2

    @property
    def budget(self):
        return self.plan.trials[-1] if self.plan is not None else self.n_trials

    def config_hash(self):
        blob = json.dumps(asdict(self), sort_keys=True, default=str)
        return hashlib.sha256(blob.encode()).hexdigest()[:12]


@dataclass
class ExperimentReport:
    """Metric rows plus run metadata; `wall_time` columns are only written on request."""

    name: str
    columns: List[str]
    rows: List[dict]
    seed: int
    config_hash: str
    results: list = field(default_factory=list, repr=False)
    traces: list = field(default_factory=list, repr=False)

    def to_csv(self, path, timing=False):
        columns = [c for c in self.columns if timing or c != "wall_time"]
        with open(path, "w", newline="") as handle:
            writer = csv.writer(handle)
            writer.writerow(["config_hash", "seed"] + columns)
            for row in self.rows:
                writer.writerow([self.config_hash, self.seed] + [_cell(row[c]) for c in columns])
        log(f"Saved {self.name} report ({len(self.rows)} rows) to {path}", type="info")


def _cell(value):
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return value


def oracle_prune_scores(model, x, label_noise, rng, prior=None):
    """Scores from a deliberately weak classifier.

    Bayes log posteriors, except that with probability label_noise a random
    wrong class is bumped to the top score.
    """
    if not 0.0 <= label_noise <= 1.0:
        raise ConfigurationError("prune.label_noise", f"must lie in [0, 1], got {label_noise}")
    scores = class_log_densities(model, np.asarray(x).reshape(-1))[0]
    if prior is not None:
        scores = scores + np.log(prior)
    if model.n_classes > 1 and rng.random() < label_noise:
        best = int(np.argmax(scores))
        wrong = [k for k in range(model.n_classes) if k != best]
        scores[wrong[rng.integers(len(wrong))]] = np.max(scores) + 1.0
    return scores


def classify_one(x, denoiser, sched, settings, seed, class_model=None, trace=None):
    n_classes = denoiser.n_classes
    classes = list(range(n_classes))
    if settings.prune_k is not None:
        if class_model is None:
            raise ConfigurationError("prune", "pruning needs the dataset's class model")
        rng = np.random.default_rng(derive_seed(seed, 0))
        scores = oracle_prune_scores(class_model, x, settings.label_noise, rng)
        classes = sorted(PruneConfig(settings.prune_k, tuple(scores)).candidates())

    common = dict(loss=settings.loss, objective=settings.objective, guidance=settings.guidance, seed=seed,
                  crop=settings.crop, noise=settings.noise, trace=trace)
    if settings.plan is None:
        return classify_naive(x, classes, denoiser, sched, strategy=settings.strategy, n_trials=settings.n_trials, **common)
    return classify_adaptive(x, classes, denoiser, sched, settings.plan, strategy=settings.strategy, **common)


def _accuracies(predicted, labels):
    predicted = np.asarray(predicted)
    labels = np.asarray(labels)
    correct = predicted == labels
    per_class = [np.mean(correct[labels == k]) for k in np.unique(labels)]
    return float(np.mean(correct)), float(np.mean(per_class))


def run_benchmark(dataset, settings, denoiser, sched, seed, workers=1, trace=False, name="benchmark"):
    """Classify every sample of the dataset and report accuracy.

    Sample i is classified with seed derive_seed(seed, i), so results do not
    depend on `workers`. Reports both average and mean-per-class accuracy
    plus the total number of eps evaluations.
    """
    if len(dataset) == 0:
        raise ConfigurationError("dataset", "benchmark needs a nonempty dataset")
    if workers < 1:
        raise ConfigurationError("workers", f"need at least one worker, got {workers}")
    class_model = dataset.class_model() if settings.prune_k is not None else None

    def work(i):
        records = [] if trace else None
        result = classify_one(dataset.X[i], denoiser, sched, settings, derive_seed(seed, i), class_model, records)
        return result, records

    start = time.perf_counter()
    outcomes = [None] * len(dataset)
    if workers == 1:
        for i in range(len(dataset)):
            outcomes[i] = work(i)
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            futures = {executor.submit(work, i): i for i in range(len(dataset))}
            for future in as_completed(futures):
                outcomes[futures[future]] = future.result()
    wall_time = time.perf_counter() - start

    results = [result for result, _ in outcomes]
    predicted = [result.predicted for result in results]
    accuracy, per_class = _accuracies(predicted, dataset.labels)
    evaluations = int(sum(result.n_evaluations for result in results))
    log(f"{name}: {settings.strategy.label} with budget {settings.budget}: accuracy {accuracy:.4f} "
        f"(mean per class {per_class:.4f}), {evaluations} evaluations", type="info")

    row = {
        "strategy": settings.strategy.label,
        "trials": settings.budget,
        "n_samples": len(dataset),
        "accuracy": accuracy,
        "mean_per_class_accuracy": per_class,
        "evaluations": evaluations,
        "wall_time": wall_time,
    }
    return ExperimentReport(
        name=name,
        columns=list(row),
        rows=[row],
        seed=seed,
        config_hash=settings.config_hash(),
        results=results,
        traces=[records for _, records in outcomes] if trace else [],
    )


def scaling_curve(dataset, strategies, budgets, seed, denoiser, sched, settings=ClassifierSettings(), workers=1):
    budgets = [int(b) for b in budgets]
    if not budgets or min(budgets) < 1:
        raise ConfigurationError("scaling.budgets", f"budgets must be positive, got {budgets}")
    if any(a >= b for a, b in zip(budgets, budgets[1:])):
        raise ConfigurationError("scaling.budgets", f"budgets must be strictly increasing, got {budgets}")
    if not strategies:
        raise ConfigurationError("scaling.strategies", "no strategies given")

    rows = []
    for strategy in strategies:
        for budget in budgets:
            run = replace(settings, strategy=_at_budget(strategy, budget), n_trials=budget, plan=None)
            row = dict(run_benchmark(dataset, run, denoiser, sched, seed, workers, name="scaling").rows[0])
            row["strategy"] = strategy.label
            rows.append(row)
    return ExperimentReport("scaling", list(rows[0]), rows, seed, settings.config_hash())


def _at_budget(strategy, budget):
    # evenly spaced without a count spreads one timestep per trial
    if strategy.kind is StrategyKind.EVENLY_SPACED and not strategy.n_distinct:
        return TimestepStrategy.evenly_spaced(budget)
    return strategy


def default_timestep_grid(T, n=11):
    return np.unique(np.round(np.linspace(1, T, n)).astype(np.int64))


def timestep_accuracy_curve(dataset, seed, denoiser, sched, grid=None, settings=ClassifierSettings(), workers=1):
    """Accuracy of single-timestep, single-trial classifiers over a grid of t."""
    grid = default_timestep_grid(sched.T) if grid is None else np.asarray(grid, dtype=np.int64)
    rows = []
    for t in grid:
        run = replace(settings, strategy=TimestepStrategy.fixed_single(int(t)), n_trials=1, plan=None)
        report = run_benchmark(dataset, run, denoiser, sched, seed, workers, name="timestep sweep")
        rows.append({"t": int(t), "accuracy": report.rows[0]["accuracy"]})
    best = max(rows, key=lambda row: row["accuracy"])
    log(f"Best single timestep t={best['t']} with accuracy {best['accuracy']:.4f}", type="info")
    return ExperimentReport("timesteps", ["t", "accuracy"], rows, seed, settings.config_hash())


@dataclass
class VarianceReport:
    classes: List[int]
    n_sample_sets: int
    set_size: int
    paired_variance: float
    unpaired_variance: float
    paired_differences: np.ndarray = field(repr=False)
    unpaired_differences: np.ndarray = field(repr=False)

    @property
    def reduction(self):
        if self.unpaired_variance == 0:
            return float("nan")
        return self.paired_variance / self.unpaired_variance


def variance_report(x, classes, denoiser, sched, n_sample_sets, set_size, seed, settings=ClassifierSettings()):
    """Variance of the mean-error difference between the first two classes.

    Paired: both classes share each sample set. Unpaired: the second class
    gets an independent set of the same size.
    """
    classes = list(classes)
    if len(classes) < 2:
        raise ConfigurationError("variance.classes", "need at least two classes")
    if n_sample_sets < 2 or set_size < 1:
        raise ConfigurationError("variance", "need n_sample_sets >= 2 and set_size >= 1")
    x = np.asarray(x, dtype=np.float64)
    first, second = classes[:2]

    def errors(c, sample_seed):
        sample_set = make_sample_set(settings.strategy, set_size, sched.T, sample_seed, x.shape, settings.noise)
        return estimate_errors(x, c, denoiser, sched, sample_set, settings.loss, settings.objective,
                               settings.guidance, settings.crop)

    paired = np.empty(n_sample_sets)
    unpaired = np.empty(n_sample_sets)
    for r in range(n_sample_sets):
        shared = errors([first, second], derive_seed(seed, r))
        independent = errors([second], derive_seed(seed, n_sample_sets + r))
        paired[r] = shared[0] - shared[1]
        unpaired[r] = shared[0] - independent[0]

    return VarianceReport(
        classes=[first, second],
        n_sample_sets=n_sample_sets,
        set_size=set_size,
        paired_variance=float(np.var(paired, ddof=1)),
        unpaired_variance=float(np.var(unpaired, ddof=1)),
        paired_differences=paired,
        unpaired_differences=unpaired,
    )


# WINOGROUND
@dataclass
class ScoreMatrix:
    """scores[i][j] = score(caption i, image j); higher is better."""

    scores: np.ndarray
    example_id: str = ""
    tag: Optional[str] = None

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.shape != (2, 2):
            raise ConfigurationError("winoground.scores", f"expected a 2x2 score matrix, got {self.scores.shape}")
        if not np.all(np.isfinite(self.scores)):
            raise ConfigurationError("winoground.scores", f"example {self.example_id!r} has non-finite scores")

    @property
    def text_correct(self):
        s = self.scores
        return bool(s[0, 0] > s[1, 0] and s[1, 1] > s[0, 1])

    @property
    def image_correct(self):
        s = self.scores
        return bool(s[0, 0] > s[0, 1] and s[1, 1] > s[1, 0])

    @property
    def group_correct(self):
        return self.text_correct and self.image_correct


def _fraction(examples, attribute):
    if not examples:
        log("No Winoground examples to score", type="warning", color="yellow")
        return 0.0
    return float(np.mean([getattr(example, attribute) for example in examples]))


def winoground_text_score(examples):
    """Fraction of examples where each image prefers its own caption, with strict inequalities."""
    return _fraction(examples, "text_correct")


def winoground_image_score(examples):
    return _fraction(examples, "image_correct")


def winoground_group_score(examples):
    return _fraction(examples, "group_correct")


def winoground_report(examples, seed=0, config_hash=""):
    groups = [("all", list(examples))]
    for tag in sorted({example.tag for example in examples if example.tag}):
        groups.append((tag, [example for example in examples if example.tag == tag]))
    rows = [
        {
            "tag": tag,
            "examples": len(members),
            "text_score": winoground_text_score(members),
            "image_score": winoground_image_score(members),
            "group_score": winoground_group_score(members),
        }
        for tag, members in groups
    ]
    return ExperimentReport("winoground", ["tag", "examples", "text_score", "image_score", "group_score"],
                            rows, seed, config_hash)


def read_score_matrices(path):
    """Read example-id, i, j, score rows (an optional fifth column is the tag)."""
    entries = {}
    tags = {}
    order = []
    with open(path, newline="") as handle:
        for line_number, row in enumerate(csv.reader(handle), start=1):
            if not row or (line_number == 1 and row[0].strip().lower() in ("example-id", "example_id", "id")):
                continue
            if len(row) not in (4, 5):
                raise ConfigurationError("winoground.scores", f"line {line_number}: expected 4 columns, got {len(row)}")
            example_id = row[0].strip()
            try:
                i, j, score = int(row[1]), int(row[2]), float(row[3])
            except ValueError:
                raise ConfigurationError("winoground.scores", f"line {line_number}: cannot parse {row!r}")
            if i not in (0, 1) or j not in (0, 1):
                raise ConfigurationError("winoground.scores", f"line {line_number}: indices must be 0 or 1")
            if example_id not in entries:
                entries[example_id] = np.full((2, 2), np.nan)
                order.append(example_id)
            entries[example_id][i, j] = score
            if len(row) == 5 and row[4].strip():
                tags[example_id] = row[4].strip()

    for example_id in order:
        if np.isnan(entries[example_id]).any():
            raise ConfigurationError("winoground.scores", f"example {example_id!r} is missing entries")
    log(f"Read {len(order)} score matrices from {path}", type="debug")
    return [ScoreMatrix(entries[example_id], example_id, tags.get(example_id)) for example_id in order]


def compositional_score_matrices(params, denoiser, sched, n_per_pair, seed, settings=ClassifierSettings()):
    """ScoreMatrix examples scored by negative mean eps error on the compositional fixture.

    For each caption pair (a, b) one noisy image of each class is drawn; the
    two captions of an image share one sample set.
    """
    if n_per_pair < 1:
        raise ConfigurationError("winoground.n_per_pair", f"need at least one example per pair, got {n_per_pair}")
    examples = []
    for a, b, tag in COMPOSITIONAL_PAIRS:
        for _ in range(n_per_pair):
            index = len(examples)
            example_seed = derive_seed(seed, index)
            rng = np.random.default_rng(example_seed)
            images = _noisy_templates(params, np.array([a, b]), rng)
            scores = np.empty((2, 2))
            for j, image in enumerate(images):
                sample_set = make_sample_set(settings.strategy, settings.n_trials, sched.T,
                                             derive_seed(example_seed, j), image.shape, settings.noise)
                scores[:, j] = -estimate_errors(image, [a, b], denoiser, sched, sample_set, settings.loss,
                                                settings.objective, settings.guidance, settings.crop)
            examples.append(ScoreMatrix(scores, example_id=str(index), tag=tag))
    return examples
