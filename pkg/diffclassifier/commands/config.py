import json
import os
from dataclasses import asdict, dataclass

from marshmallow import RAISE, Schema, ValidationError, validate
from webargs import fields

from diffclassifier.classifier import GuidanceConfig, LossKind, ObjectiveKind
from diffclassifier.diffusion import NoiseKind, NoiseVariant, ScheduleKind, build_schedule
from diffclassifier.errors import ConfigurationError
from diffclassifier.harness import (
    ClassifierSettings,
    DatasetKind,
    compositional_template_params,
    standard_gmm_params,
    standard_template_params,
)
from diffclassifier.strategies import StagePlan, StrategyKind, TimestepStrategy, validate_plan

COMPOSITIONAL = "compositional"


def _choices(enum):
    return validate.OneOf([member.value for member in enum])


def _section(schema):
    return fields.Nested(schema, load_default=lambda: schema().load({}))


class StrictSchema(Schema):
    class Meta:
        unknown = RAISE


class ScheduleSchema(StrictSchema):
    kind = fields.Str(load_default=ScheduleKind.LINEAR.value, validate=_choices(ScheduleKind))
    T = fields.Int(load_default=1000, strict=True, validate=validate.Range(min=2))
    beta_start = fields.Float(load_default=1e-4)
    beta_end = fields.Float(load_default=0.02)
    cosine_s = fields.Float(load_default=0.008, validate=validate.Range(min=0, min_inclusive=False))


class TrainingSchema(StrictSchema):
    steps = fields.Int(load_default=3000, strict=True, validate=validate.Range(min=1))
    batch_size = fields.Int(load_default=128, strict=True, validate=validate.Range(min=1))
    learning_rate = fields.Float(load_default=1e-3, validate=validate.Range(min=0))
    p_uncond = fields.Float(load_default=0.1, validate=validate.Range(min=0, max=1, max_inclusive=False))
    weight_decay = fields.Float(load_default=0.0, validate=validate.Range(min=0))
    log_every = fields.Int(load_default=100, strict=True, validate=validate.Range(min=1))
    vlb_lambda = fields.Float(load_default=1e-3, validate=validate.Range(min=0))
    n_per_class = fields.Int(load_default=500, strict=True, validate=validate.Range(min=1))


class DenoiserSchema(StrictSchema):
    kind = fields.Str(load_default="analytic", validate=validate.OneOf(["analytic", "mlp"]))
    checkpoint = fields.Str(load_default=None, allow_none=True)
    hidden = fields.List(fields.Int(strict=True), load_default=lambda: [128, 128])
    time_dim = fields.Int(load_default=32, strict=True, validate=validate.Range(min=1))
    activation = fields.Str(load_default="silu", validate=validate.OneOf(["silu", "relu", "identity"]))
    supports_unconditional = fields.Bool(load_default=True)
    learn_variance = fields.Bool(load_default=False)
    zero_init_output = fields.Bool(load_default=False)
    training = _section(TrainingSchema)


class StrategySchema(StrictSchema):
    kind = fields.Str(load_default=StrategyKind.UNIFORM_RANDOM.value, validate=_choices(StrategyKind))
    n_distinct = fields.Int(load_default=0, strict=True)
    t = fields.Int(load_default=0, strict=True)
    center = fields.Int(load_default=0, strict=True)
    halfwidth = fields.Int(load_default=0, strict=True)
    timesteps = fields.List(fields.Int(strict=True), load_default=list)


class PlanSchema(StrictSchema):
    keep = fields.List(fields.Int(strict=True), required=True)
    trials = fields.List(fields.Int(strict=True), required=True)


class GuidanceSchema(StrictSchema):
    enabled = fields.Bool(load_default=False)
    w = fields.Float(load_default=0.0, validate=validate.Range(min=0))


class NoiseSchema(StrictSchema):
    kind = fields.Str(load_default=NoiseKind.STANDARD_NORMAL.value, validate=_choices(NoiseKind))
    low = fields.Float(load_default=-1.0)
    high = fields.Float(load_default=1.0)


class ClassifierSchema(StrictSchema):
    strategy = _section(StrategySchema)
    n_trials = fields.Int(load_default=64, strict=True, validate=validate.Range(min=1))
    plan = fields.Nested(PlanSchema, load_default=None, allow_none=True)
    loss = fields.Str(load_default=LossKind.SQUARED_L2.value, validate=_choices(LossKind))
    objective = fields.Str(load_default=ObjectiveKind.UNIFORM_L2.value, validate=_choices(ObjectiveKind))
    guidance = _section(GuidanceSchema)
    noise = _section(NoiseSchema)
    crop = fields.Int(load_default=0, strict=True, validate=validate.Range(min=0))


class PruneSchema(StrictSchema):
    k = fields.Int(load_default=None, allow_none=True, strict=True, validate=validate.Range(min=1))
    label_noise = fields.Float(load_default=0.2, validate=validate.Range(min=0, max=1))


class DatasetSchema(StrictSchema):
    kind = fields.Str(
        load_default=DatasetKind.GMM_VECTORS.value,
        validate=validate.OneOf([DatasetKind.GMM_VECTORS.value, DatasetKind.TEMPLATE_IMAGES.value, COMPOSITIONAL]),
    )
    n_classes = fields.Int(load_default=4, strict=True, validate=validate.Range(min=1))
    dim = fields.Int(load_default=8, strict=True, validate=validate.Range(min=1))
    separation = fields.Float(load_default=6.0, validate=validate.Range(min=0))
    sigma = fields.Float(load_default=None, allow_none=True, validate=validate.Range(min=0))
    size = fields.Int(load_default=8, strict=True, validate=validate.Range(min=2))
    template_seed = fields.Int(load_default=0, strict=True)
    n_per_class = fields.Int(load_default=125, strict=True, validate=validate.Range(min=1))


class ScalingSchema(StrictSchema):
    strategies = fields.List(
        fields.Nested(StrategySchema),
        load_default=lambda: StrategySchema(many=True).load([
            {"kind": "uniform_random"},
            {"kind": "evenly_spaced"},
            {"kind": "window", "center": 500, "halfwidth": 25},
        ]),
    )
    budgets = fields.List(fields.Int(strict=True), load_default=lambda: [1, 4, 16, 64])


class SweepSchema(StrictSchema):
    grid = fields.List(fields.Int(strict=True), load_default=None, allow_none=True)
    n_points = fields.Int(load_default=11, strict=True, validate=validate.Range(min=1))


class VarianceSchema(StrictSchema):
    n_inputs = fields.Int(load_default=100, strict=True, validate=validate.Range(min=1))
    n_sample_sets = fields.Int(load_default=32, strict=True, validate=validate.Range(min=2))
    set_size = fields.Int(load_default=16, strict=True, validate=validate.Range(min=1))


class WinogroundSchema(StrictSchema):
    scores = fields.Str(load_default=None, allow_none=True)
    n_per_pair = fields.Int(load_default=10, strict=True, validate=validate.Range(min=1))
    size = fields.Int(load_default=8, strict=True, validate=validate.Range(min=4))
    sigma = fields.Float(load_default=0.5, validate=validate.Range(min=0))


class OracleSchema(StrictSchema):
    # plain Monte Carlo quadrature for mixture classes; accuracy is set by the draw count
    n_quadrature = fields.Int(load_default=4096, strict=True, validate=validate.Range(min=1))
    n_eps_per_t = fields.Int(load_default=64, strict=True, validate=validate.Range(min=1))
    sample = fields.Int(load_default=0, strict=True, validate=validate.Range(min=0))


class RunConfigSchema(StrictSchema):
    schedule = _section(ScheduleSchema)
    denoiser = _section(DenoiserSchema)
    classifier = _section(ClassifierSchema)
    prune = _section(PruneSchema)
    dataset = _section(DatasetSchema)
    scaling = _section(ScalingSchema)
    sweep = _section(SweepSchema)
    variance = _section(VarianceSchema)
    winoground = _section(WinogroundSchema)
    oracle = _section(OracleSchema)
    seed = fields.Int(load_default=0, strict=True, validate=validate.Range(min=0))
    output_dir = fields.Str(load_default="runs")
    workers = fields.Int(load_default=1, strict=True, validate=validate.Range(min=1))
    timing = fields.Bool(load_default=False)


def _strategy(section):
    return TimestepStrategy(
        kind=StrategyKind(section["kind"]),
        n_distinct=section["n_distinct"],
        t=section["t"],
        center=section["center"],
        halfwidth=section["halfwidth"],
        timesteps=tuple(section["timesteps"]),
    )


@dataclass
class RunConfig:
    schedule: dict
    denoiser: dict
    classifier: dict
    prune: dict
    dataset: dict
    scaling: dict
    sweep: dict
    variance: dict
    winoground: dict
    oracle: dict
    seed: int = 0
    output_dir: str = "runs"
    workers: int = 1
    timing: bool = False

    def to_dict(self):
        return asdict(self)

    def noise_schedule(self):
        return build_schedule(ScheduleKind(self.schedule["kind"]), self.schedule["T"], self.schedule["beta_start"],
                              self.schedule["beta_end"], self.schedule["cosine_s"])

    def strategy(self):
        return _strategy(self.classifier["strategy"])

    def scaling_strategies(self):
        return [_strategy(section) for section in self.scaling["strategies"]]

    def plan(self):
        plan = self.classifier["plan"]
        return None if plan is None else StagePlan(tuple(plan["keep"]), tuple(plan["trials"]))

    def settings(self):
        classifier = self.classifier
        return ClassifierSettings(
            strategy=self.strategy(),
            n_trials=classifier["n_trials"],
            plan=self.plan(),
            loss=LossKind(classifier["loss"]),
            objective=ObjectiveKind(classifier["objective"]),
            guidance=GuidanceConfig(**classifier["guidance"]),
            noise=NoiseVariant(NoiseKind(classifier["noise"]["kind"]), classifier["noise"]["low"], classifier["noise"]["high"]),
            crop=classifier["crop"],
            prune_k=self.prune["k"],
            label_noise=self.prune["label_noise"],
        )

    def dataset_params(self):
        dataset = self.dataset
        sigma = dataset["sigma"]
        if dataset["kind"] == DatasetKind.GMM_VECTORS.value:
            return standard_gmm_params(dataset["n_classes"], dataset["dim"], dataset["separation"],
                                       1.0 if sigma is None else sigma)
        if dataset["kind"] == COMPOSITIONAL:
            return compositional_template_params(dataset["size"], 0.5 if sigma is None else sigma)
        return standard_template_params(dataset["n_classes"], dataset["size"], 0.5 if sigma is None else sigma,
                                        dataset["template_seed"])

    def n_classes(self):
        return 4 if self.dataset["kind"] == COMPOSITIONAL else self.dataset["n_classes"]


def _flatten(messages, prefix=""):
    if isinstance(messages, dict):
        for key, value in messages.items():
            path = prefix if key == "_schema" else (f"{prefix}.{key}" if prefix else str(key))
            yield from _flatten(value, path)
    elif isinstance(messages, (list, tuple)):
        for message in messages:
            yield from _flatten(message, prefix)
    else:
        yield prefix or "config", str(messages)


def check_cross_fields(config):
    classifier = config.classifier
    objective = ObjectiveKind(classifier["objective"])
    if objective is not ObjectiveKind.UNIFORM_L2:
        denoiser = config.denoiser
        if denoiser["kind"] == "mlp" and not denoiser["learn_variance"]:
            raise ConfigurationError("objective", f"{objective.value} needs a variance-capable denoiser "
                                                  "(analytic, or mlp with learn_variance)")

    crop = classifier["crop"]
    if crop > 0:
        if config.dataset["kind"] == DatasetKind.GMM_VECTORS.value:
            raise ConfigurationError("classifier.crop", "cropping needs a spatial (template image) dataset")
        if 2 * crop >= config.dataset["size"]:
            raise ConfigurationError("classifier.crop", f"crop {crop} leaves nothing of a size {config.dataset['size']} image")

    n_classes = config.n_classes()
    k = config.prune["k"]
    if k is not None and k > n_classes:
        raise ConfigurationError("prune.k", f"k={k} exceeds the {n_classes} classes")

    config.strategy().validate(config.schedule["T"])
    for strategy in config.scaling_strategies():
        if strategy.kind is not StrategyKind.EVENLY_SPACED or strategy.n_distinct:
            strategy.validate(config.schedule["T"])

    plan = config.plan()
    if plan is not None:
        report = validate_plan(plan, k or n_classes)
        if not report.ok:
            raise ConfigurationError("classifier.plan", "; ".join(d.message for d in report.diagnostics if d.severity == "error"))
    return config


def load_config(data):
    """Validate a config mapping; unknown keys and bad values raise ConfigurationError with the key path."""
    if not isinstance(data, dict):
        raise ConfigurationError("config", "top level must be a JSON object")
    try:
        loaded = RunConfigSchema().load(data)
    except ValidationError as error:
        path, message = next(_flatten(error.messages))
        raise ConfigurationError(path, message)
    return check_cross_fields(RunConfig(**loaded))


def parse_config(path):
    if not os.path.isfile(path):
        raise ConfigurationError("config", f"no such file: {path}")
    with open(path, encoding="utf-8") as handle:
        try:
            data = json.load(handle)
        except json.JSONDecodeError as error:
            raise ConfigurationError("config", f"{path} line {error.lineno} column {error.colno}: {error.msg}")
        except UnicodeDecodeError as error:
            raise ConfigurationError("config", f"{path} is not UTF-8 text (byte {error.start})")
    return load_config(data)


def apply_overrides(config, seed=None, workers=None, output_dir=None, timesteps=None):
    """Command-line overrides; the result is validated again."""
    data = config.to_dict()
    if seed is not None:
        data["seed"] = seed
    if workers is not None:
        data["workers"] = workers
    if output_dir is not None:
        data["output_dir"] = output_dir
    if timesteps is not None:
        data["classifier"]["strategy"] = {"kind": StrategyKind.EXPLICIT_LIST.value, "timesteps": list(timesteps.timesteps)}
    return load_config(data)
