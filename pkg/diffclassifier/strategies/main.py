import hashlib
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from agentlogger import log

from diffclassifier.diffusion import NoiseVariant, draw_noise_batch
from diffclassifier.errors import ConfigurationError


class StrategyKind(str, Enum):
    UNIFORM_RANDOM = "uniform_random"
    EVENLY_SPACED = "evenly_spaced"
    FIXED_SINGLE = "fixed_single"
    WINDOW = "window"
    EXPLICIT_LIST = "explicit_list"


@dataclass(frozen=True)
class TimestepStrategy:
    kind: StrategyKind = StrategyKind.UNIFORM_RANDOM
    n_distinct: int = 0
    t: int = 0
    center: int = 0
    halfwidth: int = 0
    timesteps: Tuple[int, ...] = ()

    @classmethod
    def uniform(cls):
        return cls(StrategyKind.UNIFORM_RANDOM)

    @classmethod
    def evenly_spaced(cls, n_distinct):
        return cls(StrategyKind.EVENLY_SPACED, n_distinct=int(n_distinct))

    @classmethod
    def fixed_single(cls, t):
        return cls(StrategyKind.FIXED_SINGLE, t=int(t))

    @classmethod
    def window(cls, center, halfwidth):
        return cls(StrategyKind.WINDOW, center=int(center), halfwidth=int(halfwidth))

    @classmethod
    def explicit(cls, timesteps):
        return cls(StrategyKind.EXPLICIT_LIST, timesteps=tuple(int(t) for t in timesteps))

    @property
    def label(self):
        if self.kind is StrategyKind.EVENLY_SPACED:
            return f"evenly_spaced({self.n_distinct})" if self.n_distinct else "evenly_spaced"
        if self.kind is StrategyKind.FIXED_SINGLE:
            return f"fixed_single({self.t})"
        if self.kind is StrategyKind.WINDOW:
            return f"window({self.center},{self.halfwidth})"
        if self.kind is StrategyKind.EXPLICIT_LIST:
            return f"explicit_list({len(self.timesteps)})"
        return self.kind.value

    def distinct_timesteps(self, T):
        # None for the random strategies
        kind = StrategyKind(self.kind)
        if kind is StrategyKind.EVENLY_SPACED:
            n = self.n_distinct
            if not 1 <= n <= T:
                raise ConfigurationError("classifier.strategy.n_distinct", f"need 1 <= n_distinct <= {T}, got {n}")
            # bin centers, rounded half up
            grid = np.floor((np.arange(1, n + 1) - 0.5) * T / n + 0.5).astype(np.int64)
            if len(np.unique(grid)) != n:
                raise ConfigurationError("classifier.strategy.n_distinct", f"{n} evenly spaced timesteps are not distinct for T={T}")
            return grid
        if kind is StrategyKind.FIXED_SINGLE:
            grid = np.array([self.t], dtype=np.int64)
        elif kind is StrategyKind.EXPLICIT_LIST:
            if not self.timesteps:
                raise ConfigurationError("classifier.strategy.timesteps", "explicit list is empty")
            grid = np.array(self.timesteps, dtype=np.int64)
        else:
            return None
        if np.any(grid < 1) or np.any(grid > T):
            raise ConfigurationError("classifier.strategy", f"timesteps {grid.tolist()} fall outside [1, {T}]")
        return grid

    def validate(self, T):
        kind = StrategyKind(self.kind)
        if kind is StrategyKind.WINDOW:
            low, high = self.center - self.halfwidth, self.center + self.halfwidth
            if self.halfwidth < 0 or low < 1 or high > T:
                raise ConfigurationError("classifier.strategy", f"window [{low}, {high}] falls outside [1, {T}]")
        else:
            self.distinct_timesteps(T)
        return self


def parse_timesteps(raw):
    try:
        values = [int(part) for part in str(raw).replace(" ", "").split(",") if part]
    except ValueError:
        raise ConfigurationError("timesteps", f"expected comma-separated integers, got {raw!r}")
    if not values:
        raise ConfigurationError("timesteps", "no timesteps given")
    return TimestepStrategy.explicit(values)


@dataclass(frozen=True)
class EvalPoint:
    t: int
    eps: np.ndarray


@dataclass(frozen=True)
class SampleSet:
    """Fixed (t, eps) pairs shared by every class scored on one input."""

    timesteps: np.ndarray
    noise: np.ndarray
    seed: int
    strategy: TimestepStrategy = field(default_factory=TimestepStrategy)

    def __len__(self):
        return len(self.timesteps)

    @property
    def points(self):
        return [EvalPoint(int(t), eps) for t, eps in zip(self.timesteps, self.noise)]

    def slice(self, start, stop):
        return SampleSet(self.timesteps[start:stop], self.noise[start:stop], self.seed, self.strategy)

    def point_hashes(self):
        return [
            hashlib.sha256(np.int64(t).tobytes() + np.ascontiguousarray(eps).tobytes()).hexdigest()[:16]
            for t, eps in zip(self.timesteps, self.noise)
        ]


def make_sample_set(strategy, n_trials, T, seed, shape, noise=NoiseVariant()):
    """Draw n_trials (t, eps) points for one input.

    UniformRandom draws t uniformly on [1, T]; EvenlySpaced, FixedSingle and
    ExplicitList cycle round-robin through their timesteps, so extra trials
    become extra eps draws at the same timesteps; Window draws t uniformly
    from [center - halfwidth, center + halfwidth]. Timesteps are drawn first,
    then all noise tensors, from one generator seeded with `seed`.
    """
    if n_trials < 1:
        raise ConfigurationError("classifier.n_trials", f"need at least one trial, got {n_trials}")
    strategy.validate(T)
    rng = np.random.default_rng(seed)
    kind = StrategyKind(strategy.kind)

    if kind is StrategyKind.UNIFORM_RANDOM:
        timesteps = rng.integers(1, T + 1, size=n_trials)
    elif kind is StrategyKind.WINDOW:
        timesteps = rng.integers(strategy.center - strategy.halfwidth, strategy.center + strategy.halfwidth + 1, size=n_trials)
    else:
        grid = strategy.distinct_timesteps(T)
        timesteps = grid[np.arange(n_trials) % len(grid)]

    eps = draw_noise_batch(rng, n_trials, shape, noise)
    return SampleSet(timesteps=timesteps.astype(np.int64), noise=eps, seed=seed, strategy=strategy)


@dataclass(frozen=True)
class StagePlan:
    keep: Tuple[int, ...]
    trials: Tuple[int, ...]

    @classmethod
    def single_stage(cls, n_classes, n_trials):
        return cls(keep=(int(n_classes),), trials=(int(n_trials),))


@dataclass
class PlanDiagnostic:
    field: str
    message: str
    severity: str = "error"


@dataclass
class PlanReport:
    ok: bool
    bound: Optional[int]
    diagnostics: List[PlanDiagnostic]


def validate_plan(plan, n_classes):
    """Check a StagePlan against the number of classes.

    Returns a PlanReport with the total-evaluation upper bound
    sum_i keep[i-1] * (trials[i] - trials[i-1]), keep[-1] := n_classes.
    A final keep larger than 1 is reported as a warning only: the final
    argmin then runs over the survivors.
    """
    keep, trials = tuple(plan.keep), tuple(plan.trials)
    diagnostics = []

    if not keep or len(keep) != len(trials):
        diagnostics.append(PlanDiagnostic("plan", f"keep and trials must be nonempty and of equal length, got {len(keep)} and {len(trials)}"))
    if any(k < 1 for k in keep):
        diagnostics.append(PlanDiagnostic("plan.keep", "entries must be positive"))
    if any(n < 1 for n in trials):
        diagnostics.append(PlanDiagnostic("plan.trials", "entries must be positive"))
    if any(a <= b for a, b in zip(keep, keep[1:])):
        diagnostics.append(PlanDiagnostic("plan.keep", f"KeepList {keep} is not strictly decreasing"))
    if any(a >= b for a, b in zip(trials, trials[1:])):
        diagnostics.append(PlanDiagnostic("plan.trials", f"TrialList {trials} is not strictly increasing"))
    if keep and keep[0] > n_classes:
        diagnostics.append(PlanDiagnostic("plan.keep", f"first keep {keep[0]} exceeds the {n_classes} classes"))
    if keep and keep[-1] != 1:
        diagnostics.append(PlanDiagnostic("plan.keep", f"last keep is {keep[-1]}, final argmin runs over survivors", "warning"))

    ok = not any(d.severity == "error" for d in diagnostics)
    bound = None
    if ok:
        alive = [n_classes] + list(keep[:-1])
        previous = [0] + list(trials[:-1])
        bound = int(sum(a * (n - p) for a, n, p in zip(alive, trials, previous)))
    for diagnostic in diagnostics:
        log(f"Plan {diagnostic.field}: {diagnostic.message}", type=diagnostic.severity,
            color="red" if diagnostic.severity == "error" else "yellow")
    return PlanReport(ok=ok, bound=bound, diagnostics=diagnostics)


@dataclass(frozen=True)
class PruneConfig:
    k: int
    scores: Tuple[float, ...]

    def candidates(self):
        return prune_candidates(self.scores, self.k)


def prune_candidates(scores, k):
    """Indices of the k largest scores, by descending score, ties toward the lower index."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 1 <= k <= len(scores):
        raise ConfigurationError("prune.k", f"need 1 <= k <= {len(scores)}, got {k}")
    order = np.argsort(-scores, kind="stable")
    return [int(i) for i in order[:k]]
