from dataclasses import dataclass
from enum import Enum

import numpy as np
from scipy.special import gammaln
from scipy.stats import truncnorm

from diffclassifier.errors import ConfigurationError


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class NoiseKind(str, Enum):
    STANDARD_NORMAL = "standard_normal"
    ZERO = "zero"
    TRUNCATED_NORMAL = "truncated_normal"
    EXPECTED_NORM = "expected_norm"


@dataclass(frozen=True)
class NoiseSchedule:
    """Discretized diffusion schedule. Timesteps are 1-indexed in [1, T]."""

    kind: ScheduleKind
    T: int
    beta: np.ndarray
    alpha_bar: np.ndarray

    @property
    def alpha(self):
        return 1.0 - self.beta

    def check_timestep(self, t):
        t = np.asarray(t)
        if t.size and (np.any(t < 1) or np.any(t > self.T)):
            raise ConfigurationError("t", f"timesteps must lie in [1, {self.T}]")
        return t.astype(np.int64)

    def alpha_bar_at(self, t):
        t = self.check_timestep(t)
        return self.alpha_bar[t - 1]

    def alpha_bar_prev(self, t):
        # alpha_bar_0 := 1
        t = self.check_timestep(t)
        padded = np.concatenate([[1.0], self.alpha_bar])
        return padded[t - 1]

    def beta_at(self, t):
        t = self.check_timestep(t)
        return self.beta[t - 1]

    def posterior_variance(self, t):
        """beta tilde: (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t. Zero at t = 1."""
        ab = self.alpha_bar_at(t)
        ab_prev = self.alpha_bar_prev(t)
        return (1.0 - ab_prev) / (1.0 - ab) * self.beta_at(t)

    def clipped_posterior_variance(self, t):
        t = self.check_timestep(t)
        return self.posterior_variance(np.maximum(t, 2))


def build_schedule(kind=ScheduleKind.LINEAR, T=1000, beta_start=1e-4, beta_end=0.02, cosine_s=0.008):
    """Linear (DDPM) or cosine schedule with T >= 2 steps and alpha_bar = cumprod(1 - beta)."""
    kind = ScheduleKind(kind)
    if not isinstance(T, (int, np.integer)) or T < 2:
        raise ConfigurationError("schedule.T", f"T must be an integer >= 2, got {T!r}")

    if kind is ScheduleKind.LINEAR:
        if not 0.0 < beta_start < beta_end < 1.0:
            raise ConfigurationError(
                "schedule.beta_start", f"need 0 < beta_start < beta_end < 1, got {beta_start}, {beta_end}")
        beta = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    else:
        steps = np.arange(T + 1, dtype=np.float64) / T
        f = np.cos((steps + cosine_s) / (1.0 + cosine_s) * np.pi / 2.0) ** 2
        ratio = f[1:] / f[:-1]
        beta = np.clip(1.0 - ratio, 1e-8, 0.999)

    alpha_bar = np.cumprod(1.0 - beta)
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(kind=kind, T=int(T), beta=beta, alpha_bar=alpha_bar)


def schedule_from_betas(beta, kind=ScheduleKind.LINEAR):
    beta = np.array(beta, dtype=np.float64)
    if beta.ndim != 1 or len(beta) < 2 or np.any(beta <= 0) or np.any(beta >= 1):
        raise ConfigurationError("schedule.beta", "betas must be a vector of at least 2 values in (0, 1)")
    alpha_bar = np.cumprod(1.0 - beta)
    beta.flags.writeable = False
    alpha_bar.flags.writeable = False
    return NoiseSchedule(kind=ScheduleKind(kind), T=len(beta), beta=beta, alpha_bar=alpha_bar)


def forward_noise(x, t, eps, sched):
    """x_t = sqrt(alpha_bar_t) * x + sqrt(1 - alpha_bar_t) * eps.

    `t` is either a scalar (eps has the shape of x) or a vector of n timesteps
    (eps has shape (n,) + x.shape, one noised copy of x per timestep).
    """
    x = np.asarray(x, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    ab = sched.alpha_bar_at(t)
    if np.ndim(t) == 0:
        if eps.shape != x.shape:
            raise ConfigurationError("eps", f"shape {eps.shape} does not match x shape {x.shape}")
        return np.sqrt(ab) * x + np.sqrt(1.0 - ab) * eps

    if eps.shape != (len(ab),) + x.shape:
        raise ConfigurationError("eps", f"shape {eps.shape} does not match {(len(ab),) + x.shape}")
    expand = (slice(None),) + (None,) * x.ndim
    return np.sqrt(ab)[expand] * x[None] + np.sqrt(1.0 - ab)[expand] * eps


@dataclass(frozen=True)
class NoiseVariant:
    kind: NoiseKind = NoiseKind.STANDARD_NORMAL
    low: float = -1.0
    high: float = 1.0

    def validate(self):
        if self.kind is NoiseKind.TRUNCATED_NORMAL and not self.low < self.high:
            raise ConfigurationError(
                "noise.low", f"truncation interval needs low < high, got [{self.low}, {self.high}]")
        return self


@dataclass(frozen=True)
class NoiseDraw:
    eps: np.ndarray
    variant: NoiseVariant


def expected_noise_norm(d):
    """Mean of the chi distribution with d degrees of freedom, E||eps||_2 for eps ~ N(0, I_d)."""
    return float(np.exp(0.5 * np.log(2.0) + gammaln((d + 1) / 2.0) - gammaln(d / 2.0)))


def draw_noise_batch(rng, n, shape, variant=NoiseVariant()):
    # shape (n,) + shape
    variant = NoiseVariant(NoiseKind(variant.kind), variant.low, variant.high).validate()
    shape = tuple(int(s) for s in shape)
    full = (int(n),) + shape

    if variant.kind is NoiseKind.ZERO:
        return np.zeros(full)
    if variant.kind is NoiseKind.TRUNCATED_NORMAL:
        return truncnorm.rvs(variant.low, variant.high, size=full, random_state=rng)

    eps = rng.standard_normal(full)
    if variant.kind is NoiseKind.EXPECTED_NORM:
        d = int(np.prod(shape))
        norms = np.sqrt(np.sum(eps.reshape(n, -1) ** 2, axis=1))
        scale = expected_noise_norm(d) / norms
        eps = eps * scale.reshape((n,) + (1,) * len(shape))
    return eps


def draw_noise(shape, variant, rng):
    return NoiseDraw(eps=draw_noise_batch(rng, 1, shape, variant)[0], variant=variant)
