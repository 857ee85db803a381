import copy
import math
from dataclasses import dataclass, field
from typing import List, Optional, Protocol, Tuple

import numpy as np
import torch
from agentlogger import log
from scipy.special import softmax
from torch import nn
from torch.nn.utils import parameters_to_vector, vector_to_parameters

from diffclassifier.errors import ConfigurationError, NumericError


class Denoiser(Protocol):
    """The eps_theta(x_t, t, c) contract.

    Inputs are batched: x_t has shape (n, d), t holds n timesteps in [1, T],
    c is a class index or None for the unconditional prediction. Outputs are
    float64 arrays of shape (n, d). predict_variance returns the reverse-step
    variance Sigma_theta per element and is only available when
    supports_variance is true.
    """

    n_classes: int
    supports_unconditional: bool
    supports_variance: bool

    def predict(self, x_t, t, c): ...

    def predict_variance(self, x_t, t, c): ...


def _as_batch(x_t, t):
    x_t = np.asarray(x_t, dtype=np.float64)
    single = x_t.ndim == 1
    if single:
        x_t = x_t[None]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (x_t.shape[0],))
    return x_t, t, single


# GAUSSIAN CLASS CONDITIONALS
@dataclass
class GaussianComponent:
    """One Gaussian component. `cov` is a (d,) diagonal or a (d, d) full matrix."""

    mean: np.ndarray
    cov: np.ndarray
    weight: float = 1.0
    eigvals: np.ndarray = field(init=False, repr=False)
    basis: Optional[np.ndarray] = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1)
        self.cov = np.asarray(self.cov, dtype=np.float64)
        if self.cov.ndim == 1:
            self.eigvals = self.cov
            self.basis = None
        else:
            if not np.allclose(self.cov, self.cov.T):
                raise NumericError("covariance is not symmetric")
            self.eigvals, self.basis = np.linalg.eigh(self.cov)

    @property
    def dim(self):
        return self.mean.shape[0]

    def full_cov(self):
        return np.diag(self.cov) if self.cov.ndim == 1 else self.cov

    def noised_terms(self, x_t, ab):
        """eps posterior mean, eigen-denominators and log density of x_t under
        N(sqrt(ab) mu, ab Sigma + (1 - ab) I)."""
        s = np.sqrt(ab)[:, None]
        q = (1.0 - ab)[:, None]
        r = x_t - s * self.mean[None]
        m = ab[:, None] * self.eigvals[None] + q
        proj = r if self.basis is None else r @ self.basis
        eps = np.sqrt(q) * proj / m
        if self.basis is not None:
            eps = eps @ self.basis.T
        logdens = -0.5 * (np.sum(proj ** 2 / m, axis=1) + np.sum(np.log(m), axis=1)
                          + self.dim * math.log(2.0 * math.pi))
        return eps, m, logdens

    def eps_variance(self, m, ab):
        # diag(I - (1 - ab) M^-1)
        q = (1.0 - ab)[:, None]
        if self.basis is None:
            return 1.0 - q / m
        return 1.0 - q * ((1.0 / m) @ (self.basis ** 2).T)


class GaussianClassModel:
    """Per-class Gaussian mixtures: components[k] lists the components of class k."""

    def __init__(self, components):
        self.components = [list(class_components) for class_components in components]
        if not self.components:
            raise ConfigurationError("model", "at least one class is required")
        self.dim = self.components[0][0].dim

        for k, class_components in enumerate(self.components):
            if not class_components:
                raise ConfigurationError("model", f"class {k} has no components")
            weights = np.array([comp.weight for comp in class_components])
            if np.any(weights <= 0) or not np.isclose(weights.sum(), 1.0):
                raise ConfigurationError("model", f"mixture weights of class {k} must be positive and sum to 1")
            for comp in class_components:
                if comp.dim != self.dim:
                    raise ConfigurationError("model", f"class {k} has dimension {comp.dim}, expected {self.dim}")
                if not np.all(np.isfinite(comp.eigvals)) or np.min(comp.eigvals) <= 0:
                    raise NumericError(f"covariance of class {k} is not positive definite", class_index=k)

    @classmethod
    def isotropic(cls, means, sigma=1.0):
        means = np.asarray(means, dtype=np.float64)
        return cls([[GaussianComponent(mu, np.full(means.shape[1], sigma ** 2))] for mu in means])

    @property
    def n_classes(self):
        return len(self.components)

    def is_single_gaussian(self, c):
        return len(self.components[c]) == 1

    def sample(self, labels, rng):
        labels = np.asarray(labels, dtype=np.int64)
        out = np.empty((len(labels), self.dim))
        for k, class_components in enumerate(self.components):
            rows = np.flatnonzero(labels == k)
            if not len(rows):
                continue
            weights = np.array([comp.weight for comp in class_components])
            picks = rng.choice(len(class_components), size=len(rows), p=weights)
            for j, comp in enumerate(class_components):
                chosen = rows[picks == j]
                z = rng.standard_normal((len(chosen), self.dim)) * np.sqrt(comp.eigvals)
                if comp.basis is not None:
                    z = z @ comp.basis.T
                out[chosen] = comp.mean + z
        return out

    def check_class(self, c):
        if not 0 <= c < self.n_classes:
            raise ConfigurationError("c", f"class index {c} out of range [0, {self.n_classes})")


def _gmm_eps_and_variance(model, x_t, ab, c):
    if c is None:
        # uniform class prior
        components = [(comp, comp.weight / model.n_classes) for cc in model.components for comp in cc]
    else:
        model.check_class(c)
        components = [(comp, comp.weight) for comp in model.components[c]]

    terms = [comp.noised_terms(x_t, ab) for comp, _ in components]
    if len(terms) == 1:
        eps, m, _ = terms[0]
        return eps, components[0][0].eps_variance(m, ab)

    logits = np.stack([np.log(w) + logdens for (_, w), (_, _, logdens) in zip(components, terms)], axis=0)
    resp = softmax(logits, axis=0)[:, :, None]
    eps_k = np.stack([eps for eps, _, _ in terms], axis=0)
    var_k = np.stack([comp.eps_variance(m, ab) for (comp, _), (_, m, _) in zip(components, terms)], axis=0)
    eps = np.sum(resp * eps_k, axis=0)
    var = np.sum(resp * (var_k + eps_k ** 2), axis=0) - eps ** 2
    return eps, var


def gmm_predict_eps(model, x_t, t, c, sched):
    """Bayes-optimal eps prediction E[eps | x_t, c] for Gaussian(-mixture) classes."""
    x_t, t, single = _as_batch(x_t, t)
    eps, _ = _gmm_eps_and_variance(model, x_t, sched.alpha_bar_at(t), c)
    return eps[0] if single else eps


class GaussianDenoiser:

    supports_unconditional = True
    supports_variance = True

    def __init__(self, model, sched):
        self.model = model
        self.sched = sched

    @property
    def n_classes(self):
        return self.model.n_classes

    def predict(self, x_t, t, c):
        return gmm_predict_eps(self.model, x_t, t, c, self.sched)

    def posterior_eps_variance(self, x_t, t, c):
        x_t, t, single = _as_batch(x_t, t)
        _, var = _gmm_eps_and_variance(self.model, x_t, self.sched.alpha_bar_at(t), c)
        return var[0] if single else var

    def predict_variance(self, x_t, t, c):
        """Var(x_{t-1} | x_t, c) per element: beta tilde plus the spread of the x_0 posterior.

        This is the reverse-step variance of the Denoiser contract, matching the
        MLP variance head. Var(eps | x_t, c) itself is posterior_eps_variance.
        """
        x_t, t, single = _as_batch(x_t, t)
        ab = self.sched.alpha_bar_at(t)
        ab_prev = self.sched.alpha_bar_prev(t)
        _, eps_var = _gmm_eps_and_variance(self.model, x_t, ab, c)
        coef = np.sqrt(ab_prev) * self.sched.beta_at(t) / (1.0 - ab)
        x0_var = ((1.0 - ab) / ab)[:, None] * eps_var
        var = self.sched.posterior_variance(t)[:, None] + (coef ** 2)[:, None] * x0_var
        return var[0] if single else var


# NEURAL BACKEND
ACTIVATIONS = {
    "silu": nn.SiLU,
    "relu": nn.ReLU,
    "identity": nn.Identity,
}


def timestep_embedding(t, dim, max_period=10000.0):
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=1)
    return emb


class MlpDenoiser(nn.Module):
    """Small MLP eps-predictor on flattened inputs.

    The class embedding row is added to the sinusoidal timestep embedding and
    the sum is concatenated with x_t. When supports_unconditional is set, the
    table has one extra null row (index n_classes) for c = None.
    """

    def __init__(self, data_dim, n_classes, sched, hidden=(128, 128), time_dim=32, activation="silu",
                 supports_unconditional=True, learn_variance=False, zero_init_output=False):
        super().__init__()
        hidden = tuple(int(h) for h in hidden)
        if not hidden or min(hidden) < 1:
            raise ConfigurationError("denoiser.hidden", f"at least one non-empty hidden layer is required, got {hidden}")
        if activation not in ACTIVATIONS:
            raise ConfigurationError("denoiser.activation", f"unknown activation {activation!r}")

        self.data_dim = int(data_dim)
        self.n_classes = int(n_classes)
        self.T = sched.T
        self.sched = sched
        self.hidden = hidden
        self.time_dim = int(time_dim)
        self.activation = activation
        self.supports_unconditional = bool(supports_unconditional)
        self.supports_variance = bool(learn_variance)

        self.class_embedding = nn.Embedding(self.n_classes + int(self.supports_unconditional), self.time_dim)
        layers = []
        in_dim = self.data_dim + self.time_dim
        for width in hidden:
            layers += [nn.Linear(in_dim, width), ACTIVATIONS[activation]()]
            in_dim = width
        self.body = nn.Sequential(*layers)
        self.head = nn.Linear(in_dim, self.data_dim * (2 if self.supports_variance else 1))
        if zero_init_output:
            nn.init.zeros_(self.head.weight)
            nn.init.zeros_(self.head.bias)

        steps = np.arange(1, sched.T + 1)
        self.register_buffer("alpha_bar", torch.as_tensor(sched.alpha_bar, dtype=torch.float32), persistent=False)
        self.register_buffer("log_beta", torch.as_tensor(np.log(sched.beta), dtype=torch.float32), persistent=False)
        self.register_buffer(
            "log_beta_tilde",
            torch.as_tensor(np.log(sched.clipped_posterior_variance(steps)), dtype=torch.float32),
            persistent=False,
        )

    @property
    def null_class(self):
        return self.n_classes

    def architecture(self):
        return {
            "data_dim": self.data_dim,
            "n_classes": self.n_classes,
            "hidden": list(self.hidden),
            "time_dim": self.time_dim,
            "activation": self.activation,
            "supports_unconditional": self.supports_unconditional,
            "learn_variance": self.supports_variance,
        }

    def forward(self, x_t, t, c):
        emb = timestep_embedding(t, self.time_dim).to(x_t.dtype) + self.class_embedding(c)
        return self.head(self.body(torch.cat([x_t, emb], dim=1)))

    def log_variance(self, raw, t):
        # raw in roughly [-1, 1] interpolates between log beta_t and log beta tilde_t
        frac = (raw + 1.0) / 2.0
        return frac * self.log_beta[t - 1][:, None] + (1.0 - frac) * self.log_beta_tilde[t - 1][:, None]

    def _inputs(self, x_t, t, c):
        x_t, t, single = _as_batch(x_t, t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ConfigurationError("t", f"timesteps must lie in [1, {self.T}]")
        if c is None:
            if not self.supports_unconditional:
                raise ConfigurationError("c", "this denoiser has no null class for unconditional prediction")
            c = self.null_class
        elif not 0 <= c < self.n_classes:
            raise ConfigurationError("c", f"class index {c} out of range [0, {self.n_classes})")
        dtype = self.head.weight.dtype
        return (
            torch.as_tensor(x_t, dtype=dtype),
            torch.as_tensor(np.array(t)),
            torch.full((x_t.shape[0],), c, dtype=torch.long),
            single,
        )

    def predict(self, x_t, t, c):
        x, tt, cc, single = self._inputs(x_t, t, c)
        with torch.no_grad():
            eps = self(x, tt, cc)[:, : self.data_dim].double().numpy()
        return eps[0] if single else eps

    def predict_variance(self, x_t, t, c):
        if not self.supports_variance:
            raise ConfigurationError("objective", "this MLP was built without a variance head")
        x, tt, cc, single = self._inputs(x_t, t, c)
        with torch.no_grad():
            raw = self(x, tt, cc)[:, self.data_dim:]
            var = torch.exp(self.log_variance(raw, tt)).double().numpy()
        return var[0] if single else var


def mlp_predict_eps(net, x_t, t, c):
    return net.predict(x_t, t, c)


@dataclass
class TrainingResult:
    net: MlpDenoiser
    trace: List[Tuple[int, float]]


def _variance_kl(net, out, eps, t, sched_tensors):
    # KL(q(x_{t-1} | x_t, x_0) || p_theta) per element, means held fixed
    alpha, alpha_bar = sched_tensors
    d = net.data_dim
    eps_hat = out[:, :d].detach()
    log_var = net.log_variance(out[:, d:], t)
    log_var_true = net.log_beta_tilde[t - 1][:, None]
    coef = (torch.exp(net.log_beta[t - 1]) / torch.sqrt(alpha[t - 1] * (1.0 - alpha_bar[t - 1])))[:, None]
    mean_gap = (coef * (eps_hat - eps)) ** 2
    kl = 0.5 * (log_var - log_var_true + (torch.exp(log_var_true) + mean_gap) / torch.exp(log_var) - 1.0)
    return kl.mean()


def train_denoiser(net, data, labels, sched, steps, batch_size, learning_rate, seed,
                   p_uncond=0.1, weight_decay=0.0, log_every=100, vlb_lambda=1e-3):
    """Train an MLP eps-predictor in place with the simple loss E_{t, eps} ||eps - eps_theta(x_t, c)||^2.

    `seed` drives the batches, t and eps; labels are swapped for the null class
    with probability p_uncond.
    """
    data = np.asarray(data, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(data) == 0:
        raise ConfigurationError("dataset", "training requires a nonempty dataset")
    if steps < 1 or batch_size < 1 or learning_rate < 0 or log_every < 1:
        raise ConfigurationError("denoiser.training", "steps, batch_size and log_every must be positive, learning_rate >= 0")
    if not 0.0 <= p_uncond < 1.0:
        raise ConfigurationError("denoiser.training.p_uncond", f"must lie in [0, 1), got {p_uncond}")

    gen = torch.Generator().manual_seed(int(seed))
    x0_all = torch.as_tensor(data.reshape(len(data), -1), dtype=torch.float32)
    y_all = torch.as_tensor(labels)
    alpha_bar = torch.as_tensor(sched.alpha_bar, dtype=torch.float32)
    alpha = torch.as_tensor(sched.alpha, dtype=torch.float32)
    optimizer = torch.optim.Adam(net.parameters(), lr=learning_rate, weight_decay=weight_decay)
    drop_labels = net.supports_unconditional and p_uncond > 0

    log(f"Training denoiser for {steps} steps on {len(data)} samples (batch {batch_size}, lr {learning_rate})", type="info")
    net.train()
    trace = []
    for step in range(1, steps + 1):
        idx = torch.randint(0, len(data), (batch_size,), generator=gen)
        t = torch.randint(1, sched.T + 1, (batch_size,), generator=gen)
        eps = torch.randn((batch_size, net.data_dim), generator=gen)
        c = y_all[idx].clone()
        if drop_labels:
            c[torch.rand(batch_size, generator=gen) < p_uncond] = net.null_class

        ab = alpha_bar[t - 1][:, None]
        x_t = torch.sqrt(ab) * x0_all[idx] + torch.sqrt(1.0 - ab) * eps
        out = net(x_t, t, c)
        loss = torch.mean((out[:, : net.data_dim] - eps) ** 2)
        if net.supports_variance:
            loss = loss + vlb_lambda * _variance_kl(net, out, eps, t, (alpha, alpha_bar))

        if not torch.isfinite(loss):
            log(f"Loss became non-finite at step {step}", type="error", color="red")
            raise NumericError(f"non-finite training loss at step {step}", step=step)

        optimizer.zero_grad()
        loss.backward()
        optimizer.step()

        if step == 1 or step % log_every == 0 or step == steps:
            trace.append((step, float(loss.item())))
            log(f"step {step}/{steps} loss {loss.item():.6f}", type="debug")

    net.eval()
    return TrainingResult(net=net, trace=trace)


@dataclass
class GradcheckReport:
    max_rel_deviation: float
    n_parameters: int
    tolerance: float
    passed: bool


def finite_diff_gradcheck(net, sample, sched, tolerance=1e-3, h=1e-4, seed=0, atol=1e-4):
    """Compare autograd parameter gradients of the simple loss with central differences.

    `sample` is a (data, labels) pair. The check runs in float64 on a copy of
    the network, so `net` itself is not touched. Deviation per parameter is
    |a - n| / max(|a|, |n|, atol).
    """
    data, labels = sample
    data = np.asarray(data, dtype=np.float64).reshape(len(labels), -1)
    rng = np.random.default_rng(seed)
    t = rng.integers(1, sched.T + 1, size=len(data))
    eps = rng.standard_normal(data.shape)
    ab = sched.alpha_bar_at(t)[:, None]
    x_t = np.sqrt(ab) * data + np.sqrt(1.0 - ab) * eps

    replica = copy.deepcopy(net).double()
    params = [p for p in replica.parameters() if p.requires_grad]
    x_t = torch.as_tensor(x_t, dtype=torch.float64)
    eps = torch.as_tensor(eps, dtype=torch.float64)
    tt = torch.as_tensor(t)
    cc = torch.as_tensor(np.asarray(labels, dtype=np.int64))

    def loss_fn():
        return torch.mean((replica(x_t, tt, cc)[:, : replica.data_dim] - eps) ** 2)

    analytic = torch.cat([g.reshape(-1) for g in torch.autograd.grad(loss_fn(), params)])
    theta = parameters_to_vector(params).detach().clone()
    numeric = torch.empty_like(theta)
    with torch.no_grad():
        for i in range(theta.numel()):
            shifted = theta.clone()
            shifted[i] += h
            vector_to_parameters(shifted, params)
            f_plus = loss_fn()
            shifted[i] -= 2 * h
            vector_to_parameters(shifted, params)
            f_minus = loss_fn()
            numeric[i] = (f_plus - f_minus) / (2 * h)
        vector_to_parameters(theta, params)

    scale = torch.clamp(torch.maximum(analytic.abs(), numeric.abs()), min=atol)
    deviation = float(torch.max((analytic - numeric).abs() / scale).item())
    report = GradcheckReport(
        max_rel_deviation=deviation,
        n_parameters=theta.numel(),
        tolerance=tolerance,
        passed=deviation < tolerance,
    )
    log(f"Gradient check over {report.n_parameters} parameters: max relative deviation {deviation:.3e}",
        type="info" if report.passed else "warning")
    return report
