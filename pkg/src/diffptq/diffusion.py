"""Linear-beta DDPM: schedule, forward noising, training and reverse sampling.

Timesteps run ``1..T``; ``t = T`` is the pure-noise end. Per-timestep
arrays on :class:`NoiseSchedule` are stored 0-based, so the value for step
``t`` lives at index ``t - 1``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError, TrainingFailure
from .model import MLPDenoiser

log = logging.getLogger(__name__)

SIGMA_MODES = ("zero", "standard")


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray

    def __post_init__(self):
        beta = np.asarray(self.beta, dtype=np.float64).copy()
        if beta.ndim != 1 or beta.size < 1 or np.any(beta <= 0) or np.any(beta >= 1):
            raise InvalidArgumentError("beta must be a non-empty 1-D array with entries in (0, 1)")
        beta.setflags(write=False)
        object.__setattr__(self, "beta", beta)

    @property
    def T(self) -> int:
        return self.beta.size

    @property
    def alpha(self) -> np.ndarray:
        return 1.0 - self.beta

    @property
    def alpha_bar(self) -> np.ndarray:
        return np.cumprod(self.alpha)

    @property
    def signal_coeff(self) -> np.ndarray:
        return np.sqrt(self.alpha_bar)

    @property
    def noise_coeff(self) -> np.ndarray:
        return np.sqrt(1.0 - self.alpha_bar)

    def snr(self) -> np.ndarray:
        return self.signal_coeff / self.noise_coeff

    def check_t(self, t) -> int:
        if int(t) != t or not 1 <= t <= self.T:
            raise InvalidArgumentError(f"timestep {t!r} outside [1, {self.T}]")
        return int(t)

    def eps_coeff(self, t: int) -> float:
        """``(1 - alpha_t) / sqrt(1 - alpha_bar_t)``, the weight on predicted noise in a reverse step."""
        i = self.check_t(t) - 1
        return float(self.beta[i] / np.sqrt(1.0 - self.alpha_bar[i]))

    def to_dict(self) -> dict:
        return {"T": self.T, "beta": [float(b) for b in self.beta]}

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        sched = cls(np.array(d["beta"], dtype=np.float64))
        if sched.T != d["T"]:
            raise InvalidArgumentError("schedule T does not match beta length")
        return sched


def make_schedule(T: int, beta_start: float, beta_end: float) -> NoiseSchedule:
    """Betas linearly interpolated from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise InvalidArgumentError(f"T must be a positive integer, got {T!r}")
    if not 0 < beta_start <= beta_end < 1:
        raise InvalidArgumentError("need 0 < beta_start <= beta_end < 1")
    return NoiseSchedule(np.linspace(beta_start, beta_end, int(T)))


def forward_diffuse(x0, t, eps, sched: NoiseSchedule):
    """``x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) eps``; ``t`` may be an int or per-row array."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise InvalidArgumentError(f"shape mismatch: x0 {x0.shape} vs eps {eps.shape}")
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise InvalidArgumentError(f"timestep outside [1, {sched.T}]")
    a = sched.signal_coeff[t - 1]
    b = sched.noise_coeff[t - 1]
    if t.ndim:
        a = a.reshape(-1, *([1] * (x0.ndim - 1)))
        b = b.reshape(-1, *([1] * (x0.ndim - 1)))
    return a * x0 + b * eps


def ddpm_step(x_t, eps_pred, t: int, sched: NoiseSchedule, z=None, sigma_mode: str = "zero"):
    """One reverse step: posterior mean plus ``sigma_t z`` with ``sigma_t^2 = beta_t``."""
    t = sched.check_t(t)
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_pred = np.asarray(eps_pred, dtype=np.float64)
    if x_t.shape != eps_pred.shape:
        raise InvalidArgumentError(f"shape mismatch: x_t {x_t.shape} vs eps_pred {eps_pred.shape}")
    if sigma_mode not in SIGMA_MODES:
        raise InvalidArgumentError(f"sigma_mode must be one of {SIGMA_MODES}")
    alpha = sched.alpha[t - 1]
    mean = (x_t - sched.eps_coeff(t) * eps_pred) / np.sqrt(alpha)
    if sigma_mode == "zero" or t == 1:
        return mean
    if z is None:
        raise InvalidArgumentError("sigma_mode='standard' requires z for t > 1")
    return mean + np.sqrt(sched.beta[t - 1]) * np.asarray(z)


# ---------------------------------------------------------------------------
# sampling


def trajectory_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for trajectory ``index`` of a run seeded with ``seed``."""
    return np.random.default_rng(np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)]))


def initial_noise(seed: int, n: int, dim: int, T: int):
    """Per-trajectory ``x_T`` of shape ``(n, dim)`` and step noise ``z`` of shape ``(T, n, dim)``.

    ``z[t - 1]`` is the noise injected by the step leaving ``x_t``. Both come
    from the trajectory's own stream, so row ``i`` never depends on ``n``.
    """
    x_T = np.empty((n, dim))
    z = np.empty((T, n, dim))
    for i in range(n):
        rng = trajectory_rng(seed, i)
        x_T[i] = rng.standard_normal(dim)
        z[:, i] = rng.standard_normal((T, dim))
    return x_T, z


@dataclass
class Trajectory:
    seed: int
    index: int
    condition: int
    states: np.ndarray            # (T+1, dim): x_T ... x_0
    predicted_noises: np.ndarray  # (T, dim): eps at t = T ... 1


@dataclass
class SampleBatch:
    """Batched trajectories; ``states[k]`` holds ``x_{T-k}`` for every row."""

    seed: int
    conditions: np.ndarray
    states: np.ndarray
    predicted_noises: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.predicted_noises.shape[0]

    @property
    def x0(self) -> np.ndarray:
        return self.states[-1]

    def state(self, t: int) -> np.ndarray:
        """``x_t`` for ``t`` in ``0..T``."""
        return self.states[self.T - t]

    def trajectories(self) -> list[Trajectory]:
        return [Trajectory(self.seed, i, int(self.conditions[i]), self.states[:, i], self.predicted_noises[:, i])
                for i in range(self.conditions.size)]


def run_sampler(eps_fn, x_T, conditions, sched: NoiseSchedule, sigma_mode="zero", z=None):
    """Denoise ``x_T`` for all ``T`` steps with ``eps_fn(x, t, c)``; returns ``(states, eps)``."""
    T = sched.T
    x = np.asarray(x_T, dtype=np.float64)
    states = np.empty((T + 1, *x.shape))
    eps_all = np.empty((T, *x.shape))
    states[0] = x
    for k, t in enumerate(range(T, 0, -1)):
        eps = eps_fn(x, t, conditions)
        eps_all[k] = eps
        x = ddpm_step(x, eps, t, sched, None if z is None else z[t - 1], sigma_mode)
        states[k + 1] = x
    return states, eps_all


def sample_batch(model, conditions, seed: int, sched: NoiseSchedule, sigma_mode: str = "zero",
                 eps_fn=None) -> SampleBatch:
    """Sample one trajectory per entry of ``conditions`` from ``model.forward``.

    ``eps_fn`` replaces ``model.forward`` when given (perturbation probes,
    per-step overrides).
    """
    conditions = np.asarray(conditions, dtype=np.int64).ravel()
    n = conditions.size
    if n < 1:
        raise InvalidArgumentError("need at least one trajectory")
    x_T, z = initial_noise(seed, n, model.dim, sched.T)
    fn = eps_fn or model.forward
    states, eps = run_sampler(fn, x_T, conditions, sched, sigma_mode, z if sigma_mode == "standard" else None)
    return SampleBatch(seed, conditions, states, eps)


def sample(model, n: int, conditions, seed: int, sched: NoiseSchedule, sigma_mode: str = "zero") -> list[Trajectory]:
    """``n`` trajectories; ``conditions`` is one label or a sequence cycled to length ``n``."""
    if n < 1:
        raise InvalidArgumentError("n must be >= 1")
    cond = np.resize(np.atleast_1d(np.asarray(conditions, dtype=np.int64)), n)
    return sample_batch(model, cond, seed, sched, sigma_mode).trajectories()


# ---------------------------------------------------------------------------
# training


@dataclass(frozen=True)
class TrainConfig:
    """Noise-prediction training with RMSProp (no momentum) and a cosine-decayed step size."""

    steps: int = 5000
    batch_size: int = 256
    lr: float = 2e-3
    seed: int = 0
    hidden: int = 64
    time_dim: int = 16
    cond_dim: int = 8
    rho: float = 0.99
    log_every: int = 50


def rmsprop_update(params, grads, state, lr, rho, eps=1e-8):
    for k, g in grads.items():
        v = state.setdefault(k, np.zeros_like(g))
        v *= rho
        v += (1 - rho) * g * g
        params[k] -= lr * g / (np.sqrt(v) + eps)


def train_denoiser(x, labels, sched: NoiseSchedule, config: TrainConfig, n_classes: int | None = None,
                   model: MLPDenoiser | None = None):
    """Fit an :class:`MLPDenoiser`; returns ``(model, log_rows)``.

    Each log row is ``(step, loss, ema_loss)``. Raises
    :class:`TrainingFailure` on the first non-finite loss.
    """
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.shape[0] == 0:
        raise InvalidArgumentError("dataset is empty")
    n_classes = int(labels.max()) + 1 if n_classes is None else n_classes
    if model is None:
        model = MLPDenoiser.init(x.shape[1], n_classes, config.hidden, config.time_dim, config.cond_dim,
                                 seed=config.seed)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 1]))
    state: dict = {}
    rows = []
    ema = None
    for step in range(1, config.steps + 1):
        idx = rng.integers(0, x.shape[0], size=config.batch_size)
        t = rng.integers(1, sched.T + 1, size=config.batch_size)
        eps = rng.standard_normal((config.batch_size, x.shape[1]))
        xt = forward_diffuse(x[idx], t, eps, sched)
        loss, grads = model.loss_and_grad(xt, t, labels[idx], eps)
        if not np.isfinite(loss):
            raise TrainingFailure(step, loss)
        lr = config.lr * 0.5 * (1 + np.cos(np.pi * (step - 1) / config.steps))
        rmsprop_update(model.params, grads, state, lr, config.rho)
        ema = loss if ema is None else 0.98 * ema + 0.02 * loss
        if step % config.log_every == 0 or step == 1 or step == config.steps:
            rows.append((step, loss, ema))
    log.info("trained %d steps, final ema loss %.4f", config.steps, ema)
    return model, rows
