"""Evaluation metrics and the error-accumulation checker.

* Fréchet distance between Gaussian moment summaries (FID-to-FP analog)
* condition-match score (fraction of samples nearest their own mode)
* BOPs, normalized so a 32/32-bit model reports its FLOPs
* per-step noise-prediction errors ``||Δ_t||`` and the first-order bound on
  the final sample error ``||x_0 - x̂_0|| <= sum_t c_t ||Δ_t||``
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from .diffusion import NoiseSchedule, initial_noise, run_sampler
from .errors import InvalidArgumentError

PSD_TOL = 1e-10


@dataclass(frozen=True)
class MomentSummary:
    mean: np.ndarray
    cov: np.ndarray
    count: int

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).ravel()
        cov = np.atleast_2d(np.asarray(self.cov, dtype=np.float64))
        if cov.shape != (mean.size, mean.size):
            raise InvalidArgumentError(f"covariance shape {cov.shape} does not match mean of size {mean.size}")
        cov = 0.5 * (cov + cov.T)
        w, v = np.linalg.eigh(cov)
        if w.min(initial=0.0) < -PSD_TOL * max(1.0, abs(w).max(initial=0.0)):
            raise InvalidArgumentError(f"covariance is not PSD (min eigenvalue {w.min():.3e})")
        if w.min(initial=0.0) < 0:
            cov = (v * np.clip(w, 0, None)) @ v.T
            cov = 0.5 * (cov + cov.T)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @classmethod
    def from_samples(cls, x) -> "MomentSummary":
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[0] < 2:
            raise InvalidArgumentError("need a (n, d) sample array with n >= 2")
        return cls(x.mean(axis=0), np.cov(x, rowvar=False).reshape(x.shape[1], x.shape[1]), x.shape[0])


def _psd_sqrt(m):
    w, v = np.linalg.eigh(0.5 * (m + m.T))
    return (v * np.sqrt(np.clip(w, 0, None))) @ v.T


def frechet_distance(a: MomentSummary, b: MomentSummary) -> float:
    """``||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a^1/2 S_b S_a^1/2)^1/2)``."""
    if a.mean.shape != b.mean.shape:
        raise InvalidArgumentError(f"dimension mismatch: {a.mean.size} vs {b.mean.size}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0  # skip the ~1e-14 round-off of the square-root path
    root_a = _psd_sqrt(a.cov)
    inner = root_a @ b.cov @ root_a
    w = np.linalg.eigvalsh(0.5 * (inner + inner.T))
    tr_sqrt = float(np.sum(np.sqrt(np.clip(w, 0, None))))
    d = float(np.sum((a.mean - b.mean) ** 2) + np.trace(a.cov) + np.trace(b.cov) - 2.0 * tr_sqrt)
    return max(d, 0.0)


def random_fourier_features(x, dim: int = 8, seed: int = 0, bandwidth: float = 1.0) -> np.ndarray:
    """Fixed ``cos(W x + b)`` features; a seeded stand-in for a learned feature extractor."""
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    W = rng.standard_normal((dim, x.shape[1])) / bandwidth
    b = rng.uniform(0, 2 * np.pi, dim)
    return np.sqrt(2.0 / dim) * np.cos(x @ W.T + b)


def sample_frechet(x, y, features: str = "raw") -> float:
    if features == "rff":
        x, y = random_fourier_features(x), random_fourier_features(y)
    elif features != "raw":
        raise InvalidArgumentError(f"unknown feature space {features!r}")
    return frechet_distance(MomentSummary.from_samples(x), MomentSummary.from_samples(y))


def condition_match_score(samples, labels, centers) -> float:
    """Fraction of samples whose nearest center (Euclidean) is their own label's."""
    x = np.asarray(samples, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).ravel()
    centers = np.asarray(centers, dtype=np.float64)
    if x.shape[0] == 0:
        raise InvalidArgumentError("no samples")
    if labels.max() >= centers.shape[0] or labels.min() < 0:
        raise InvalidArgumentError("a label has no center")
    d2 = np.sum((x[:, None, :] - centers[None, :, :]) ** 2, axis=2)
    return float(np.mean(np.argmin(d2, axis=1) == labels))


def bops(flops: float, weight_bits: float, act_bits_avg: float) -> float:
    """Bit-operations ``flops * b_w * b_a``, scaled by ``1/(32*32)``."""
    if flops <= 0 or weight_bits <= 0 or act_bits_avg <= 0:
        raise InvalidArgumentError("bops inputs must be positive")
    return flops * weight_bits * act_bits_avg / 1024.0


# ---------------------------------------------------------------------------
# error accumulation


def per_step_delta_arrays(model, qm, states, conditions) -> np.ndarray:
    """``Δ_t = ε̂(x̂_t) - ε(x̂_t)`` for every step; row ``k`` is ``t = T - k``."""
    T = states.shape[0] - 1
    return np.stack([qm.forward(states[k], t, conditions) - model.forward(states[k], t, conditions)
                     for k, t in enumerate(range(T, 0, -1))])


def per_step_deltas(model, qm, traj) -> np.ndarray:
    """L2 (Frobenius over the batch) norms ``||Δ_t||``; entry ``t - 1`` belongs to step ``t``.

    ``traj`` is a :class:`~diffptq.diffusion.SampleBatch` or a single
    :class:`~diffptq.diffusion.Trajectory` produced by ``qm`` with ``sigma = 0``.
    """
    if hasattr(traj, "conditions"):
        states, cond = traj.states, traj.conditions
    else:
        states, cond = traj.states[:, None, :], np.array([traj.condition])
    deltas = per_step_delta_arrays(model, qm, states, cond)
    return np.linalg.norm(deltas.reshape(deltas.shape[0], -1), axis=1)[::-1].copy()


def taylor_coefficients(sched: NoiseSchedule, jacobian_norms) -> np.ndarray:
    """Coefficients ``c_t`` of ``||x_0 - x̂_0|| <= sum_t c_t ||Δ_t||`` (first order).

    With ``k_t = (1 - alpha_t)/sqrt(1 - alpha_bar_t)`` and ``J_t`` the Jacobian
    gain of the noise predictor at step ``t``, the state error obeys
    ``e_{t-1} = (e_t - k_t (J_t e_t + Δ_t)) / sqrt(alpha_t)``, hence

        c_t = k_t / sqrt(alpha_t) * prod_{s<t} (1 + k_s J_s) / sqrt(alpha_s).

    ``J_T`` is unused because ``x̂_T = x_T``. Entry ``t - 1`` belongs to step ``t``.
    """
    J = np.asarray(jacobian_norms, dtype=np.float64).ravel()
    T = sched.T
    if J.size != T:
        raise InvalidArgumentError(f"expected {T} jacobian norms, got {J.size}")
    if np.any(J < 0):
        raise InvalidArgumentError("jacobian norms must be non-negative")
    k = sched.beta / np.sqrt(1.0 - sched.alpha_bar)
    inv_sqrt_alpha = 1.0 / np.sqrt(sched.alpha)
    gain = inv_sqrt_alpha * (1.0 + k * J)
    c = np.empty(T)
    carry = 1.0
    for t in range(1, T + 1):
        c[t - 1] = k[t - 1] * inv_sqrt_alpha[t - 1] * carry
        carry *= gain[t - 1]
    return c


def _jvp(model, x, t, cond, v, h):
    return (model.forward(x + h * v, t, cond) - model.forward(x - h * v, t, cond)) / (2 * h)


def _fd_jacobians(model, x, t, cond, h):
    cols = []
    for j in range(x.shape[1]):
        e = np.zeros_like(x)
        e[:, j] = 1.0
        cols.append(_jvp(model, x, t, cond, e, h))
    return np.stack(cols, axis=2)  # (n, out, in)


def linear_propagation(sched: NoiseSchedule, A, deltas) -> np.ndarray:
    """Exact signed error ``x̂_0 - x_0`` when ``ε(x, t) = A_t x + b_t``.

    ``A`` is ``(T, d, d)`` (entry ``t - 1`` for step ``t``); ``deltas`` is
    ``(T, n, d)`` with row ``k`` belonging to ``t = T - k``.
    """
    T = sched.T
    e = np.zeros_like(deltas[0])
    for k, t in enumerate(range(T, 0, -1)):
        kt = sched.eps_coeff(t)
        e = (e - kt * (e @ A[t - 1].T + deltas[k])) / np.sqrt(sched.alpha[t - 1])
    return e


@dataclass
class Theorem1Report:
    delta_actual: float
    per_step_delta_norms: np.ndarray
    coefficients: np.ndarray
    coefficients_first_order: np.ndarray
    coefficients_opnorm: np.ndarray
    jacobian_gains: np.ndarray
    linear_prediction: float
    linear_prediction_first_order: float
    linear_prediction_opnorm: float
    exact_linear_propagation: float | None
    residual: float
    n_trajectories: int
    seed: int

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: (v.tolist() if isinstance(v, np.ndarray) else v) for k, v in d.items()}


def theorem1_check(model, qm, conditions, seed: int, sched: NoiseSchedule, h: float = 1e-4) -> Theorem1Report:
    """Compare the realized final error with the first-order bound.

    FP and quantized runs share ``x_T`` and use ``sigma = 0``. Norms are
    Frobenius over the whole batch. Three coefficient sets are reported:
    Jacobian-free (``J = 0``), directional (``J_t = ||J e_t|| / ||e_t||`` along
    the realized state error, via central differences) and operator-norm
    (largest per-sample spectral norm of the finite-difference Jacobian).
    The directional set is the headline ``coefficients``. For a
    :class:`~diffptq.model.LinearDenoiser` the exact signed propagation is
    also computed and ``residual = |delta_actual - exact|``; otherwise
    ``residual = linear_prediction - delta_actual`` (the bound's slack).
    """
    from .model import LinearDenoiser

    conditions = np.asarray(conditions, dtype=np.int64).ravel()
    T = sched.T
    x_T = initial_noise(seed, conditions.size, model.dim, T)[0]
    fp, _ = run_sampler(model.forward, x_T, conditions, sched)
    qs, _ = run_sampler(qm.forward, x_T, conditions, sched)
    deltas = per_step_delta_arrays(model, qm, qs, conditions)
    delta_norms = np.linalg.norm(deltas.reshape(T, -1), axis=1)[::-1].copy()

    gains = np.zeros(T)
    opnorms = np.zeros(T)
    for k, t in enumerate(range(T, 0, -1)):
        e = qs[k] - fp[k]
        if t < T:
            en = np.linalg.norm(e)
            if en > 0:
                gains[t - 1] = np.linalg.norm(_jvp(model, fp[k], t, conditions, e / en, h))
            J = _fd_jacobians(model, fp[k], t, conditions, h)
            opnorms[t - 1] = float(np.max(np.linalg.norm(J, ord=2, axis=(1, 2))))
    coeffs = taylor_coefficients(sched, gains)
    coeffs0 = taylor_coefficients(sched, np.zeros(T))
    coeffs_op = taylor_coefficients(sched, opnorms)
    delta_actual = float(np.linalg.norm(qs[-1] - fp[-1]))
    pred = float(np.dot(coeffs, delta_norms))

    exact = None
    if isinstance(model, LinearDenoiser):
        A = np.stack([model.matrix(t) for t in range(1, T + 1)])
        exact = float(np.linalg.norm(linear_propagation(sched, A, deltas)))
        residual = abs(delta_actual - exact)
    else:
        residual = pred - delta_actual
    return Theorem1Report(delta_actual, delta_norms, coeffs, coeffs0, coeffs_op, gains, pred,
                          float(np.dot(coeffs0, delta_norms)), float(np.dot(coeffs_op, delta_norms)),
                          exact, residual, int(conditions.size), int(seed))


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSpec:
    """Matched-seed evaluation settings; ``splits`` maps split name to its labels."""

    splits: dict
    samples_per_split: int = 2048
    seeds: tuple = (0,)
    sigma_mode: str = "zero"
    features: str = "raw"

    def labels(self, split: str) -> np.ndarray:
        return np.resize(np.asarray(self.splits[split], dtype=np.int64), self.samples_per_split)


@dataclass
class MetricsReport:
    weight_bits: float
    avg_act_bits: float
    nominal_act_bits: float
    flops: float
    bops: float
    seeds: list
    splits: dict = field(default_factory=dict)

    def frechet_to_fp(self, split: str = "calib") -> float:
        return self.splits[split]["frechet_to_fp"]

    def condition_score(self, split: str = "calib") -> float:
        return self.splits[split]["condition_score"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_kv(self, meta: dict | None = None) -> str:
        """Flat ``key=value`` lines; reals at 12 significant digits."""
        def fmt(v):
            if isinstance(v, float):
                return f"{v:.12g}"
            if isinstance(v, (list, tuple)):
                return ",".join(fmt(u) for u in v)
            return str(v)
        lines = [f"# {k}={v}" for k, v in (meta or {}).items()]
        d = self.to_dict()
        splits = d.pop("splits")
        for k, v in d.items():
            lines.append(f"{k}={fmt(v)}")
        for name, vals in splits.items():
            for k, v in vals.items():
                lines.append(f"{name}.{k}={fmt(v)}")
        return "\n".join(lines) + "\n"


def flops_count(model, T: int, n_samples: int) -> float:
    """``2 * MACs`` per forward, times ``T`` steps, times ``n_samples``."""
    return float(2 * model.macs() * T * n_samples)


def evaluate(model, qm, eval_spec: EvalSpec, sched: NoiseSchedule, centers, weight_bits: float = 32.0,
             nominal_act_bits: float | None = None, eps_fns=None) -> MetricsReport:
    """Fréchet-to-FP and condition scores on every split, averaged over ``eval_spec.seeds``.

    FP and quantized sample sets share initial and per-step noise.
    ``eps_fns`` optionally overrides the quantized model's noise predictor.
    """
    splits = {}
    for split in eval_spec.splits:
        labels = eval_spec.labels(split)
        fds, scores, fp_scores = [], [], []
        for seed in eval_spec.seeds:
            x_T, z = initial_noise(seed, labels.size, model.dim, sched.T)
            zz = z if eval_spec.sigma_mode == "standard" else None
            fp, _ = run_sampler(model.forward, x_T, labels, sched, eval_spec.sigma_mode, zz)
            q, _ = run_sampler(eps_fns or qm.forward, x_T, labels, sched, eval_spec.sigma_mode, zz)
            fds.append(sample_frechet(fp[-1], q[-1], eval_spec.features))
            scores.append(condition_match_score(q[-1], labels, centers))
            fp_scores.append(condition_match_score(fp[-1], labels, centers))
        splits[split] = {"frechet_to_fp": float(np.mean(fds)), "condition_score": float(np.mean(scores)),
                         "fp_condition_score": float(np.mean(fp_scores)),
                         "frechet_to_fp_per_seed": [float(v) for v in fds]}
    table = qm.act_table
    acts_on = bool(table.enabled_layers)
    avg = table.average_bits() if acts_on else 32.0
    nominal = (nominal_act_bits if nominal_act_bits is not None else avg) if acts_on else 32.0
    wb = float(weight_bits) if qm.weights_enabled and qm.qweights else 32.0
    n_total = len(eval_spec.splits) * eval_spec.samples_per_split
    flops = flops_count(model, sched.T, n_total)
    return MetricsReport(wb, avg, nominal, flops, bops(flops, wb, nominal), [int(s) for s in eval_spec.seeds],
                         splits)
