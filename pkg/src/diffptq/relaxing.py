"""Time-wise activation relaxing and timestep-sensitivity probes."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calibration import CalibrationSpec, progressive_calibrate
from .diffusion import NoiseSchedule, initial_noise, run_sampler
from .errors import InvalidArgumentError
from .fakequant import ActQuantTable
from .metrics import EvalSpec, MetricsReport, bops, condition_match_score, evaluate, sample_frechet
from .quant import qrange, round_half_away

ENDS = ("near_x0", "near_xT")


@dataclass(frozen=True)
class RelaxationPolicy:
    """Raise activation bits from ``base_bits`` to ``high_bits`` on a fraction ``tau`` of the steps.

    ``near_x0`` relaxes ``t = 1..m``; ``near_xT`` relaxes ``t = T-m+1..T``.
    """

    tau: float
    end: str = "near_x0"
    base_bits: int = 8
    high_bits: int = 10

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise InvalidArgumentError(f"tau must lie in [0, 1], got {self.tau}")
        if self.end not in ENDS:
            raise InvalidArgumentError(f"end must be one of {ENDS}, got {self.end!r}")
        qrange(self.base_bits)
        qrange(self.high_bits)
        if self.high_bits <= self.base_bits:
            raise InvalidArgumentError("high_bits must exceed base_bits")

    def m(self, T: int) -> int:
        """Number of relaxed steps, ``round(tau * T)`` with ties away from zero."""
        return int(round_half_away(self.tau * T))

    def relaxed_steps(self, T: int) -> list[int]:
        m = self.m(T)
        if m > T:
            raise InvalidArgumentError(f"m={m} exceeds T={T}")
        return list(range(1, m + 1)) if self.end == "near_x0" else list(range(T - m + 1, T + 1))

    def schedule(self, T: int) -> np.ndarray:
        B = np.full(T, self.base_bits, dtype=np.int64)
        for t in self.relaxed_steps(T):
            B[t - 1] = self.high_bits
        return B


def apply_relaxation(table: ActQuantTable, policy: RelaxationPolicy, T: int | None = None) -> ActQuantTable:
    """Copy of ``table`` with the policy's steps raised to ``high_bits``; their entries are dropped."""
    T = table.T if T is None else T
    if T != table.T:
        raise InvalidArgumentError(f"table has T={table.T}, got T={T}")
    if np.any(table.bit_schedule != policy.base_bits):
        raise InvalidArgumentError("table bit schedule must be uniform at the policy's base_bits")
    out = table.copy()
    for t in policy.relaxed_steps(T):
        out.set_bits(t, policy.high_bits)
    return out


def average_bits(obj, T: int | None = None) -> float:
    """Mean of the integer bit schedule of a table, or of a policy at ``T`` steps."""
    if isinstance(obj, ActQuantTable):
        return obj.average_bits()
    if T is None:
        raise InvalidArgumentError("average_bits of a policy needs T")
    return float(np.mean(obj.schedule(T)))


def nominal_average(policy: RelaxationPolicy) -> float:
    """Proportion-exact average ``(1 - tau) * base + tau * high``."""
    return policy.base_bits + policy.tau * (policy.high_bits - policy.base_bits)


# ---------------------------------------------------------------------------
# probes


@dataclass
class ProbeResult:
    interval: tuple
    noise_std: float
    n_seeds: int
    fidelity_score: float          # Fréchet distance to unperturbed samples
    condition_score: float
    baseline_condition_score: float

    @property
    def condition_drop(self) -> float:
        return self.baseline_condition_score - self.condition_score


def _check_interval(interval, T):
    a, b = (int(v) for v in interval)
    if not 1 <= a <= b <= T:
        raise InvalidArgumentError(f"interval [{a}, {b}] must satisfy 1 <= a <= b <= {T}")
    return a, b


def default_noise_std(model, labels, seed: int, sched: NoiseSchedule, interval) -> float:
    """``0.1 *`` RMS of the model's noise predictions at the probed steps."""
    a, b = _check_interval(interval, sched.T)
    x_T = initial_noise(seed, labels.size, model.dim, sched.T)[0]
    _, eps = run_sampler(model.forward, x_T, labels, sched)
    probed = eps[sched.T - b: sched.T - a + 1]
    return 0.1 * float(np.sqrt(np.mean(probed ** 2)))


def sensitivity_probe(model, interval, noise_std: float | None, spec: EvalSpec, sched: NoiseSchedule,
                      n_seeds: int, centers, split: str = "calib", sigma_mode: str = "zero") -> ProbeResult:
    """Full-precision sampling with Gaussian noise added to ``eps`` on steps ``a..b``.

    Seed group ``g`` uses sampling seed ``spec.seeds[0] + g`` for both the
    clean and perturbed runs; the perturbation has its own stream.
    """
    a, b = _check_interval(interval, sched.T)
    labels = spec.labels(split)
    base_seed = int(spec.seeds[0])
    if noise_std is None:
        noise_std = default_noise_std(model, labels, base_seed, sched, (a, b))
    if noise_std < 0:
        raise InvalidArgumentError("noise_std must be >= 0")
    fds, scores, base_scores = [], [], []
    for g in range(n_seeds):
        seed = base_seed + g
        x_T, z = initial_noise(seed, labels.size, model.dim, sched.T)
        zz = z if sigma_mode == "standard" else None
        noise = np.random.default_rng(np.random.SeedSequence([seed, 0x5EED])).standard_normal(
            (sched.T, labels.size, model.dim))

        def perturbed(x, t, c):
            eps = model.forward(x, t, c)
            if a <= t <= b:
                eps = eps + noise_std * noise[t - 1]
            return eps
        clean, _ = run_sampler(model.forward, x_T, labels, sched, sigma_mode, zz)
        pert, _ = run_sampler(perturbed, x_T, labels, sched, sigma_mode, zz)
        fds.append(sample_frechet(clean[-1], pert[-1], spec.features))
        scores.append(condition_match_score(pert[-1], labels, centers))
        base_scores.append(condition_match_score(clean[-1], labels, centers))
    return ProbeResult((a, b), float(noise_std), n_seeds, float(np.mean(fds)), float(np.mean(scores)),
                       float(np.mean(base_scores)))


def interval_override_eval(model, qm, interval, spec: EvalSpec, sched: NoiseSchedule, centers,
                           weight_bits: float = 32.0) -> MetricsReport:
    """Evaluate ``qm`` with steps ``a..b`` run in full precision (weights and activations)."""
    a, b = _check_interval(interval, sched.T)

    def mixed(x, t, c):
        return model.forward(x, t, c) if a <= t <= b else qm.forward(x, t, c)
    return evaluate(model, qm, spec, sched, centers, weight_bits, eps_fns=mixed)


# ---------------------------------------------------------------------------
# sweep


@dataclass
class SweepRow:
    tau: float
    end: str
    avg_bits: float
    nominal_avg_bits: float
    bops: float
    frechet_to_fp: float
    condition_score: float
    seeds: int

    COLUMNS = ("tau", "end", "avg_bits", "nominal_avg_bits", "bops", "frechet_to_fp", "condition_score", "seeds")


def relaxation_sweep(qmodel_factory, taus, end: str, spec: CalibrationSpec, sched: NoiseSchedule,
                     eval_spec: EvalSpec, centers, high_bits: int, split: str = "calib") -> list[SweepRow]:
    """Progressive recalibration and evaluation for each ``tau`` (ascending).

    ``qmodel_factory()`` must return a weight-quantized model whose table
    is uniform at the base activation bit-width.
    """
    taus = [float(t) for t in taus]
    if taus != sorted(taus):
        raise InvalidArgumentError("taus must be sorted ascending")
    rows = []
    for tau in taus:
        qm = qmodel_factory()
        base = int(qm.act_table.bit_schedule[0])
        policy = RelaxationPolicy(tau, end, base, high_bits)
        table = apply_relaxation(qm.act_table, policy)
        qm = qm.with_table(table)
        qm = qm.with_table(progressive_calibrate(qm, spec, sched))
        nominal = nominal_average(policy)
        report = evaluate(qm.base, qm, eval_spec, sched, centers, spec.weight_bits or 32, nominal)
        rows.append(SweepRow(tau, end, table.average_bits(), nominal,
                             bops(report.flops, report.weight_bits, nominal),
                             report.frechet_to_fp(split), report.condition_score(split), len(eval_spec.seeds)))
    return rows
