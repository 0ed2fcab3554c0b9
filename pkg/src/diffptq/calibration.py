"""Per-timestep activation calibration.

Two ways of producing the calibration population for step ``t``:

* :func:`fp_trajectory_calibrate` -- states ``x_t`` from full-precision sampling.
* :func:`progressive_calibrate` -- states ``x̂_t`` from sampling in which every
  step ``> t`` already runs with its calibrated activation quantizers, so the
  accumulated quantization error of earlier steps is present in the data.

In both cases the activations recorded at ``x_t`` come from the
weight-quantized network with full-precision activations, so the only
difference between the two is the state distribution. Sampling is
deterministic (``sigma = 0``).
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .diffusion import NoiseSchedule, ddpm_step, initial_noise, run_sampler
from .errors import InvalidArgumentError
from .fakequant import ActQuantTable, QuantizedDenoiser, quantize_weights, record_inputs
from .quant import DEFAULT_GRID_POINTS, calibrate, fake_quantize, quant_mse


@dataclass(frozen=True)
class CalibrationSpec:
    conditions: tuple
    samples_per_condition: int = 4
    seed: int = 0
    act_calib_method: str = "mse"
    weight_bits: int | None = 8
    act_bits: int | None = 8
    grid_points: int = DEFAULT_GRID_POINTS

    def __post_init__(self):
        object.__setattr__(self, "conditions", tuple(int(c) for c in self.conditions))
        if not self.conditions:
            raise InvalidArgumentError("calibration needs at least one condition")
        if self.samples_per_condition < 1:
            raise InvalidArgumentError("samples_per_condition must be >= 1")
        if self.act_calib_method not in ("mse", "minmax"):
            raise InvalidArgumentError(f"unknown act_calib_method {self.act_calib_method!r}")

    def labels(self) -> np.ndarray:
        """Condition label of every calibration trajectory."""
        return np.repeat(np.asarray(self.conditions, dtype=np.int64), self.samples_per_condition)

    def initial_states(self, dim: int, T: int) -> np.ndarray:
        return initial_noise(self.seed, self.labels().size, dim, T)[0]


@dataclass
class CalibrationLogRow:
    t: int
    layer: str
    bits: int
    calib_mse: float
    seconds: float


def fp_states(model, spec: CalibrationSpec, sched: NoiseSchedule) -> np.ndarray:
    """Full-precision deterministic trajectories of the calibration population, ``(T+1, n, dim)``."""
    states, _ = run_sampler(model.forward, spec.initial_states(model.dim, sched.T), spec.labels(), sched)
    return states


def weight_calibration_inputs(model, spec: CalibrationSpec, sched: NoiseSchedule, max_rows: int = 8192) -> dict:
    """Layer inputs pooled over all timesteps of full-precision calibration trajectories."""
    labels = spec.labels()
    states = fp_states(model, spec, sched)
    pooled: dict[str, list] = {}
    for k, t in enumerate(range(sched.T, 0, -1)):
        for layer, a in record_inputs(model, states[k], t, labels).items():
            pooled.setdefault(layer, []).append(a)
    out = {}
    for layer, chunks in pooled.items():
        a = np.concatenate(chunks)
        stride = max(1, -(-a.shape[0] // max_rows))
        out[layer] = a[::stride]
    return out


def prepare(model, spec: CalibrationSpec, sched: NoiseSchedule, greedy: bool = False) -> QuantizedDenoiser:
    """Weight-quantize ``model`` and attach an uncalibrated table at ``spec.act_bits``."""
    table = ActQuantTable(sched.T, model.act_layers, spec.act_bits)
    if spec.weight_bits is None:
        return quantize_weights(model, None, {}, act_table=table)
    inputs = weight_calibration_inputs(model, spec, sched)
    return quantize_weights(model, spec.weight_bits, inputs, spec.grid_points, greedy, act_table=table)


def _calibrate_step(table: ActQuantTable, record: dict, t: int, spec: CalibrationSpec, log):
    for layer in table.enabled_layers:
        start = time.perf_counter()
        a = record[layer]
        q = calibrate(a, table.effective_bits(layer, t), spec.act_calib_method, spec.grid_points)
        table.set_entry(layer, t, q)
        if log is not None:
            log.append(CalibrationLogRow(t, layer, q.bits, quant_mse(a, q), time.perf_counter() - start))


def _check(qm: QuantizedDenoiser, sched: NoiseSchedule):
    if qm.act_table.T != sched.T:
        raise InvalidArgumentError(f"table has T={qm.act_table.T}, schedule has T={sched.T}")


def progressive_calibrate(qm: QuantizedDenoiser, spec: CalibrationSpec, sched: NoiseSchedule,
                          log: list | None = None) -> ActQuantTable:
    """Calibrate ``t = T..1``, each on states produced with steps ``> t`` quantized.

    The population is advanced one quantized step at a time, which yields
    exactly the ``x̂_t`` that re-running partially-quantized sampling from
    ``x_T`` would, in ``O(T)`` instead of ``O(T^2)`` forward passes.
    """
    _check(qm, sched)
    table = qm.act_table.cleared()
    working = qm.with_table(table)
    labels = spec.labels()
    x = spec.initial_states(qm.dim, sched.T)
    for t in range(sched.T, 0, -1):
        record: dict = {}
        working.forward_fp_acts(x, t, labels, record=record)
        _calibrate_step(table, record, t, spec, log)
        # table entries for t exist now, so this step runs fully quantized
        x = ddpm_step(x, working.forward(x, t, labels), t, sched)
    return table


def fp_trajectory_calibrate(qm: QuantizedDenoiser, spec: CalibrationSpec, sched: NoiseSchedule,
                            log: list | None = None) -> ActQuantTable:
    """Calibrate every step on full-precision trajectories (the PTQ4DM / Q-Diffusion style baseline)."""
    _check(qm, sched)
    table = qm.act_table.cleared()
    labels = spec.labels()
    states = fp_states(qm.base, spec, sched)
    for k, t in enumerate(range(sched.T, 0, -1)):
        record: dict = {}
        qm.forward_fp_acts(states[k], t, labels, record=record)
        _calibrate_step(table, record, t, spec, log)
    return table


CALIBRATORS = {"progressive": progressive_calibrate, "fp_trajectory": fp_trajectory_calibrate}


# ---------------------------------------------------------------------------
# distribution shift


def _js_divergence(a, b, bins: int = 64) -> float:
    lo = min(a.min(), b.min())
    hi = max(a.max(), b.max())
    if hi <= lo:
        return 0.0
    edges = np.linspace(lo, hi, bins + 1)
    p = np.histogram(a, edges)[0].astype(np.float64)
    q = np.histogram(b, edges)[0].astype(np.float64)
    p /= p.sum()
    q /= q.sum()
    m = 0.5 * (p + q)

    def kl(u):
        nz = u > 0
        return float(np.sum(u[nz] * np.log(u[nz] / m[nz])))
    return 0.5 * kl(p) + 0.5 * kl(q)


def _stats(a) -> dict:
    return {"mean": float(a.mean()), "std": float(a.std()), "min": float(a.min()), "max": float(a.max())}


def distribution_shift_report(model, qm: QuantizedDenoiser, spec: CalibrationSpec, sched: NoiseSchedule,
                              probe_timesteps, layers=None) -> list[dict]:
    """Layer-input statistics on FP vs quantized trajectories with shared ``x_T``.

    One dict per ``(t, layer)`` with ``fp`` and ``quant`` summaries and
    ``js_divergence`` (Jensen-Shannon, 64 shared bins) between the two
    empirical distributions of the flattened activations.
    """
    labels = spec.labels()
    x_T = spec.initial_states(model.dim, sched.T)
    fp, _ = run_sampler(model.forward, x_T, labels, sched)
    qs, _ = run_sampler(qm.forward, x_T, labels, sched)
    layers = list(layers or model.act_layers)
    weights = qm.qweights if qm.weights_enabled else None
    out = []
    for t in probe_timesteps:
        t = sched.check_t(t)
        k = sched.T - t
        a_fp = record_inputs(model, fp[k], t, labels, layers)
        # inputs the quantized network presents to each quantizer at x̂_t
        a_q = {}

        def hook(layer, a, _t=t):
            if layer in layers:
                a_q[layer] = a
            if qm.act_table.enabled.get(layer, False):
                return fake_quantize(a, qm.act_table.get(layer, _t))
            return a
        model.forward(qs[k], t, labels, weights=weights, act=hook)
        for layer in layers:
            u, v = a_fp[layer].ravel(), a_q[layer].ravel()
            out.append({"t": t, "layer": layer, "fp": _stats(u), "quant": _stats(v),
                        "js_divergence": _js_divergence(u, v)})
    return out
