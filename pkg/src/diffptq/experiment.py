"""Config-driven pipelines behind the CLI subcommands.

Every stage reads and writes a single run directory. Each function returns
its in-memory result as well, so tests can call the pipeline directly.
"""

from __future__ import annotations

import json
import logging
from pathlib import Path

import numpy as np

from . import storage
from .calibration import CALIBRATORS, CalibrationSpec, prepare
from .config import ExperimentConfig
from .data import MixtureSpec, make_dataset
from .diffusion import NoiseSchedule, TrainConfig, make_schedule, train_denoiser
from .errors import ConsistencyError, InvalidArgumentError
from .metrics import EvalSpec, MetricsReport, evaluate, theorem1_check
from .relaxing import (
    RelaxationPolicy,
    SweepRow,
    apply_relaxation,
    interval_override_eval,
    nominal_average,
    relaxation_sweep,
    sensitivity_probe,
)

log = logging.getLogger(__name__)

METRICS_TXT = "metrics.txt"
METRICS_JSON = "metrics.json"
PROBE = "probe.csv"
SWEEP = "sweep.csv"
THEOREM_TXT = "theorem1.txt"
THEOREM_JSON = "theorem1.json"

FLOPS_FORMULA = "flops = 2 * macs_per_forward * T * eval_samples_total"


def mixture(cfg: ExperimentConfig) -> MixtureSpec:
    d = cfg.dataset
    return MixtureSpec(d.modes, d.radius, d.std, d.heldout_rotation)


def schedule(cfg: ExperimentConfig) -> NoiseSchedule:
    s = cfg.schedule
    return make_schedule(s.T, s.beta_start, s.beta_end)


def calibration_spec(cfg: ExperimentConfig) -> CalibrationSpec:
    q = cfg.quant
    conditions = np.resize(mixture(cfg).calib_labels(), q.conditions)
    return CalibrationSpec(tuple(conditions), q.samples_per_condition, q.seed, q.calib_method,
                           q.weight_bits, q.act_bits, q.grid_points)


def eval_spec(cfg: ExperimentConfig) -> EvalSpec:
    mix = mixture(cfg)
    e = cfg.eval
    return EvalSpec({"calib": tuple(mix.calib_labels()), "heldout": tuple(mix.heldout_labels())},
                    e.samples, tuple(int(s) for s in e.seeds), e.sigma_mode, e.features)


def relaxation_policy(cfg: ExperimentConfig) -> RelaxationPolicy | None:
    """``None`` when activations are not quantized or nothing is relaxed."""
    if cfg.quant.act_bits is None or cfg.relax.tau == 0:
        return None
    return RelaxationPolicy(cfg.relax.tau, cfg.relax.end, cfg.quant.act_bits, cfg.relax.high_bits)


def expected_schedule(cfg: ExperimentConfig) -> np.ndarray:
    T = cfg.schedule.T
    if cfg.quant.act_bits is None:
        return np.full(T, 16, dtype=np.int64)
    policy = relaxation_policy(cfg)
    return policy.schedule(T) if policy else np.full(T, cfg.quant.act_bits, dtype=np.int64)


def _nominal_bits(cfg: ExperimentConfig) -> float | None:
    if cfg.quant.act_bits is None:
        return None
    policy = relaxation_policy(cfg)
    return nominal_average(policy) if policy else float(cfg.quant.act_bits)


def _run_dir(cfg: ExperimentConfig, out) -> Path:
    return Path(out if out is not None else cfg.out)


# -- train -----------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out=None):
    run = _run_dir(cfg, out)
    mix = mixture(cfg)
    sched = schedule(cfg)
    x, labels = make_dataset(mix, cfg.dataset.n_train, cfg.dataset.seed)
    tr = cfg.training
    tc = TrainConfig(tr.steps, tr.batch_size, tr.lr, tr.seed, tr.hidden, tr.time_dim, tr.cond_dim, tr.rho,
                     tr.log_every)
    model, rows = train_denoiser(x, labels, sched, tc, n_classes=mix.n_classes)
    h = cfg.hash()
    storage.save_checkpoint(run / storage.CHECKPOINT, model, sched, h)
    running = np.minimum.accumulate([r[2] for r in rows])
    table = [(step, float(loss), float(ema), float(m)) for (step, loss, ema), m in zip(rows, running)]
    storage.write_text(run / storage.TRAIN_LOG, storage.csv_text(
        ("step", "loss", "ema_loss", "monotone_loss"), table, storage.provenance(h)))
    return model, sched


def load_model(cfg: ExperimentConfig, out=None):
    model, sched, _ = storage.load_checkpoint(_run_dir(cfg, out) / storage.CHECKPOINT)
    if sched.T != cfg.schedule.T:
        raise ConsistencyError(f"checkpoint schedule has T={sched.T}, config has T={cfg.schedule.T}")
    return model, sched


# -- calibrate -------------------------------------------------------------


def run_calibrate(cfg: ExperimentConfig, out=None, method: str | None = None):
    """Quantize weights, apply relaxation, calibrate activations and persist the results."""
    run = _run_dir(cfg, out)
    method = method or cfg.quant.method
    if method not in CALIBRATORS:
        raise InvalidArgumentError(f"unknown calibration method {method!r}")
    model, sched = load_model(cfg, run)
    spec = calibration_spec(cfg)
    qm = prepare(model, spec, sched, greedy=cfg.quant.greedy_rounding)
    policy = relaxation_policy(cfg)
    if policy is not None:
        qm = qm.with_table(apply_relaxation(qm.act_table, policy))
    calib_log: list = []
    qm = qm.with_table(CALIBRATORS[method](qm, spec, sched, log=calib_log))
    h = cfg.hash()
    storage.save_quantized_weights(run / storage.WEIGHTS, qm, h, cfg.quant.weight_bits)
    storage.save_table(run / storage.TABLE, qm.act_table, h, {"method": method})
    rows = [(r.t, r.layer, r.bits, float(r.calib_mse), float(r.seconds)) for r in calib_log]
    storage.write_text(run / storage.CALIB_LOG, storage.csv_text(
        ("t", "layer_id", "bits", "calib_mse", "seconds"), rows, storage.provenance(h)))
    return qm


def load_quantized(cfg: ExperimentConfig, model, out=None):
    """Load persisted quantizers and check them against ``cfg``."""
    qm, meta = storage.load_quantized_model(model, _run_dir(cfg, out))
    table = qm.act_table
    want = expected_schedule(cfg)
    if table.T != want.size or not np.array_equal(table.bit_schedule, want):
        raise ConsistencyError("activation table bit schedule does not match the config "
                               "(re-run calibrate)")
    if bool(table.enabled_layers) != (cfg.quant.act_bits is not None):
        raise ConsistencyError("activation quantization enabled/disabled differs from the config")
    if meta["weights"]["weight_bits"] != cfg.quant.weight_bits:
        raise ConsistencyError(f"quantized weights use {meta['weights']['weight_bits']} bits, "
                               f"config asks for {cfg.quant.weight_bits}")
    if not table.is_calibrated():
        raise ConsistencyError("activation table is incomplete")
    return qm


# -- evaluate --------------------------------------------------------------


def _weight_bits(cfg: ExperimentConfig) -> float:
    return float(cfg.quant.weight_bits) if cfg.quant.weight_bits is not None else 32.0


def run_evaluate(cfg: ExperimentConfig, out=None) -> MetricsReport:
    run = _run_dir(cfg, out)
    model, sched = load_model(cfg, run)
    qm = load_quantized(cfg, model, run)
    report = evaluate(model, qm, eval_spec(cfg), sched, mixture(cfg).centers(), _weight_bits(cfg),
                      _nominal_bits(cfg))
    meta = {**storage.provenance(cfg.hash()), "flops_formula": FLOPS_FORMULA,
            "macs_per_forward": model.macs(), "bops_formula": "bops = flops * weight_bits * act_bits / 1024"}
    storage.write_text(run / METRICS_TXT, report.to_kv(meta))
    storage.write_text(run / METRICS_JSON, json.dumps({"meta": meta, **report.to_dict()}, indent=1,
                                                      sort_keys=True) + "\n")
    return report


# -- probe -----------------------------------------------------------------

PROBE_COLUMNS = ("variant", "interval_a", "interval_b", "noise_std", "frechet", "baseline_frechet",
                 "condition_score", "baseline_condition_score", "seeds")


def run_probe(cfg: ExperimentConfig, out=None, interval=None, noise_std=None):
    """Noise-perturbation probe plus the full-precision interval override of the quantized model."""
    run = _run_dir(cfg, out)
    model, sched = load_model(cfg, run)
    interval = tuple(int(v) for v in (interval or cfg.probe.interval))
    noise_std = cfg.probe.noise_std if noise_std is None else noise_std
    spec = eval_spec(cfg)
    centers = mixture(cfg).centers()
    res = sensitivity_probe(model, interval, noise_std, spec, sched, cfg.probe.n_seeds, centers,
                            sigma_mode=spec.sigma_mode)
    rows = [("perturb", *interval, res.noise_std, res.fidelity_score, 0.0, res.condition_score,
             res.baseline_condition_score, res.n_seeds)]
    qm = load_quantized(cfg, model, run)
    full = evaluate(model, qm, spec, sched, centers, _weight_bits(cfg))
    mixed = interval_override_eval(model, qm, interval, spec, sched, centers, _weight_bits(cfg))
    rows.append(("fp_override", *interval, 0.0, mixed.frechet_to_fp("calib"), full.frechet_to_fp("calib"),
                 mixed.condition_score("calib"), full.condition_score("calib"), len(spec.seeds)))
    storage.write_text(run / PROBE, storage.csv_text(PROBE_COLUMNS, rows, storage.provenance(cfg.hash())))
    return rows


# -- sweep -----------------------------------------------------------------


def run_sweep(cfg: ExperimentConfig, out=None, taus=None) -> list[SweepRow]:
    run = _run_dir(cfg, out)
    if cfg.quant.act_bits is None:
        raise InvalidArgumentError("a relaxation sweep needs quant.act_bits")
    model, sched = load_model(cfg, run)
    spec = calibration_spec(cfg)
    base = prepare(model, spec, sched, greedy=cfg.quant.greedy_rounding)
    taus = cfg.relax.sweep_taus if taus is None else taus
    rows = relaxation_sweep(lambda: base.with_table(base.act_table.copy()), taus, cfg.relax.end, spec, sched,
                            eval_spec(cfg), mixture(cfg).centers(), cfg.relax.high_bits)
    table = [tuple(getattr(r, c) for c in SweepRow.COLUMNS) for r in rows]
    storage.write_text(run / SWEEP, storage.csv_text(SweepRow.COLUMNS, table, storage.provenance(cfg.hash())))
    return rows


# -- theorem check ---------------------------------------------------------


def run_theorem_check(cfg: ExperimentConfig, out=None):
    run = _run_dir(cfg, out)
    model, sched = load_model(cfg, run)
    qm = load_quantized(cfg, model, run)
    conditions = calibration_spec(cfg).labels()
    report = theorem1_check(model, qm, conditions, int(cfg.eval.seeds[0]), sched)
    d = report.to_dict()
    meta = storage.provenance(cfg.hash())
    lines = [f"# {k}={v}" for k, v in meta.items()]
    for k, v in d.items():
        if isinstance(v, list):
            v = ",".join(repr(float(u)) for u in v)
        lines.append(f"{k}={v!r}" if isinstance(v, float) else f"{k}={v}")
    storage.write_text(run / THEOREM_TXT, "\n".join(lines) + "\n")
    storage.write_text(run / THEOREM_JSON, json.dumps({"meta": meta, **d}, indent=1, sort_keys=True) + "\n")
    return report
