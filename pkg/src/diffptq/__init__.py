"""Post-training quantization of toy conditional diffusion models with progressive calibration."""

__version__ = "0.1.0"

from .calibration import CalibrationSpec, fp_trajectory_calibrate, prepare, progressive_calibrate
from .data import MixtureSpec, make_dataset
from .diffusion import NoiseSchedule, TrainConfig, ddpm_step, make_schedule, sample, train_denoiser
from .errors import (
    ConfigError,
    ConsistencyError,
    DiffPTQError,
    InvalidArgumentError,
    NotFoundError,
    TrainingFailure,
    UncalibratedTimestepError,
)
from .fakequant import ActQuantTable, QuantizedDenoiser, quantize_weights
from .metrics import (
    EvalSpec,
    MomentSummary,
    bops,
    condition_match_score,
    evaluate,
    frechet_distance,
    per_step_deltas,
    taylor_coefficients,
    theorem1_check,
)
from .model import LinearDenoiser, MLPDenoiser
from .quant import QuantParams, calibrate_minmax, calibrate_mse, fake_quantize
from .relaxing import (
    RelaxationPolicy,
    apply_relaxation,
    average_bits,
    nominal_average,
    relaxation_sweep,
    sensitivity_probe,
)

__all__ = [
    "ActQuantTable", "CalibrationSpec", "ConfigError", "ConsistencyError", "DiffPTQError", "EvalSpec",
    "InvalidArgumentError", "LinearDenoiser", "MLPDenoiser", "MixtureSpec", "MomentSummary", "NoiseSchedule",
    "NotFoundError", "QuantParams", "QuantizedDenoiser", "RelaxationPolicy", "TrainConfig", "TrainingFailure",
    "UncalibratedTimestepError", "apply_relaxation", "average_bits", "bops", "calibrate_minmax", "calibrate_mse",
    "condition_match_score", "ddpm_step", "evaluate", "fake_quantize", "fp_trajectory_calibrate",
    "frechet_distance", "make_dataset", "make_schedule", "nominal_average", "per_step_deltas", "prepare",
    "progressive_calibrate", "quantize_weights", "relaxation_sweep", "sample", "sensitivity_probe",
    "taylor_coefficients", "theorem1_check", "train_denoiser",
]
