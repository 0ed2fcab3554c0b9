"""Uniform affine fake-quantization and single-tensor calibration.

All arithmetic is simulated in float64: values are quantized to integer
codes and immediately dequantized back, ``s * (clip(round(x / s) + z) - z)``.
Only the unsigned asymmetric scheme is supported (``q_min = 0``).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError

MIN_BITS = 2
MAX_BITS = 16
DEFAULT_GRID_POINTS = 80


def qrange(bits: int) -> tuple[int, int]:
    """Integer code range ``(q_min, q_max)`` of the unsigned ``bits``-bit scheme."""
    if isinstance(bits, bool) or int(bits) != bits or not MIN_BITS <= bits <= MAX_BITS:
        raise InvalidArgumentError(f"bits must be an integer in [{MIN_BITS}, {MAX_BITS}], got {bits!r}")
    return 0, 2 ** int(bits) - 1


def round_half_away(x):
    """Round to nearest integer, ties away from zero (``np.round`` rounds ties to even)."""
    x = np.asarray(x, dtype=np.float64)
    return np.copysign(np.floor(np.abs(x) + 0.5), x)


@dataclass(frozen=True)
class QuantParams:
    """Scale / zero-point / bit-width of one uniform affine quantizer.

    Per-tensor quantizers hold a float ``scale`` and int ``zero_point``.
    Per-channel quantizers hold 1-D arrays with one entry per slice along
    ``axis``.
    """

    scale: float | np.ndarray
    zero_point: int | np.ndarray
    bits: int
    axis: int | None = None

    def __post_init__(self):
        q_min, q_max = qrange(self.bits)
        s = np.asarray(self.scale, dtype=np.float64)
        z = np.asarray(self.zero_point)
        if self.axis is None:
            if s.ndim or z.ndim:
                raise InvalidArgumentError("per-tensor QuantParams needs scalar scale and zero_point")
            object.__setattr__(self, "scale", float(s))
            object.__setattr__(self, "zero_point", int(z))
        else:
            if s.ndim != 1 or s.shape != z.shape:
                raise InvalidArgumentError("per-channel QuantParams needs 1-D scale and zero_point of equal length")
            s = s.copy()
            z = z.astype(np.int64)
            s.setflags(write=False)
            z.setflags(write=False)
            object.__setattr__(self, "scale", s)
            object.__setattr__(self, "zero_point", z)
        if not np.all(np.isfinite(s)) or not np.all(s > 0):
            raise InvalidArgumentError("scale must be finite and positive")
        if np.any(np.asarray(self.zero_point) < q_min) or np.any(np.asarray(self.zero_point) > q_max):
            raise InvalidArgumentError(f"zero_point outside [{q_min}, {q_max}]")

    @property
    def q_min(self) -> int:
        return qrange(self.bits)[0]

    @property
    def q_max(self) -> int:
        return qrange(self.bits)[1]

    @property
    def granularity(self) -> str:
        return "per-tensor" if self.axis is None else "per-channel"

    def representable_range(self):
        """``(lo, hi)`` of the dequantized grid (arrays for per-channel)."""
        s = np.asarray(self.scale)
        z = np.asarray(self.zero_point)
        return s * (self.q_min - z), s * (self.q_max - z)

    def to_record(self) -> str:
        """Serialize as ``key=value`` lines; scales use ``repr`` (round-trip exact)."""
        if self.axis is None:
            scale = repr(self.scale)
            zp = str(self.zero_point)
        else:
            scale = ",".join(repr(float(v)) for v in self.scale)
            zp = ",".join(str(int(v)) for v in self.zero_point)
        axis = "" if self.axis is None else str(self.axis)
        return "\n".join([
            f"scale={scale}",
            f"zero_point={zp}",
            f"bits={self.bits}",
            f"granularity={self.granularity}",
            f"axis={axis}",
        ])

    @classmethod
    def from_record(cls, text: str) -> "QuantParams":
        fields = {}
        for line in text.strip().splitlines():
            key, _, value = line.partition("=")
            fields[key.strip()] = value.strip()
        try:
            bits = int(fields["bits"])
            if fields["granularity"] == "per-tensor":
                return cls(float(fields["scale"]), int(fields["zero_point"]), bits)
            scale = np.array([float(v) for v in fields["scale"].split(",")])
            zp = np.array([int(v) for v in fields["zero_point"].split(",")])
            return cls(scale, zp, bits, axis=int(fields["axis"]))
        except KeyError as exc:
            raise InvalidArgumentError(f"QuantParams record missing key {exc.args[0]!r}") from None


def _broadcast(q: QuantParams, ndim: int):
    if q.axis is None:
        return q.scale, q.zero_point
    if not 0 <= q.axis < ndim:
        raise InvalidArgumentError(f"channel axis {q.axis} out of range for rank-{ndim} input")
    shape = [1] * ndim
    shape[q.axis] = -1
    return q.scale.reshape(shape), q.zero_point.reshape(shape)


def quantize_codes(x, q: QuantParams) -> np.ndarray:
    """Integer codes ``clip(round(x/s) + z, q_min, q_max)`` as float64."""
    x = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("fake_quantize input contains non-finite values")
    s, z = _broadcast(q, x.ndim)
    return np.clip(round_half_away(x / s) + z, q.q_min, q.q_max)


def fake_quantize(x, q: QuantParams) -> np.ndarray:
    s, z = _broadcast(q, np.ndim(x))
    return s * (quantize_codes(x, q) - z)


def _check_samples(samples) -> np.ndarray:
    x = np.asarray(samples, dtype=np.float64).ravel()
    if x.size == 0:
        raise InvalidArgumentError("calibration samples are empty")
    if not np.all(np.isfinite(x)):
        raise InvalidArgumentError("calibration samples contain non-finite values")
    return x


def zero_inclusive(lo, hi):
    """Widen ``[lo, hi]`` to contain 0 so the grid can always represent it exactly."""
    return np.minimum(lo, 0.0), np.maximum(hi, 0.0)


def _range_params(lo, hi, bits):
    # lo < 0 < hi or lo < hi with 0 an endpoint; scalars or per-channel arrays
    q_min, q_max = qrange(bits)
    s = (hi - lo) / (q_max - q_min)
    z = np.clip(round_half_away(q_min - lo / s), q_min, q_max)
    return s, z


def _zero_params(bits: int) -> QuantParams:
    # all-zero input: any positive scale is exact
    return QuantParams(2.0 ** -bits, qrange(bits)[0], bits)


def calibrate_minmax(samples, bits: int = 8) -> QuantParams:
    """Quantizer whose grid spans ``[min(samples, 0), max(samples, 0)]``."""
    x = _check_samples(samples)
    lo, hi = zero_inclusive(float(x.min()), float(x.max()))
    if hi <= lo:
        return _zero_params(bits)
    s, z = _range_params(lo, hi, bits)
    return QuantParams(float(s), int(z), bits)


def quant_mse(samples, q: QuantParams) -> float:
    x = np.asarray(samples, dtype=np.float64)
    return float(np.mean((x - fake_quantize(x, q)) ** 2))


def calibrate_mse(samples, bits: int = 8, grid_points: int = DEFAULT_GRID_POINTS) -> QuantParams:
    """Search clipping ranges ``[a*lo, a*hi]``, ``a`` in ``linspace(0.5, 1, grid_points)``.

    ``[lo, hi]`` is the zero-inclusive min-max range.

    Returns the candidate with the smallest round-trip MSE on ``samples``.
    Ties go to the larger ``a``, so ``a = 1`` (min-max) wins when nothing
    beats it and the result never does worse than :func:`calibrate_minmax`.
    """
    x = _check_samples(samples)
    if grid_points < 2:
        raise InvalidArgumentError("grid_points must be >= 2")
    lo, hi = zero_inclusive(float(x.min()), float(x.max()))
    if hi <= lo:
        return _zero_params(bits)
    q_min, q_max = qrange(bits)
    alphas = np.linspace(0.5, 1.0, grid_points)[::-1]
    best = None
    best_err = np.inf
    # chunk over candidates to bound memory on large sample sets
    chunk = max(1, 2_000_000 // x.size)
    for start in range(0, alphas.size, chunk):
        a = alphas[start:start + chunk]
        c_lo, c_hi = a * lo, a * hi
        s, z = _range_params(c_lo, c_hi, bits)
        codes = np.clip(round_half_away(x[None, :] / s[:, None]) + z[:, None], q_min, q_max)
        err = np.mean((x[None, :] - s[:, None] * (codes - z[:, None])) ** 2, axis=1)
        for i in range(a.size):
            if err[i] < best_err:
                best_err = err[i]
                best = (float(s[i]), int(z[i]))
    return QuantParams(best[0], best[1], bits)


def calibrate(samples, bits: int, method: str = "mse", grid_points: int = DEFAULT_GRID_POINTS) -> QuantParams:
    if method == "mse":
        return calibrate_mse(samples, bits, grid_points)
    if method == "minmax":
        return calibrate_minmax(samples, bits)
    raise InvalidArgumentError(f"unknown calibration method {method!r}")


def calibrate_minmax_per_channel(w, bits: int, axis: int = 0) -> QuantParams:
    """Per-channel zero-inclusive min-max over every slice of ``w`` along ``axis``."""
    w = np.asarray(w, dtype=np.float64)
    moved = np.moveaxis(w, axis, 0).reshape(w.shape[axis], -1)
    lo, hi = zero_inclusive(moved.min(axis=1), moved.max(axis=1))
    s = np.full(lo.shape, 2.0 ** -bits)
    z = np.full(lo.shape, qrange(bits)[0], dtype=np.int64)
    ok = hi > lo
    if np.any(ok):
        s_ok, z_ok = _range_params(lo[ok], hi[ok], bits)
        s[ok], z[ok] = s_ok, z_ok
    return QuantParams(s, z, bits, axis=axis)
