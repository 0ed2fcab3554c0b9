"""Fake-quantized denoiser: quantized weights plus a per-timestep activation table."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UncalibratedTimestepError
from .quant import (
    DEFAULT_GRID_POINTS,
    QuantParams,
    calibrate_minmax_per_channel,
    fake_quantize,
    qrange,
    quantize_codes,
    round_half_away,
    zero_inclusive,
)

PROTECTED_LAYERS = ("out",)
PROTECTED_MIN_BITS = 8
TABLE_HEADER = ("layer_id", "t", "bits", "scale", "zero_point")


class ActQuantTable:
    """Per-(layer, timestep) activation quantizers and the bit schedule ``B``.

    ``bit_schedule[t - 1]`` is ``B[t]``. Layers in ``protected`` are
    quantized at ``max(B[t], 8)``.
    """

    def __init__(self, T: int, layers, bits: int | None, enabled=None, protected=PROTECTED_LAYERS):
        self.T = int(T)
        self.layers = tuple(layers)
        self.protected = tuple(p for p in protected if p in self.layers)
        if bits is None:
            self.bit_schedule = np.full(self.T, 16, dtype=np.int64)
            enabled = {layer: False for layer in self.layers}
        else:
            qrange(bits)
            self.bit_schedule = np.full(self.T, int(bits), dtype=np.int64)
        self.enabled = {layer: True for layer in self.layers} if enabled is None else dict(enabled)
        self.entries: dict[tuple[str, int], QuantParams] = {}

    def _check_t(self, t) -> int:
        if int(t) != t or not 1 <= t <= self.T:
            raise InvalidArgumentError(f"timestep {t!r} outside [1, {self.T}]")
        return int(t)

    def bits_at(self, t: int) -> int:
        return int(self.bit_schedule[self._check_t(t) - 1])

    def effective_bits(self, layer: str, t: int) -> int:
        b = self.bits_at(t)
        return min(16, max(b, PROTECTED_MIN_BITS)) if layer in self.protected else b

    @property
    def enabled_layers(self) -> list[str]:
        return [layer for layer in self.layers if self.enabled[layer]]

    def set_bits(self, t: int, bits: int) -> "ActQuantTable":
        """Set ``B[t]`` and drop the calibrated entries at ``t``."""
        t = self._check_t(t)
        qrange(bits)
        self.bit_schedule[t - 1] = int(bits)
        for layer in self.layers:
            self.entries.pop((layer, t), None)
        return self

    def set_entry(self, layer: str, t: int, q: QuantParams) -> None:
        t = self._check_t(t)
        if layer not in self.layers:
            raise InvalidArgumentError(f"unknown layer {layer!r}")
        if q.bits != self.effective_bits(layer, t):
            raise InvalidArgumentError(
                f"quantizer for ({layer}, {t}) has {q.bits} bits, schedule requires {self.effective_bits(layer, t)}")
        self.entries[(layer, t)] = q

    def get(self, layer: str, t: int) -> QuantParams:
        try:
            return self.entries[(layer, t)]
        except KeyError:
            raise UncalibratedTimestepError(layer, t) from None

    def is_calibrated(self) -> bool:
        return all((layer, t) in self.entries for layer in self.enabled_layers for t in range(1, self.T + 1))

    def average_bits(self) -> float:
        return float(np.mean(self.bit_schedule))

    def copy(self) -> "ActQuantTable":
        new = ActQuantTable.__new__(ActQuantTable)
        new.T, new.layers, new.protected = self.T, self.layers, self.protected
        new.bit_schedule = self.bit_schedule.copy()
        new.enabled = dict(self.enabled)
        new.entries = dict(self.entries)
        return new

    def cleared(self) -> "ActQuantTable":
        new = self.copy()
        new.entries = {}
        return new

    # -- persistence -------------------------------------------------------

    def to_text(self, meta: dict | None = None) -> str:
        """Comment header (``# key=value``), then a CSV header row and one row per entry.

        Rows are sorted by layer order, then descending ``t`` (calibration order).
        """
        lines = ["# diffptq activation quantizer table v1"]
        for k, v in (meta or {}).items():
            lines.append(f"# {k}={v}")
        lines.append(f"# T={self.T}")
        lines.append("# layers=" + ",".join(self.layers))
        lines.append("# enabled=" + ",".join(self.enabled_layers))
        lines.append("# protected=" + ",".join(self.protected))
        lines.append("# bit_schedule=" + ",".join(str(int(b)) for b in self.bit_schedule))
        lines.append(",".join(TABLE_HEADER))
        for layer in self.layers:
            for t in range(self.T, 0, -1):
                q = self.entries.get((layer, t))
                if q is not None:
                    lines.append(f"{layer},{t},{q.bits},{q.scale!r},{q.zero_point}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> tuple["ActQuantTable", dict]:
        meta = {}
        rows = []
        header_seen = False
        for line in text.splitlines():
            if not line.strip():
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].strip().partition("=")
                if sep:
                    meta[key.strip()] = value.strip()
                continue
            if not header_seen:
                if tuple(line.split(",")) != TABLE_HEADER:
                    raise InvalidArgumentError(f"unexpected table header {line!r}")
                header_seen = True
                continue
            rows.append(line.split(","))

        def _list(key):
            return [v for v in meta.pop(key, "").split(",") if v]

        T = int(meta.pop("T"))
        layers = _list("layers")
        enabled_layers = set(_list("enabled"))
        protected = _list("protected")
        table = cls(T, layers, 8, enabled={layer: layer in enabled_layers for layer in layers}, protected=protected)
        table.bit_schedule = np.array([int(b) for b in _list("bit_schedule")], dtype=np.int64)
        if table.bit_schedule.size != T:
            raise InvalidArgumentError("bit_schedule length does not match T")
        for layer, t, bits, scale, zp in rows:
            table.set_entry(layer, int(t), QuantParams(float(scale), int(zp), int(bits)))
        return table, meta


@dataclass(frozen=True)
class QuantizedDenoiser:
    """A denoiser run with fake-quantized weights and per-timestep activation quantizers.

    ``qweights`` holds the materialized quantized weight matrices, keyed by
    parameter name. Base parameters must not be mutated after wrapping.
    """

    base: object
    weight_params: dict
    qweights: dict
    act_table: ActQuantTable
    weights_enabled: bool = True

    @property
    def dim(self) -> int:
        return self.base.dim

    @property
    def T(self) -> int:
        return self.act_table.T

    def with_table(self, table: ActQuantTable) -> "QuantizedDenoiser":
        return dataclasses.replace(self, act_table=table)

    def disabled(self) -> "QuantizedDenoiser":
        """Same wrapper with every quantizer switched off."""
        table = self.act_table.copy()
        table.enabled = {layer: False for layer in table.layers}
        return dataclasses.replace(self, act_table=table, weights_enabled=False)

    def _weights(self):
        return self.qweights if self.weights_enabled and self.qweights else None

    def _act_hook(self, t: int):
        table = self.act_table
        enabled = table.enabled

        def hook(layer, a):
            if not enabled.get(layer, False):
                return a
            return fake_quantize(a, table.get(layer, t))
        return hook

    def forward(self, x, t, c=None):
        """Quantized noise prediction at a single timestep ``t``."""
        t = int(t)
        return self.base.forward(x, t, c, weights=self._weights(), act=self._act_hook(t))

    def forward_fp_acts(self, x, t, c=None, record: dict | None = None):
        """Quantized weights, full-precision activations; optionally record each enabled layer's input."""
        enabled = self.act_table.enabled

        def hook(layer, a):
            if record is not None and enabled.get(layer, False):
                record[layer] = a
            return a
        return self.base.forward(x, int(t), c, weights=self._weights(), act=hook)


def record_inputs(model, x, t, c, layers=None, weights=None) -> dict:
    """Inputs seen by each layer in one forward pass."""
    out = {}

    def hook(layer, a):
        if layers is None or layer in layers:
            out[layer] = a
        return a
    model.forward(x, t, c, weights=weights, act=hook)
    return out


def _row_output_mse(dw, cov):
    # per-row E[(dw_j . x)^2] for inputs with second-moment matrix cov
    return np.einsum("ij,jk,ik->i", dw, cov, dw)


def _search_row_scales(w, cov, bits, grid_points):
    q_min, q_max = qrange(bits)
    lo, hi = zero_inclusive(w.min(axis=1), w.max(axis=1))
    base = calibrate_minmax_per_channel(w, bits, axis=0)
    best_s, best_z = np.array(base.scale), np.array(base.zero_point)
    best_err = _row_output_mse(w - fake_quantize(w, base), cov)
    span = hi > lo
    for a in np.linspace(0.5, 1.0, grid_points)[::-1][1:]:
        c_lo, c_hi = a * lo, a * hi
        s = np.where(span, (c_hi - c_lo) / (q_max - q_min), best_s)
        z = np.where(span, np.clip(round_half_away(q_min - c_lo / s), q_min, q_max), best_z)
        wq = s[:, None] * (np.clip(round_half_away(w / s[:, None]) + z[:, None], q_min, q_max) - z[:, None])
        err = _row_output_mse(w - wq, cov)
        better = err < best_err
        best_s = np.where(better, s, best_s)
        best_z = np.where(better, z, best_z)
        best_err = np.where(better, err, best_err)
    return QuantParams(best_s, best_z.astype(np.int64), bits, axis=0)


def _greedy_rounding(w, q: QuantParams, cov):
    """One pass of round-up/round-down flips, largest rounding residual first."""
    s = q.scale[:, None]
    z = q.zero_point[:, None]
    codes = quantize_codes(w, q)
    d = s * (codes - z) - w
    g = d @ cov
    frac = np.abs(w / s - round_half_away(w / s))
    order = np.argsort(-frac, axis=1, kind="stable")
    rows = np.arange(w.shape[0])
    for k in range(w.shape[1]):
        i = order[:, k]
        exact = w[rows, i] / s[:, 0]
        cur = codes[rows, i] - z[:, 0]
        alt = np.where(cur > exact, np.floor(exact), np.ceil(exact))
        alt_code = alt + z[:, 0]
        step = np.where(alt_code == codes[rows, i], 0.0, (alt - cur) * s[:, 0])
        valid = (alt_code >= q.q_min) & (alt_code <= q.q_max) & (step != 0)
        gain = 2 * step * g[rows, i] + step ** 2 * cov[i, i]
        take = valid & (gain < 0)
        if np.any(take):
            r = rows[take]
            codes[r, i[take]] = alt_code[take]
            d[r, i[take]] += step[take]
            g[r] += step[take, None] * cov[i[take]]
    return s * (codes - z)


def quantize_weights(model, bits: int | None, calib_inputs: dict, grid_points: int = DEFAULT_GRID_POINTS,
                     greedy: bool = False, act_table: ActQuantTable | None = None,
                     T: int | None = None) -> QuantizedDenoiser:
    """Per-output-channel weight quantization chosen by layer-output MSE on ``calib_inputs``.

    ``calib_inputs[layer]`` is an ``(n, in_features)`` sample of that layer's
    input from full-precision forward passes. The clipping range of each row
    is searched over ``[a*min, a*max]``, ``a`` in ``linspace(0.5, 1, grid_points)``;
    ``a = 1`` is plain min-max, so the result is never worse than min-max.
    With ``greedy`` the rounding direction of individual weights is then
    refined; the stored weights stay on the quantization grid but no longer
    equal ``fake_quantize(w, params)``.
    """
    if act_table is None:
        act_table = ActQuantTable(T or _model_T(model), model.act_layers, None)
    table = act_table
    if bits is None:
        return QuantizedDenoiser(model, {}, {}, table, weights_enabled=False)
    weight_params, qweights = {}, {}
    for layer, pname in model.weight_layers.items():
        xs = calib_inputs.get(layer)
        if xs is None or np.asarray(xs).size == 0:
            raise InvalidArgumentError(f"no calibration inputs for layer {layer!r}")
        xs = np.asarray(xs, dtype=np.float64)
        cov = xs.T @ xs / xs.shape[0]
        w = model.params[pname]
        q = _search_row_scales(w, cov, bits, grid_points)
        weight_params[layer] = q
        qweights[pname] = _greedy_rounding(w, q, cov) if greedy else fake_quantize(w, q)
    return QuantizedDenoiser(model, weight_params, qweights, table)


def layer_output_mse(w, wq, xs) -> float:
    """Mean squared difference of ``x @ w.T`` and ``x @ wq.T`` over the rows of ``xs``."""
    xs = np.asarray(xs, dtype=np.float64)
    return float(np.mean((xs @ (np.asarray(w) - np.asarray(wq)).T) ** 2))


def _model_T(model) -> int:
    T = getattr(model, "T", None)
    if T is None:
        raise InvalidArgumentError("pass T or act_table for models without a fixed number of steps")
    return T
