"""Noise-prediction networks.

Both denoisers expose the same small surface used by the quantization code:

* ``params`` -- ordered ``dict[str, ndarray]``
* ``weight_layers`` -- ``{layer_id: param_name}`` of weight matrices shaped
  ``(out, in)`` that the weight quantizer may touch
* ``act_layers`` -- layer ids whose *input* activation can be fake-quantized
* ``forward(x, t, c, weights=None, act=None)`` -- ``weights`` overrides
  entries of ``params``; ``act(layer_id, a)`` is applied to each layer input
  before its affine map.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidArgumentError


def silu(z):
    return z / (1.0 + np.exp(-z))


def _silu_grad(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return sig * (1.0 + z * (1.0 - sig))


def time_features(t, dim: int, max_period: float = 1000.0) -> np.ndarray:
    """Sinusoidal features of integer timesteps, shape ``(n, dim)``."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def _identity(layer, a):
    return a


@dataclass
class MLPDenoiser:
    """Conditional residual MLP predicting the noise ``eps`` from ``(x, t, c)``.

    ``a0 = silu(W_in x + W_time f(t) + W_cond e_c + b)``, then two residual
    blocks ``a_{k} = a_{k-1} + silu(W_k a_{k-1} + b_k)`` and a linear output
    layer. The output layer is zero-initialized so an untrained model
    predicts ``eps = 0``.
    """

    dim: int
    n_classes: int
    hidden: int = 64
    time_dim: int = 16
    cond_dim: int = 8
    params: dict = field(default_factory=dict)

    weight_layers = {"in": "in.w", "time": "time.w", "cond": "cond.w",
                     "h1": "h1.w", "h2": "h2.w", "out": "out.w"}
    act_layers = ("in", "time", "cond", "h1", "h2", "out")

    @classmethod
    def init(cls, dim, n_classes, hidden=64, time_dim=16, cond_dim=8, seed=0):
        rng = np.random.default_rng(seed)
        H = hidden

        def dense(n_out, n_in):
            return rng.standard_normal((n_out, n_in)) / np.sqrt(n_in)

        params = {
            "in.w": dense(H, dim), "in.b": np.zeros(H),
            "time.w": dense(H, time_dim),
            "cond.emb": rng.standard_normal((n_classes, cond_dim)),
            "cond.w": dense(H, cond_dim),
            "h1.w": dense(H, H), "h1.b": np.zeros(H),
            "h2.w": dense(H, H), "h2.b": np.zeros(H),
            "out.w": np.zeros((dim, H)), "out.b": np.zeros(dim),
        }
        return cls(dim, n_classes, hidden, time_dim, cond_dim, params)

    @property
    def config(self) -> dict:
        return {"kind": "mlp", "dim": self.dim, "n_classes": self.n_classes, "hidden": self.hidden,
                "time_dim": self.time_dim, "cond_dim": self.cond_dim}

    def macs(self) -> int:
        """Multiply-accumulates of one single-sample forward pass."""
        H = self.hidden
        return H * self.dim + H * self.time_dim + H * self.cond_dim + 2 * H * H + self.dim * H

    def _inputs(self, x, t, c):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise InvalidArgumentError(f"expected input of shape (n, {self.dim}), got {x.shape}")
        n = x.shape[0]
        t = np.broadcast_to(np.asarray(t), (n,))
        c = np.broadcast_to(np.asarray(c, dtype=np.int64), (n,))
        return x, time_features(t, self.time_dim), self.params["cond.emb"][c], c

    def forward(self, x, t, c, weights=None, act=None, cache=None):
        p = self.params if weights is None else {**self.params, **weights}
        act = act or _identity
        x, feat, emb, c = self._inputs(x, t, c)
        ix, ifeat, iemb = act("in", x), act("time", feat), act("cond", emb)
        z0 = ix @ p["in.w"].T + p["in.b"] + ifeat @ p["time.w"].T + iemb @ p["cond.w"].T
        a0 = silu(z0)
        i1 = act("h1", a0)
        z1 = i1 @ p["h1.w"].T + p["h1.b"]
        a1 = a0 + silu(z1)
        i2 = act("h2", a1)
        z2 = i2 @ p["h2.w"].T + p["h2.b"]
        a2 = a1 + silu(z2)
        i3 = act("out", a2)
        out = i3 @ p["out.w"].T + p["out.b"]
        if cache is not None:
            cache.update(x=x, feat=feat, c=c, emb=emb, z0=z0, a0=a0, z1=z1, a1=a1, z2=z2, a2=a2)
        return out

    def loss_and_grad(self, x, t, c, target):
        """Mean over the batch of ``||eps_pred - target||^2`` and its gradient."""
        p = self.params
        cache = {}
        out = self.forward(x, t, c, cache=cache)
        n = out.shape[0]
        diff = out - target
        loss = float(np.sum(diff ** 2) / n)
        g_out = 2.0 * diff / n
        g = {}
        g["out.w"] = g_out.T @ cache["a2"]
        g["out.b"] = g_out.sum(0)
        g_a2 = g_out @ p["out.w"]
        g_z2 = g_a2 * _silu_grad(cache["z2"])
        g["h2.w"] = g_z2.T @ cache["a1"]
        g["h2.b"] = g_z2.sum(0)
        g_a1 = g_a2 + g_z2 @ p["h2.w"]
        g_z1 = g_a1 * _silu_grad(cache["z1"])
        g["h1.w"] = g_z1.T @ cache["a0"]
        g["h1.b"] = g_z1.sum(0)
        g_a0 = g_a1 + g_z1 @ p["h1.w"]
        g_z0 = g_a0 * _silu_grad(cache["z0"])
        g["in.w"] = g_z0.T @ cache["x"]
        g["in.b"] = g_z0.sum(0)
        g["time.w"] = g_z0.T @ cache["feat"]
        g["cond.w"] = g_z0.T @ cache["emb"]
        g_emb = g_z0 @ p["cond.w"]
        g_table = np.zeros_like(p["cond.emb"])
        np.add.at(g_table, cache["c"], g_emb)
        g["cond.emb"] = g_table
        return loss, {k: g[k] for k in p}


@dataclass
class LinearDenoiser:
    """``eps(x, t) = A_t x + b_t``; the first-order expansion of this model is exact.

    ``A`` is stored stacked as a ``(T*dim, dim)`` matrix so per-row weight
    quantization treats every ``(t, output)`` pair as its own channel.
    """

    dim: int
    T: int
    params: dict = field(default_factory=dict)

    weight_layers = {"in": "A"}
    act_layers = ("in",)

    @classmethod
    def from_arrays(cls, A, b=None):
        A = np.asarray(A, dtype=np.float64)
        if A.ndim == 1:
            A = A[:, None, None]
        T, dim, _ = A.shape
        b = np.zeros((T, dim)) if b is None else np.asarray(b, dtype=np.float64).reshape(T, dim)
        return cls(dim, T, {"A": A.reshape(T * dim, dim), "b": b})

    @property
    def config(self) -> dict:
        return {"kind": "linear", "dim": self.dim, "T": self.T}

    def macs(self) -> int:
        return self.dim * self.dim

    def matrix(self, t, weights=None) -> np.ndarray:
        A = self.params["A"] if weights is None else weights.get("A", self.params["A"])
        return A[(t - 1) * self.dim: t * self.dim]

    def forward(self, x, t, c=None, weights=None, act=None, cache=None):
        x = np.asarray(x, dtype=np.float64)
        t = int(np.asarray(t).reshape(-1)[0]) if np.ndim(t) else int(t)
        if not 1 <= t <= self.T:
            raise InvalidArgumentError(f"timestep {t} outside [1, {self.T}]")
        xi = x if act is None else act("in", x)
        return xi @ self.matrix(t, weights).T + self.params["b"][t - 1]


def build_model(config: dict, params: dict):
    kind = config["kind"]
    if kind == "mlp":
        return MLPDenoiser(config["dim"], config["n_classes"], config["hidden"], config["time_dim"],
                           config["cond_dim"], params)
    if kind == "linear":
        return LinearDenoiser(config["dim"], config["T"], params)
    raise InvalidArgumentError(f"unknown model kind {kind!r}")
