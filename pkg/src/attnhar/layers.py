"""Differentiable layers with explicit forward/backward passes.

Every ``forward`` returns ``(output, cache)`` and every ``backward`` takes
that cache plus the upstream gradient and returns ``(grad_input, grads)``
where ``grads`` maps parameter names to arrays shaped like the parameters.
Caches remember which layer produced them and at which parameter version,
so a cache cannot be replayed after an optimizer step.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, ContractError, DimensionError, WindowTooShortError
from .ndcore import Rng, sigmoid

_layer_ids = itertools.count()


@dataclass
class Cache:
    owner: int
    version: int
    values: dict[str, Any] = field(default_factory=dict)

    def __getitem__(self, key):
        return self.values[key]


class Layer:
    """Base class holding named parameter arrays."""

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self._id = next(_layer_ids)
        self.version = 0

    def bump(self):
        """Mark parameters as changed; outstanding caches become stale."""
        self.version += 1

    def _cache(self, **values) -> Cache:
        return Cache(self._id, self.version, values)

    def _check(self, cache: Cache):
        if not isinstance(cache, Cache) or cache.owner != self._id:
            raise ContractError(f"{type(self).__name__}: cache belongs to a different layer")
        if cache.version != self.version:
            raise ContractError(f"{type(self).__name__}: stale cache (parameters changed since forward)")

    def num_params(self) -> int:
        return sum(p.size for p in self.params.values())


def _uniform(rng: Rng, shape, fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return (2.0 * rng.uniform(shape) - 1.0) * bound


class Conv1D(Layer):
    """Valid convolution along time, weights shared over every series in the batch.

    Input ``(N, T, c_in)``, output ``(N, T - kernel_len + 1, n_filters)``.
    The DeepConvLSTM front end feeds each sensor channel as its own series
    (``N = batch * channels``), so filters never mix sensor channels.
    Kernel layout is ``(n_filters, c_in, kernel_len)``; the map is a
    cross-correlation: ``y[t, o] = b[o] + sum_{c,j} W[o, c, j] * x[t + j, c]``.
    """

    def __init__(self, in_channels: int, n_filters: int, kernel_len: int = 5,
                 relu: bool = True, rng: Rng | None = None):
        super().__init__()
        if min(in_channels, n_filters, kernel_len) < 1:
            raise ConfigError("conv dimensions must be positive")
        self.in_channels, self.n_filters, self.kernel_len = in_channels, n_filters, kernel_len
        self.relu = relu
        shape = (n_filters, in_channels, kernel_len)
        fan_in = in_channels * kernel_len
        if rng is None:
            self.params["kernel"] = np.zeros(shape)
            self.params["bias"] = np.zeros(n_filters)
        else:
            self.params["kernel"] = _uniform(rng, shape, fan_in)
            self.params["bias"] = _uniform(rng, n_filters, fan_in)

    def out_len(self, t: int) -> int:
        return t - self.kernel_len + 1

    def forward(self, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.in_channels:
            raise DimensionError(f"conv expects (N, T, {self.in_channels}), got {x.shape}")
        n, t, c = x.shape
        if t < self.kernel_len:
            raise WindowTooShortError(f"window of {t} steps is shorter than kernel {self.kernel_len}")
        t_out = self.out_len(t)
        # (N, T_out, c, k) -> (N*T_out, k*c) ordered (j, c) to match w_mat rows
        cols = sliding_window_view(x, self.kernel_len, axis=1)
        cols = cols.transpose(0, 1, 3, 2).reshape(n * t_out, self.kernel_len * c)
        w_mat = self.params["kernel"].transpose(2, 1, 0).reshape(self.kernel_len * c, self.n_filters)
        y = (cols @ w_mat + self.params["bias"]).reshape(n, t_out, self.n_filters)
        if self.relu:
            y = np.maximum(y, 0.0)
        return y, self._cache(cols=cols, w_mat=w_mat, y=y, x_shape=x.shape)

    def backward(self, cache: Cache, grad_out: np.ndarray):
        self._check(cache)
        n, t, c = cache["x_shape"]
        k, f = self.kernel_len, self.n_filters
        t_out = t - k + 1
        g = grad_out * (cache["y"] > 0) if self.relu else grad_out
        g = g.reshape(n * t_out, f)
        grad_w = (cache["cols"].T @ g).reshape(k, c, f).transpose(2, 1, 0)
        grad_b = g.sum(axis=0)
        gcols = (g @ cache["w_mat"].T).reshape(n, t_out, k, c)
        grad_x = np.zeros((n, t, c))
        for j in range(k):
            grad_x[:, j:j + t_out, :] += gcols[:, :, j, :]
        return grad_x, {"kernel": np.ascontiguousarray(grad_w), "bias": grad_b}


class Linear(Layer):
    """Affine map ``y = x @ W.T + b`` with ``W`` of shape ``(out, in)``."""

    def __init__(self, in_features: int, out_features: int, rng: Rng | None = None,
                 zero_bias: bool = False):
        super().__init__()
        if min(in_features, out_features) < 1:
            raise ConfigError("linear dimensions must be positive")
        self.in_features, self.out_features = in_features, out_features
        if rng is None:
            self.params["weight"] = np.zeros((out_features, in_features))
            self.params["bias"] = np.zeros(out_features)
        else:
            self.params["weight"] = _uniform(rng, (out_features, in_features), in_features)
            self.params["bias"] = (np.zeros(out_features) if zero_bias
                                   else _uniform(rng, out_features, in_features))

    def forward(self, x: np.ndarray):
        if x.shape[-1] != self.in_features:
            raise DimensionError(f"linear expects last axis {self.in_features}, got {x.shape}")
        return x @ self.params["weight"].T + self.params["bias"], self._cache(x=x)

    def backward(self, cache: Cache, grad_out: np.ndarray):
        self._check(cache)
        x = cache["x"]
        x2 = x.reshape(-1, self.in_features)
        g2 = grad_out.reshape(-1, self.out_features)
        grads = {"weight": g2.T @ x2, "bias": g2.sum(axis=0)}
        return grad_out @ self.params["weight"], grads


class Dropout(Layer):
    """Inverted dropout: kept units are scaled by ``1 / (1 - p)`` in training."""

    def __init__(self, p: float = 0.5):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ConfigError(f"dropout probability must lie in [0, 1), got {p}")
        self.p = p

    def forward(self, x: np.ndarray, train: bool = False, rng: Rng | None = None):
        if not train or self.p == 0.0:
            return x, self._cache(mask=None)
        if rng is None:
            raise ConfigError("dropout in train mode needs an Rng")
        mask = (rng.uniform(x.shape) >= self.p) / (1.0 - self.p)
        return x * mask, self._cache(mask=mask)

    def backward(self, cache: Cache, grad_out: np.ndarray):
        self._check(cache)
        mask = cache["mask"]
        return (grad_out if mask is None else grad_out * mask), {}


GATES = ("input", "forget", "output", "candidate")


class LSTM(Layer):
    """Single LSTM layer over a batch of sequences, zero initial state.

    Gate pre-activations are ``x @ Wx + h_prev @ Wh + b`` with the four gates
    stacked along the last axis in the order input, forget, output,
    candidate (``GATES``); ``gate_slice`` returns the columns of one gate.
    """

    def __init__(self, input_size: int, hidden_size: int, rng: Rng | None = None,
                 forget_bias: float = 1.0):
        super().__init__()
        if min(input_size, hidden_size) < 1:
            raise ConfigError("lstm dimensions must be positive")
        self.input_size, self.hidden_size = input_size, hidden_size
        h4 = 4 * hidden_size
        if rng is None:
            self.params["Wx"] = np.zeros((input_size, h4))
            self.params["Wh"] = np.zeros((hidden_size, h4))
            self.params["b"] = np.zeros(h4)
        else:
            self.params["Wx"] = _uniform(rng, (input_size, h4), input_size)
            self.params["Wh"] = _uniform(rng, (hidden_size, h4), hidden_size)
            self.params["b"] = _uniform(rng, h4, hidden_size)
            self.params["b"][self.gate_slice("forget")] = forget_bias

    def gate_slice(self, gate: str) -> slice:
        k = GATES.index(gate)
        return slice(k * self.hidden_size, (k + 1) * self.hidden_size)

    def forward(self, x: np.ndarray):
        if x.ndim != 3 or x.shape[2] != self.input_size:
            raise DimensionError(f"lstm expects (B, T, {self.input_size}), got {x.shape}")
        b, t, _ = x.shape
        hs = self.hidden_size
        wh = self.params["Wh"]
        xw = (x.reshape(b * t, -1) @ self.params["Wx"] + self.params["b"]).reshape(b, t, 4 * hs)
        h = np.zeros((b, t, hs))
        c = np.zeros((b, t, hs))
        acts = np.empty((b, t, 4 * hs))
        h_prev = np.zeros((b, hs))
        c_prev = np.zeros((b, hs))
        for step in range(t):
            z = xw[:, step] + h_prev @ wh
            a = acts[:, step]
            a[:, :3 * hs] = sigmoid(z[:, :3 * hs])
            a[:, 3 * hs:] = np.tanh(z[:, 3 * hs:])
            i, f, o, g = a[:, :hs], a[:, hs:2 * hs], a[:, 2 * hs:3 * hs], a[:, 3 * hs:]
            c_prev = f * c_prev + i * g
            h_prev = o * np.tanh(c_prev)
            c[:, step], h[:, step] = c_prev, h_prev
        return h, self._cache(x=x, h=h, c=c, acts=acts)

    def backward(self, cache: Cache, grad_h: np.ndarray):
        """BPTT. ``grad_h`` holds dL/dh_t for every timestep (shape ``(B, T, H)``)."""
        self._check(cache)
        x, h, c, acts = cache["x"], cache["h"], cache["c"], cache["acts"]
        if grad_h is None or grad_h.shape != h.shape:
            got = None if grad_h is None else grad_h.shape
            raise ContractError(f"lstm backward needs a gradient for every timestep {h.shape}, got {got}")
        b, t, hs = h.shape
        wh = self.params["Wh"]
        dz_all = np.empty((b, t, 4 * hs))
        dh_next = np.zeros((b, hs))
        dc_next = np.zeros((b, hs))
        for step in range(t - 1, -1, -1):
            a = acts[:, step]
            i, f, o, g = a[:, :hs], a[:, hs:2 * hs], a[:, 2 * hs:3 * hs], a[:, 3 * hs:]
            tc = np.tanh(c[:, step])
            c_prev = c[:, step - 1] if step > 0 else np.zeros((b, hs))
            dh = grad_h[:, step] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            dz = dz_all[:, step]
            dz[:, :hs] = dc * g * i * (1.0 - i)
            dz[:, hs:2 * hs] = dc * c_prev * f * (1.0 - f)
            dz[:, 2 * hs:3 * hs] = dh * tc * o * (1.0 - o)
            dz[:, 3 * hs:] = dc * i * (1.0 - g * g)
            dh_next = dz @ wh.T
            dc_next = dc * f
        h_prev = np.concatenate([np.zeros((b, 1, hs)), h[:, :-1]], axis=1)
        dz2 = dz_all.reshape(b * t, 4 * hs)
        grads = {
            "Wx": x.reshape(b * t, -1).T @ dz2,
            "Wh": h_prev.reshape(b * t, hs).T @ dz2,
            "b": dz2.sum(axis=0),
        }
        grad_x = (dz2 @ self.params["Wx"].T).reshape(x.shape)
        return grad_x, grads


class LSTMStack(Layer):
    """Stacked LSTM layers with optional dropout between consecutive layers.

    The top layer's full hidden sequence is returned because the attention
    head consumes every timestep, not just the last one.
    """

    def __init__(self, layers: list[LSTM], dropout: Dropout | None = None):
        super().__init__()
        for lower, upper in zip(layers, layers[1:]):
            if lower.hidden_size != upper.input_size:
                raise ConfigError("stacked lstm sizes do not chain")
        self.layers = layers
        self.dropout = dropout
        for k, layer in enumerate(layers):
            for name, p in layer.params.items():
                self.params[f"l{k}.{name}"] = p

    def bump(self):
        super().bump()
        for layer in self.layers:
            layer.bump()

    def forward(self, x: np.ndarray, train: bool = False, rng: Rng | None = None):
        caches = []
        for k, layer in enumerate(self.layers):
            if k > 0 and self.dropout is not None:
                x, dc = self.dropout.forward(x, train, rng)
                caches.append(dc)
            x, lc = layer.forward(x)
            caches.append(lc)
        return x, self._cache(caches=caches)

    def backward(self, cache: Cache, grad_h: np.ndarray):
        self._check(cache)
        caches = list(cache["caches"])
        grads = {}
        g = grad_h
        for k in range(len(self.layers) - 1, -1, -1):
            g, lg = self.layers[k].backward(caches.pop(), g)
            grads.update({f"l{k}.{n}": v for n, v in lg.items()})
            if k > 0 and self.dropout is not None:
                g, _ = self.dropout.backward(caches.pop(), g)
        return g, grads
