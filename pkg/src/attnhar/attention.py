"""Temporal attention over the LSTM's historical hidden states.

Given top-layer hidden states ``h_1 .. h_T`` of a frame, the first ``T - 1``
form the past context and ``h_T`` is the current state::

    transformed_i = tanh(W1 @ h_i + b1)              i = 1 .. T-1
    score_i       = W2 @ transformed_i + b2
    weights       = softmax(score)
    final         = sum_i weights_i * h_i + h_T

The weighted sum runs over the raw hidden states; the tanh transform only
feeds the scores.  ``h_T`` reaches ``final`` through an additive skip path.
With ``score_hidden`` set, the score becomes two stacked linear maps
(``H -> score_hidden -> 1``) instead of one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .layers import Layer, _uniform
from .ndcore import Rng, softmax


@dataclass
class AttentionTrace:
    weights: np.ndarray
    frame_id: int = -1
    predicted: int = -1
    true: int = -1


class TemporalAttention(Layer):
    def __init__(self, hidden_size: int, rng: Rng | None = None, score_hidden: int | None = None):
        super().__init__()
        if hidden_size < 1 or (score_hidden is not None and score_hidden < 1):
            raise ConfigError("attention dimensions must be positive")
        self.hidden_size = hidden_size
        self.score_hidden = score_hidden
        hs = hidden_size
        score_in = hs if score_hidden is None else score_hidden

        def init(shape, fan_in):
            return np.zeros(shape) if rng is None else _uniform(rng, shape, fan_in)

        self.params["W1"] = init((hs, hs), hs)
        self.params["b1"] = init(hs, hs)
        if score_hidden is not None:
            self.params["Ws"] = init((score_hidden, hs), hs)
            self.params["bs"] = init(score_hidden, hs)
        self.params["W2"] = init((1, score_in), score_in)
        self.params["b2"] = np.zeros(1)

    def forward(self, h: np.ndarray):
        """``h`` is ``(B, T, H)``; returns ``(final (B, H), weights (B, T-1), cache)``."""
        if h.ndim != 3 or h.shape[1] < 2 or h.shape[2] != self.hidden_size:
            raise DimensionError(
                f"attention expects (B, T>=2, {self.hidden_size}) hidden states, got {h.shape}")
        p = self.params
        past, current = h[:, :-1], h[:, -1]
        transformed = np.tanh(past @ p["W1"].T + p["b1"])
        mid = transformed if self.score_hidden is None else transformed @ p["Ws"].T + p["bs"]
        scores = (mid @ p["W2"].T)[..., 0] + p["b2"][0]
        weights = softmax(scores, axis=1)
        final = np.einsum("bt,bth->bh", weights, past) + current
        return final, weights, self._cache(past=past, transformed=transformed, mid=mid, weights=weights)

    def backward(self, cache, grad_final: np.ndarray):
        """Returns ``(grad_h (B, T, H), grads)``."""
        self._check(cache)
        p = self.params
        past, transformed, mid, w = cache["past"], cache["transformed"], cache["mid"], cache["weights"]
        b, tm1, hs = past.shape
        grad_h = np.empty((b, tm1 + 1, hs))
        grad_h[:, -1] = grad_final
        grad_past = w[:, :, None] * grad_final[:, None, :]
        dw = np.einsum("bth,bh->bt", past, grad_final)
        dscores = w * (dw - np.sum(w * dw, axis=1, keepdims=True))
        grads = {
            "W2": np.einsum("bt,btk->k", dscores, mid)[None, :],
            # softmax is shift invariant, so the score bias has no effect
            "b2": np.zeros(1),
        }
        dmid = dscores[:, :, None] * p["W2"][0]
        if self.score_hidden is not None:
            grads["Ws"] = np.einsum("btk,bth->kh", dmid, transformed)
            grads["bs"] = dmid.sum(axis=(0, 1))
            dtrans = dmid @ p["Ws"]
        else:
            dtrans = dmid
        dpre = dtrans * (1.0 - transformed * transformed)
        grads["W1"] = np.einsum("bti,btj->ij", dpre, past)
        grads["b1"] = dpre.sum(axis=(0, 1))
        grad_past += dpre @ p["W1"]
        grad_h[:, :-1] = grad_past
        return grad_h, grads


def attend(params: dict, h: np.ndarray):
    """Single-frame convenience: ``h`` is ``(T, H)``; returns ``(final, weights)``."""
    hs = h.shape[-1]
    score_hidden = params["Ws"].shape[0] if "Ws" in params else None
    layer = TemporalAttention(hs, score_hidden=score_hidden)
    for name, value in params.items():
        layer.params[name] = np.asarray(value, dtype=np.float64)
    final, weights, _ = layer.forward(np.asarray(h, dtype=np.float64)[None])
    return final[0], weights[0]
