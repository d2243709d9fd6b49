"""RMSProp, the mini-batch training loop and finite-difference gradient checks."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .data import FrameBatch, TimeSeriesDataset, extract_frames
from .errors import ConfigError, DataError, NumericError
from .evaluation import evaluate
from .model import HarModel, LinearModel, ModelConfig, checkpoint_bytes, cross_entropy
from .ndcore import Rng

log = logging.getLogger(__name__)


@dataclass
class OptimState:
    lr: float = 0.001
    lr_decay: float = 0.98
    alpha: float = 0.9
    eps: float = 1e-8
    epoch: int = 0
    v: dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("alpha must lie in (0, 1)")


def rmsprop_step(state: OptimState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
                 where: str = "") -> None:
    """In-place update ``v = a*v + (1-a)*g**2``; ``p -= lr * g / (sqrt(v) + eps)``."""
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape:
            raise ConfigError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name} {where}".rstrip())
        v = state.v.get(name)
        if v is None:
            v = state.v[name] = np.zeros_like(p)
        v *= state.alpha
        v += (1.0 - state.alpha) * g * g
        p -= state.lr * g / (np.sqrt(v) + state.eps)


def end_epoch(state: OptimState) -> None:
    state.epoch += 1
    state.lr *= state.lr_decay


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 100
    lr: float = 0.001
    lr_decay: float = 0.98
    alpha: float = 0.9
    eps: float = 1e-8
    seed: int = 0
    patience: int = 5
    window: int = 24
    overlap: float = 0.5
    log_timing: bool = False

    def __post_init__(self):
        if self.batch_size < 1:
            raise ConfigError("batch size must be at least 1")
        if self.epochs < 0:
            raise ConfigError("epochs must be non-negative")


@dataclass
class TrainResult:
    model: HarModel
    best_checkpoint: bytes
    best_epoch: int
    log: list[dict]
    epoch_seconds: list[float]

    def log_lines(self) -> str:
        return "".join(json.dumps(r, sort_keys=True) + "\n" for r in self.log)


def train_epoch(model, frames: FrameBatch, state: OptimState, cfg: TrainConfig, rng: Rng) -> float:
    """One pass over shuffled frames; returns the size-weighted mean batch loss."""
    order = frames.shuffled(rng)
    total = 0.0
    for b, s in enumerate(range(0, len(order), cfg.batch_size)):
        batch = order.take(slice(s, s + cfg.batch_size))
        logits, _, cache = model.forward(batch.frames, train=True, rng=rng)
        loss, seed = cross_entropy(logits, batch.labels)
        if not np.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {state.epoch + 1}, batch {b}")
        grads = model.backward(cache, seed)
        rmsprop_step(state, model.parameters(), grads, f"(epoch {state.epoch + 1}, batch {b})")
        model.bump()
        total += loss * len(batch)
    return total / len(order)


def train(model: HarModel, train_ds: TimeSeriesDataset, val_ds: TimeSeriesDataset | None,
          cfg: TrainConfig, on_epoch: Callable[[dict], None] | None = None) -> TrainResult:
    """Shuffled mini-batch RMSProp with per-epoch decay and best-validation checkpointing.

    Validation is sample-wise mean F1 on ``val_ds``; training stops after
    ``patience`` epochs without improvement.  Without a validation set the
    last epoch is kept.
    """
    if len(train_ds) == 0:
        raise DataError("empty training set")
    frames = extract_frames(train_ds, cfg.window, cfg.overlap)
    state = OptimState(cfg.lr, cfg.lr_decay, cfg.alpha, cfg.eps)
    rng = Rng(cfg.seed).spawn(1)
    records, seconds = [], []
    best = checkpoint_bytes(model, 0)
    best_f1, best_epoch, stale = -1.0, 0, 0
    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        loss = train_epoch(model, frames, state, cfg, rng)
        lr_used = state.lr
        end_epoch(state)
        val_f1 = evaluate(model, val_ds).mean_f1 if val_ds is not None else None
        seconds.append(time.perf_counter() - t0)
        rec = {"epoch": epoch, "lr": lr_used, "train_loss": loss, "val_meanF1": val_f1}
        if cfg.log_timing:
            rec["seconds"] = seconds[-1]
        records.append(rec)
        log.info("epoch %d lr %.6g loss %.4f val F1 %s", epoch, lr_used, loss, val_f1)
        if on_epoch is not None:
            on_epoch(rec)
        score = val_f1 if val_f1 is not None else -loss
        if score > best_f1:
            best_f1, best_epoch, stale = score, epoch, 0
            best = checkpoint_bytes(model, epoch)
        else:
            stale += 1
            if val_ds is not None and stale >= cfg.patience:
                break
    if val_ds is None and records:
        best, best_epoch = checkpoint_bytes(model, records[-1]["epoch"]), records[-1]["epoch"]
    return TrainResult(model, best, best_epoch, records, seconds)


@dataclass
class GradcheckReport:
    max_rel_error: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return all(e <= self.tolerance for e in self.max_rel_error.values())

    def worst(self) -> float:
        return max(self.max_rel_error.values())

    def lines(self) -> list[str]:
        return [f"{'ok  ' if e <= self.tolerance else 'FAIL'} {name:28s} {e:.3e}"
                for name, e in self.max_rel_error.items()]


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-5) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``.

    The floor keeps gradients that are exactly zero (e.g. the attention score
    bias) from turning central-difference roundoff (~1e-11) into a large ratio.
    """
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], float], p: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. array ``p`` (perturbed in place)."""
    out = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        old = p[i]
        p[i] = old + h
        fp = f()
        p[i] = old - h
        fm = f()
        p[i] = old
        out[i] = (fp - fm) / (2 * h)
    return out


def gradcheck(factory: Callable, tolerance: float = 1e-4, h: float = 1e-5,
              train: bool = True, seed: int = 0) -> GradcheckReport:
    """Compare analytic and central-difference gradients of the mean loss.

    ``factory()`` returns ``(model, frames, labels)``.  The train-mode
    forward uses a freshly seeded Rng on every call, so dropout masks are
    identical across the perturbed evaluations.
    """
    model, x, y = factory()
    params = model.parameters()
    if not params or sum(p.size for p in params.values()) == 0:
        raise ConfigError("model has no parameters to check")

    def run():
        logits, _, cache = model.forward(x, train=train, rng=Rng(seed))
        return cross_entropy(logits, y), cache

    (_, seed_grad), cache = run()
    analytic = model.backward(cache, seed_grad)
    errors = {}
    for name, p in params.items():
        num = numeric_grad(lambda: run()[0][0], p, h)
        errors[name] = relative_error(analytic[name], num)
    return GradcheckReport(errors, tolerance)


def gradcheck_layer(layer, x: np.ndarray, h: float = 1e-5, rng_seed: int = 0,
                    forward_kwargs: dict | None = None) -> dict[str, float]:
    """Finite-difference check of one layer under a random linear readout.

    Returns max relative error for the input gradient (key ``"input"``) and
    each parameter.  ``forward_kwargs`` may be a callable producing fresh
    keyword arguments per call (e.g. a newly seeded Rng for dropout).
    """
    def kwargs():
        if callable(forward_kwargs):
            return forward_kwargs()
        return forward_kwargs or {}

    out0 = layer.forward(x, **kwargs())[0]
    proj = Rng(rng_seed).normal(out0.shape)

    def loss():
        return float(np.sum(layer.forward(x, **kwargs())[0] * proj))

    out = layer.forward(x, **kwargs())
    cache = out[-1]
    gx, grads = layer.backward(cache, proj)
    errors = {"input": relative_error(gx, numeric_grad(loss, x, h))}
    for name, p in layer.params.items():
        errors[name] = relative_error(grads[name], numeric_grad(loss, p, h))
    return errors


def relu_margin(model, x: np.ndarray) -> float:
    """Smallest |pre-activation| over every ReLU in the conv stack."""
    _, _, cache = model.forward(x)
    margin = np.inf
    for k, conv in enumerate(model.convs):
        c = cache["caches"][f"conv{k}"]
        pre = c["cols"] @ c["w_mat"] + conv.params["bias"]
        margin = min(margin, float(np.min(np.abs(pre))))
    return margin


def tiny_model_factory(variant: str, seed: int = 0, dropout: float = 0.3, margin: float = 1e-3):
    """Tiny DeepConvLSTM (d=2, f=3, hidden=4, C=2) plus a batch for gradient checks.

    Central differences are meaningless across a ReLU kink, so the input batch
    is redrawn until every conv pre-activation is at least ``margin`` from 0.
    """
    def make():
        cfg = ModelConfig(n_channels=2, n_classes=2, variant=variant, n_filters=3, hidden=4,
                          dropout=dropout)
        model = HarModel(cfg, seed=seed)
        rng = Rng(seed).spawn(99)
        for _ in range(1000):
            x = rng.normal((3, cfg.window, cfg.n_channels))
            if relu_margin(model, x) >= margin:
                break
        else:
            raise ConfigError("could not draw a gradcheck batch away from ReLU kinks")
        return model, x, np.array([0, 1, 1])

    return make


def linear_model_factory(seed: int = 0):
    def make():
        rng = Rng(seed).spawn(98)
        return LinearModel(8, 3, seed=seed), rng.normal((5, 4, 2)), np.array([0, 1, 2, 1, 0])

    return make
