"""DeepConvLSTM and its attention variant, plus the checkpoint container."""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .attention import TemporalAttention
from .errors import (CheckpointError, ConfigError, ContractError, DataError, DimensionError,
                     NumericError)
from .layers import LSTM, Cache, Conv1D, Dropout, Layer, Linear, LSTMStack
from .ndcore import Rng, log_softmax, softmax

VARIANTS = ("baseline", "attention")


@dataclass
class ModelConfig:
    n_channels: int
    n_classes: int
    variant: str = "attention"
    window: int = 24
    n_filters: int = 64
    kernel_len: int = 5
    n_conv: int = 4
    hidden: int = 128
    n_lstm: int = 2
    dropout: float = 0.5
    score_hidden: int | None = None

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.n_classes < 2:
            raise ConfigError("need at least two classes")
        for name in ("n_channels", "window", "n_filters", "kernel_len", "n_conv", "hidden", "n_lstm"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.steps < (2 if self.variant == "attention" else 1):
            raise ConfigError(
                f"window {self.window} leaves {self.steps} steps after {self.n_conv} convolutions")

    @property
    def steps(self) -> int:
        """Timesteps reaching the LSTM after the valid convolutions."""
        return self.window - self.n_conv * (self.kernel_len - 1)


def expected_param_count(cfg: ModelConfig) -> int:
    """Closed-form parameter count for ``cfg``."""
    f, k, hs = cfg.n_filters, cfg.kernel_len, cfg.hidden
    total = (1 * k * f + f) + (cfg.n_conv - 1) * (f * k * f + f)
    lstm_in = cfg.n_channels * f
    for layer in range(cfg.n_lstm):
        i = lstm_in if layer == 0 else hs
        total += 4 * hs * (i + hs) + 4 * hs
    if cfg.variant == "attention":
        total += hs * hs + hs
        if cfg.score_hidden is None:
            total += hs + 1
        else:
            total += cfg.score_hidden * hs + cfg.score_hidden + cfg.score_hidden + 1
    total += cfg.n_classes * hs + cfg.n_classes
    return total


@dataclass
class Prediction:
    probs: np.ndarray
    label: np.ndarray
    attention: np.ndarray | None = None
    logits: np.ndarray | None = field(default=None, repr=False)


class HarModel:
    """Conv x n_conv (ReLU) -> LSTM stack -> [attention] -> linear classifier.

    Frames are ``(B, window, n_channels)``.  Each sensor channel runs through
    the convolutions separately, then the per-step ``channels x filters``
    maps are flattened into the LSTM's input vectors.  Dropout sits after
    the conv stack, between LSTM layers and before the classifier.
    """

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.seed = seed
        rng = Rng(seed)
        self.convs = [Conv1D(1 if k == 0 else cfg.n_filters, cfg.n_filters, cfg.kernel_len,
                             relu=True, rng=rng) for k in range(cfg.n_conv)]
        lstm_layers = [LSTM(cfg.n_channels * cfg.n_filters if k == 0 else cfg.hidden, cfg.hidden, rng=rng)
                       for k in range(cfg.n_lstm)]
        self.drop_conv = Dropout(cfg.dropout)
        self.drop_lstm = Dropout(cfg.dropout)
        self.drop_head = Dropout(cfg.dropout)
        self.lstm = LSTMStack(lstm_layers, self.drop_lstm)
        self.attention = (TemporalAttention(cfg.hidden, rng=rng, score_hidden=cfg.score_hidden)
                          if cfg.variant == "attention" else None)
        self.classifier = Linear(cfg.hidden, cfg.n_classes, rng=rng)
        self._id = object()
        self._version = 0

    def modules(self) -> dict[str, Layer]:
        mods: dict[str, Layer] = {f"conv{k}": c for k, c in enumerate(self.convs)}
        mods["lstm"] = self.lstm
        if self.attention is not None:
            mods["attention"] = self.attention
        mods["classifier"] = self.classifier
        return mods

    def parameters(self) -> dict[str, np.ndarray]:
        """Flat ``name -> array`` view; arrays are the live parameter storage."""
        return {f"{m}.{n}": p for m, layer in self.modules().items() for n, p in layer.params.items()}

    def num_params(self) -> int:
        return sum(p.size for p in self.parameters().values())

    def bump(self):
        self._version += 1
        for layer in self.modules().values():
            layer.bump()
        for d in (self.drop_conv, self.drop_head):
            d.bump()

    def forward(self, x: np.ndarray, train: bool = False, rng: Rng | None = None):
        """Returns ``(logits (B, C), attention weights or None, cache)``."""
        cfg = self.cfg
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        if x.ndim != 3 or x.shape[1:] != (cfg.window, cfg.n_channels):
            raise DimensionError(
                f"frames must be (B, {cfg.window}, {cfg.n_channels}), got {x.shape}")
        if not train:
            rng = None
        b = x.shape[0]
        caches = {}
        a = x.transpose(0, 2, 1).reshape(b * cfg.n_channels, cfg.window, 1)
        for k, conv in enumerate(self.convs):
            a, caches[f"conv{k}"] = conv.forward(a)
        t = a.shape[1]
        a = a.reshape(b, cfg.n_channels, t, cfg.n_filters).transpose(0, 2, 1, 3)
        a = a.reshape(b, t, cfg.n_channels * cfg.n_filters)
        a, caches["drop_conv"] = self.drop_conv.forward(a, train, rng)
        hseq, caches["lstm"] = self.lstm.forward(a, train, rng)
        weights = None
        if self.attention is None:
            emb = hseq[:, -1]
        else:
            emb, weights, caches["attention"] = self.attention.forward(hseq)
        emb, caches["drop_head"] = self.drop_head.forward(emb, train, rng)
        logits, caches["classifier"] = self.classifier.forward(emb)
        if not np.all(np.isfinite(logits)):
            raise NumericError("non-finite logits in forward pass")
        cache = Cache(id(self._id), self._version, dict(caches=caches, train=train, hshape=hseq.shape))
        return logits, weights, cache

    def predict(self, x: np.ndarray) -> Prediction:
        logits, weights, _ = self.forward(x, train=False)
        probs = softmax(logits, axis=1)
        return Prediction(probs, np.argmax(probs, axis=1), weights, logits)

    def backward(self, cache: Cache, grad_logits: np.ndarray) -> dict[str, np.ndarray]:
        """Gradients of the loss w.r.t. every parameter, keyed like ``parameters()``."""
        if cache.owner != id(self._id) or cache.version != self._version:
            raise ContractError("model cache is stale or belongs to another model")
        if not cache["train"]:
            raise ContractError("backward needs a cache from a train-mode forward pass")
        cfg = self.cfg
        c = cache["caches"]
        grads = {}

        def put(prefix, g):
            grads.update({f"{prefix}.{n}": v for n, v in g.items()})

        g, gc = self.classifier.backward(c["classifier"], grad_logits)
        put("classifier", gc)
        g, _ = self.drop_head.backward(c["drop_head"], g)
        b, t, hs = cache["hshape"]
        if self.attention is None:
            gh = np.zeros((b, t, hs))
            gh[:, -1] = g
        else:
            gh, ga = self.attention.backward(c["attention"], g)
            put("attention", ga)
        g, gl = self.lstm.backward(c["lstm"], gh)
        put("lstm", gl)
        g, _ = self.drop_conv.backward(c["drop_conv"], g)
        g = g.reshape(b, t, cfg.n_channels, cfg.n_filters).transpose(0, 2, 1, 3)
        g = g.reshape(b * cfg.n_channels, t, cfg.n_filters)
        for k in range(len(self.convs) - 1, -1, -1):
            g, gk = self.convs[k].backward(c[f"conv{k}"], g)
            put(f"conv{k}", gk)
        return {name: grads[name] for name in self.parameters()}


class LinearModel:
    """Softmax regression on flattened frames; exercises the harness without recurrence."""

    def __init__(self, in_features: int, n_classes: int, seed: int = 0):
        self.classifier = Linear(in_features, n_classes, rng=Rng(seed))
        self._version = 0

    def parameters(self):
        return {f"classifier.{n}": p for n, p in self.classifier.params.items()}

    def bump(self):
        self.classifier.bump()

    def forward(self, x, train=False, rng=None):
        x = np.asarray(x, dtype=np.float64)
        logits, cache = self.classifier.forward(x.reshape(x.shape[0], -1))
        return logits, None, Cache(0, 0, {"inner": cache, "train": train})

    def backward(self, cache, grad_logits):
        _, g = self.classifier.backward(cache["inner"], grad_logits)
        return {f"classifier.{n}": v for n, v in g.items()}


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits.

    Computed in log space; the per-frame gradient is ``softmax - one_hot``,
    divided by the batch size for the mean.
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels))
    b, n_classes = logits.shape
    if labels.shape != (b,):
        raise DataError(f"{labels.shape[0]} labels for {b} frames")
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise DataError(f"labels must lie in [0, {n_classes})")
    logp = log_softmax(logits, axis=1)
    rows = np.arange(b)
    loss = float(-np.mean(logp[rows, labels]))
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return loss, grad / b


# Checkpoint layout (all integers little-endian):
#   8 bytes   magic b"ATTNHAR\0"
#   u32       format version (1)
#   u64       header length L
#   L bytes   UTF-8 JSON header, keys sorted: config, seed, epoch, extra,
#             tensors = [[name, shape], ...] in storage order
#   then each tensor's values as float64 little-endian, row-major
CKPT_MAGIC = b"ATTNHAR\0"
CKPT_VERSION = 1


def checkpoint_bytes(model: HarModel, epoch: int = 0, extra: dict | None = None) -> bytes:
    params = model.parameters()
    header = {
        "config": asdict(model.cfg),
        "seed": model.seed,
        "epoch": epoch,
        "extra": extra or {},
        "tensors": [[name, list(p.shape)] for name, p in params.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [CKPT_MAGIC, struct.pack("<IQ", CKPT_VERSION, len(hbytes)), hbytes]
    parts += [np.ascontiguousarray(p, dtype="<f8").tobytes() for p in params.values()]
    return b"".join(parts)


def model_from_bytes(blob: bytes) -> tuple[HarModel, dict]:
    """Rebuild a model from ``checkpoint_bytes`` output; returns ``(model, header)``."""
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen].decode("utf-8"))
    model = HarModel(ModelConfig(**header["config"]), seed=header["seed"])
    params = model.parameters()
    offset = start + hlen
    for name, shape in header["tensors"]:
        if name not in params or list(params[name].shape) != shape:
            raise CheckpointError(f"checkpoint tensor {name} {shape} does not fit the model")
        n = int(np.prod(shape)) * 8
        if offset + n > len(blob):
            raise CheckpointError("checkpoint is truncated")
        params[name][...] = np.frombuffer(blob, dtype="<f8", count=n // 8, offset=offset).reshape(shape)
        offset += n
    if offset != len(blob):
        raise CheckpointError("trailing bytes after checkpoint tensors")
    return model, header


def save_checkpoint(path, model: HarModel, epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.write_bytes(checkpoint_bytes(model, epoch, extra))
    return path


def load_checkpoint(path) -> tuple[HarModel, dict]:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_bytes(blob)
