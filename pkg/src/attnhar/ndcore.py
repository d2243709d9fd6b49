"""Dense float64 array helpers and a portable counter-based PRNG.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C order.
The helpers here add the shape and finiteness checks the rest of the
package relies on.

The PRNG is SplitMix64 (Steele, Lea & Flood 2014).  Draw ``i`` (1-based)
from a generator seeded with ``s`` is ``mix(s + i * GAMMA) mod 2**64`` where::

    GAMMA = 0x9E3779B97F4A7C15
    mix(z): z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9
            z = (z ^ (z >> 27)) * 0x94D049BB133111EB
            return z ^ (z >> 31)

Derived quantities:

* uniform in [0, 1): ``(x >> 11) * 2**-53``
* standard normal: Box-Muller on consecutive pairs ``(u1, u2)`` with
  ``sqrt(-2 ln(1 - u1)) * cos(2 pi u2)``; one normal per pair
* permutation of ``n``: Fisher-Yates, ``for i = n-1 .. 1: j = floor(u * (i+1))``
  consuming one uniform per step

Any language with wrapping 64-bit unsigned arithmetic reproduces these
streams exactly.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from .errors import DimensionError, NumericError

MAX_AXES = 3

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MUL1 = np.uint64(0xBF58476D1CE4E5B9)
_MUL2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def tensor(values, shape=None) -> np.ndarray:
    """Build a validated float64 tensor (at most three axes, all finite)."""
    arr = np.array(values, dtype=np.float64, order="C")
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s <= 0 for s in shape):
            raise DimensionError(f"shape entries must be positive, got {shape}")
        if arr.size != math.prod(shape):
            raise DimensionError(f"{arr.size} values do not fill shape {shape}")
        arr = arr.reshape(shape)
    if arr.ndim > MAX_AXES:
        raise DimensionError(f"tensors have at most {MAX_AXES} axes, got shape {arr.shape}")
    return check_finite(arr)


def check_finite(arr: np.ndarray, what: str = "tensor") -> np.ndarray:
    if not np.all(np.isfinite(arr)):
        raise NumericError(f"{what} contains non-finite values")
    return arr


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"cannot multiply shapes {a.shape} and {b.shape}")
    return check_finite(a @ b, "matmul result")


def softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    if v.ndim == 0 or v.shape[axis] == 0:
        raise DimensionError(f"softmax needs a non-empty axis, got shape {v.shape}")
    z = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def log_softmax(v: np.ndarray, axis: int = -1) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    z = v - np.max(v, axis=axis, keepdims=True)
    return z - np.log(np.sum(np.exp(z), axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


_BINARY: dict[str, Callable] = {"add": np.add, "mul": np.multiply}
_UNARY: dict[str, Callable] = {"tanh": np.tanh, "relu": relu, "sigmoid": sigmoid}


def elementwise(op: str, a, b=None) -> np.ndarray:
    """Apply ``add``/``mul`` (tensor or scalar ``b``) or ``tanh``/``relu``/``sigmoid``."""
    a = np.asarray(a, dtype=np.float64)
    if op in _UNARY:
        return check_finite(_UNARY[op](a))
    if op not in _BINARY:
        raise ValueError(f"unknown elementwise op {op!r}")
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 0 and b.shape != a.shape:
        raise DimensionError(f"elementwise {op}: shapes {a.shape} and {b.shape} differ")
    with np.errstate(over="ignore", invalid="ignore"):
        out = _BINARY[op](a, b)
    return check_finite(out, f"elementwise {op} result")


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MUL1
    z = (z ^ (z >> np.uint64(27))) * _MUL2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 stream. Single owner; not thread safe."""

    def __init__(self, seed: int):
        self.seed = int(seed) & _MASK64
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        idx = np.arange(self.counter + 1, self.counter + 1 + n, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            return _mix(np.uint64(self.seed) + idx * _GAMMA)

    def uniform(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = math.prod(shape)
        u = (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * 2.0**-53
        return u.reshape(shape)

    def normal(self, size) -> np.ndarray:
        shape = (size,) if isinstance(size, (int, np.integer)) else tuple(size)
        n = math.prod(shape)
        u = self.uniform(2 * n)
        u1, u2 = u[0::2], u[1::2]
        z = np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)
        return z.reshape(shape)

    def spawn(self, key: int) -> "Rng":
        """Independent child stream; does not advance this one."""
        with np.errstate(over="ignore"):
            base = np.uint64(self.seed) ^ _mix(np.array([key & _MASK64], dtype=np.uint64) + _GAMMA)
            return Rng(int(_mix(base)[0]))


def shuffle_indices(rng: Rng, n: int) -> np.ndarray:
    perm = np.arange(n, dtype=np.int64)
    if n < 2:
        return perm
    u = rng.uniform(n - 1)
    for k, i in enumerate(range(n - 1, 0, -1)):
        j = int(u[k] * (i + 1))
        perm[i], perm[j] = perm[j], perm[i]
    return perm
