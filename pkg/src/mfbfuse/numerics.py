"""Dense float64 helpers, activations, initialization and a reproducible RNG.

Matrices are plain ``numpy.ndarray`` objects of dtype float64, batch-first and
row-major. Everything here is a pure function except :class:`Rng`, which is
single-owner state.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1


class ShapeError(ValueError):
    """Raised when array shapes are incompatible for an operation."""


def _splitmix64(state: int) -> tuple[int, int]:
    state = (state + 0x9E3779B97F4A7C15) & _MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return state, z ^ (z >> 31)


class Rng:
    """Seeded random stream: a PCG64 generator whose 128-bit state and
    increment are expanded from the user seed with SplitMix64.

    Instances are not thread-safe; use :meth:`derive` to hand independent
    streams to other consumers.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed) & _MASK64
        s = self.seed
        words = []
        for _ in range(4):
            s, w = _splitmix64(s)
            words.append(w)
        bitgen = np.random.PCG64()
        bitgen.state = {
            "bit_generator": "PCG64",
            "state": {
                "state": (words[0] << 64) | words[1],
                "inc": ((words[2] << 64) | words[3]) | 1,
            },
            "has_uint32": 0,
            "uinteger": 0,
        }
        self._gen = np.random.Generator(bitgen)

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream keyed by integers; does not advance self."""
        s = self.seed
        for key in keys:
            s, h = _splitmix64(s ^ (int(key) & _MASK64))
            s = h
        return Rng(s)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self._gen.normal(loc, scale, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int, replace: bool) -> np.ndarray:
        return self._gen.choice(n, size=size, replace=replace)


def as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got shape {x.shape}")
    return x


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape[0]}x{a.shape[1]} by {b.shape[0]}x{b.shape[1]}")
    return a @ b


def softmax_rows(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=axis, keepdims=True)


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def l2_normalize_rows(x: np.ndarray, eps: float = 1e-12) -> np.ndarray:
    """Divide each row by ``sqrt(sum of squares + eps)``."""
    return x / np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)


def xavier_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    if rows < 1 or cols < 1:
        raise ShapeError(f"xavier_init needs positive dims, got {rows}x{cols}")
    bound = np.sqrt(6.0 / (rows + cols))
    return rng.uniform(-bound, bound, size=(rows, cols))


def dropout_mask(shape, rate: float, rng: Rng) -> np.ndarray:
    """Inverted-dropout mask: 0 with probability ``rate``, else ``1/(1-rate)``."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if rate == 0.0:
        return np.ones(shape)
    keep = rng.uniform(size=shape) >= rate
    return keep / (1.0 - rate)
