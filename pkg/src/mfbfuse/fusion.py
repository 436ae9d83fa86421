"""Fusion of video-level visual and audio vectors.

Three operators are provided: factorized bilinear pooling (MFB), plain
concatenation, and per-modality linear projection followed by concatenation.
Each has an explicit backward pass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfbfuse.numerics import Rng, ShapeError, as_matrix, dropout_mask, xavier_init

NORM_EPS = 1e-12


@dataclass
class MfbParams:
    """Factor banks for MFB. Output ``i`` uses columns ``i*k:(i+1)*k`` of both."""

    U: np.ndarray  # C x (k*o)
    V: np.ndarray  # M x (k*o)
    k: int
    o: int

    def __post_init__(self):
        if self.k < 1 or self.o < 1:
            raise ValueError(f"k and o must be >= 1, got k={self.k} o={self.o}")
        width = self.k * self.o
        if self.U.shape[1] != width or self.V.shape[1] != width:
            raise ShapeError(
                f"factor banks must have k*o={width} columns, got U {self.U.shape} V {self.V.shape}"
            )

    @classmethod
    def init(cls, C: int, M: int, k: int, o: int, rng: Rng) -> "MfbParams":
        return cls(xavier_init(C, k * o, rng), xavier_init(M, k * o, rng), k, o)

    def named(self) -> dict[str, np.ndarray]:
        return {"U": self.U, "V": self.V}


@dataclass
class FcConcatParams:
    Wv: np.ndarray  # C x width
    Wa: np.ndarray  # M x width

    @classmethod
    def init(cls, C: int, M: int, width: int, rng: Rng) -> "FcConcatParams":
        return cls(xavier_init(C, width, rng), xavier_init(M, width, rng))

    def named(self) -> dict[str, np.ndarray]:
        return {"Wv": self.Wv, "Wa": self.Wa}

    @property
    def size(self) -> int:
        return self.Wv.size + self.Wa.size


def _check_pair(l_batch, a_batch, C=None, M=None):
    l_batch = as_matrix(l_batch)
    a_batch = as_matrix(a_batch)
    if l_batch.shape[0] != a_batch.shape[0]:
        raise ShapeError(f"batch mismatch: visual {l_batch.shape} vs audio {a_batch.shape}")
    if C is not None and l_batch.shape[1] != C:
        raise ShapeError(f"visual features have {l_batch.shape[1]} dims, params expect {C}")
    if M is not None and a_batch.shape[1] != M:
        raise ShapeError(f"audio features have {a_batch.shape[1]} dims, params expect {M}")
    return l_batch, a_batch


def bilinear_full(l, a, W) -> np.ndarray:
    """Reference bilinear form ``f_i = l^T W_i a`` with one full C x M matrix per output."""
    l = as_matrix(l)
    a = as_matrix(a)
    W = np.asarray(W, dtype=np.float64)
    if W.ndim == 2:
        W = W[None]
    if W.shape[1:] != (l.shape[1], a.shape[1]):
        raise ShapeError(f"W has shape {W.shape}, expected (o, {l.shape[1]}, {a.shape[1]})")
    return np.einsum("bc,icm,bm->bi", l, W, a)


def factors_to_full(p: MfbParams) -> np.ndarray:
    """Stack of ``W_i = U_i V_i^T``, shape (o, C, M)."""
    C, M = p.U.shape[0], p.V.shape[0]
    U = p.U.reshape(C, p.o, p.k)
    V = p.V.reshape(M, p.o, p.k)
    return np.einsum("cik,mik->icm", U, V)


def mfb_core(l_batch, a_batch, p: MfbParams) -> np.ndarray:
    """Hadamard product of the two projections, sum-pooled over windows of k."""
    l_batch, a_batch = _check_pair(l_batch, a_batch, p.U.shape[0], p.V.shape[0])
    z = (l_batch @ p.U) * (a_batch @ p.V)
    return z.reshape(z.shape[0], p.o, p.k).sum(axis=2)


def mfb_forward(l_batch, a_batch, p: MfbParams, dropout_rate: float = 0.0,
                rng: Rng | None = None, train_mode: bool = False):
    """product -> dropout (train only) -> sum-pool by k -> ReLU -> L2 normalize.

    Returns ``(f, cache)`` where ``f`` is B x o.
    """
    if not 0.0 <= dropout_rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {dropout_rate}")
    l_batch, a_batch = _check_pair(l_batch, a_batch, p.U.shape[0], p.V.shape[0])
    proj_l = l_batch @ p.U
    proj_a = a_batch @ p.V
    prod = proj_l * proj_a
    mask = None
    if train_mode and dropout_rate > 0.0:
        if rng is None:
            raise ValueError("train-mode dropout needs an rng")
        mask = dropout_mask(prod.shape, dropout_rate, rng)
        prod = prod * mask
    pooled = prod.reshape(prod.shape[0], p.o, p.k).sum(axis=2)
    r = np.maximum(pooled, 0.0)
    norm = np.sqrt(np.sum(r * r, axis=1, keepdims=True) + NORM_EPS)
    f = r / norm
    cache = dict(l=l_batch, a=a_batch, proj_l=proj_l, proj_a=proj_a, mask=mask,
                 pooled=pooled, r=r, norm=norm)
    return f, cache


def mfb_backward(grad_f, cache, p: MfbParams):
    """Returns ``(grad_l, grad_a, grad_U, grad_V)``."""
    grad_f = np.asarray(grad_f, dtype=np.float64)
    r, norm = cache["r"], cache["norm"]
    if grad_f.shape != r.shape:
        raise ShapeError(f"upstream gradient {grad_f.shape} does not match output {r.shape}")
    # d(r/n)/dr = I/n - r r^T / n^3
    grad_r = grad_f / norm - r * np.sum(r * grad_f, axis=1, keepdims=True) / norm**3
    grad_pooled = grad_r * (cache["pooled"] > 0.0)
    grad_prod = np.repeat(grad_pooled, p.k, axis=1)
    if cache["mask"] is not None:
        grad_prod = grad_prod * cache["mask"]
    grad_pl = grad_prod * cache["proj_a"]
    grad_pa = grad_prod * cache["proj_l"]
    grad_U = cache["l"].T @ grad_pl
    grad_V = cache["a"].T @ grad_pa
    return grad_pl @ p.U.T, grad_pa @ p.V.T, grad_U, grad_V


def concat_forward(l_batch, a_batch) -> np.ndarray:
    """Column-wise concatenation, visual first."""
    l_batch, a_batch = _check_pair(l_batch, a_batch)
    return np.concatenate([l_batch, a_batch], axis=1)


def concat_backward(grad_out, visual_dim: int):
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return grad_out[:, :visual_dim], grad_out[:, visual_dim:]


def fc_concat_forward(l_batch, a_batch, p: FcConcatParams):
    l_batch, a_batch = _check_pair(l_batch, a_batch, p.Wv.shape[0], p.Wa.shape[0])
    out = np.concatenate([l_batch @ p.Wv, a_batch @ p.Wa], axis=1)
    return out, dict(l=l_batch, a=a_batch)


def fc_concat_backward(grad_out, cache, p: FcConcatParams):
    """Returns ``(grad_l, grad_a, grad_Wv, grad_Wa)``."""
    width = p.Wv.shape[1]
    grad_v, grad_a = grad_out[:, :width], grad_out[:, width:]
    return (grad_v @ p.Wv.T, grad_a @ p.Wa.T, cache["l"].T @ grad_v, cache["a"].T @ grad_a)
