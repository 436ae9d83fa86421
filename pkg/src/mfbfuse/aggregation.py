"""Temporal aggregation of frame-level features into one vector per video.

Every function accepts either a single video (``N x D``) or a batch of videos
with equal frame counts (``B x N x D``); outputs are always ``B x out_dim``.
Each modality owns its own parameters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfbfuse.numerics import Rng, ShapeError, softmax_rows, xavier_init

BN_EPS = 1e-5


def _as_batch(frames) -> np.ndarray:
    x = np.asarray(frames, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3:
        raise ShapeError(f"expected N x D or B x N x D frames, got shape {x.shape}")
    if x.shape[1] == 0:
        raise ValueError("empty video: at least one frame is required")
    return x


def sample_frames(frames, target: int, rng: Rng) -> np.ndarray:
    """Draw ``target`` frames in temporal order.

    Without replacement when the video is long enough, otherwise with
    replacement so short videos are padded up to ``target``.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = frames.shape[0]
    if n < 1:
        raise ValueError("empty video: at least one frame is required")
    if target < 1:
        raise ValueError(f"target frame count must be >= 1, got {target}")
    if n == target:
        return frames.copy()
    idx = np.sort(rng.choice(n, size=target, replace=n < target))
    return frames[idx]


# -- average pooling ---------------------------------------------------------

def avgpool(frames) -> np.ndarray:
    x = _as_batch(frames)
    # shifted mean: exact for constant videos
    ref = x[:, :1, :]
    return ref[:, 0, :] + (x - ref).mean(axis=1)


def avgpool_backward(grad_out, n_frames: int) -> np.ndarray:
    grad_out = np.asarray(grad_out, dtype=np.float64)
    return np.repeat(grad_out[:, None, :] / n_frames, n_frames, axis=1)


# -- deep bag of frames ------------------------------------------------------

@dataclass
class DbofParams:
    W_proj: np.ndarray  # D x P
    b_proj: np.ndarray  # 1 x P
    bn_gamma: np.ndarray
    bn_beta: np.ndarray
    bn_running_mean: np.ndarray
    bn_running_var: np.ndarray
    bn_momentum: float = 0.99

    @classmethod
    def init(cls, D: int, P: int, rng: Rng) -> "DbofParams":
        if P <= D:
            raise ValueError(f"DBoF projection must increase dimension: P={P} <= D={D}")
        return cls(xavier_init(D, P, rng), np.zeros((1, P)), np.ones((1, P)), np.zeros((1, P)),
                   np.zeros((1, P)), np.ones((1, P)))

    def named(self) -> dict[str, np.ndarray]:
        return {"W_proj": self.W_proj, "b_proj": self.b_proj,
                "bn_gamma": self.bn_gamma, "bn_beta": self.bn_beta}

    def buffers(self) -> dict[str, np.ndarray]:
        return {"bn_running_mean": self.bn_running_mean, "bn_running_var": self.bn_running_var}


def dbof_forward(frames, p: DbofParams, train_mode: bool = False):
    """fc -> ReLU -> batch norm -> max over frames.

    In train mode the normalization statistics are pooled over every frame in
    the batch and the running statistics are updated in place.
    """
    x = _as_batch(frames)
    if x.shape[2] != p.W_proj.shape[0]:
        raise ShapeError(f"frames have {x.shape[2]} dims, DBoF expects {p.W_proj.shape[0]}")
    h = x @ p.W_proj + p.b_proj
    r = np.maximum(h, 0.0)
    if train_mode:
        mean = r.mean(axis=(0, 1))
        var = r.var(axis=(0, 1))
        m = p.bn_momentum
        p.bn_running_mean[...] = m * p.bn_running_mean + (1.0 - m) * mean
        p.bn_running_var[...] = m * p.bn_running_var + (1.0 - m) * var
    else:
        mean = p.bn_running_mean[0]
        var = np.maximum(p.bn_running_var[0], 0.0)
    var_active = var > BN_EPS
    inv_std = 1.0 / np.sqrt(np.where(var_active, var, BN_EPS))
    xhat = (r - mean) * inv_std
    y = p.bn_gamma[0] * xhat + p.bn_beta[0]
    arg = np.argmax(y, axis=1)  # first index on ties
    out = np.take_along_axis(y, arg[:, None, :], axis=1)[:, 0, :]
    cache = dict(x=x, h=h, xhat=xhat, inv_std=inv_std, var_active=var_active,
                 arg=arg, train_mode=train_mode)
    return out, cache


def dbof_backward(grad_out, cache, p: DbofParams):
    """Returns ``(grad_frames, grads)`` with grads keyed like ``p.named()``."""
    x, xhat, arg = cache["x"], cache["xhat"], cache["arg"]
    grad_y = np.zeros_like(xhat)
    np.put_along_axis(grad_y, arg[:, None, :], np.asarray(grad_out)[:, None, :], axis=1)
    grad_gamma = np.sum(grad_y * xhat, axis=(0, 1))[None]
    grad_beta = np.sum(grad_y, axis=(0, 1))[None]
    grad_xhat = grad_y * p.bn_gamma[0]
    inv_std = cache["inv_std"]
    if cache["train_mode"]:
        mean_g = grad_xhat.mean(axis=(0, 1))
        mean_gx = np.where(cache["var_active"], (grad_xhat * xhat).mean(axis=(0, 1)), 0.0)
        grad_r = inv_std * (grad_xhat - mean_g - xhat * mean_gx)
    else:
        grad_r = grad_xhat * inv_std
    grad_h = grad_r * (cache["h"] > 0.0)
    grads = {
        "W_proj": np.einsum("bnd,bnp->dp", x, grad_h),
        "b_proj": grad_h.sum(axis=(0, 1))[None],
        "bn_gamma": grad_gamma,
        "bn_beta": grad_beta,
    }
    return grad_h @ p.W_proj.T, grads


# -- NetVLAD -----------------------------------------------------------------

@dataclass
class NetVladParams:
    W_assign: np.ndarray  # D x K
    b_assign: np.ndarray  # 1 x K
    centers: np.ndarray  # K x D

    @classmethod
    def init(cls, D: int, K: int, rng: Rng) -> "NetVladParams":
        if K < 1:
            raise ValueError(f"cluster count must be >= 1, got {K}")
        return cls(xavier_init(D, K, rng), np.zeros((1, K)), xavier_init(K, D, rng))

    def named(self) -> dict[str, np.ndarray]:
        return {"W_assign": self.W_assign, "b_assign": self.b_assign, "centers": self.centers}


def netvlad_assign(frames, p: NetVladParams) -> np.ndarray:
    """Soft assignment of every frame to the K clusters (softmax over clusters).

    Returns ``N x K`` for a single video, ``B x N x K`` for a batch.
    """
    x = np.asarray(frames, dtype=np.float64)
    if x.shape[-1] != p.W_assign.shape[0]:
        raise ShapeError(f"frames have {x.shape[-1]} dims, NetVLAD expects {p.W_assign.shape[0]}")
    return softmax_rows(x @ p.W_assign + p.b_assign[0])


def vlad_from_assignment(x: np.ndarray, alpha: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Per-cluster weighted residual sums, ``B x K x D``."""
    return np.einsum("bnk,bnd->bkd", alpha, x) - alpha.sum(axis=1)[:, :, None] * centers[None]


def netvlad_forward(frames, p: NetVladParams):
    x = _as_batch(frames)
    alpha = netvlad_assign(x, p)
    vlad = vlad_from_assignment(x, alpha, p.centers)
    return vlad.reshape(x.shape[0], -1), dict(x=x, alpha=alpha)


def netvlad_backward(grad_out, cache, p: NetVladParams):
    """Returns ``(grad_frames, grads)`` with grads keyed like ``p.named()``."""
    x, alpha = cache["x"], cache["alpha"]
    K, D = p.centers.shape
    g = np.asarray(grad_out, dtype=np.float64).reshape(x.shape[0], K, D)
    grad_alpha = np.einsum("bnd,bkd->bnk", x, g) - np.einsum("bkd,kd->bk", g, p.centers)[:, None, :]
    grad_x = np.einsum("bnk,bkd->bnd", alpha, g)
    grad_centers = -np.einsum("bk,bkd->kd", alpha.sum(axis=1), g)
    grad_logits = alpha * (grad_alpha - np.sum(alpha * grad_alpha, axis=2, keepdims=True))
    grad_x += grad_logits @ p.W_assign.T
    grads = {
        "W_assign": np.einsum("bnd,bnk->dk", x, grad_logits),
        "b_assign": grad_logits.sum(axis=(0, 1))[None],
        "centers": grad_centers,
    }
    return grad_x, grads
