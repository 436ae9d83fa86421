"""Input checks for the estimator API."""

from __future__ import annotations

import numpy as np
from sklearn.utils.multiclass import type_of_target


def check_videos(X, visual_dim: int | None = None, audio_dim: int | None = None):
    """Validate a sequence of ``(visual, audio)`` frame-matrix pairs.

    Returns a list of float64 pairs. Frame counts may differ between videos
    but must agree between the two modalities of one video.
    """
    if isinstance(X, np.ndarray) and X.dtype != object:
        raise ValueError("X must be a sequence of (visual, audio) pairs, not a dense array")
    videos = []
    for i, pair in enumerate(X):
        try:
            visual, audio = pair
        except (TypeError, ValueError):
            raise ValueError(f"X[{i}] is not a (visual, audio) pair") from None
        visual = np.asarray(visual, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if visual.ndim != 2 or audio.ndim != 2:
            raise ValueError(f"X[{i}]: features must be 2-D frame matrices")
        if visual.shape[0] < 1 or visual.shape[0] != audio.shape[0]:
            raise ValueError(f"X[{i}]: frame counts {visual.shape[0]} and {audio.shape[0]} "
                             "must match and be >= 1")
        if not (np.all(np.isfinite(visual)) and np.all(np.isfinite(audio))):
            raise ValueError(f"X[{i}]: features contain NaN or infinity")
        visual_dim = visual.shape[1] if visual_dim is None else visual_dim
        audio_dim = audio.shape[1] if audio_dim is None else audio_dim
        if visual.shape[1] != visual_dim or audio.shape[1] != audio_dim:
            raise ValueError(f"X[{i}]: dims ({visual.shape[1]}, {audio.shape[1]}) != "
                             f"expected ({visual_dim}, {audio_dim})")
        videos.append((visual, audio))
    if not videos:
        raise ValueError("X contains no videos")
    return videos


def check_label_matrix(y, n_samples: int) -> np.ndarray:
    y = np.asarray(y)
    if y.ndim != 2 or y.shape[0] != n_samples:
        raise ValueError(f"y must be a {n_samples} x n_classes indicator matrix, got shape {y.shape}")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("y must contain only 0/1 entries")
    if y.shape[1] > 1 and type_of_target(y) not in ("multilabel-indicator", "binary"):
        raise ValueError(f"y is not a multilabel indicator matrix ({type_of_target(y)})")
    return y.astype(np.float64)
