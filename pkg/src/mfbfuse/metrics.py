"""Global average precision over each video's top-k predictions."""

from __future__ import annotations

import numpy as np


def _label_matrix(labels, shape) -> np.ndarray:
    if isinstance(labels, np.ndarray):
        if labels.shape != shape:
            raise ValueError(f"label matrix {labels.shape} does not match predictions {shape}")
        return labels.astype(bool)
    mat = np.zeros(shape, dtype=bool)
    for v, classes in enumerate(labels):
        mat[v, list(classes)] = True
    return mat


def gap_at_k(predictions, labels, k: int = 20) -> float:
    """GAP@k as used for YouTube-8M.

    ``predictions`` is a ``videos x classes`` confidence matrix; ``labels`` is
    either a binary ndarray of the same shape or a per-video sequence of class
    indices. Recall is normalized by the total number of positives, not
    capped at k. Ties sort by (video, class) ascending.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores = np.asarray(predictions, dtype=np.float64)
    if scores.ndim != 2:
        raise ValueError(f"predictions must be 2-D, got shape {scores.shape}")
    truth = _label_matrix(labels, scores.shape)
    total_pos = int(truth.sum())
    if total_pos == 0:
        raise ValueError("GAP is undefined when there are no ground-truth positives")

    n_videos, n_classes = scores.shape
    top = min(k, n_classes)
    # stable sort on negated scores keeps lower class index first on ties
    order = np.argsort(-scores, axis=1, kind="stable")[:, :top]
    conf = np.take_along_axis(scores, order, axis=1).ravel()
    hit = np.take_along_axis(truth, order, axis=1).ravel()
    video = np.repeat(np.arange(n_videos), top)
    cls = order.ravel()
    glob = np.lexsort((cls, video, -conf))
    hit = hit[glob].astype(np.float64)
    precision = np.cumsum(hit) / np.arange(1, hit.size + 1)
    return float(np.sum(precision * hit) / total_pos)
