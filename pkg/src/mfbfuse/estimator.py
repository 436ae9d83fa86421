"""scikit-learn compatible wrapper around :class:`~mfbfuse.model.VideoNet`."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from mfbfuse.data import Dataset, VideoRecord
from mfbfuse.metrics import gap_at_k
from mfbfuse.model import ModelConfig, VideoNet
from mfbfuse.training import TrainConfig, predict, train
from mfbfuse.validation import check_label_matrix, check_videos


def _to_dataset(videos, y, num_classes) -> Dataset:
    records = []
    for i, (visual, audio) in enumerate(videos):
        labels = () if y is None else tuple(np.flatnonzero(y[i]).tolist())
        records.append(VideoRecord(str(i).encode(), visual, audio, labels))
    return Dataset(records, videos[0][0].shape[1], videos[0][1].shape[1], num_classes)


class MfbVideoClassifier(ClassifierMixin, BaseEstimator):
    """Multi-label video classifier: temporal aggregation, audio-visual fusion, MoE.

    ``X`` is a sequence of ``(visual, audio)`` pairs, each an ``N x D`` frame
    matrix; ``y`` is an ``n_videos x n_classes`` 0/1 indicator matrix.
    ``score`` returns GAP@20 rather than subset accuracy.

    Parameters
    ----------
    fusion : {"mfb", "concat", "fc_concat", "video_only", "audio_only"}
    aggregator : {"avg", "dbof", "netvlad"}
    k, o : factor rank and output width of the bilinear fusion.
    """

    def __init__(self, fusion="mfb", aggregator="avg", k=4, o=1024, dropout=0.1, clusters=8,
                 dbof_dim=2000, frames=300, mixtures=2, l2=1e-6, batch_size=16,
                 max_steps=5000, learning_rate=2e-4, random_state=0):
        self.fusion = fusion
        self.aggregator = aggregator
        self.k = k
        self.o = o
        self.dropout = dropout
        self.clusters = clusters
        self.dbof_dim = dbof_dim
        self.frames = frames
        self.mixtures = mixtures
        self.l2 = l2
        self.batch_size = batch_size
        self.max_steps = max_steps
        self.learning_rate = learning_rate
        self.random_state = random_state

    def fit(self, X, y, eval_set=None, eval_every=None):
        """Train from scratch. ``eval_set=(X_val, y_val)`` fills ``log_`` with validation rows."""
        videos = check_videos(X)
        y = check_label_matrix(y, len(videos))
        n_classes = y.shape[1]
        data = _to_dataset(videos, y, n_classes)
        config = ModelConfig(
            fusion=self.fusion, k=self.k, o=self.o, dropout=self.dropout,
            aggregator=self.aggregator, clusters=self.clusters, dbof_dim=self.dbof_dim,
            frames=self.frames, mixtures=self.mixtures, l2=self.l2,
            visual_dim=data.visual_dim, audio_dim=data.audio_dim, num_classes=n_classes,
        )
        seed = 0 if self.random_state is None else int(self.random_state)
        train_cfg = TrainConfig(batch_size=self.batch_size, max_steps=self.max_steps,
                                eval_every=eval_every or max(self.max_steps, 1), seed=seed,
                                learning_rate=self.learning_rate)
        val = None
        if eval_set is not None:
            Xv, yv = eval_set
            vv = check_videos(Xv, data.visual_dim, data.audio_dim)
            val = _to_dataset(vv, check_label_matrix(yv, len(vv)), n_classes)
        self.net_ = VideoNet(config, seed=seed)
        self.log_ = train(self.net_, data, val, train_cfg)
        self.classes_ = np.arange(n_classes)
        self.n_visual_features_in_ = data.visual_dim
        self.n_audio_features_in_ = data.audio_dim
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "net_")
        videos = check_videos(X, self.n_visual_features_in_, self.n_audio_features_in_)
        return predict(self.net_, _to_dataset(videos, None, len(self.classes_)))

    def predict(self, X) -> np.ndarray:
        return (self.predict_proba(X) >= 0.5).astype(int)

    def score(self, X, y, sample_weight=None) -> float:
        if sample_weight is not None:
            raise ValueError("sample weights are not supported by GAP")
        proba = self.predict_proba(X)
        return gap_at_k(proba, check_label_matrix(y, proba.shape[0]), 20)
