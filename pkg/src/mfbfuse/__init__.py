"""Multi-modal factorized bilinear fusion for multi-label video classification."""

from mfbfuse.estimator import MfbVideoClassifier
from mfbfuse.metrics import gap_at_k
from mfbfuse.model import ModelConfig, VideoNet
from mfbfuse.numerics import Rng

__all__ = ["MfbVideoClassifier", "ModelConfig", "Rng", "VideoNet", "gap_at_k"]
__version__ = "0.1.0"
