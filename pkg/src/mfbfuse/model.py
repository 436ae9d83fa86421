"""End-to-end network: per-modality aggregation -> fusion -> mixture of experts."""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields

import numpy as np

from mfbfuse import aggregation as agg
from mfbfuse import fusion
from mfbfuse.classifier import DEFAULT_L2, MoeParams, moe_backward, moe_forward, moe_l2_grads, moe_l2_penalty
from mfbfuse.numerics import Rng, ShapeError

FUSION_KINDS = ("mfb", "concat", "fc_concat", "video_only", "audio_only")
AGGREGATOR_KINDS = ("avg", "dbof", "netvlad")


@dataclass
class ModelConfig:
    fusion: str = "mfb"
    k: int = 4
    o: int = 1024
    dropout: float = 0.1
    aggregator: str = "avg"
    clusters: int = 8
    dbof_dim: int = 2000
    frames: int = 300
    mixtures: int = 2
    l2: float = DEFAULT_L2
    visual_dim: int = 1024
    audio_dim: int = 128
    num_classes: int = 3862

    def __post_init__(self):
        if self.fusion not in FUSION_KINDS:
            raise ValueError(f"fusion must be one of {FUSION_KINDS}, got {self.fusion!r}")
        if self.aggregator not in AGGREGATOR_KINDS:
            raise ValueError(f"aggregator must be one of {AGGREGATOR_KINDS}, got {self.aggregator!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")
        if self.l2 < 0:
            raise ValueError(f"l2 must be >= 0, got {self.l2}")
        for name in ("k", "o", "clusters", "dbof_dim", "frames", "mixtures",
                     "visual_dim", "audio_dim", "num_classes"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")

    @property
    def audio_dbof_dim(self) -> int:
        return max(1, int(round(self.dbof_dim * self.audio_dim / self.visual_dim)))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


class _Aggregator:
    """One modality's temporal aggregator with a uniform forward/backward surface."""

    def __init__(self, kind: str, D: int, cfg: ModelConfig, P: int, rng: Rng):
        self.kind = kind
        if kind == "avg":
            self.params = None
            self.out_dim = D
        elif kind == "dbof":
            self.params = agg.DbofParams.init(D, P, rng)
            self.out_dim = P
        else:
            self.params = agg.NetVladParams.init(D, cfg.clusters, rng)
            self.out_dim = cfg.clusters * D

    def named(self) -> dict[str, np.ndarray]:
        return {} if self.params is None else self.params.named()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.params.buffers() if self.kind == "dbof" else {}

    def forward(self, frames, train_mode):
        if self.kind == "avg":
            return agg.avgpool(frames), frames.shape[1]
        if self.kind == "dbof":
            return agg.dbof_forward(frames, self.params, train_mode)
        return agg.netvlad_forward(frames, self.params)

    def backward(self, grad, cache):
        if self.kind == "avg":
            return {}
        if self.kind == "dbof":
            return agg.dbof_backward(grad, cache, self.params)[1]
        return agg.netvlad_backward(grad, cache, self.params)[1]


class VideoNet:
    """Trainable parameters live in plain numpy arrays that optimizers update in place."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = cfg = config
        rng = Rng(seed).derive(7)
        self.visual_agg = self.audio_agg = None
        if cfg.fusion != "audio_only":
            self.visual_agg = _Aggregator(cfg.aggregator, cfg.visual_dim, cfg, cfg.dbof_dim, rng.derive(1))
        if cfg.fusion != "video_only":
            self.audio_agg = _Aggregator(cfg.aggregator, cfg.audio_dim, cfg, cfg.audio_dbof_dim, rng.derive(2))
        frng = rng.derive(3)
        self.mfb = self.fc = None
        if cfg.fusion == "mfb":
            self.mfb = fusion.MfbParams.init(self.visual_agg.out_dim, self.audio_agg.out_dim, cfg.k, cfg.o, frng)
            fused = cfg.o
        elif cfg.fusion == "fc_concat":
            self.fc = fusion.FcConcatParams.init(self.visual_agg.out_dim, self.audio_agg.out_dim,
                                                 cfg.k * cfg.o, frng)
            fused = 2 * cfg.k * cfg.o
        elif cfg.fusion == "concat":
            fused = self.visual_agg.out_dim + self.audio_agg.out_dim
        elif cfg.fusion == "video_only":
            fused = self.visual_agg.out_dim
        else:
            fused = self.audio_agg.out_dim
        self.moe = MoeParams.init(fused, cfg.mixtures, cfg.num_classes, rng.derive(4), cfg.l2)

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("visual_agg", self.visual_agg), ("audio_agg", self.audio_agg)):
            if part is not None:
                out.update({f"{prefix}.{n}": a for n, a in part.named().items()})
        if self.mfb is not None:
            out.update({f"mfb.{n}": a for n, a in self.mfb.named().items()})
        if self.fc is not None:
            out.update({f"fc_concat.{n}": a for n, a in self.fc.named().items()})
        out.update({f"moe.{n}": a for n, a in self.moe.named().items()})
        return out

    def buffers(self) -> dict[str, np.ndarray]:
        out = {}
        for prefix, part in (("visual_agg", self.visual_agg), ("audio_agg", self.audio_agg)):
            if part is not None:
                out.update({f"{prefix}.{n}": a for n, a in part.buffers().items()})
        return out

    def state(self) -> dict[str, np.ndarray]:
        return {**self.parameters(), **self.buffers()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        own = self.state()
        missing = sorted(set(own) - set(state))
        extra = sorted(set(state) - set(own))
        if missing or extra:
            raise ShapeError(f"state mismatch: missing {missing}, unexpected {extra}")
        for name, arr in own.items():
            src = np.asarray(state[name], dtype=np.float64)
            if src.shape != arr.shape:
                raise ShapeError(f"{name}: stored shape {src.shape}, model expects {arr.shape}")
            arr[...] = src

    def penalty(self) -> float:
        return moe_l2_penalty(self.moe)

    def forward(self, visual, audio, train_mode: bool = False, rng: Rng | None = None):
        """``visual``: B x N x C, ``audio``: B x N x M. Returns ``(d, cache)``."""
        cfg = self.config
        visual = np.asarray(visual, dtype=np.float64)
        audio = np.asarray(audio, dtype=np.float64)
        if visual.ndim != 3 or visual.shape[2] != cfg.visual_dim:
            raise ShapeError(f"visual batch {visual.shape} does not match B x N x {cfg.visual_dim}")
        if audio.ndim != 3 or audio.shape[2] != cfg.audio_dim:
            raise ShapeError(f"audio batch {audio.shape} does not match B x N x {cfg.audio_dim}")
        cache = {}
        lv = la = None
        if self.visual_agg is not None:
            lv, cache["visual_agg"] = self.visual_agg.forward(visual, train_mode)
        if self.audio_agg is not None:
            la, cache["audio_agg"] = self.audio_agg.forward(audio, train_mode)
        if cfg.fusion == "mfb":
            fused, cache["fusion"] = fusion.mfb_forward(lv, la, self.mfb, cfg.dropout, rng, train_mode)
        elif cfg.fusion == "fc_concat":
            fused, cache["fusion"] = fusion.fc_concat_forward(lv, la, self.fc)
        elif cfg.fusion == "concat":
            fused = fusion.concat_forward(lv, la)
        else:
            fused = lv if lv is not None else la
        d, cache["moe"] = moe_forward(fused, self.moe)
        return d, cache

    def backward(self, grad_d, cache) -> dict[str, np.ndarray]:
        """Gradients of the upstream loss plus the MoE L2 penalty, keyed like ``parameters()``."""
        cfg = self.config
        grads = {}
        grad_fused, g_gate, g_expert = moe_backward(grad_d, cache["moe"], self.moe)
        l2_gate, l2_expert = moe_l2_grads(self.moe)
        grads["moe.W_gate"] = g_gate + l2_gate
        grads["moe.W_expert"] = g_expert + l2_expert
        g_lv = g_la = None
        if cfg.fusion == "mfb":
            g_lv, g_la, gU, gV = fusion.mfb_backward(grad_fused, cache["fusion"], self.mfb)
            grads["mfb.U"], grads["mfb.V"] = gU, gV
        elif cfg.fusion == "fc_concat":
            g_lv, g_la, gWv, gWa = fusion.fc_concat_backward(grad_fused, cache["fusion"], self.fc)
            grads["fc_concat.Wv"], grads["fc_concat.Wa"] = gWv, gWa
        elif cfg.fusion == "concat":
            g_lv, g_la = fusion.concat_backward(grad_fused, self.visual_agg.out_dim)
        elif cfg.fusion == "video_only":
            g_lv = grad_fused
        else:
            g_la = grad_fused
        if g_lv is not None:
            for n, g in self.visual_agg.backward(g_lv, cache["visual_agg"]).items():
                grads[f"visual_agg.{n}"] = g
        if g_la is not None:
            for n, g in self.audio_agg.backward(g_la, cache["audio_agg"]).items():
                grads[f"audio_agg.{n}"] = g
        return grads
