"""Loss, optimizer, training loop, evaluation and checkpoints."""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from mfbfuse.data import Dataset, batches, labels_to_matrix, stack_videos
from mfbfuse.metrics import gap_at_k
from mfbfuse.model import ModelConfig, VideoNet
from mfbfuse.numerics import Rng, ShapeError

log = logging.getLogger(__name__)

PRED_CLAMP = 1e-7
EVAL_SEED = 0x5EED
EVAL_BATCH = 256


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes NaN or infinite."""


class CheckpointError(ValueError):
    """Raised for unreadable checkpoints or ones that do not fit the model."""


def bce_loss(d, labels):
    """Multi-label cross entropy summed over classes, averaged over the batch.

    Predictions are clamped to ``[1e-7, 1 - 1e-7]``; the returned gradient is
    that of the clamped loss (zero where the clamp is active).
    """
    d = np.asarray(d, dtype=np.float64)
    y = np.asarray(labels, dtype=np.float64)
    if d.shape != y.shape:
        raise ShapeError(f"predictions {d.shape} and labels {y.shape} differ")
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    B = d.shape[0]
    dc = np.clip(d, PRED_CLAMP, 1.0 - PRED_CLAMP)
    loss = -np.sum(y * np.log(dc) + (1.0 - y) * np.log(1.0 - dc)) / B
    grad = (-y / dc + (1.0 - y) / (1.0 - dc)) / B
    grad[(d < PRED_CLAMP) | (d > 1.0 - PRED_CLAMP)] = 0.0
    return float(loss), grad


class Adam:
    """Adam with bias correction over a dict of named arrays, updated in place."""

    def __init__(self, lr: float = 2e-4, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        self.t += 1
        step_size = self.lr / (1.0 - self.beta1**self.t)
        inv_bc2_sqrt = 1.0 / np.sqrt(1.0 - self.beta2**self.t)
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ShapeError(f"{name}: gradient {g.shape} vs parameter {p.shape}")
            if name not in self.m:
                self.m[name] = np.zeros_like(p)
                self.v[name] = np.zeros_like(p)
            m, v = self.m[name], self.v[name]
            tmp = np.multiply(g, 1.0 - self.beta1)
            m *= self.beta1
            m += tmp
            np.multiply(g, g, out=tmp)
            tmp *= 1.0 - self.beta2
            v *= self.beta2
            v += tmp
            # p -= lr_t * m_hat / (sqrt(v_hat) + eps), without temporaries
            np.sqrt(v, out=tmp)
            tmp *= inv_bc2_sqrt
            tmp += self.eps
            np.divide(m, tmp, out=tmp)
            tmp *= step_size
            p -= tmp


@dataclass
class TrainConfig:
    batch_size: int = 16
    max_steps: int = 5000
    eval_every: int = 250
    seed: int = 0
    learning_rate: float = 2e-4

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.max_steps < 0:
            raise ValueError(f"max_steps must be >= 0, got {self.max_steps}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")


@dataclass
class LogRow:
    step: int
    train_loss: float
    val_loss: float
    val_gap: float

    def format(self) -> str:
        return f"{self.step}\t{self.train_loss!r}\t{self.val_loss!r}\t{self.val_gap!r}"


def predict(model: VideoNet, dataset: Dataset) -> np.ndarray:
    """Eval-mode confidences for every video, ``videos x classes``."""
    cfg = model.config
    if (dataset.visual_dim, dataset.audio_dim) != (cfg.visual_dim, cfg.audio_dim):
        raise ShapeError(f"dataset dims ({dataset.visual_dim}, {dataset.audio_dim}) do not match "
                         f"model dims ({cfg.visual_dim}, {cfg.audio_dim})")
    if dataset.num_classes != cfg.num_classes:
        raise ShapeError(f"dataset has {dataset.num_classes} classes, model has {cfg.num_classes}")
    rng = Rng(EVAL_SEED)
    out = []
    for b, start in enumerate(range(0, len(dataset), EVAL_BATCH)):
        chunk = dataset.records[start:start + EVAL_BATCH]
        visual, audio = stack_videos(chunk, cfg.frames, rng.derive(b))
        out.append(model.forward(visual, audio, train_mode=False)[0])
    if not out:
        return np.zeros((0, cfg.num_classes))
    return np.concatenate(out, axis=0)


def evaluate(model: VideoNet, dataset: Dataset, k: int = 20) -> tuple[float, float]:
    """Returns ``(GAP@k, mean cross-entropy)`` over the whole dataset."""
    d = predict(model, dataset)
    y = labels_to_matrix(dataset.records, dataset.num_classes)
    loss, _ = bce_loss(d, y)
    return gap_at_k(d, y, k), loss


def train(model: VideoNet, train_data: Dataset, val_data: Dataset | None, config: TrainConfig,
          log_path=None) -> list[LogRow]:
    """Minibatch Adam training; one log row every ``eval_every`` steps.

    ``train_loss`` in a row is the mean batch loss since the previous row.
    Without ``val_data`` the validation columns are NaN.
    """
    if len(train_data) == 0:
        raise ValueError("training dataset is empty")
    cfg = model.config
    params = model.parameters()
    opt = Adam(lr=config.learning_rate)
    base = Rng(config.seed)
    rows: list[LogRow] = []
    window: list[float] = []
    sink = open(log_path, "w") if log_path is not None else None
    try:
        step = 0
        epoch = 0
        while step < config.max_steps:
            epoch_rng = base.derive(1, epoch)
            for visual, audio, y in batches(train_data.records, config.batch_size, epoch_rng,
                                            cfg.frames, cfg.num_classes):
                if step >= config.max_steps:
                    break
                step += 1
                d, cache = model.forward(visual, audio, train_mode=True, rng=base.derive(2, step))
                loss, grad_d = bce_loss(d, y)
                if not math.isfinite(loss):
                    raise TrainingDivergedError(f"non-finite loss {loss} at step {step}")
                opt.step(params, model.backward(grad_d, cache))
                window.append(loss)
                if step % config.eval_every == 0:
                    val_gap, val_loss = (evaluate(model, val_data) if val_data is not None
                                         else (math.nan, math.nan))
                    row = LogRow(step, float(np.mean(window)), val_loss, val_gap)
                    window = []
                    rows.append(row)
                    log.info("step %d train_loss %.4f val_loss %.4f val_gap %.4f",
                             row.step, row.train_loss, row.val_loss, row.val_gap)
                    if sink is not None:
                        sink.write(row.format() + "\n")
                        sink.flush()
            epoch += 1
    finally:
        if sink is not None:
            sink.close()
    return rows


# -- checkpoints -------------------------------------------------------------
#
# b"MMCK", u32 version, u32 config_len, config JSON (utf-8), u32 block_count,
# then per block: u32 name_len, name (utf-8), u32 rows, u32 cols,
# rows*cols little-endian float64. Blocks are sorted by name.

CKPT_MAGIC = b"MMCK"
CKPT_VERSION = 1
_U32 = struct.Struct("<I")


def save_checkpoint(path, model: VideoNet) -> None:
    cfg_bytes = json.dumps(model.config.to_dict(), sort_keys=True).encode()
    state = model.state()
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(_U32.pack(CKPT_VERSION))
        fh.write(_U32.pack(len(cfg_bytes)))
        fh.write(cfg_bytes)
        fh.write(_U32.pack(len(state)))
        for name in sorted(state):
            arr = state[name]
            raw = name.encode()
            fh.write(_U32.pack(len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<II", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path) -> VideoNet:
    buf = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError(f"{path}: truncated checkpoint")
        out = buf[pos:pos + n]
        pos += n
        return out

    def u32():
        return _U32.unpack(take(4))[0]

    if take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = u32()
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        config = ModelConfig.from_dict(json.loads(take(u32()).decode()))
    except (ValueError, TypeError) as exc:
        raise CheckpointError(f"{path}: bad model config: {exc}") from None
    state = {}
    for _ in range(u32()):
        name = take(u32()).decode()
        rows, cols = struct.unpack("<II", take(8))
        state[name] = np.frombuffer(take(8 * rows * cols), dtype="<f8").reshape(rows, cols).copy()
    if pos != len(buf):
        raise CheckpointError(f"{path}: trailing bytes after parameter blocks")
    model = VideoNet(config)
    try:
        model.load_state(state)
    except ShapeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model
