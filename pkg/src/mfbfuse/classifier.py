"""Mixture-of-experts multi-label classifier.

For every class the gate produces ``m`` logits that are softmaxed across the
experts; each expert emits an independent sigmoid. Column ``j`` of either
weight matrix belongs to class ``j // m`` and expert ``j % m``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mfbfuse.numerics import Rng, ShapeError, as_matrix, sigmoid, softmax_rows, xavier_init

DEFAULT_L2 = 1e-6


@dataclass
class MoeParams:
    W_gate: np.ndarray  # F x (m*c)
    W_expert: np.ndarray  # F x (m*c)
    m: int
    c: int
    lam: float = DEFAULT_L2

    def __post_init__(self):
        if self.m < 1 or self.c < 1:
            raise ValueError(f"need m >= 1 and c >= 1, got m={self.m} c={self.c}")
        if self.lam < 0:
            raise ValueError(f"L2 coefficient must be >= 0, got {self.lam}")
        width = self.m * self.c
        if self.W_gate.shape[1] != width or self.W_expert.shape[1] != width:
            raise ShapeError(f"MoE weights need m*c={width} columns, got "
                             f"{self.W_gate.shape} and {self.W_expert.shape}")

    @classmethod
    def init(cls, F: int, m: int, c: int, rng: Rng, lam: float = DEFAULT_L2) -> "MoeParams":
        return cls(xavier_init(F, m * c, rng), xavier_init(F, m * c, rng), m, c, lam)

    def named(self) -> dict[str, np.ndarray]:
        return {"W_gate": self.W_gate, "W_expert": self.W_expert}


def moe_forward(f, p: MoeParams):
    f = as_matrix(f)
    if f.shape[1] != p.W_gate.shape[0]:
        raise ShapeError(f"input has {f.shape[1]} features, MoE expects {p.W_gate.shape[0]}")
    B = f.shape[0]
    gate = softmax_rows((f @ p.W_gate).reshape(B, p.c, p.m))
    expert = sigmoid((f @ p.W_expert).reshape(B, p.c, p.m))
    d = np.sum(gate * expert, axis=2)
    return d, dict(f=f, gate=gate, expert=expert)


def moe_backward(grad_d, cache, p: MoeParams):
    """Returns ``(grad_f, grad_W_gate, grad_W_expert)``; the L2 term is separate."""
    gate, expert, f = cache["gate"], cache["expert"], cache["f"]
    grad_d = np.asarray(grad_d, dtype=np.float64)
    if grad_d.shape != gate.shape[:2]:
        raise ShapeError(f"upstream gradient {grad_d.shape} does not match output {gate.shape[:2]}")
    g = grad_d[:, :, None]
    grad_expert_logits = g * gate * expert * (1.0 - expert)
    u = g * expert
    grad_gate_logits = gate * (u - np.sum(gate * u, axis=2, keepdims=True))
    B = f.shape[0]
    ge = grad_expert_logits.reshape(B, -1)
    gg = grad_gate_logits.reshape(B, -1)
    grad_f = gg @ p.W_gate.T + ge @ p.W_expert.T
    return grad_f, f.T @ gg, f.T @ ge


def moe_l2_penalty(p: MoeParams) -> float:
    return p.lam * float(np.sum(p.W_gate**2) + np.sum(p.W_expert**2))


def moe_l2_grads(p: MoeParams) -> tuple[np.ndarray, np.ndarray]:
    return 2.0 * p.lam * p.W_gate, 2.0 * p.lam * p.W_expert
