"""Central finite-difference checks of every hand-written backward pass."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from mfbfuse import aggregation as agg
from mfbfuse import fusion
from mfbfuse.classifier import MoeParams, moe_backward, moe_forward
from mfbfuse.numerics import Rng
from mfbfuse.training import bce_loss

STEP = 1e-5
TOLERANCE = 1e-4
OPERATORS = ("mfb", "fc_concat", "avgpool", "dbof", "netvlad", "moe", "bce")


def numeric_grad(loss_fn: Callable[[], float], x: np.ndarray, h: float = STEP) -> np.ndarray:
    """Central differences of ``loss_fn`` w.r.t. every entry of ``x`` (mutated and restored)."""
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        plus = loss_fn()
        flat[i] = old - h
        minus = loss_fn()
        flat[i] = old
        gflat[i] = (plus - minus) / (2.0 * h)
    return g


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric), 1e-12)
    return float(np.linalg.norm(analytic - numeric) / scale)


def _compare(inputs: dict[str, np.ndarray], loss_fn, analytic_fn) -> float:
    analytic = analytic_fn()
    worst = 0.0
    for name, x in inputs.items():
        worst = max(worst, rel_error(analytic[name], numeric_grad(loss_fn, x)))
    return worst


def check_mfb(rng: Rng, perturb: bool = False) -> float:
    C, M, k, o, B = 5, 4, 2, 6, 3
    # Rows with fewer than two active outputs normalize to a constant, so their
    # true gradient is eps-sized and differencing sees only roundoff; redraw them.
    while True:
        p = fusion.MfbParams(rng.normal(size=(C, k * o)), rng.normal(size=(M, k * o)), k, o)
        l, a = rng.normal(size=(B, C)), rng.normal(size=(B, M))
        pooled = fusion.mfb_core(l, a, p)
        if np.all((pooled > 1e-3).sum(axis=1) >= 2) and np.all(np.abs(pooled) > 1e-3):
            break
    R = rng.normal(size=(B, o))
    seed = int(rng.integers(1 << 62))
    inputs = {"l": l, "a": a, "U": p.U, "V": p.V}

    def run():
        return fusion.mfb_forward(l, a, p, 0.1, Rng(seed), train_mode=True)

    def loss():
        return float(np.sum(run()[0] * R))

    def analytic():
        _, cache = run()
        gl, ga, gU, gV = fusion.mfb_backward(R, cache, p)
        out = {"l": gl, "a": ga, "U": gU, "V": gV}
        if perturb:
            out["U"] = out["U"] * 1.01
        return out

    return _compare(inputs, loss, analytic)


def check_fc_concat(rng: Rng, perturb: bool = False) -> float:
    C, M, width, B = 5, 4, 6, 3
    p = fusion.FcConcatParams(rng.normal(size=(C, width)), rng.normal(size=(M, width)))
    l, a = rng.normal(size=(B, C)), rng.normal(size=(B, M))
    R = rng.normal(size=(B, 2 * width))
    inputs = {"l": l, "a": a, "Wv": p.Wv, "Wa": p.Wa}

    def loss():
        return float(np.sum(fusion.fc_concat_forward(l, a, p)[0] * R))

    def analytic():
        _, cache = fusion.fc_concat_forward(l, a, p)
        gl, ga, gWv, gWa = fusion.fc_concat_backward(R, cache, p)
        out = {"l": gl, "a": ga, "Wv": gWv, "Wa": gWa}
        if perturb:
            out["Wa"] = out["Wa"] * 1.01
        return out

    return _compare(inputs, loss, analytic)


def check_avgpool(rng: Rng, perturb: bool = False) -> float:
    frames = rng.normal(size=(2, 5, 4))
    R = rng.normal(size=(2, 4))

    def loss():
        return float(np.sum(agg.avgpool(frames) * R))

    def analytic():
        g = agg.avgpool_backward(R, frames.shape[1])
        return {"frames": g * 1.01 if perturb else g}

    return _compare({"frames": frames}, loss, analytic)


def check_dbof(rng: Rng, perturb: bool = False) -> float:
    D, P, N, B = 4, 7, 5, 2
    p = agg.DbofParams(rng.normal(size=(D, P)), rng.normal(size=(1, P)) * 0.5,
                       rng.uniform(0.5, 1.5, size=(1, P)), rng.normal(size=(1, P)) * 0.1,
                       rng.normal(size=(1, P)) * 0.1, rng.uniform(0.5, 2.0, size=(1, P)))
    frames = rng.normal(size=(B, N, D))
    R = rng.normal(size=(B, P))
    inputs = {"frames": frames, **p.named()}

    def loss():
        return float(np.sum(agg.dbof_forward(frames, p, train_mode=False)[0] * R))

    def analytic():
        _, cache = agg.dbof_forward(frames, p, train_mode=False)
        gx, grads = agg.dbof_backward(R, cache, p)
        out = {"frames": gx, **grads}
        if perturb:
            out["W_proj"] = out["W_proj"] * 1.01
        return out

    return _compare(inputs, loss, analytic)


def check_netvlad(rng: Rng, perturb: bool = False) -> float:
    D, K, N, B = 4, 3, 5, 2
    p = agg.NetVladParams(rng.normal(size=(D, K)), rng.normal(size=(1, K)), rng.normal(size=(K, D)))
    frames = rng.normal(size=(B, N, D))
    R = rng.normal(size=(B, K * D))
    inputs = {"frames": frames, **p.named()}

    def loss():
        return float(np.sum(agg.netvlad_forward(frames, p)[0] * R))

    def analytic():
        _, cache = agg.netvlad_forward(frames, p)
        gx, grads = agg.netvlad_backward(R, cache, p)
        out = {"frames": gx, **grads}
        if perturb:
            out["centers"] = out["centers"] * 1.01
        return out

    return _compare(inputs, loss, analytic)


def check_moe(rng: Rng, perturb: bool = False) -> float:
    F, m, c, B = 5, 2, 4, 3
    p = MoeParams(rng.normal(size=(F, m * c)), rng.normal(size=(F, m * c)), m, c)
    f = rng.normal(size=(B, F))
    R = rng.normal(size=(B, c))
    inputs = {"f": f, "W_gate": p.W_gate, "W_expert": p.W_expert}

    def loss():
        return float(np.sum(moe_forward(f, p)[0] * R))

    def analytic():
        _, cache = moe_forward(f, p)
        gf, gg, ge = moe_backward(R, cache, p)
        return {"f": gf, "W_gate": gg * 1.01 if perturb else gg, "W_expert": ge}

    return _compare(inputs, loss, analytic)


def check_bce(rng: Rng, perturb: bool = False) -> float:
    d = rng.uniform(0.05, 0.95, size=(3, 4))
    y = (rng.uniform(size=(3, 4)) < 0.5).astype(float)

    def analytic():
        g = bce_loss(d, y)[1]
        return {"d": g * 1.01 if perturb else g}

    return _compare({"d": d}, lambda: bce_loss(d, y)[0], analytic)


CHECKS = {
    "mfb": check_mfb,
    "fc_concat": check_fc_concat,
    "avgpool": check_avgpool,
    "dbof": check_dbof,
    "netvlad": check_netvlad,
    "moe": check_moe,
    "bce": check_bce,
}


@dataclass
class CheckResult:
    operator: str
    max_rel_error: float
    passed: bool


def run_gradchecks(seed: int = 0, repeats: int = 5, perturb: str | None = None,
                   tolerance: float = TOLERANCE) -> list[CheckResult]:
    """Run every operator check over ``repeats`` derived seeds.

    ``perturb`` names an operator whose analytic gradient is deliberately
    scaled by 1.01, to confirm the detector fires.
    """
    if perturb is not None and perturb not in CHECKS:
        raise ValueError(f"unknown operator {perturb!r}; choose from {sorted(CHECKS)}")
    base = Rng(seed)
    results = []
    for idx, (name, fn) in enumerate(CHECKS.items()):
        worst = max(fn(base.derive(idx, r), perturb == name) for r in range(repeats))
        results.append(CheckResult(name, worst, worst < tolerance))
    return results
