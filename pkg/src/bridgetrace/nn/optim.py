from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .layers import Params, ShapeError, logsumexp


@dataclass
class AdamHyper:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class AdamState:
    t: int = 0
    m: Params = field(default_factory=dict)
    v: Params = field(default_factory=dict)


def adam_step(params: Params, grads: Params, state: AdamState, hyper: AdamHyper = AdamHyper()) -> None:
    """In-place Adam update with bias correction. Params without a gradient are skipped."""
    state.t += 1
    b1, b2 = hyper.beta1, hyper.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ShapeError(f"grad {name} {g.shape} != param {w.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(w)
            state.v[name] = np.zeros_like(w)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)


def softmax_xent(scores: np.ndarray, target: int) -> tuple[float, np.ndarray]:
    scores = np.asarray(scores, dtype=float)
    if scores.ndim != 1 or not 0 <= target < scores.shape[0]:
        raise ShapeError(f"target {target} outside scores of shape {scores.shape}")
    lse = float(logsumexp(scores))
    grad = np.exp(scores - lse)
    grad[target] -= 1.0
    return lse - float(scores[target]), grad
