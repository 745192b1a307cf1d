"""Shared-weight pairwise scorer.

For a query embedding q and candidate embedding d::

    p = g([f(q); f(d)])        f: 2-layer tanh MLP (shared), g: dense layer
    p_hat = LayerNorm(p)       normalized within the vector
    score = sum(p_hat)
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .layers import (
    Params,
    ShapeError,
    dense_backward,
    dense_forward,
    init_dense,
    init_layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    tanh_backward,
    tanh_forward,
)


@dataclass
class PairScores:
    raw: np.ndarray  # [N, out_dim]
    normalized: np.ndarray  # [N, out_dim]
    scores: np.ndarray  # [N]


def init_siamese(rng: np.random.Generator, d: int, hidden: int, out_dim: int, prefix: str) -> Params:
    p = init_dense(rng, d, hidden, prefix + ".f1")
    p.update(init_dense(rng, hidden, hidden, prefix + ".f2"))
    p.update(init_dense(rng, 2 * hidden, out_dim, prefix + ".g"))
    p.update(init_layer_norm(out_dim, prefix + ".norm"))
    return p


def _f_forward(p, prefix, x):
    h1, c1 = dense_forward(p, prefix + ".f1", x)
    a1, t1 = tanh_forward(h1)
    h2, c2 = dense_forward(p, prefix + ".f2", a1)
    a2, t2 = tanh_forward(h2)
    return a2, (c1, t1, c2, t2)


def _f_backward(da2, cache):
    c1, t1, c2, t2 = cache
    grads: Params = {}
    da1, g2 = dense_backward(tanh_backward(da2, t2), c2)
    dx, g1 = dense_backward(tanh_backward(da1, t1), c1)
    grads.update(g1)
    for k, v in g2.items():
        grads[k] = v
    return dx, grads


def siamese_forward(p: Params, prefix: str, queries: np.ndarray, cands: np.ndarray, qidx: np.ndarray, eps: float = 1e-5):
    """Score each candidate row against ``queries[qidx[row]]``.

    queries: [M, d]; cands: [N, d]; qidx: [N] ints. Candidates never interact,
    so scoring a subset gives the same numbers as scoring the full list.
    """
    if queries.ndim != 2 or cands.ndim != 2 or queries.shape[1] != cands.shape[1]:
        raise ShapeError(f"{prefix}: bad shapes {queries.shape} / {cands.shape}")
    qidx = np.asarray(qidx, dtype=int)
    if qidx.shape != (cands.shape[0],):
        raise ShapeError(f"{prefix}: qidx length {qidx.shape} != {cands.shape[0]}")
    fq, cq = _f_forward(p, prefix, queries)
    fd, cd = _f_forward(p, prefix, cands)
    joined = np.concatenate([fq[qidx], fd], axis=1)
    raw, cg = dense_forward(p, prefix + ".g", joined)
    norm, cn = layer_norm_forward(p, prefix + ".norm", raw, eps)
    scores = norm.sum(axis=1)
    return PairScores(raw, norm, scores), (cq, cd, cg, cn, qidx, queries.shape[0], fq.shape[1])


def siamese_backward(p: Params, dscores: np.ndarray, cache):
    """Returns (d_queries, d_cands, grads) for upstream d(loss)/d(score)."""
    cq, cd, cg, cn, qidx, m, h = cache
    dnorm = np.repeat(dscores[:, None], p[cn[0] + ".gamma"].shape[0], axis=1)
    draw, grads = layer_norm_backward(dnorm, cn)
    djoined, g = dense_backward(draw, cg)
    grads.update(g)
    dfq = np.zeros((m, h))
    np.add.at(dfq, qidx, djoined[:, :h])
    dq, gq = _f_backward(dfq, cq)
    dd, gd = _f_backward(djoined[:, h:], cd)
    for k in gq:
        grads[k] = gq[k] + gd[k]
    return dq, dd, grads
