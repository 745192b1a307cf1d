"""Single-head post-norm transformer encoder block over padded sets.

No positional encoding is added, so the block is equivariant to row permutations.
"""
from __future__ import annotations

import math

import numpy as np

from .layers import (
    Params,
    ShapeError,
    dense_backward,
    dense_forward,
    gelu_backward,
    gelu_forward,
    init_dense,
    init_layer_norm,
    layer_norm_backward,
    layer_norm_forward,
    uniform_init,
)

_MASKED = -1e30


def init_transformer_block(rng: np.random.Generator, d: int, d_ff: int, prefix: str) -> Params:
    p = {
        prefix + ".Wq": uniform_init(rng, d, (d, d)),
        prefix + ".Wk": uniform_init(rng, d, (d, d)),
        prefix + ".Wv": uniform_init(rng, d, (d, d)),
    }
    p.update(init_dense(rng, d, d, prefix + ".out"))
    p.update(init_layer_norm(d, prefix + ".ln1"))
    p.update(init_dense(rng, d, d_ff, prefix + ".ff1"))
    p.update(init_dense(rng, d_ff, d, prefix + ".ff2"))
    p.update(init_layer_norm(d, prefix + ".ln2"))
    return p


def transformer_block_forward(p: Params, prefix: str, x: np.ndarray, mask: np.ndarray | None = None):
    """x: [B, L, d]; mask: [B, L] marks real rows. Padded rows never act as keys."""
    if x.ndim == 2:
        out, cache = transformer_block_forward(p, prefix, x[None], None if mask is None else mask[None])
        return out[0], ("squeeze", cache)
    d = p[prefix + ".Wq"].shape[0]
    if x.ndim != 3 or x.shape[-1] != d:
        raise ShapeError(f"{prefix}: expected [B, L, {d}], got {x.shape}")
    if mask is None:
        mask = np.ones(x.shape[:2], dtype=bool)
    q = x @ p[prefix + ".Wq"]
    k = x @ p[prefix + ".Wk"]
    v = x @ p[prefix + ".Wv"]
    scale = 1.0 / math.sqrt(d)
    s = (q @ k.swapaxes(1, 2)) * scale
    s = np.where(mask[:, None, :], s, _MASKED)
    s = s - s.max(axis=-1, keepdims=True)
    a = np.exp(s)
    a /= a.sum(axis=-1, keepdims=True)
    ctx = a @ v
    o, c_out = dense_forward(p, prefix + ".out", ctx)
    y1, c_ln1 = layer_norm_forward(p, prefix + ".ln1", x + o)
    h_pre, c_ff1 = dense_forward(p, prefix + ".ff1", y1)
    h, c_gelu = gelu_forward(h_pre)
    f, c_ff2 = dense_forward(p, prefix + ".ff2", h)
    y, c_ln2 = layer_norm_forward(p, prefix + ".ln2", y1 + f)
    cache = (prefix, x, q, k, v, a, scale, c_out, c_ln1, c_ff1, c_gelu, c_ff2, c_ln2)
    return y, cache


def attention_weights(p: Params, prefix: str, x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    _, cache = transformer_block_forward(p, prefix, x, mask)
    if cache[0] == "squeeze":
        return cache[1][5][0]
    return cache[5]


def transformer_block_backward(p: Params, dy: np.ndarray, cache):
    if cache[0] == "squeeze":
        dx, grads = transformer_block_backward(p, dy[None], cache[1])
        return dx[0], grads
    prefix, x, q, k, v, a, scale, c_out, c_ln1, c_ff1, c_gelu, c_ff2, c_ln2 = cache
    grads: Params = {}
    dr2, g = layer_norm_backward(dy, c_ln2)
    grads.update(g)
    dh, g = dense_backward(dr2, c_ff2)
    grads.update(g)
    dh_pre = gelu_backward(dh, c_gelu)
    dy1, g = dense_backward(dh_pre, c_ff1)
    grads.update(g)
    dy1 = dy1 + dr2
    dr1, g = layer_norm_backward(dy1, c_ln1)
    grads.update(g)
    dctx, g = dense_backward(dr1, c_out)
    grads.update(g)
    da = dctx @ v.swapaxes(1, 2)
    dv = a.swapaxes(1, 2) @ dctx
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.swapaxes(1, 2) @ q
    xf = x.reshape(-1, x.shape[-1])
    grads[prefix + ".Wq"] = xf.T @ dq.reshape(xf.shape[0], -1)
    grads[prefix + ".Wk"] = xf.T @ dk.reshape(xf.shape[0], -1)
    grads[prefix + ".Wv"] = xf.T @ dv.reshape(xf.shape[0], -1)
    dx = dr1 + dq @ p[prefix + ".Wq"].T + dk @ p[prefix + ".Wk"].T + dv @ p[prefix + ".Wv"].T
    return dx, grads
