"""Dense layers, activations, layer normalization and embedding bags.

Every forward returns ``(out, cache)``; the matching backward takes the upstream
gradient and the cache. Parameters live in flat ``dict[str, ndarray]`` maps keyed
by dotted names so a whole model can be checkpointed as one mapping.
"""
from __future__ import annotations

import math

import numpy as np

Params = dict[str, np.ndarray]


class ShapeError(ValueError):
    pass


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_dense(rng: np.random.Generator, n_in: int, n_out: int, prefix: str) -> Params:
    return {
        prefix + ".W": uniform_init(rng, n_in, (n_in, n_out)),
        prefix + ".b": uniform_init(rng, n_in, (n_out,)),
    }


def dense_forward(p: Params, prefix: str, x: np.ndarray):
    W, b = p[prefix + ".W"], p[prefix + ".b"]
    if x.shape[-1] != W.shape[0]:
        raise ShapeError(f"{prefix}: input dim {x.shape[-1]} != {W.shape[0]}")
    return x @ W + b, (prefix, x, W)


def dense_backward(dy: np.ndarray, cache):
    prefix, x, W = cache
    x2 = x.reshape(-1, x.shape[-1])
    dy2 = dy.reshape(-1, dy.shape[-1])
    grads = {prefix + ".W": x2.T @ dy2, prefix + ".b": dy2.sum(axis=0)}
    return dy @ W.T, grads


def tanh_forward(x):
    y = np.tanh(x)
    return y, y


def tanh_backward(dy, y):
    return dy * (1.0 - y * y)


def sigmoid(x):
    # split by sign to avoid overflow in exp
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu_forward(x):
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    return 0.5 * x * (1.0 + t), (x, t)


def gelu_backward(dy, cache):
    x, t = cache
    du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def init_layer_norm(dim: int, prefix: str) -> Params:
    return {prefix + ".gamma": np.ones(dim), prefix + ".beta": np.zeros(dim)}


def layer_norm_forward(p: Params, prefix: str, x: np.ndarray, eps: float = 1e-5):
    gamma, beta = p[prefix + ".gamma"], p[prefix + ".beta"]
    if x.shape[-1] != gamma.shape[0]:
        raise ShapeError(f"{prefix}: dim {x.shape[-1]} != {gamma.shape[0]}")
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return gamma * xhat + beta, (prefix, xhat, inv, gamma)


def layer_norm_backward(dy: np.ndarray, cache):
    prefix, xhat, inv, gamma = cache
    n = xhat.shape[-1]
    lead = tuple(range(dy.ndim - 1))
    grads = {prefix + ".gamma": (dy * xhat).sum(axis=lead), prefix + ".beta": dy.sum(axis=lead)}
    dxhat = dy * gamma
    dx = inv / n * (
        n * dxhat
        - dxhat.sum(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True)
    )
    return dx, grads


def layer_norm(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """gamma * (x - mean) / sqrt(var + eps) + beta over the last axis."""
    y, _ = layer_norm_forward({"ln.gamma": gamma, "ln.beta": beta}, "ln", np.asarray(x, float), eps)
    return y


def embed_mean_forward(p: Params, name: str, ids: np.ndarray, mask: np.ndarray):
    """Mean of embedding rows ``ids[..., k]`` over k where ``mask`` is set (a float mask weights the mean).

    Rows with an empty mask pool to the zero vector.
    """
    table = p[name]
    m = mask.astype(float)
    count = np.maximum(m.sum(axis=-1, keepdims=True), 1.0)
    out = (table[ids] * m[..., None]).sum(axis=-2) / count
    return out, (name, ids, m, count, table.shape)


def embed_mean_backward(dy: np.ndarray, cache):
    name, ids, m, count, shape = cache
    dtable = np.zeros(shape)
    contrib = (dy / count)[..., None, :] * m[..., None]
    np.add.at(dtable, ids.reshape(-1), contrib.reshape(-1, shape[1]))
    return {name: dtable}


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def logsumexp(x: np.ndarray, axis=None, keepdims: bool = False):
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if not keepdims:
        out = np.squeeze(out, axis=axis) if axis is not None else out.reshape(())
    return out


def add_grads(acc: Params, new: Params) -> Params:
    for k, v in new.items():
        if k in acc:
            acc[k] = acc[k] + v
        else:
            acc[k] = v
    return acc
