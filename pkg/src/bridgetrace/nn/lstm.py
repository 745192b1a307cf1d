"""Batched LSTM and bidirectional LSTM over right-padded sequences."""
from __future__ import annotations

import numpy as np

from .layers import Params, ShapeError, sigmoid, uniform_init


def init_lstm(rng: np.random.Generator, n_in: int, hidden: int, prefix: str) -> Params:
    fan_in = n_in + hidden
    return {
        prefix + ".Wx": uniform_init(rng, fan_in, (n_in, 4 * hidden)),
        prefix + ".Wh": uniform_init(rng, fan_in, (hidden, 4 * hidden)),
        prefix + ".b": uniform_init(rng, fan_in, (4 * hidden,)),
    }


def lstm_cell(p: Params, prefix: str, x, h, c):
    """One step. Gate layout in the packed weights is (input, forget, cell, output)."""
    H = h.shape[-1]
    z = x @ p[prefix + ".Wx"] + h @ p[prefix + ".Wh"] + p[prefix + ".b"]
    i = sigmoid(z[..., :H])
    f = sigmoid(z[..., H:2 * H])
    g = np.tanh(z[..., 2 * H:3 * H])
    o = sigmoid(z[..., 3 * H:])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    return o * tc, c_new, (i, f, g, o, tc)


def lstm_forward(p: Params, prefix: str, x: np.ndarray, mask: np.ndarray, reverse: bool = False):
    """x: [B, T, D], mask: [B, T] (1 = real token, padding only at the end).

    Padded steps leave the state untouched and emit zeros. With ``reverse`` the
    sequence is consumed right to left, so the state stays at zero across the
    trailing padding before reaching the last real token.
    """
    if x.ndim != 3 or mask.shape != x.shape[:2]:
        raise ShapeError(f"{prefix}: bad shapes x={x.shape} mask={mask.shape}")
    Wx = p[prefix + ".Wx"]
    if Wx.shape[0] != x.shape[2]:
        raise ShapeError(f"{prefix}: input dim {x.shape[2]} != {Wx.shape[0]}")
    B, T, _ = x.shape
    H = p[prefix + ".Wh"].shape[0]
    h = np.zeros((B, H))
    c = np.zeros((B, H))
    out = np.zeros((B, T, H))
    steps = []
    order = range(T - 1, -1, -1) if reverse else range(T)
    m_all = mask.astype(float)
    for t in order:
        m = m_all[:, t, None]
        h_new, c_new, gates = lstm_cell(p, prefix, x[:, t], h, c)
        steps.append((t, h, c, gates, m))
        out[:, t] = m * h_new
        h = m * h_new + (1 - m) * h
        c = m * c_new + (1 - m) * c
    return out, (prefix, x, steps)


def lstm_backward(p: Params, dout: np.ndarray, cache):
    prefix, x, steps = cache
    Wx, Wh = p[prefix + ".Wx"], p[prefix + ".Wh"]
    B, T, D = x.shape
    H = Wh.shape[0]
    dx = np.zeros_like(x)
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H)
    dh_carry = np.zeros((B, H))
    dc_carry = np.zeros((B, H))
    for t, h_prev, c_prev, (i, f, g, o, tc), m in reversed(steps):
        dh_new = m * (dout[:, t] + dh_carry)
        dc_new = m * dc_carry + dh_new * o * (1 - tc * tc)
        dz = np.concatenate(
            [
                dc_new * g * i * (1 - i),
                dc_new * c_prev * f * (1 - f),
                dc_new * i * (1 - g * g),
                dh_new * tc * o * (1 - o),
            ],
            axis=1,
        )
        dWx += x[:, t].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ Wx.T
        dh_carry = dz @ Wh.T + (1 - m) * dh_carry
        dc_carry = dc_new * f + (1 - m) * dc_carry
    return dx, {prefix + ".Wx": dWx, prefix + ".Wh": dWh, prefix + ".b": db}


def init_bilstm(rng: np.random.Generator, n_in: int, hidden: int, prefix: str) -> Params:
    p = init_lstm(rng, n_in, hidden, prefix + ".fw")
    p.update(init_lstm(rng, n_in, hidden, prefix + ".bw"))
    return p


def bilstm_forward(p: Params, prefix: str, x: np.ndarray, mask: np.ndarray):
    """Output [B, T, 2H]: forward state over tokens <= t, backward over tokens >= t."""
    fw, cf = lstm_forward(p, prefix + ".fw", x, mask)
    bw, cb = lstm_forward(p, prefix + ".bw", x, mask, reverse=True)
    return np.concatenate([fw, bw], axis=-1), (cf, cb)


def bilstm_backward(p: Params, dout: np.ndarray, cache):
    cf, cb = cache
    H = dout.shape[-1] // 2
    dxf, gf = lstm_backward(p, dout[..., :H], cf)
    dxb, gb = lstm_backward(p, dout[..., H:], cb)
    gf.update(gb)
    return dxf + dxb, gf
