"""Differentiable building blocks with hand-written backward passes.

All ops work on batched float64 arrays shaped (batch, time, channels) and
return (output, cache); the matching ``*_backward`` consumes the upstream
gradient plus the cache. No autodiff framework is involved, which keeps
every gradient explicitly checkable against finite differences.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softmax(x, axis=-1):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


# ------------------------------------------------------------------ conv


def conv1d_forward(x, W, b):
    """Same-padded cross-correlation along time.

    x: (B, T, C_in); W: (C_out, C_in, K) with K odd; b: (C_out,).
    """
    B, T, C_in = x.shape
    C_out, C_in_w, K = W.shape
    if C_in != C_in_w:
        raise ValueError(f"channel mismatch: input {C_in} vs kernel {C_in_w}")
    if K % 2 == 0:
        raise ValueError("kernel length must be odd")
    pad = K // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, K, axis=1)          # (B, T, C_in, K)
    cols = np.ascontiguousarray(win).reshape(B * T, C_in * K)
    y = cols @ W.reshape(C_out, C_in * K).T
    y = y.reshape(B, T, C_out) + b
    return y, (x.shape, cols, W)


def conv1d_backward(dy, cache):
    x_shape, cols, W = cache
    B, T, C_in = x_shape
    C_out, _, K = W.shape
    pad = K // 2
    dy2 = np.ascontiguousarray(dy.reshape(B * T, C_out))
    dW = (dy2.T @ cols).reshape(C_out, C_in, K)
    db = dy.sum(axis=(0, 1))
    # one GEMM for all kernel taps, then scatter-add per tap offset
    g = (dy2 @ W.transpose(0, 2, 1).reshape(C_out, K * C_in)).reshape(B, T, K, C_in)
    dxp = np.zeros((B, T + 2 * pad, C_in), dtype=dy.dtype)
    for k in range(K):
        dxp[:, k:k + T] += g[:, :, k]
    return dxp[:, pad:pad + T], dW, db


def relu_forward(x):
    return np.maximum(x, 0.0), x > 0


def relu_backward(dy, mask):
    return dy * mask


# --------------------------------------------------------------- pooling


def maxpool_time_forward(x):
    """Pairwise max along time with stride 2; an odd tail passes through."""
    B, T, C = x.shape
    if T < 2:
        raise ValueError("need at least 2 time steps to pool")
    n_pairs = T // 2
    even = x[:, 0:2 * n_pairs:2]
    odd = x[:, 1:2 * n_pairs:2]
    odd_wins = odd > even          # ties route to the earlier position
    out = np.where(odd_wins, odd, even)
    if T % 2:
        out = np.concatenate([out, x[:, -1:]], axis=1)
    return out, (T, odd_wins)


def maxpool_time_backward(dy, cache):
    T, odd_wins = cache
    B, _, C = dy.shape
    n_pairs = T // 2
    dx = np.zeros((B, T, C), dtype=dy.dtype)
    dpairs = dy[:, :n_pairs]
    dx[:, 0:2 * n_pairs:2] = np.where(odd_wins, 0.0, dpairs)
    dx[:, 1:2 * n_pairs:2] = np.where(odd_wins, dpairs, 0.0)
    if T % 2:
        dx[:, -1] = dy[:, -1]
    return dx


def pooled_length(T: int) -> int:
    return (T + 1) // 2


# ------------------------------------------------------------------ lstm


def lstm_forward(x, Wx, Wh, b):
    """Standard LSTM over (B, T, C) with zero initial state.

    Gate layout along the 4H axis: input, forget, candidate, output.
    Returns all hidden states (B, T, H).
    """
    B, T, _ = x.shape
    H = Wh.shape[0]
    pre = x @ Wx + b
    h = np.zeros((B, H), dtype=pre.dtype)
    c = np.zeros((B, H), dtype=pre.dtype)
    hs = np.empty((B, T, H), dtype=pre.dtype)
    gates = []
    for t in range(T):
        z = pre[:, t] + h @ Wh
        i = sigmoid(z[:, :H])
        f = sigmoid(z[:, H:2 * H])
        g = np.tanh(z[:, 2 * H:3 * H])
        o = sigmoid(z[:, 3 * H:])
        c_prev = c
        c = f * c_prev + i * g
        ct = np.tanh(c)
        h_prev = h
        h = o * ct
        hs[:, t] = h
        gates.append((i, f, g, o, c_prev, c, ct, h_prev))
    return hs, (x, Wx, Wh, gates)


def lstm_backward(dhs, cache):
    x, Wx, Wh, gates = cache
    B, T, _ = x.shape
    H = Wh.shape[0]
    dWx = np.zeros_like(Wx)
    dWh = np.zeros_like(Wh)
    db = np.zeros(4 * H, dtype=Wx.dtype)
    dx = np.zeros_like(x)
    dh_next = np.zeros((B, H), dtype=Wx.dtype)
    dc_next = np.zeros((B, H), dtype=Wx.dtype)
    for t in reversed(range(T)):
        i, f, g, o, c_prev, c, ct, h_prev = gates[t]
        dh = dhs[:, t] + dh_next
        do = dh * ct
        dc = dc_next + dh * o * (1.0 - ct * ct)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dc_next = dc * f
        dz = np.concatenate([
            di * i * (1.0 - i),
            df * f * (1.0 - f),
            dg * (1.0 - g * g),
            do * o * (1.0 - o),
        ], axis=1)
        dWx += x[:, t].T @ dz
        dWh += h_prev.T @ dz
        db += dz.sum(axis=0)
        dx[:, t] = dz @ Wx.T
        dh_next = dz @ Wh.T
    return dx, dWx, dWh, db


# ------------------------------------------------------------- attention


def _split_heads(x, n_heads):
    B, T, D = x.shape
    return x.reshape(B, T, n_heads, D // n_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    B, nh, T, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, T, nh * dh)


def mha_forward(h_q, h_k, h_v, Wq, Wk, Wv, Wo, n_heads):
    """Scaled-dot-product multi-head attention.

    Queries come from ``h_q``, keys from ``h_k``, values from ``h_v``; all
    (B, T, D) with equal T and D divisible by ``n_heads``.
    """
    if h_q.shape != h_k.shape or h_q.shape != h_v.shape:
        raise ValueError("attention inputs must share shape")
    D = h_q.shape[2]
    if D % n_heads != 0:
        raise ValueError(f"embedding dim {D} not divisible by {n_heads} heads")
    d_h = D // n_heads
    scale = 1.0 / np.sqrt(d_h)
    Q = _split_heads(h_q @ Wq, n_heads)
    K = _split_heads(h_k @ Wk, n_heads)
    V = _split_heads(h_v @ Wv, n_heads)
    S = np.einsum("bhtd,bhsd->bhts", Q, K) * scale
    A = softmax(S, axis=-1)
    O = np.einsum("bhts,bhsd->bhtd", A, V)
    O_cat = _merge_heads(O)
    Y = O_cat @ Wo
    return Y, (h_q, h_k, h_v, Q, K, V, A, O_cat, Wq, Wk, Wv, Wo, scale)


def mha_backward(dY, cache):
    h_q, h_k, h_v, Q, K, V, A, O_cat, Wq, Wk, Wv, Wo, scale = cache
    n_heads = Q.shape[1]
    dWo = np.einsum("btd,bte->de", O_cat, dY)
    dO = _split_heads(dY @ Wo.T, n_heads)
    dA = np.einsum("bhtd,bhsd->bhts", dO, V)
    dV = np.einsum("bhts,bhtd->bhsd", A, dO)
    dS = A * (dA - np.sum(dA * A, axis=-1, keepdims=True))
    dQ = np.einsum("bhts,bhsd->bhtd", dS, K) * scale
    dK = np.einsum("bhts,bhtd->bhsd", dS, Q) * scale
    dQ_cat = _merge_heads(dQ)
    dK_cat = _merge_heads(dK)
    dV_cat = _merge_heads(dV)
    dWq = np.einsum("btd,bte->de", h_q, dQ_cat)
    dWk = np.einsum("btd,bte->de", h_k, dK_cat)
    dWv = np.einsum("btd,bte->de", h_v, dV_cat)
    dh_q = dQ_cat @ Wq.T
    dh_k = dK_cat @ Wk.T
    dh_v = dV_cat @ Wv.T
    return dh_q, dh_k, dh_v, dWq, dWk, dWv, dWo


# --------------------------------------------------------------- linear


def linear_forward(x, W, b):
    return x @ W + b, (x, W)


def linear_backward(dy, cache):
    x, W = cache
    dW = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    db = dy.reshape(-1, dy.shape[-1]).sum(axis=0)
    dx = dy @ W.T
    return dx, dW, db
