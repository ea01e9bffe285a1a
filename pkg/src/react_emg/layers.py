"""Recurrent, attention and embedding blocks shared by backbone and conditioning.

Weight layout is ``(in, out)`` so layers compute ``x @ W``.  Gate order is
(i, f, g, o) for the LSTM and (z, r, n) for the GRU.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .ndcore import ops
from .ndcore.tensor import Tensor, as_tensor, make_node

MAX_POSITIONS = 32


# ---------------------------------------------------------------- init helpers


def uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_linear(ps, name, n_in, n_out, rng, group, zero=False):
    w = np.zeros((n_in, n_out)) if zero else uniform(rng, (n_in, n_out), n_in)
    ps.add(f"{name}.w", w, group)
    ps.add(f"{name}.b", np.zeros(n_out), group)


def init_layer_norm(ps, name, dim, group):
    ps.add(f"{name}.w", np.ones(dim), group)
    ps.add(f"{name}.b", np.zeros(dim), group)


def apply_linear(ps, name, x):
    return ops.linear(x, ps[f"{name}.w"], ps[f"{name}.b"])


def apply_layer_norm(ps, name, x, axis=-1):
    return ops.layer_norm(x, ps[f"{name}.w"], ps[f"{name}.b"], axis=axis)


# ---------------------------------------------------------------- LSTM


def init_lstm(ps, prefix, n_in, hidden, layers, rng, group):
    for layer in range(layers):
        d_in = n_in if layer == 0 else hidden
        ps.add(f"{prefix}.l{layer}.W", uniform(rng, (d_in, 4 * hidden), hidden), group)
        ps.add(f"{prefix}.l{layer}.U", uniform(rng, (hidden, 4 * hidden), hidden), group)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0
        ps.add(f"{prefix}.l{layer}.b", b, group)


def lstm_step(x, h, c, w, u, b):
    """One LSTM step built from primitive ops.

    ``i, f, o = sigmoid``, ``g = tanh``; ``c' = f c + i g``, ``h' = o tanh(c')``.
    """
    x, h, c = as_tensor(x), as_tensor(h), as_tensor(c)
    hid = u.shape[0]
    if x.shape[-1] != w.shape[0] or h.shape[-1] != hid or c.shape[-1] != hid:
        raise ValueError(f"lstm_step dims: x {x.shape}, h {h.shape}, c {c.shape}, "
                         f"W {w.shape}, U {u.shape}")
    a = ops.matmul(_as_2d(x), w) + ops.matmul(_as_2d(h), u) + b
    i = ops.sigmoid(a[:, :hid])
    f = ops.sigmoid(a[:, hid:2 * hid])
    g = ops.tanh(a[:, 2 * hid:3 * hid])
    o = ops.sigmoid(a[:, 3 * hid:])
    c_new = f * _as_2d(c) + i * g
    h_new = o * ops.tanh(c_new)
    if x.ndim == 1:
        return h_new.reshape(hid), c_new.reshape(hid)
    return h_new, c_new


# ---------------------------------------------------------------- GRU


def init_gru(ps, prefix, n_in, hidden, layers, rng, group, bidirectional=True):
    dirs = ("fwd", "bwd") if bidirectional else ("fwd",)
    for layer in range(layers):
        d_in = n_in if layer == 0 else hidden * len(dirs)
        for d in dirs:
            ps.add(f"{prefix}.l{layer}.{d}.W", uniform(rng, (d_in, 3 * hidden), hidden), group)
            ps.add(f"{prefix}.l{layer}.{d}.U", uniform(rng, (hidden, 3 * hidden), hidden), group)
            ps.add(f"{prefix}.l{layer}.{d}.b", np.zeros(3 * hidden), group)


def gru_step(x, h, w, u, b):
    """One GRU step: ``h' = (1 - z) h + z tanh(W_n x + U_n (r h) + b_n)``."""
    x, h = as_tensor(x), as_tensor(h)
    hid = u.shape[0]
    if x.shape[-1] != w.shape[0] or h.shape[-1] != hid:
        raise ValueError(f"gru_step dims: x {x.shape}, h {h.shape}, W {w.shape}, U {u.shape}")
    x2, h2 = _as_2d(x), _as_2d(h)
    xp = ops.matmul(x2, w) + b
    zr = ops.sigmoid(xp[:, :2 * hid] + ops.matmul(h2, u[:, :2 * hid]))
    z = zr[:, :hid]
    r = zr[:, hid:]
    n = ops.tanh(xp[:, 2 * hid:] + ops.matmul(r * h2, u[:, 2 * hid:]))
    h_new = (1.0 - z) * h2 + z * n
    return h_new.reshape(hid) if x.ndim == 1 else h_new


def gru_scan(xp, u, reverse=False):
    """Fused GRU over a projected sequence ``xp`` (B, T, 3H) -> hidden states (B, T, H)."""
    xt = np.ascontiguousarray(xp.data.transpose(1, 0, 2))
    ud = np.ascontiguousarray(u.data)
    hs, cache = kernels.gru_scan_forward(xt, ud, reverse)

    def bw(g):
        dhs = np.ascontiguousarray(g.transpose(1, 0, 2))
        dxp, du = kernels.gru_scan_backward(dhs, ud, cache, reverse)
        return dxp.transpose(1, 0, 2), (du if u.requires_grad else None)

    return make_node(hs.transpose(1, 0, 2), (xp, u), bw, "gru_scan")


def gru_sequence(ps, prefix, seq, reverse=False):
    xp = ops.linear(seq, ps[f"{prefix}.W"], ps[f"{prefix}.b"])
    return gru_scan(xp, ps[f"{prefix}.U"], reverse)


def bigru_pool(ps, prefix, seq, layers, dropout=0.0, ctx=None):
    """Pool (B, T, in) sequences into (B, 2H) with a stacked bidirectional GRU.

    Returns the last layer's final forward state (after step T-1) concatenated
    with its final backward state (after step 0).  Dropout is applied between
    layers in training mode only.
    """
    seq = as_tensor(seq)
    if seq.ndim == 2:
        return bigru_pool(ps, prefix, seq.reshape(1, *seq.shape), layers, dropout, ctx)[0]
    if seq.shape[1] == 0:
        raise ValueError("bigru_pool got an empty recording (T=0)")
    x = seq
    fwd = bwd = None
    for layer in range(layers):
        if layer > 0 and ctx is not None and ctx.train:
            x = ops.dropout(x, dropout, True, ctx.rng(f"{prefix}.drop{layer}"))
        fwd = gru_sequence(ps, f"{prefix}.l{layer}.fwd", x, reverse=False)
        bwd = gru_sequence(ps, f"{prefix}.l{layer}.bwd", x, reverse=True)
        if layer < layers - 1:
            x = ops.concat([fwd, bwd], axis=2)
    return ops.concat([fwd[:, -1, :], bwd[:, 0, :]], axis=1)


# ---------------------------------------------------------------- attention


def init_transformer_layer(ps, prefix, dim, ff_dim, rng, group):
    init_layer_norm(ps, f"{prefix}.ln1", dim, group)
    for proj in ("q", "k", "v", "o"):
        init_linear(ps, f"{prefix}.attn.{proj}", dim, dim, rng, group)
    init_layer_norm(ps, f"{prefix}.ln2", dim, group)
    init_linear(ps, f"{prefix}.ff1", dim, ff_dim, rng, group)
    init_linear(ps, f"{prefix}.ff2", ff_dim, dim, rng, group)


def mha(ps, prefix, tokens, heads):
    """Multi-head self-attention over (B, N, D) tokens (no residual, no norm)."""
    tokens = as_tensor(tokens)
    squeeze = tokens.ndim == 2
    if squeeze:
        tokens = tokens.reshape(1, *tokens.shape)
    b, n, d = tokens.shape
    if n == 0:
        raise ValueError("mha needs at least one token")
    if d % heads:
        raise ValueError(f"model dim {d} not divisible by {heads} heads")
    dh = d // heads

    def split(t):
        return t.reshape(b, n, heads, dh).transpose(0, 2, 1, 3)

    q = split(apply_linear(ps, f"{prefix}.q", tokens))
    k = split(apply_linear(ps, f"{prefix}.k", tokens))
    v = split(apply_linear(ps, f"{prefix}.v", tokens))
    att = ops.softmax(ops.matmul(q, k.swapaxes(-1, -2)) * (1.0 / np.sqrt(dh)), axis=-1)
    o = ops.matmul(att, v).transpose(0, 2, 1, 3).reshape(b, n, d)
    out = apply_linear(ps, f"{prefix}.o", o)
    return out[0] if squeeze else out


def transformer_layer(ps, prefix, tokens, heads):
    """Pre-norm encoder layer: ``x + Attn(LN x)`` then ``x + FF(LN x)``."""
    x = tokens + mha(ps, f"{prefix}.attn", apply_layer_norm(ps, f"{prefix}.ln1", tokens), heads)
    h = apply_layer_norm(ps, f"{prefix}.ln2", x)
    return x + apply_linear(ps, f"{prefix}.ff2", ops.gelu(apply_linear(ps, f"{prefix}.ff1", h)))


def sin_pe(position, dim=128):
    """Sinusoidal encoding; positions are limited to ``0 <= position < 32``."""
    if not 0 <= position < MAX_POSITIONS:
        raise ValueError(f"position {position} outside supported range [0, {MAX_POSITIONS})")
    i = np.arange(dim // 2)
    angle = position / np.power(10000.0, 2 * i / dim)
    pe = np.empty(dim)
    pe[0::2] = np.sin(angle)
    pe[1::2] = np.cos(angle)
    return pe


def _as_2d(t):
    return t.reshape(1, t.shape[-1]) if t.ndim == 1 else t


__all__ = [
    "Tensor", "apply_layer_norm", "apply_linear", "bigru_pool", "gru_scan",
    "gru_sequence", "gru_step", "init_gru", "init_layer_norm", "init_linear",
    "init_lstm", "init_transformer_layer", "lstm_step", "mha", "sin_pe",
    "transformer_layer",
]
