"""Strided 1-D convolution (cross-correlation) with valid or causal padding."""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .. import kernels
from .tensor import as_tensor, make_node


def conv_output_length(length, kernel, stride, padding="valid"):
    if padding == "causal":
        return (length - 1) // stride + 1
    return (length - kernel) // stride + 1


def conv1d(signal, kernels_, stride=1, padding="valid", bias=None):
    """Cross-correlate ``signal`` (C_in, L) or (B, C_in, L) with (C_out, C_in, K).

    ``valid`` gives ``floor((L - K) / stride) + 1`` outputs.  ``causal``
    prepends ``K - 1`` zeros so output ``t`` only sees inputs up to
    ``t * stride``.
    """
    x = as_tensor(signal)
    w = as_tensor(kernels_)
    if padding not in ("valid", "causal"):
        raise ValueError(f"padding must be 'valid' or 'causal', not {padding!r}")
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    unbatched = x.ndim == 2
    xd = x.data[None] if unbatched else x.data
    if xd.ndim != 3 or w.ndim != 3:
        raise ValueError(f"conv1d expects (B, C, L) signal and (O, C, K) kernels, "
                         f"got {x.shape} and {w.shape}")
    c_out, c_in, k = w.shape
    if xd.shape[1] != c_in:
        raise ValueError(f"conv1d channel mismatch: signal has {xd.shape[1]} channels, "
                         f"kernels expect C_in={c_in} (kernels shape {w.shape})")
    length = xd.shape[2]
    if padding == "causal":
        xd = np.concatenate([np.zeros(xd.shape[:2] + (k - 1,)), xd], axis=2)
    if k > xd.shape[2]:
        raise ValueError(f"kernel size {k} exceeds padded signal length {xd.shape[2]}")
    cols = sliding_window_view(xd, k, axis=2)[:, :, ::stride, :]
    lout = cols.shape[2]
    wd = w.data
    out = np.tensordot(cols, wd, axes=([1, 3], [1, 2])).transpose(0, 2, 1)
    if bias is not None:
        out = out + bias.data[None, :, None]
    if unbatched:
        out = out[0]
    padded_len = xd.shape[2]

    def bw(g):
        gb = g[None] if unbatched else g
        gx = gw = None
        if w.requires_grad:
            gw = np.tensordot(gb, cols, axes=([0, 2], [0, 2]))
        if x.requires_grad:
            gcols = np.ascontiguousarray(
                np.tensordot(gb, wd, axes=([1], [0])).transpose(0, 2, 1, 3))
            gx = kernels.col2im_1d(gcols, padded_len, stride)
            if padding == "causal":
                gx = gx[:, :, k - 1:]
            gx = gx[0] if unbatched else gx
        out_g = [gx, gw]
        if bias is not None:
            out_g.append(gb.sum(axis=(0, 2)) if bias.requires_grad else None)
        return out_g

    assert lout == conv_output_length(length, k, stride, padding)
    parents = (x, w) if bias is None else (x, w, as_tensor(bias))
    return make_node(out, parents, bw, "conv1d")
