"""Pure-NumPy recurrent scan kernels.

All sequence arrays are time-major ``(T, B, ...)`` and C-contiguous.  The
compiled module mirrors these signatures exactly; this file is the fallback
and the readable statement of the algorithm.
"""

import numpy as np


def _sigmoid(x):
    return 0.5 * (np.tanh(0.5 * x) + 1.0)


def col2im_1d(cols, length, stride):
    """Fold ``cols`` of shape (B, C, Lout, K) back onto a (B, C, length) signal."""
    b, c, lout, k = cols.shape
    out = np.zeros((b, c, length))
    span = stride * (lout - 1) + 1
    for j in range(k):
        out[:, :, j:j + span:stride] += cols[:, :, :, j]
    return out


# ---------------------------------------------------------------- GRU


def gru_scan_forward(xp, u, reverse):
    """Run a GRU over a pre-projected input.

    ``xp[t]`` holds ``W x_t + b`` for gates (z, r, n) stacked along the last
    axis.  Update rule: ``h' = (1 - z) h + z tanh(xp_n + (r * h) U_n)``.
    """
    t_len, batch, g = xp.shape
    hid = g // 3
    u_zr = u[:, :2 * hid]
    u_n = u[:, 2 * hid:]
    hs = np.empty((t_len, batch, hid))
    hprev = np.empty((t_len, batch, hid))
    zs = np.empty((t_len, batch, hid))
    rs = np.empty((t_len, batch, hid))
    ns = np.empty((t_len, batch, hid))
    h = np.zeros((batch, hid))
    order = range(t_len - 1, -1, -1) if reverse else range(t_len)
    for t in order:
        hprev[t] = h
        zr = _sigmoid(xp[t, :, :2 * hid] + h @ u_zr)
        z = zr[:, :hid]
        r = zr[:, hid:]
        n = np.tanh(xp[t, :, 2 * hid:] + (r * h) @ u_n)
        h = (1.0 - z) * h + z * n
        hs[t] = h
        zs[t] = z
        rs[t] = r
        ns[t] = n
    return hs, (hprev, zs, rs, ns)


def gru_scan_backward(dhs, u, cache, reverse):
    hprev, zs, rs, ns = cache
    t_len, batch, hid = dhs.shape
    u_zr_t = np.ascontiguousarray(u[:, :2 * hid].T)
    u_n_t = np.ascontiguousarray(u[:, 2 * hid:].T)
    dxp = np.empty((t_len, batch, 3 * hid))
    dh = np.zeros((batch, hid))
    order = range(t_len) if reverse else range(t_len - 1, -1, -1)
    for t in order:
        dh = dh + dhs[t]
        z = zs[t]
        r = rs[t]
        n = ns[t]
        hp = hprev[t]
        dz = dh * (n - hp) * z * (1.0 - z)
        dn = dh * z * (1.0 - n * n)
        drh = dn @ u_n_t
        dr = drh * hp * r * (1.0 - r)
        dxp[t, :, :hid] = dz
        dxp[t, :, hid:2 * hid] = dr
        dxp[t, :, 2 * hid:] = dn
        dh = dh * (1.0 - z) + drh * r + dxp[t, :, :2 * hid] @ u_zr_t
    du = np.empty_like(u)
    du[:, :2 * hid] = np.tensordot(hprev, dxp[:, :, :2 * hid], axes=([0, 1], [0, 1]))
    du[:, 2 * hid:] = np.tensordot(hprev * rs, dxp[:, :, 2 * hid:], axes=([0, 1], [0, 1]))
    return dxp, du


# ---------------------------------------------------------------- LSTM decoder


def decoder_scan_forward(fproj, wp, u1, w2, u2, b2, wh, bh, pose0, tracking,
                         switch, scale):
    """Two-layer LSTM decoder with pose feedback and velocity integration.

    ``fproj[t]`` is the feature part of layer-1 pre-activations (bias
    included).  Gate order is (i, f, g, o).  In regression mode the head
    emits (position, velocity); positions are used for ``t < switch`` and
    velocities are integrated afterwards.  In tracking mode the head emits
    velocities only and ``pose_0 = pose0``.
    """
    t_len, batch, g = fproj.shape
    hid = g // 4
    dof = wp.shape[0]
    h1 = np.zeros((t_len + 1, batch, hid))
    c1 = np.zeros((t_len + 1, batch, hid))
    h2 = np.zeros((t_len + 1, batch, hid))
    c2 = np.zeros((t_len + 1, batch, hid))
    g1 = np.empty((t_len, batch, g))
    g2 = np.empty((t_len, batch, g))
    tc1 = np.empty((t_len, batch, hid))
    tc2 = np.empty((t_len, batch, hid))
    prevs = np.empty((t_len, batch, dof))
    poses = np.empty((t_len, batch, dof))
    prev = pose0.copy() if tracking else np.zeros((batch, dof))
    for t in range(t_len):
        prevs[t] = prev
        a = fproj[t] + prev @ wp + h1[t] @ u1
        a[:, :2 * hid] = _sigmoid(a[:, :2 * hid])
        a[:, 2 * hid:3 * hid] = np.tanh(a[:, 2 * hid:3 * hid])
        a[:, 3 * hid:] = _sigmoid(a[:, 3 * hid:])
        g1[t] = a
        c1[t + 1] = a[:, hid:2 * hid] * c1[t] + a[:, :hid] * a[:, 2 * hid:3 * hid]
        tc1[t] = np.tanh(c1[t + 1])
        h1[t + 1] = a[:, 3 * hid:] * tc1[t]

        a = h1[t + 1] @ w2 + h2[t] @ u2 + b2
        a[:, :2 * hid] = _sigmoid(a[:, :2 * hid])
        a[:, 2 * hid:3 * hid] = np.tanh(a[:, 2 * hid:3 * hid])
        a[:, 3 * hid:] = _sigmoid(a[:, 3 * hid:])
        g2[t] = a
        c2[t + 1] = a[:, hid:2 * hid] * c2[t] + a[:, :hid] * a[:, 2 * hid:3 * hid]
        tc2[t] = np.tanh(c2[t + 1])
        h2[t + 1] = a[:, 3 * hid:] * tc2[t]

        y = (h2[t + 1] @ wh + bh) * scale
        if tracking:
            pose = pose0.copy() if t == 0 else prev + y
        elif t < switch:
            pose = y[:, :dof]
        else:
            pose = prev + y[:, dof:]
        poses[t] = pose
        prev = pose
    cache = (h1, c1, h2, c2, g1, g2, tc1, tc2, prevs)
    return poses, cache


def _lstm_cell_backward(dh, dc_next, gates, c_prev, tc):
    hid = dh.shape[1]
    i = gates[:, :hid]
    f = gates[:, hid:2 * hid]
    gg = gates[:, 2 * hid:3 * hid]
    o = gates[:, 3 * hid:]
    dc = dh * o * (1.0 - tc * tc) + dc_next
    da = np.empty_like(gates)
    da[:, :hid] = dc * gg * i * (1.0 - i)
    da[:, hid:2 * hid] = dc * c_prev * f * (1.0 - f)
    da[:, 2 * hid:3 * hid] = dc * i * (1.0 - gg * gg)
    da[:, 3 * hid:] = dh * tc * o * (1.0 - o)
    return da, dc * f


def decoder_scan_backward(dposes, wp, u1, w2, u2, wh, cache, tracking, switch,
                          scale):
    h1, c1, h2, c2, g1, g2, tc1, tc2, prevs = cache
    t_len, batch, dof = dposes.shape
    hid = h1.shape[2]
    out = wh.shape[1]
    wp_t = np.ascontiguousarray(wp.T)
    u1_t = np.ascontiguousarray(u1.T)
    w2_t = np.ascontiguousarray(w2.T)
    u2_t = np.ascontiguousarray(u2.T)
    wh_t = np.ascontiguousarray(wh.T)
    da1 = np.empty((t_len, batch, 4 * hid))
    da2 = np.empty((t_len, batch, 4 * hid))
    dys = np.zeros((t_len, batch, out))
    dpose0 = np.zeros((batch, dof))
    dh1n = np.zeros((batch, hid))
    dc1n = np.zeros((batch, hid))
    dh2n = np.zeros((batch, hid))
    dc2n = np.zeros((batch, hid))
    dfuture = np.zeros((batch, dof))
    for t in range(t_len - 1, -1, -1):
        dpose = dposes[t] + dfuture
        if tracking:
            if t == 0:
                dpose0 += dpose
                dint = None
            else:
                dys[t] = dpose * scale
                dint = dpose
        elif t < switch:
            dys[t, :, :dof] = dpose * scale
            dint = None
        else:
            dys[t, :, dof:] = dpose * scale
            dint = dpose
        dh2 = dys[t] @ wh_t + dh2n
        da, dc2n = _lstm_cell_backward(dh2, dc2n, g2[t], c2[t], tc2[t])
        da2[t] = da
        dh2n = da @ u2_t
        dh1 = da @ w2_t + dh1n
        da, dc1n = _lstm_cell_backward(dh1, dc1n, g1[t], c1[t], tc1[t])
        da1[t] = da
        dh1n = da @ u1_t
        dprev = da @ wp_t
        if dint is not None:
            dprev = dprev + dint
        if t > 0:
            dfuture = dprev
        elif tracking:
            dpose0 += dprev
    axes = ([0, 1], [0, 1])
    dwp = np.tensordot(prevs, da1, axes=axes)
    du1 = np.tensordot(h1[:-1], da1, axes=axes)
    dw2 = np.tensordot(h1[1:], da2, axes=axes)
    du2 = np.tensordot(h2[:-1], da2, axes=axes)
    db2 = da2.sum(axis=(0, 1))
    dwh = np.tensordot(h2[1:], dys, axes=axes)
    dbh = dys.sum(axis=(0, 1))
    return da1, dwp, du1, dw2, du2, db2, dwh, dbh, dpose0
