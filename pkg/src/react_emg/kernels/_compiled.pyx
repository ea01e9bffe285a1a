# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled recurrent scans and the convolution adjoint.

Same signatures and array layouts as ``_reference``; per-step matrix
products call BLAS directly so the time loop never re-enters Python.
"""

import numpy as np

from libc.math cimport exp, expm1, fabs
from scipy.linalg.cython_blas cimport dgemm


cdef inline double tanh(double x) noexcept nogil:
    # exp is much faster than libm tanh; expm1 near zero avoids cancellation
    cdef double e
    if fabs(x) < 0.01:
        e = expm1(2.0 * x)
        return e / (e + 2.0)
    e = exp(-2.0 * fabs(x))
    return (1.0 - e) / (1.0 + e) if x > 0 else (e - 1.0) / (1.0 + e)


cdef inline double _sig(double x) noexcept nogil:
    cdef double e
    if x >= 0:
        return 1.0 / (1.0 + exp(-x))
    e = exp(x)
    return e / (1.0 + e)


cdef inline void _mm(int m, int n, int k, const double* a, int lda, const double* b, int ldb,
                     double beta, double* c, int ldc) noexcept nogil:
    """Row-major ``C[m, n] = A[m, k] @ B[k, n] + beta * C``."""
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    dgemm(b"N", b"N", &n, &m, &k, &one, <double*>b, &ldb, <double*>a, &lda, &beta, c, &ldc)


cdef inline void _mm_t(int m, int n, int k, const double* a, int lda, const double* b,
                       int ldb,
                       double beta, double* c, int ldc) noexcept nogil:
    """Row-major ``C[m, n] = A[m, k] @ B[n, k].T + beta * C``."""
    cdef double one = 1.0
    if m == 0 or n == 0:
        return
    dgemm(b"T", b"N", &n, &m, &k, &one, <double*>b, &ldb, <double*>a, &lda, &beta, c, &ldc)


def col2im_1d(cols, Py_ssize_t length, Py_ssize_t stride):
    cdef const double[:, :, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64)
    cdef Py_ssize_t b = cv.shape[0], c = cv.shape[1], lout = cv.shape[2], k = cv.shape[3]
    out = np.zeros((b, c, length))
    cdef double[:, :, ::1] ov = out
    cdef Py_ssize_t i, ch, t, j, base
    with nogil:
        for i in range(b):
            for ch in range(c):
                for t in range(lout):
                    base = t * stride
                    for j in range(k):
                        ov[i, ch, base + j] += cv[i, ch, t, j]
    return out


# ---------------------------------------------------------------- GRU


def gru_scan_forward(xp_in, u_in, bint reverse):
    """GRU scan; the gate nonlinearities use NumPy's vectorized ufuncs on
    whole (batch, width) blocks, which beats scalar libm calls at the
    calibration batch sizes this kernel sees."""
    cdef const double[:, :, ::1] xp = np.ascontiguousarray(xp_in, dtype=np.float64)
    cdef const double[:, ::1] u = np.ascontiguousarray(u_in, dtype=np.float64)
    cdef int t_len = xp.shape[0], batch = xp.shape[1], g = xp.shape[2]
    cdef int hid = g // 3
    hs_a = np.empty((t_len, batch, hid))
    hprev_a = np.empty((t_len, batch, hid))
    zs_a = np.empty((t_len, batch, hid))
    rs_a = np.empty((t_len, batch, hid))
    ns_a = np.empty((t_len, batch, hid))
    h_a = np.zeros((batch, hid))
    zr_a = np.empty((batch, 2 * hid))
    rh_a = np.empty((batch, hid))
    nn_a = np.empty((batch, hid))
    cdef double[:, :, ::1] hs = hs_a, hprev = hprev_a, zs = zs_a, rs = rs_a, ns = ns_a
    cdef double[:, ::1] h = h_a, zr = zr_a, rh = rh_a, nn = nn_a
    cdef int step, t, i, j
    cdef double z, n
    tanh_ = np.tanh
    for step in range(t_len):
        t = t_len - 1 - step if reverse else step
        with nogil:
            for i in range(batch):
                for j in range(hid):
                    hprev[t, i, j] = h[i, j]
                for j in range(2 * hid):
                    zr[i, j] = xp[t, i, j]
            _mm(batch, 2 * hid, hid, &h[0, 0], hid, &u[0, 0], g, 1.0, &zr[0, 0], 2 * hid)
            for i in range(batch):
                for j in range(2 * hid):
                    zr[i, j] *= 0.5
        # zr holds half the pre-activation, so sigmoid = 0.5 * (tanh + 1)
        tanh_(zr_a, out=zr_a)
        with nogil:
            for i in range(batch):
                for j in range(2 * hid):
                    zr[i, j] = 0.5 * (zr[i, j] + 1.0)
                for j in range(hid):
                    rh[i, j] = zr[i, hid + j] * h[i, j]
                    nn[i, j] = xp[t, i, 2 * hid + j]
            _mm(batch, hid, hid, &rh[0, 0], hid, &u[0, 2 * hid], g, 1.0, &nn[0, 0], hid)
        tanh_(nn_a, out=nn_a)
        with nogil:
            for i in range(batch):
                for j in range(hid):
                    z = zr[i, j]
                    n = nn[i, j]
                    h[i, j] = (1.0 - z) * h[i, j] + z * n
                    hs[t, i, j] = h[i, j]
                    zs[t, i, j] = z
                    rs[t, i, j] = zr[i, hid + j]
                    ns[t, i, j] = n
    return hs_a, (hprev_a, zs_a, rs_a, ns_a)


def gru_scan_backward(dhs_in, u_in, cache, bint reverse):
    hprev_a, zs_a, rs_a, ns_a = cache
    cdef const double[:, :, ::1] dhs = np.ascontiguousarray(dhs_in, dtype=np.float64)
    cdef const double[:, ::1] u = np.ascontiguousarray(u_in, dtype=np.float64)
    cdef const double[:, :, ::1] hprev = hprev_a, zs = zs_a, rs = rs_a, ns = ns_a
    cdef int t_len = dhs.shape[0], batch = dhs.shape[1], hid = dhs.shape[2]
    cdef int g = 3 * hid
    dxp_a = np.empty((t_len, batch, g))
    dh_a = np.zeros((batch, hid))
    drh_a = np.empty((batch, hid))
    cdef double[:, :, ::1] dxp = dxp_a
    cdef double[:, ::1] dh = dh_a, drh = drh_a
    cdef int step, t, i, j
    cdef double z, r, n, hp, d, dn
    with nogil:
        for step in range(t_len):
            t = step if reverse else t_len - 1 - step
            for i in range(batch):
                for j in range(hid):
                    d = dh[i, j] + dhs[t, i, j]
                    dh[i, j] = d
                    z = zs[t, i, j]
                    n = ns[t, i, j]
                    hp = hprev[t, i, j]
                    dxp[t, i, j] = d * (n - hp) * z * (1.0 - z)
                    dxp[t, i, 2 * hid + j] = d * z * (1.0 - n * n)
            _mm_t(batch, hid, hid, &dxp[t, 0, 2 * hid], g, &u[0, 2 * hid], g, 0.0,
                  &drh[0, 0], hid)
            for i in range(batch):
                for j in range(hid):
                    r = rs[t, i, j]
                    dxp[t, i, hid + j] = drh[i, j] * hprev[t, i, j] * r * (1.0 - r)
                    dh[i, j] = dh[i, j] * (1.0 - zs[t, i, j]) + drh[i, j] * r
            _mm_t(batch, hid, 2 * hid, &dxp[t, 0, 0], g, &u[0, 0], g, 1.0, &dh[0, 0], hid)
    du = np.empty((hid, g))
    du[:, :2 * hid] = np.tensordot(hprev_a, dxp_a[:, :, :2 * hid], axes=([0, 1], [0, 1]))
    du[:, 2 * hid:] = np.tensordot(hprev_a * rs_a, dxp_a[:, :, 2 * hid:],
                                   axes=([0, 1], [0, 1]))
    return dxp_a, du


# ---------------------------------------------------------------- LSTM decoder


cdef inline void _lstm_gates(double[:, ::1] a, int batch, int hid) noexcept nogil:
    cdef int i, j
    for i in range(batch):
        for j in range(2 * hid):
            a[i, j] = _sig(a[i, j])
        for j in range(2 * hid, 3 * hid):
            a[i, j] = tanh(a[i, j])
        for j in range(3 * hid, 4 * hid):
            a[i, j] = _sig(a[i, j])


def decoder_scan_forward(fproj_in, wp_in, u1_in, w2_in, u2_in, b2_in, wh_in, bh_in,
                         pose0_in, bint tracking, int switch, double scale):
    cdef const double[:, :, ::1] fproj = np.ascontiguousarray(fproj_in, dtype=np.float64)
    cdef const double[:, ::1] wp = np.ascontiguousarray(wp_in, dtype=np.float64)
    cdef const double[:, ::1] u1 = np.ascontiguousarray(u1_in, dtype=np.float64)
    cdef const double[:, ::1] w2 = np.ascontiguousarray(w2_in, dtype=np.float64)
    cdef const double[:, ::1] u2 = np.ascontiguousarray(u2_in, dtype=np.float64)
    cdef const double[::1] b2 = np.ascontiguousarray(b2_in, dtype=np.float64)
    cdef const double[:, ::1] wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    cdef const double[::1] bh = np.ascontiguousarray(bh_in, dtype=np.float64)
    cdef const double[:, ::1] pose0 = np.ascontiguousarray(pose0_in, dtype=np.float64)
    cdef int t_len = fproj.shape[0], batch = fproj.shape[1], g = fproj.shape[2]
    cdef int hid = g // 4, dof = wp.shape[0], out = wh.shape[1]
    h1_a = np.zeros((t_len + 1, batch, hid))
    c1_a = np.zeros((t_len + 1, batch, hid))
    h2_a = np.zeros((t_len + 1, batch, hid))
    c2_a = np.zeros((t_len + 1, batch, hid))
    g1_a = np.empty((t_len, batch, g))
    g2_a = np.empty((t_len, batch, g))
    tc1_a = np.empty((t_len, batch, hid))
    tc2_a = np.empty((t_len, batch, hid))
    prevs_a = np.empty((t_len, batch, dof))
    poses_a = np.empty((t_len, batch, dof))
    y_a = np.empty((batch, out))
    cdef double[:, :, ::1] h1 = h1_a, c1 = c1_a, h2 = h2_a, c2 = c2_a
    cdef double[:, :, ::1] g1 = g1_a, g2 = g2_a, tc1 = tc1_a, tc2 = tc2_a
    cdef double[:, :, ::1] prevs = prevs_a, poses = poses_a
    cdef double[:, ::1] y = y_a
    cdef int t, i, j
    cdef double cv, p
    with nogil:
        for t in range(t_len):
            for i in range(batch):
                for j in range(dof):
                    if t == 0:
                        prevs[t, i, j] = pose0[i, j] if tracking else 0.0
                    else:
                        prevs[t, i, j] = poses[t - 1, i, j]
                for j in range(g):
                    g1[t, i, j] = fproj[t, i, j]
            _mm(batch, g, dof, &prevs[t, 0, 0], dof, &wp[0, 0], g, 1.0, &g1[t, 0, 0], g)
            _mm(batch, g, hid, &h1[t, 0, 0], hid, &u1[0, 0], g, 1.0, &g1[t, 0, 0], g)
            _lstm_gates(g1[t], batch, hid)
            for i in range(batch):
                for j in range(hid):
                    cv = g1[t, i, hid + j] * c1[t, i, j] + g1[t, i, j] * g1[t, i, 2 * hid + j]
                    c1[t + 1, i, j] = cv
                    tc1[t, i, j] = tanh(cv)
                    h1[t + 1, i, j] = g1[t, i, 3 * hid + j] * tc1[t, i, j]
                for j in range(g):
                    g2[t, i, j] = b2[j]
            _mm(batch, g, hid, &h1[t + 1, 0, 0], hid, &w2[0, 0], g, 1.0, &g2[t, 0, 0], g)
            _mm(batch, g, hid, &h2[t, 0, 0], hid, &u2[0, 0], g, 1.0, &g2[t, 0, 0], g)
            _lstm_gates(g2[t], batch, hid)
            for i in range(batch):
                for j in range(hid):
                    cv = g2[t, i, hid + j] * c2[t, i, j] + g2[t, i, j] * g2[t, i, 2 * hid + j]
                    c2[t + 1, i, j] = cv
                    tc2[t, i, j] = tanh(cv)
                    h2[t + 1, i, j] = g2[t, i, 3 * hid + j] * tc2[t, i, j]
                for j in range(out):
                    y[i, j] = bh[j]
            _mm(batch, out, hid, &h2[t + 1, 0, 0], hid, &wh[0, 0], out, 1.0, &y[0, 0], out)
            for i in range(batch):
                for j in range(dof):
                    if tracking:
                        if t == 0:
                            p = pose0[i, j]
                        else:
                            p = prevs[t, i, j] + y[i, j] * scale
                    elif t < switch:
                        p = y[i, j] * scale
                    else:
                        p = prevs[t, i, j] + y[i, dof + j] * scale
                    poses[t, i, j] = p
    cache = (h1_a, c1_a, h2_a, c2_a, g1_a, g2_a, tc1_a, tc2_a, prevs_a)
    return poses_a, cache


cdef inline void _cell_back(double[:, ::1] dh, double[:, ::1] dc, const double[:, ::1] gates,
                            const double[:, ::1] c_prev, const double[:, ::1] tc,
                            double[:, ::1] da,
                            int batch, int hid) noexcept nogil:
    """LSTM cell adjoint; ``dc`` holds the incoming cell gradient and is
    overwritten with the gradient for the previous cell state."""
    cdef int i, j
    cdef double gi, gf, gg, go, t, d
    for i in range(batch):
        for j in range(hid):
            gi = gates[i, j]
            gf = gates[i, hid + j]
            gg = gates[i, 2 * hid + j]
            go = gates[i, 3 * hid + j]
            t = tc[i, j]
            d = dh[i, j] * go * (1.0 - t * t) + dc[i, j]
            da[i, j] = d * gg * gi * (1.0 - gi)
            da[i, hid + j] = d * c_prev[i, j] * gf * (1.0 - gf)
            da[i, 2 * hid + j] = d * gi * (1.0 - gg * gg)
            da[i, 3 * hid + j] = dh[i, j] * t * go * (1.0 - go)
            dc[i, j] = d * gf


def decoder_scan_backward(dposes_in, wp_in, u1_in, w2_in, u2_in, wh_in, cache,
                          bint tracking, int switch, double scale):
    h1_a, c1_a, h2_a, c2_a, g1_a, g2_a, tc1_a, tc2_a, prevs_a = cache
    cdef const double[:, :, ::1] dposes = np.ascontiguousarray(dposes_in, dtype=np.float64)
    cdef const double[:, ::1] wp = np.ascontiguousarray(wp_in, dtype=np.float64)
    cdef const double[:, ::1] u1 = np.ascontiguousarray(u1_in, dtype=np.float64)
    cdef const double[:, ::1] w2 = np.ascontiguousarray(w2_in, dtype=np.float64)
    cdef const double[:, ::1] u2 = np.ascontiguousarray(u2_in, dtype=np.float64)
    cdef const double[:, ::1] wh = np.ascontiguousarray(wh_in, dtype=np.float64)
    cdef const double[:, :, ::1] c1 = c1_a, c2 = c2_a
    cdef const double[:, :, ::1] g1 = g1_a, g2 = g2_a, tc1 = tc1_a, tc2 = tc2_a
    cdef int t_len = dposes.shape[0], batch = dposes.shape[1], dof = dposes.shape[2]
    cdef int hid = h1_a.shape[2], out = wh.shape[1], g = 4 * hid
    da1_a = np.empty((t_len, batch, g))
    da2_a = np.empty((t_len, batch, g))
    dys_a = np.zeros((t_len, batch, out))
    dpose0_a = np.zeros((batch, dof))
    dh1_a = np.empty((batch, hid))
    dh2_a = np.empty((batch, hid))
    dh1n_a = np.zeros((batch, hid))
    dh2n_a = np.zeros((batch, hid))
    dc1_a = np.zeros((batch, hid))
    dc2_a = np.zeros((batch, hid))
    dprev_a = np.empty((batch, dof))
    dfuture_a = np.zeros((batch, dof))
    dpose_a = np.empty((batch, dof))
    cdef double[:, :, ::1] da1 = da1_a, da2 = da2_a, dys = dys_a
    cdef double[:, ::1] dpose0 = dpose0_a, dh1 = dh1_a, dh2 = dh2_a
    cdef double[:, ::1] dh1n = dh1n_a, dh2n = dh2n_a, dc1 = dc1_a, dc2 = dc2_a
    cdef double[:, ::1] dprev = dprev_a, dfuture = dfuture_a, dpose = dpose_a
    cdef int t, i, j
    cdef bint integrate
    with nogil:
        for t in range(t_len - 1, -1, -1):
            integrate = False
            for i in range(batch):
                for j in range(dof):
                    dpose[i, j] = dposes[t, i, j] + dfuture[i, j]
                    if tracking:
                        if t == 0:
                            dpose0[i, j] += dpose[i, j]
                        else:
                            dys[t, i, j] = dpose[i, j] * scale
                    elif t < switch:
                        dys[t, i, j] = dpose[i, j] * scale
                    else:
                        dys[t, i, dof + j] = dpose[i, j] * scale
            if tracking:
                integrate = t > 0
            else:
                integrate = t >= switch
            for i in range(batch):
                for j in range(hid):
                    dh2[i, j] = dh2n[i, j]
            _mm_t(batch, hid, out, &dys[t, 0, 0], out, &wh[0, 0], out, 1.0, &dh2[0, 0], hid)
            _cell_back(dh2, dc2, g2[t], c2[t], tc2[t], da2[t], batch, hid)
            _mm_t(batch, hid, g, &da2[t, 0, 0], g, &u2[0, 0], g, 0.0, &dh2n[0, 0], hid)
            for i in range(batch):
                for j in range(hid):
                    dh1[i, j] = dh1n[i, j]
            _mm_t(batch, hid, g, &da2[t, 0, 0], g, &w2[0, 0], g, 1.0, &dh1[0, 0], hid)
            _cell_back(dh1, dc1, g1[t], c1[t], tc1[t], da1[t], batch, hid)
            _mm_t(batch, hid, g, &da1[t, 0, 0], g, &u1[0, 0], g, 0.0, &dh1n[0, 0], hid)
            _mm_t(batch, dof, g, &da1[t, 0, 0], g, &wp[0, 0], g, 0.0, &dprev[0, 0], dof)
            for i in range(batch):
                for j in range(dof):
                    if integrate:
                        dprev[i, j] += dpose[i, j]
                    if t > 0:
                        dfuture[i, j] = dprev[i, j]
                    elif tracking:
                        dpose0[i, j] += dprev[i, j]
    axes = ([0, 1], [0, 1])
    dwp = np.tensordot(prevs_a, da1_a, axes=axes)
    du1 = np.tensordot(h1_a[:t_len], da1_a, axes=axes)
    dw2 = np.tensordot(h1_a[1:], da2_a, axes=axes)
    du2 = np.tensordot(h2_a[:t_len], da2_a, axes=axes)
    db2 = da2_a.sum(axis=(0, 1))
    dwh = np.tensordot(h2_a[1:], dys_a, axes=axes)
    dbh = dys_a.sum(axis=(0, 1))
    return da1_a, dwp, du1, dw2, du2, db2, dwh, dbh, dpose0_a
