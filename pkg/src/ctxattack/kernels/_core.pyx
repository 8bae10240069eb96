# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled kernels: same entry points as ``_reference``, loop-based."""

import numpy as np

cimport numpy as cnp
from libc.math cimport exp, log

cnp.import_array()

BACKEND_NAME = "cython"


def cell_features(double[:, :, ::1] image, int grid, int pool):
    cdef int H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef int ch = H // grid, cw = W // grid
    cdef int bh = ch // pool, bw = cw // pool
    cdef double inv = 1.0 / (bh * bw)
    out = np.empty((grid * grid, pool * pool * C), dtype=np.float64)
    cdef double[:, ::1] f = out
    cdef int gr, gc, pr, pc, ir, ic, c0, cell, y0, x0
    cdef double acc
    for gr in range(grid):
        for gc in range(grid):
            cell = gr * grid + gc
            for pr in range(pool):
                for pc in range(pool):
                    y0 = gr * ch + pr * bh
                    x0 = gc * cw + pc * bw
                    for c0 in range(C):
                        acc = 0.0
                        for ir in range(bh):
                            for ic in range(bw):
                                acc += image[y0 + ir, x0 + ic, c0]
                        f[cell, (pr * pool + pc) * C + c0] = acc * inv
    return out


cdef void _local_logits(double[:, ::1] f, double[:, ::1] weights,
                        double[::1] bias, double[:, ::1] z) noexcept nogil:
    cdef int n = f.shape[0], F = f.shape[1], K = weights.shape[1]
    cdef int c, i, j
    cdef double acc
    for c in range(n):
        for j in range(K):
            acc = bias[j]
            for i in range(F):
                acc += f[c, i] * weights[i, j]
            z[c, j] = acc


cdef void _softmax_rows(double[:, ::1] z, double[:, ::1] s) noexcept nogil:
    cdef int n = z.shape[0], K = z.shape[1]
    cdef int c, j
    cdef double m, tot
    for c in range(n):
        m = z[c, 0]
        for j in range(1, K):
            if z[c, j] > m:
                m = z[c, j]
        tot = 0.0
        for j in range(K):
            s[c, j] = exp(z[c, j] - m)
            tot += s[c, j]
        for j in range(K):
            s[c, j] /= tot


cdef void _couple_forward(double[:, ::1] z, double[:, ::1] s,
                          const double[:, ::1] mix, double beta,
                          const double[:, ::1] couple,
                          double[:, ::1] g, double[:, ::1] y) noexcept nogil:
    # g[c] = sum_c' couple[c, c'] * s[c']; y[c] = z[c] + beta * mix @ g[c]
    cdef int n = z.shape[0], K = z.shape[1]
    cdef int c, cc, a, j
    cdef double acc, w
    for c in range(n):
        for j in range(K):
            g[c, j] = 0.0
        for cc in range(n):
            w = couple[c, cc]
            if w != 0.0:
                for j in range(K):
                    g[c, j] += w * s[cc, j]
    for c in range(n):
        for a in range(K):
            acc = 0.0
            for j in range(K):
                acc += mix[a, j] * g[c, j]
            y[c, a] = z[c, a] + beta * acc


cdef void _couple_backward(double[:, ::1] dy, double[:, ::1] s,
                           const double[:, ::1] mix, double beta,
                           const double[:, ::1] couple,
                           double[:, ::1] a_buf, double[:, ::1] ds,
                           double[:, ::1] dz) noexcept nogil:
    # ds[c'] = beta * sum_c couple[c, c'] * (dy[c] @ mix)
    # dz[c'] = dy[c'] + s[c'] * (ds[c'] - <s[c'], ds[c']>)
    cdef int n = dy.shape[0], K = dy.shape[1]
    cdef int c, cc, a, j
    cdef double acc, sv, w
    for c in range(n):
        for j in range(K):
            acc = 0.0
            for a in range(K):
                acc += dy[c, a] * mix[a, j]
            a_buf[c, j] = acc
    for cc in range(n):
        for j in range(K):
            ds[cc, j] = 0.0
        for c in range(n):
            w = couple[c, cc]
            if w != 0.0:
                for j in range(K):
                    ds[cc, j] += w * a_buf[c, j]
        sv = 0.0
        for j in range(K):
            ds[cc, j] *= beta
            sv += s[cc, j] * ds[cc, j]
        for j in range(K):
            dz[cc, j] = dy[cc, j] + s[cc, j] * (ds[cc, j] - sv)


def cell_logits(double[:, :, ::1] image, double[:, ::1] weights,
                double[::1] bias, mix, double beta, couple,
                int grid, int pool):
    f_arr = cell_features(image, grid, pool)
    cdef double[:, ::1] f = f_arr
    cdef int n = grid * grid, K = weights.shape[1]
    z_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] z = z_arr
    _local_logits(f, weights, bias, z)
    if beta == 0.0 or mix is None or couple is None or n < 2:
        return z_arr
    cdef const double[:, ::1] mixv = np.ascontiguousarray(mix, dtype=np.float64)
    cdef const double[:, ::1] cpl = np.ascontiguousarray(couple, dtype=np.float64)
    s_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] s = s_arr
    _softmax_rows(z, s)
    g_arr = np.empty((n, K), dtype=np.float64)
    y_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] g = g_arr
    cdef double[:, ::1] y = y_arr
    _couple_forward(z, s, mixv, beta, cpl, g, y)
    return y_arr


def loss_and_grad(double[:, :, ::1] image, double[:, ::1] weights,
                  double[::1] bias, mix, double beta, couple,
                  int grid, int pool,
                  cnp.int64_t[::1] targets, double[::1] cell_weight):
    cdef int H = image.shape[0], W = image.shape[1], C = image.shape[2]
    cdef int ch = H // grid, cw = W // grid
    cdef int bh = ch // pool, bw = cw // pool
    cdef int n = grid * grid, K = weights.shape[1]
    cdef bint coupled = (beta != 0.0 and mix is not None
                         and couple is not None and n > 1)

    f_arr = cell_features(image, grid, pool)
    cdef double[:, ::1] f = f_arr
    z_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] z = z_arr
    _local_logits(f, weights, bias, z)

    cdef const double[:, ::1] mixv = None
    cdef const double[:, ::1] cpl = None
    cdef double[:, ::1] s = None
    cdef double[:, ::1] y = z
    s_arr = None
    if coupled:
        mixv = np.ascontiguousarray(mix, dtype=np.float64)
        cpl = np.ascontiguousarray(couple, dtype=np.float64)
        s_arr = np.empty((n, K), dtype=np.float64)
        s = s_arr
        _softmax_rows(z, s)
        g_arr = np.empty((n, K), dtype=np.float64)
        y_arr = np.empty((n, K), dtype=np.float64)
        y = y_arr
        _couple_forward(z, s, mixv, beta, cpl, g_arr, y)

    # softmax cross entropy on the (possibly coupled) logits
    dy_arr = np.empty((n, K), dtype=np.float64)
    cdef double[:, ::1] dy = dy_arr
    cdef double loss = 0.0
    cdef int c, j, i
    cdef double m, tot, lse, wc, acc, dfv
    cdef double inv_n = 1.0 / n
    for c in range(n):
        m = y[c, 0]
        for j in range(1, K):
            if y[c, j] > m:
                m = y[c, j]
        tot = 0.0
        for j in range(K):
            tot += exp(y[c, j] - m)
        lse = m + log(tot)
        wc = cell_weight[c] * inv_n
        loss += wc * (lse - y[c, targets[c]])
        for j in range(K):
            dy[c, j] = exp(y[c, j] - lse) * wc
        dy[c, targets[c]] -= wc

    cdef double[:, ::1] dz = dy
    if coupled:
        dz_arr = np.empty((n, K), dtype=np.float64)
        dz = dz_arr
        abuf_arr = np.empty((n, K), dtype=np.float64)
        ds_arr = np.empty((n, K), dtype=np.float64)
        _couple_backward(dy, s, mixv, beta, cpl, abuf_arr, ds_arr, dz)

    # df = dz @ W.T scattered back through the average pooling
    grad_arr = np.empty((H, W, C), dtype=np.float64)
    cdef double[:, :, ::1] grad = grad_arr
    cdef double inv_b = 1.0 / (bh * bw)
    cdef int gr, gc, pr, pc, ir, ic, c0, y0, x0
    for gr in range(grid):
        for gc in range(grid):
            c = gr * grid + gc
            for pr in range(pool):
                for pc in range(pool):
                    y0 = gr * ch + pr * bh
                    x0 = gc * cw + pc * bw
                    for c0 in range(C):
                        i = (pr * pool + pc) * C + c0
                        acc = 0.0
                        for j in range(K):
                            acc += dz[c, j] * weights[i, j]
                        dfv = acc * inv_b
                        for ir in range(bh):
                            for ic in range(bw):
                                grad[y0 + ir, x0 + ic, c0] = dfv
    return loss, grad_arr
