# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled convolution kernels (hot lane).

Same contracts as the numpy fallback: channel-first float64 arrays,
zero "same" padding, per-axis stride.  Loops are kept serial so results
are bitwise deterministic.
"""

import numpy as np

cimport numpy as cnp

cnp.import_array()

COMPILED = True


def conv_forward(cnp.ndarray x, cnp.ndarray k, strides):
    if x.ndim == 3:
        return _conv2d_fwd(x, k, strides[0], strides[1])
    return _conv3d_fwd(x, k, strides[0], strides[1], strides[2])


def conv_bwd_kernel(cnp.ndarray x, cnp.ndarray gout, ksize, strides):
    if x.ndim == 3:
        return _conv2d_bwd_kernel(x, gout, ksize[0], ksize[1], strides[0], strides[1])
    return _conv3d_bwd_kernel(x, gout, ksize[0], ksize[1], ksize[2],
                              strides[0], strides[1], strides[2])


def conv_bwd_input(cnp.ndarray k, cnp.ndarray gout, x_spatial, strides):
    if len(x_spatial) == 2:
        return _conv2d_bwd_input(k, gout, x_spatial[0], x_spatial[1],
                                 strides[0], strides[1])
    return _conv3d_bwd_input(k, gout, x_spatial[0], x_spatial[1], x_spatial[2],
                             strides[0], strides[1], strides[2])


def _conv2d_fwd(double[:, :, ::1] x, double[:, :, :, ::1] k, int si, int sj):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t co_n = k.shape[0], ku = k.shape[2], kv = k.shape[3]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2
    cdef Py_ssize_t ho = h // si, wo = w // sj
    out_arr = np.zeros((co_n, ho, wo), dtype=np.float64)
    cdef double[:, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, i, j, u, v, ii, jj
    cdef double acc
    with nogil:
        for o in range(co_n):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for c in range(ci_n):
                        for u in range(ku):
                            ii = i * si + u - pu
                            if ii < 0 or ii >= h:
                                continue
                            for v in range(kv):
                                jj = j * sj + v - pv
                                if jj < 0 or jj >= w:
                                    continue
                                acc += x[c, ii, jj] * k[o, c, u, v]
                    out[o, i, j] = acc
    return out_arr


def _conv2d_bwd_kernel(double[:, :, ::1] x, double[:, :, ::1] gout,
                       int ku, int kv, int si, int sj):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t co_n = gout.shape[0], ho = gout.shape[1], wo = gout.shape[2]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2
    gk_arr = np.zeros((co_n, ci_n, ku, kv), dtype=np.float64)
    cdef double[:, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t o, c, u, v, i, j, ii, jj
    cdef double acc
    with nogil:
        for o in range(co_n):
            for c in range(ci_n):
                for u in range(ku):
                    for v in range(kv):
                        acc = 0.0
                        for i in range(ho):
                            ii = i * si + u - pu
                            if ii < 0 or ii >= h:
                                continue
                            for j in range(wo):
                                jj = j * sj + v - pv
                                if jj < 0 or jj >= w:
                                    continue
                                acc += x[c, ii, jj] * gout[o, i, j]
                        gk[o, c, u, v] = acc
    return gk_arr


def _conv2d_bwd_input(double[:, :, :, ::1] k, double[:, :, ::1] gout,
                      Py_ssize_t h, Py_ssize_t w, int si, int sj):
    cdef Py_ssize_t co_n = k.shape[0], ci_n = k.shape[1]
    cdef Py_ssize_t ku = k.shape[2], kv = k.shape[3]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2
    cdef Py_ssize_t ho = gout.shape[1], wo = gout.shape[2]
    gx_arr = np.zeros((ci_n, h, w), dtype=np.float64)
    cdef double[:, :, ::1] gx = gx_arr
    cdef Py_ssize_t c, ii, jj, u, v, o, ti, tj, i, j
    cdef double acc
    with nogil:
        for c in range(ci_n):
            for ii in range(h):
                for jj in range(w):
                    acc = 0.0
                    for u in range(ku):
                        ti = ii + pu - u
                        if ti < 0 or ti % si != 0:
                            continue
                        i = ti // si
                        if i >= ho:
                            continue
                        for v in range(kv):
                            tj = jj + pv - v
                            if tj < 0 or tj % sj != 0:
                                continue
                            j = tj // sj
                            if j >= wo:
                                continue
                            for o in range(co_n):
                                acc += k[o, c, u, v] * gout[o, i, j]
                    gx[c, ii, jj] = acc
    return gx_arr


def _conv3d_fwd(double[:, :, :, ::1] x, double[:, :, :, :, ::1] k,
                int si, int sj, int sk):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], w = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t co_n = k.shape[0], ku = k.shape[2], kv = k.shape[3], kw = k.shape[4]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2, pw = kw // 2
    cdef Py_ssize_t ho = h // si, wo = w // sj, do = d // sk
    out_arr = np.zeros((co_n, ho, wo, do), dtype=np.float64)
    cdef double[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t o, c, i, j, l, u, v, m, ii, jj, ll
    cdef double acc
    with nogil:
        for o in range(co_n):
            for i in range(ho):
                for j in range(wo):
                    for l in range(do):
                        acc = 0.0
                        for c in range(ci_n):
                            for u in range(ku):
                                ii = i * si + u - pu
                                if ii < 0 or ii >= h:
                                    continue
                                for v in range(kv):
                                    jj = j * sj + v - pv
                                    if jj < 0 or jj >= w:
                                        continue
                                    for m in range(kw):
                                        ll = l * sk + m - pw
                                        if ll < 0 or ll >= d:
                                            continue
                                        acc += x[c, ii, jj, ll] * k[o, c, u, v, m]
                        out[o, i, j, l] = acc
    return out_arr


def _conv3d_bwd_kernel(double[:, :, :, ::1] x, double[:, :, :, ::1] gout,
                       int ku, int kv, int kw, int si, int sj, int sk):
    cdef Py_ssize_t ci_n = x.shape[0], h = x.shape[1], w = x.shape[2], d = x.shape[3]
    cdef Py_ssize_t co_n = gout.shape[0], ho = gout.shape[1], wo = gout.shape[2], do = gout.shape[3]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2, pw = kw // 2
    gk_arr = np.zeros((co_n, ci_n, ku, kv, kw), dtype=np.float64)
    cdef double[:, :, :, :, ::1] gk = gk_arr
    cdef Py_ssize_t o, c, u, v, m, i, j, l, ii, jj, ll
    cdef double acc
    with nogil:
        for o in range(co_n):
            for c in range(ci_n):
                for u in range(ku):
                    for v in range(kv):
                        for m in range(kw):
                            acc = 0.0
                            for i in range(ho):
                                ii = i * si + u - pu
                                if ii < 0 or ii >= h:
                                    continue
                                for j in range(wo):
                                    jj = j * sj + v - pv
                                    if jj < 0 or jj >= w:
                                        continue
                                    for l in range(do):
                                        ll = l * sk + m - pw
                                        if ll < 0 or ll >= d:
                                            continue
                                        acc += x[c, ii, jj, ll] * gout[o, i, j, l]
                            gk[o, c, u, v, m] = acc
    return gk_arr


def _conv3d_bwd_input(double[:, :, :, :, ::1] k, double[:, :, :, ::1] gout,
                      Py_ssize_t h, Py_ssize_t w, Py_ssize_t d,
                      int si, int sj, int sk):
    cdef Py_ssize_t co_n = k.shape[0], ci_n = k.shape[1]
    cdef Py_ssize_t ku = k.shape[2], kv = k.shape[3], kw = k.shape[4]
    cdef Py_ssize_t pu = ku // 2, pv = kv // 2, pw = kw // 2
    cdef Py_ssize_t ho = gout.shape[1], wo = gout.shape[2], do = gout.shape[3]
    gx_arr = np.zeros((ci_n, h, w, d), dtype=np.float64)
    cdef double[:, :, :, ::1] gx = gx_arr
    cdef Py_ssize_t c, ii, jj, ll, u, v, m, ti, tj, tl, i, j, l, o
    cdef double acc
    with nogil:
        for c in range(ci_n):
            for ii in range(h):
                for jj in range(w):
                    for ll in range(d):
                        acc = 0.0
                        for u in range(ku):
                            ti = ii + pu - u
                            if ti < 0 or ti % si != 0:
                                continue
                            i = ti // si
                            if i >= ho:
                                continue
                            for v in range(kv):
                                tj = jj + pv - v
                                if tj < 0 or tj % sj != 0:
                                    continue
                                j = tj // sj
                                if j >= wo:
                                    continue
                                for m in range(kw):
                                    tl = ll + pw - m
                                    if tl < 0 or tl % sk != 0:
                                        continue
                                    l = tl // sk
                                    if l >= do:
                                        continue
                                    for o in range(co_n):
                                        acc += k[o, c, u, v, m] * gout[o, i, j, l]
                        gx[c, ii, jj, ll] = acc
    return gx_arr
