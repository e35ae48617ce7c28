"""Vectorized numpy convolution kernels (fallback lane).

Layout conventions shared with the compiled lane:
  x     (C_in, *spatial)           float64, C-contiguous
  k     (C_out, C_in, *ksize)      float64
  gout  (C_out, *spatial_out)      float64
Zero "same" padding of ksize//2 per axis is applied before striding, so
spatial_out[a] == spatial[a] // stride[a].
"""

import itertools

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

COMPILED = False


def conv_forward(x, k, strides):
    n = x.ndim - 1
    ksize = k.shape[2:]
    pads = [(0, 0)] + [(s // 2, s // 2) for s in ksize]
    xp = np.pad(x, pads)
    win = sliding_window_view(xp, ksize, axis=tuple(range(1, n + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in strides)]
    # win: (C_in, *out, *ksize); contract C_in and the kernel taps.
    axes_win = (0,) + tuple(range(n + 1, 2 * n + 1))
    axes_k = tuple(range(1, n + 2))
    out = np.tensordot(win, k, axes=(axes_win, axes_k))
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def conv_bwd_kernel(x, gout, ksize, strides):
    n = x.ndim - 1
    pads = [(0, 0)] + [(s // 2, s // 2) for s in ksize]
    xp = np.pad(x, pads)
    win = sliding_window_view(xp, ksize, axis=tuple(range(1, n + 1)))
    win = win[(slice(None),) + tuple(slice(None, None, s) for s in strides)]
    out_axes = tuple(range(1, n + 1))
    gk = np.tensordot(gout, win, axes=(out_axes, out_axes))
    return np.ascontiguousarray(gk)


def conv_bwd_input(k, gout, x_spatial, strides):
    n = len(x_spatial)
    ksize = k.shape[2:]
    pads = [s // 2 for s in ksize]
    c_in = k.shape[1]
    out_spatial = gout.shape[1:]
    gxp = np.zeros((c_in,) + tuple(e + 2 * p for e, p in zip(x_spatial, pads)))
    for taps in itertools.product(*(range(s) for s in ksize)):
        t = np.tensordot(k[(slice(None), slice(None)) + taps], gout, axes=(0, 0))
        sl = tuple(
            slice(taps[a], taps[a] + strides[a] * out_spatial[a], strides[a])
            for a in range(n)
        )
        gxp[(slice(None),) + sl] += t
    crop = tuple(slice(p, p + e) for p, e in zip(pads, x_spatial))
    return np.ascontiguousarray(gxp[(slice(None),) + crop])
