"""Preprocessing to canonical extents and job configuration plumbing.

Preprocessing matches the acquisition conventions the models expect:
in-plane bilinear resampling to 64x64, slice axis reduced to 32 by
nearest-slice selection (no through-plane blurring), and independent
min-max normalization of each volume to [0, 1] with the original range
recorded for inverse mapping.
"""

import warnings

import numpy as np

from .distortion import Volume
from .errors import ParameterError, ShapeError
from .ioutil import write_text_atomic

INPLANE_TARGET = 64
SLICE_TARGET = 32


def _resample_axis_linear(data: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    old_n = data.shape[axis]
    if old_n == new_n:
        return data
    scale = old_n / new_n
    pos = (np.arange(new_n) + 0.5) * scale - 0.5
    i0 = np.floor(pos).astype(np.int64)
    w = pos - i0
    i0c = np.clip(i0, 0, old_n - 1)
    i1c = np.clip(i0 + 1, 0, old_n - 1)
    lo = np.take(data, i0c, axis=axis)
    hi = np.take(data, i1c, axis=axis)
    wshape = [1] * data.ndim
    wshape[axis] = new_n
    w = w.reshape(wshape)
    return lo * (1.0 - w) + hi * w


def _nearest_slices(data: np.ndarray, axis: int, new_n: int) -> np.ndarray:
    old_n = data.shape[axis]
    if old_n == new_n:
        return data
    idx = np.rint((np.arange(new_n) + 0.5) * old_n / new_n - 0.5).astype(np.int64)
    idx = np.clip(idx, 0, old_n - 1)
    return np.take(data, idx, axis=axis)


def _normalize_unit(data: np.ndarray):
    lo = float(data.min())
    hi = float(data.max())
    if hi == lo:
        warnings.warn("preprocess: volume has zero dynamic range, mapping to 0")
        return np.zeros_like(data), (lo, hi)
    if lo == 0.0 and hi == 1.0:
        return data, (lo, hi)
    return (data - lo) / (hi - lo), (lo, hi)


def _preprocess_one(vol: Volume) -> Volume:
    data = vol.data
    if data.ndim >= 3 and data.shape[2] < 2:
        raise ParameterError(
            f"preprocess: need at least 2 slices, got {data.shape[2]}")
    data = _resample_axis_linear(data, 0, INPLANE_TARGET)
    data = _resample_axis_linear(data, 1, INPLANE_TARGET)
    scale0 = vol.data.shape[0] / INPLANE_TARGET
    scale1 = vol.data.shape[1] / INPLANE_TARGET
    voxel = list(vol.voxel_size)
    voxel[0] *= scale0
    voxel[1] *= scale1
    if data.ndim >= 3:
        voxel[2] *= vol.data.shape[2] / SLICE_TARGET
        data = _nearest_slices(data, 2, SLICE_TARGET)
    data, rng = _normalize_unit(data)
    return Volume(data, pe_axis=vol.pe_axis, bw_pe=vol.bw_pe,
                  voxel_size=tuple(voxel), intensity_range=rng)


def preprocess(epi: Volume, t1w: Volume):
    """Resample both volumes to canonical extents and normalize to [0, 1].

    The T1w must already live on the EPI grid (co-registration happens
    upstream); a 4-D EPI is normalized with one range over the whole
    series so frames stay comparable.
    """
    if t1w.data.ndim != epi.spatial_rank:
        raise ShapeError(
            f"preprocess: t1w rank {t1w.data.ndim} != EPI spatial rank {epi.spatial_rank}")
    if t1w.data.shape != epi.spatial_shape:
        raise ShapeError(
            f"preprocess: t1w shape {t1w.data.shape} != EPI spatial shape {epi.spatial_shape}")
    return _preprocess_one(epi), _preprocess_one(t1w)


# --------------------------------------------------------------------------
# Plain-text key-value job configuration
# --------------------------------------------------------------------------

def parse_config_file(path) -> dict:
    """key = value lines; '#' starts a comment; values stay strings."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ParameterError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def write_resolved_config(path, values: dict):
    lines = [f"{k} = {values[k]}" for k in sorted(values)]
    write_text_atomic(path, "\n".join(lines) + "\n")
