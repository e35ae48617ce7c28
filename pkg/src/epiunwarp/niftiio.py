"""Minimal single-file NIfTI-1 reader/writer.

Supported subset: little-endian, magic "n+1", datatypes int16 (4),
float32 (16) and float64 (64), dim[0] in {2,3,4}, no extensions, no
compression.  scl_slope/scl_inter are applied on read;
write→read of a float32 volume round-trips the payload bitwise.
Parse failures name the offending byte offset.
"""

import struct
from dataclasses import dataclass

import numpy as np

from .distortion import Volume
from .errors import NiftiParseError, ParameterError
from .ioutil import write_bytes_atomic

HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4 zero extension bytes, single-file layout

_DTYPES = {4: np.dtype("<i2"), 16: np.dtype("<f4"), 64: np.dtype("<f8")}
_CODES = {np.dtype(np.int16): 4, np.dtype(np.float32): 16, np.dtype(np.float64): 64}


@dataclass
class NiftiImage:
    dim: tuple
    datatype: int
    pixdim: tuple
    scl_slope: float
    scl_inter: float
    vox_offset: int
    magic: bytes
    payload: np.ndarray


def _read_exact(blob, fmt, offset):
    return struct.unpack_from("<" + fmt, blob, offset)


def parse_nifti(blob: bytes, source: str = "<bytes>") -> NiftiImage:
    if len(blob) < HEADER_SIZE:
        raise NiftiParseError(
            f"{source}: truncated header, {len(blob)} bytes < {HEADER_SIZE}", len(blob))
    (sizeof_hdr,) = _read_exact(blob, "i", 0)
    if sizeof_hdr != HEADER_SIZE:
        (be_size,) = struct.unpack_from(">i", blob, 0)
        if be_size == HEADER_SIZE:
            raise NiftiParseError(f"{source}: big-endian NIfTI is not supported", 0)
        raise NiftiParseError(
            f"{source}: sizeof_hdr is {sizeof_hdr}, expected {HEADER_SIZE}", 0)
    magic = blob[344:348]
    if magic == b"ni1\x00":
        raise NiftiParseError(
            f"{source}: two-file NIfTI variant (magic 'ni1') is not supported", 344)
    if magic != b"n+1\x00":
        raise NiftiParseError(f"{source}: bad magic {magic!r}", 344)
    dim = _read_exact(blob, "8h", 40)
    if not 1 <= dim[0] <= 7:
        raise NiftiParseError(
            f"{source}: dim[0] == {dim[0]} outside 1..7 "
            "(big-endian or corrupt header); only little-endian is supported", 40)
    if dim[0] not in (2, 3, 4):
        raise NiftiParseError(f"{source}: dim[0] must be 2, 3 or 4, got {dim[0]}", 40)
    shape = tuple(int(d) for d in dim[1:1 + dim[0]])
    if any(d < 1 for d in shape):
        raise NiftiParseError(f"{source}: non-positive extent in dim {shape}", 40)
    (datatype, bitpix) = _read_exact(blob, "2h", 70)
    if datatype not in _DTYPES:
        raise NiftiParseError(
            f"{source}: unsupported datatype code {datatype} "
            f"(supported: 4=int16, 16=float32, 64=float64)", 70)
    dtype = _DTYPES[datatype]
    if bitpix != dtype.itemsize * 8:
        raise NiftiParseError(
            f"{source}: bitpix {bitpix} inconsistent with datatype {datatype}", 72)
    pixdim = _read_exact(blob, "8f", 76)
    (vox_offset_f,) = _read_exact(blob, "f", 108)
    (scl_slope, scl_inter) = _read_exact(blob, "2f", 112)
    vox_offset = int(vox_offset_f)
    if vox_offset < HEADER_SIZE:
        raise NiftiParseError(f"{source}: vox_offset {vox_offset} < {HEADER_SIZE}", 108)
    count = int(np.prod(shape))
    need = vox_offset + count * dtype.itemsize
    if len(blob) < need:
        raise NiftiParseError(
            f"{source}: payload truncated, need {need} bytes, file has {len(blob)}",
            len(blob))
    payload = np.frombuffer(blob, dtype=dtype, count=count, offset=vox_offset)
    payload = payload.reshape(shape, order="F")
    return NiftiImage(
        dim=shape, datatype=datatype,
        pixdim=tuple(float(p) for p in pixdim[1:1 + dim[0]]),
        scl_slope=float(scl_slope), scl_inter=float(scl_inter),
        vox_offset=vox_offset, magic=magic, payload=payload)


def nifti_read(path, pe_axis: int = 0, bw_pe: float = 1.0) -> Volume:
    """Read a volume; applies scl_slope/scl_inter (slope 0 means unscaled)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    img = parse_nifti(blob, source=str(path))
    data = img.payload
    if img.scl_slope not in (0.0, 1.0) or img.scl_inter != 0.0:
        slope = img.scl_slope if img.scl_slope != 0.0 else 1.0
        data = data.astype(np.float64) * slope + img.scl_inter
    spatial_rank = min(len(img.dim), 3)
    voxel_size = tuple(img.pixdim[:spatial_rank])
    # astype copies: the frombuffer payload is read-only.
    return Volume(data.astype(np.float64), pe_axis=pe_axis,
                  bw_pe=bw_pe, voxel_size=voxel_size)


def nifti_write(volume, path, dtype=np.float32):
    """Write a single-file .nii; dtype is int16, float32 or float64."""
    data = volume.data if isinstance(volume, Volume) else np.asarray(volume)
    dtype = np.dtype(dtype)
    if dtype not in _CODES:
        raise ParameterError(
            f"nifti_write: unsupported dtype {dtype} (int16/float32/float64)")
    if data.ndim not in (2, 3, 4):
        raise ParameterError(f"nifti_write: rank {data.ndim} outside 2..4")
    datatype = _CODES[dtype]
    payload = np.asarray(data, dtype=dtype.newbyteorder("<")).tobytes(order="F")

    header = bytearray(HEADER_SIZE)
    struct.pack_into("<i", header, 0, HEADER_SIZE)
    dim = [data.ndim] + list(data.shape) + [1] * (7 - data.ndim)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<2h", header, 70, datatype, dtype.itemsize * 8)
    voxel_size = getattr(volume, "voxel_size", None) or (1.0,) * min(data.ndim, 3)
    pixdim = [1.0] + list(voxel_size) + [1.0] * (7 - len(voxel_size))
    struct.pack_into("<8f", header, 76, *pixdim[:8])
    struct.pack_into("<f", header, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", header, 112, 1.0, 0.0)
    header[344:348] = b"n+1\x00"
    write_bytes_atomic(path, bytes(header) + b"\x00" * (_VOX_OFFSET - HEADER_SIZE) + payload)
