"""Minimal NIfTI-1 single-file (.nii) reader/writer.

Supported: uncompressed, little-endian, float32/float64 data, up to 4 axes.
Only ``dim``, ``datatype``, ``bitpix`` and ``vox_offset`` are interpreted;
everything else is written as zeros/defaults and ignored on read.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import DataError

HEADER_SIZE = 348
VOX_OFFSET = 352
DT_FLOAT32 = 16
DT_FLOAT64 = 64
_DTYPES = {DT_FLOAT32: np.dtype("<f4"), DT_FLOAT64: np.dtype("<f8")}

# byte offsets inside the 348-byte header
_OFF_DIM = 40
_OFF_DATATYPE = 70
_OFF_BITPIX = 72
_OFF_PIXDIM = 76
_OFF_VOX_OFFSET = 108
_OFF_SCL_SLOPE = 112
_OFF_MAGIC = 344


def build_header(shape, datatype):
    if len(shape) > 4:
        raise DataError(f"at most 4 axes are supported, got {len(shape)}")
    hdr = bytearray(HEADER_SIZE)
    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    dim = [len(shape)] + list(shape) + [1] * (7 - len(shape))
    struct.pack_into("<8h", hdr, _OFF_DIM, *dim)
    struct.pack_into("<h", hdr, _OFF_DATATYPE, datatype)
    struct.pack_into("<h", hdr, _OFF_BITPIX, _DTYPES[datatype].itemsize * 8)
    struct.pack_into("<8f", hdr, _OFF_PIXDIM, *([1.0] * 8))
    struct.pack_into("<f", hdr, _OFF_VOX_OFFSET, float(VOX_OFFSET))
    struct.pack_into("<f", hdr, _OFF_SCL_SLOPE, 1.0)
    hdr[_OFF_MAGIC:_OFF_MAGIC + 4] = b"n+1\x00"
    return bytes(hdr)


def save(path, data, dtype="float64"):
    """Write ``data`` (first axis fastest on disk, as NIfTI requires)."""
    data = np.asarray(data)
    if data.ndim == 0:
        data = data.reshape(1)
    datatype = DT_FLOAT64 if np.dtype(dtype) == np.float64 else DT_FLOAT32
    payload = np.asarray(data, dtype=_DTYPES[datatype]).tobytes(order="F")
    with open(path, "wb") as fh:
        fh.write(build_header(data.shape, datatype))
        fh.write(b"\x00" * (VOX_OFFSET - HEADER_SIZE))
        fh.write(payload)


def read_header(raw):
    if len(raw) < HEADER_SIZE:
        raise DataError("file too short for a NIfTI-1 header")
    (size,) = struct.unpack_from("<i", raw, 0)
    if size != HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == HEADER_SIZE:
            raise DataError("big-endian NIfTI files are not supported")
        raise DataError(f"not a NIfTI-1 header (sizeof_hdr={size})")
    dim = struct.unpack_from("<8h", raw, _OFF_DIM)
    ndim = dim[0]
    if not 1 <= ndim <= 4:
        raise DataError(f"dim[0]={ndim}; only 1 to 4 axes are supported")
    (datatype,) = struct.unpack_from("<h", raw, _OFF_DATATYPE)
    (bitpix,) = struct.unpack_from("<h", raw, _OFF_BITPIX)
    (vox_offset,) = struct.unpack_from("<f", raw, _OFF_VOX_OFFSET)
    if datatype not in _DTYPES:
        raise DataError(f"unsupported NIfTI datatype {datatype}")
    if bitpix != _DTYPES[datatype].itemsize * 8:
        raise DataError(f"bitpix {bitpix} inconsistent with datatype {datatype}")
    return {"shape": tuple(dim[1:ndim + 1]), "datatype": datatype,
            "bitpix": bitpix, "vox_offset": int(vox_offset)}


def load(path):
    """Read a .nii file into a float64 array of its declared shape."""
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raise DataError("compressed NIfTI is not supported")
    hdr = read_header(raw)
    dtype = _DTYPES[hdr["datatype"]]
    count = int(np.prod(hdr["shape"]))
    start = hdr["vox_offset"]
    if len(raw) < start + count * dtype.itemsize:
        raise DataError(f"{path}: truncated image data")
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=start)
    return flat.reshape(hdr["shape"], order="F").astype(np.float64)
