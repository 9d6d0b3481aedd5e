"""Minimal NIfTI-1/NIfTI-2 reader and writer.

Covers exactly what the package needs: single-file .nii / .nii.gz, scalar 3D
volumes and 4D vector fields (vector dimension last), spacing and origin from
pixdim + sform/qform translation. Data is returned in Fortran voxel order,
i.e. array index (i, j, k) corresponds to NIfTI dim[1..3].
"""

from __future__ import annotations

import gzip
import os
import struct

import numpy as np

from .errors import FormatError

_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
    1024: np.int64,
    1280: np.uint64,
}
_CODES = {np.dtype(v): k for k, v in _DTYPES.items()}

_N1_SIZE = 348
_N2_SIZE = 540


def _open_binary(path):
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head == b"\x1f\x8b":
        return gzip.open(path, "rb")
    return open(path, "rb")


def _read_header(raw: bytes):
    """Parse header bytes, returning (dims, dtype, voxsizes, origin, slope, inter, offset, byteorder)."""
    if len(raw) < _N1_SIZE:
        raise FormatError("file too short to hold a NIfTI header")
    for order in ("<", ">"):
        (sizeof_hdr,) = struct.unpack(order + "i", raw[:4])
        if sizeof_hdr == _N1_SIZE:
            return _parse_n1(raw, order)
        if sizeof_hdr == _N2_SIZE:
            return _parse_n2(raw, order)
    raise FormatError("not a NIfTI-1 or NIfTI-2 file (bad sizeof_hdr)")


def _parse_n1(raw, bo):
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"bad NIfTI-1 magic {magic!r}")
    dim = struct.unpack(bo + "8h", raw[40:56])
    (datatype,) = struct.unpack(bo + "h", raw[70:72])
    pixdim = struct.unpack(bo + "8f", raw[76:108])
    (vox_offset,) = struct.unpack(bo + "f", raw[108:112])
    slope, inter = struct.unpack(bo + "2f", raw[112:120])
    qform, sform = struct.unpack(bo + "2h", raw[252:256])
    qoffset = struct.unpack(bo + "3f", raw[268:280])
    srow = struct.unpack(bo + "12f", raw[280:328])
    origin = (srow[3], srow[7], srow[11]) if sform > 0 else (qoffset if qform > 0 else (0.0, 0.0, 0.0))
    return dim, datatype, pixdim, origin, slope, inter, int(vox_offset), bo


def _parse_n2(raw, bo):
    if len(raw) < _N2_SIZE:
        raise FormatError("truncated NIfTI-2 header")
    magic = raw[4:8]
    if magic not in (b"n+2\x00", b"ni2\x00"):
        raise FormatError(f"bad NIfTI-2 magic {magic!r}")
    (datatype,) = struct.unpack(bo + "h", raw[12:14])
    dim = struct.unpack(bo + "8q", raw[16:80])
    pixdim = struct.unpack(bo + "8d", raw[104:168])
    (vox_offset,) = struct.unpack(bo + "q", raw[168:176])
    slope, inter = struct.unpack(bo + "2d", raw[176:192])
    qform, sform = struct.unpack(bo + "2i", raw[344:352])
    qoffset = struct.unpack(bo + "3d", raw[376:400])
    srow = struct.unpack(bo + "12d", raw[400:496])
    origin = (srow[3], srow[7], srow[11]) if sform > 0 else (qoffset if qform > 0 else (0.0, 0.0, 0.0))
    return dim, datatype, pixdim, origin, slope, inter, int(vox_offset), bo


def read(path):
    """Read a NIfTI file.

    Returns (data, spacing, origin) where data keeps the on-disk dimensionality
    (trailing singleton dims squeezed down to the declared rank).
    """
    if not os.path.exists(path):
        raise IOError(f"no such file: {path}")
    with _open_binary(path) as fh:
        raw = fh.read()
    dim, datatype, pixdim, origin, slope, inter, vox_offset, bo = _read_header(raw)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise FormatError(f"implausible dim[0]={ndim}")
    shape = tuple(int(d) for d in dim[1 : 1 + ndim])
    if datatype not in _DTYPES:
        raise FormatError(f"unsupported NIfTI datatype code {datatype}")
    dt = np.dtype(_DTYPES[datatype]).newbyteorder(bo)
    count = int(np.prod(shape))
    body = raw[vox_offset : vox_offset + count * dt.itemsize]
    if len(body) < count * dt.itemsize:
        raise FormatError("data section shorter than header promises")
    data = np.frombuffer(body, dtype=dt, count=count).reshape(shape, order="F")
    data = np.asarray(data, dtype=np.float64)
    if slope not in (0.0, 1.0) or inter != 0.0:
        if slope == 0.0:
            slope = 1.0
        data = data * slope + inter
    spacing = tuple(abs(float(p)) or 1.0 for p in pixdim[1:4])
    return data, spacing, tuple(float(o) for o in origin)


def write(path, data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0), dtype=np.float64):
    """Write `data` as a single-file NIfTI-1 (.nii, or gzipped when path ends in .gz)."""
    data = np.asarray(data, dtype=dtype)
    if data.ndim not in (3, 4):
        raise FormatError(f"can only write 3D or 4D arrays, got {data.ndim}D")
    code = _CODES.get(np.dtype(dtype))
    if code is None:
        raise FormatError(f"unsupported output dtype {dtype}")

    hdr = bytearray(_N1_SIZE)
    struct.pack_into("<i", hdr, 0, _N1_SIZE)
    dim = [data.ndim, *data.shape] + [1] * (7 - data.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, np.dtype(dtype).itemsize * 8)
    pixdim = ([1.0, *spacing] + [1.0] * 8)[:8]
    struct.pack_into("<8f", hdr, 76, *pixdim)
    struct.pack_into("<f", hdr, 108, 352.0)  # vox_offset
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)  # scl_slope, scl_inter
    struct.pack_into("<2h", hdr, 252, 0, 1)  # qform_code, sform_code
    sx, sy, sz = spacing
    ox, oy, oz = origin
    struct.pack_into("<12f", hdr, 280, sx, 0, 0, ox, 0, sy, 0, oy, 0, 0, sz, oz)
    if data.ndim == 4:
        struct.pack_into("<h", hdr, 68, 1007)  # intent: vector per voxel
    hdr[344:348] = b"n+1\x00"

    payload = bytes(hdr) + b"\x00" * 4 + np.asfortranarray(data).tobytes(order="F")
    if str(path).endswith(".gz"):
        # mtime pinned so identical inputs give identical bytes
        with gzip.GzipFile(path, "wb", mtime=0) as fh:
            fh.write(payload)
    else:
        with open(path, "wb") as fh:
            fh.write(payload)
