"""Reader for the uncompressed, numeric subset of MAT-file level 5.

Supported: full real numeric matrices (double, single and the integer
classes), either byte order, small-data-element tags. Everything else is
rejected with :class:`UnsupportedMatFeature` naming the offending element.
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .data import HsiCube

MI_TYPES = {
    1: ("miINT8", "i1"), 2: ("miUINT8", "u1"), 3: ("miINT16", "i2"), 4: ("miUINT16", "u2"),
    5: ("miINT32", "i4"), 6: ("miUINT32", "u4"), 7: ("miSINGLE", "f4"), 9: ("miDOUBLE", "f8"),
    12: ("miINT64", "i8"), 13: ("miUINT64", "u8"),
}
MI_MATRIX = 14
MI_COMPRESSED = 15
MI_UTF = {16: "miUTF8", 17: "miUTF16", 18: "miUTF32"}

MX_NUMERIC = {6: "f8", 7: "f4", 8: "i1", 9: "u1", 10: "i2", 11: "u2", 12: "i4", 13: "u4",
              14: "i8", 15: "u8"}
MX_UNSUPPORTED = {1: "cell array", 2: "struct array", 3: "object", 4: "char array",
                  5: "sparse array", 16: "function handle", 17: "opaque object"}

FLAG_COMPLEX = 0x08


class MatFormatError(ValueError):
    """The bytes are not a well-formed level-5 MAT-file."""


class UnsupportedMatFeature(MatFormatError):
    """A valid MAT-file feature outside the supported subset."""


def _read_tag(buf: bytes, pos: int, endian: str) -> tuple[int, int, int, int]:
    """Return (type, nbytes, data_start, next_element_pos)."""
    if pos + 8 > len(buf):
        raise MatFormatError(f"truncated data element tag at byte {pos}")
    word, = struct.unpack_from(endian + "I", buf, pos)
    if word >> 16:
        # small data element: 2-byte size, 2-byte type, data in the next 4 bytes
        mtype, nbytes = word & 0xFFFF, word >> 16
        if nbytes > 4:
            raise MatFormatError(f"small data element at byte {pos} claims {nbytes} bytes")
        return mtype, nbytes, pos + 4, pos + 8
    mtype, nbytes = struct.unpack_from(endian + "II", buf, pos)
    start = pos + 8
    end = start + nbytes
    if end > len(buf):
        raise MatFormatError(f"data element at byte {pos} runs past end of file")
    if mtype != MI_COMPRESSED:
        end += (-nbytes) % 8
    return mtype, nbytes, start, end


def _numeric(buf, mtype, nbytes, start, endian, what) -> np.ndarray:
    if mtype not in MI_TYPES:
        name = MI_UTF.get(mtype, f"type {mtype}")
        raise UnsupportedMatFeature(f"unsupported MAT feature: {what} stored as {name}")
    code = MI_TYPES[mtype][1]
    dt = np.dtype(code).newbyteorder("<" if endian == "<" else ">")
    if nbytes % dt.itemsize:
        raise MatFormatError(f"{what}: {nbytes} bytes is not a multiple of {dt.itemsize}")
    return np.frombuffer(buf, dtype=dt, count=nbytes // dt.itemsize, offset=start)


def _parse_matrix(buf: bytes, start: int, endian: str) -> tuple[str, np.ndarray]:
    pos = start
    mtype, nbytes, ds, pos = _read_tag(buf, pos, endian)
    flags = _numeric(buf, mtype, nbytes, ds, endian, "array flags")
    if flags.size < 2:
        raise MatFormatError("array flags subelement too short")
    word0 = int(flags[0])
    mx_class = word0 & 0xFF
    if mx_class in MX_UNSUPPORTED:
        raise UnsupportedMatFeature(f"unsupported MAT feature: {MX_UNSUPPORTED[mx_class]}")
    if mx_class not in MX_NUMERIC:
        raise UnsupportedMatFeature(f"unsupported MAT feature: array class {mx_class}")
    if (word0 >> 8) & FLAG_COMPLEX:
        raise UnsupportedMatFeature("unsupported MAT feature: complex array")

    mtype, nbytes, ds, pos = _read_tag(buf, pos, endian)
    dims = tuple(int(d) for d in _numeric(buf, mtype, nbytes, ds, endian, "dimensions"))
    if len(dims) < 2 or min(dims) < 0:
        raise MatFormatError(f"invalid dimensions {dims}")

    mtype, nbytes, ds, pos = _read_tag(buf, pos, endian)
    name = bytes(buf[ds:ds + nbytes]).decode("ascii", errors="replace")

    mtype, nbytes, ds, pos = _read_tag(buf, pos, endian)
    real = _numeric(buf, mtype, nbytes, ds, endian, f"real part of {name!r}")
    count = int(np.prod(dims))
    if real.size != count:
        raise MatFormatError(f"{name!r}: {real.size} values for dimensions {dims}")
    arr = real.astype(np.dtype(MX_NUMERIC[mx_class]).newbyteorder("="))
    return name, arr.reshape(dims, order="F")


def parse_mat_v5(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 128:
        raise MatFormatError("file shorter than the 128-byte MAT header")
    text = bytes(buf[:116])
    if not text.startswith(b"MATLAB 5.0 MAT-file"):
        raise MatFormatError("header text does not start with 'MATLAB 5.0 MAT-file'")
    indicator = bytes(buf[126:128])
    if indicator == b"IM":
        endian = "<"
    elif indicator == b"MI":
        endian = ">"
    else:
        raise MatFormatError(f"bad endian indicator {indicator!r}")
    version, = struct.unpack_from(endian + "H", buf, 124)
    if version != 0x0100:
        raise MatFormatError(f"unsupported MAT version 0x{version:04x}")
    out: dict[str, np.ndarray] = {}
    pos = 128
    while pos < len(buf):
        mtype, nbytes, ds, nxt = _read_tag(buf, pos, endian)
        if mtype == MI_COMPRESSED:
            raise UnsupportedMatFeature(f"unsupported MAT feature: compressed element (miCOMPRESSED) at byte {pos}")
        if mtype != MI_MATRIX:
            raise UnsupportedMatFeature(f"unsupported MAT feature: top-level element of type {mtype} at byte {pos}")
        name, arr = _parse_matrix(buf, ds, endian)
        out[name] = arr
        pos = nxt
    return out


def load_mat_v5(path) -> dict[str, np.ndarray]:
    return parse_mat_v5(Path(path).read_bytes())


def mat_to_cube(arrays: dict[str, np.ndarray], cube_var: str, label_var: str) -> HsiCube:
    for var in (cube_var, label_var):
        if var not in arrays:
            raise KeyError(f"variable {var!r} not found; available: {sorted(arrays)}")
    cube = np.asarray(arrays[cube_var], dtype=np.float32)
    labels = np.asarray(arrays[label_var])
    if cube.ndim == 2:
        cube = cube[:, :, None]
    return HsiCube(cube, labels.astype(np.int64))
