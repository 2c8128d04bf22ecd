"""File formats: NPY v1.0 arrays, PGM P5 renders, and RFC-4180 CSV logs.

The NPY reader/writer covers exactly the slice of the format the project
needs: version 1.0, little-endian float32/float64, C order, 2 or 3
dimensions.  Everything else is rejected with a format-specific error so
callers can tell a wrong file from a damaged one.
"""

from __future__ import annotations

import ast
import csv
from pathlib import Path

import numpy as np

__all__ = [
    "ArrayIOError",
    "NpyMagicError",
    "NpyUnsupportedError",
    "NpyTruncatedError",
    "npy_read",
    "npy_write",
    "render_field",
    "read_pgm",
    "write_csv",
]

_NPY_MAGIC = b"\x93NUMPY"
_SUPPORTED_DESCR = {"<f4": np.dtype("<f4"), "<f8": np.dtype("<f8")}


class ArrayIOError(ValueError):
    """Base class for array container failures."""


class NpyMagicError(ArrayIOError):
    """File does not start with the NPY magic string."""


class NpyUnsupportedError(ArrayIOError):
    """Well-formed NPY file outside the supported subset."""


class NpyTruncatedError(ArrayIOError):
    """Payload or header ends before the declared size."""


def _build_header(descr: str, shape: tuple[int, ...]) -> bytes:
    shape_txt = "(" + ", ".join(str(n) for n in shape) + ("," if len(shape) == 1 else "") + ")"
    body = f"{{'descr': '{descr}', 'fortran_order': False, 'shape': {shape_txt}, }}"
    # Magic (6) + version (2) + length field (2) + header must align to 64.
    unpadded = 10 + len(body) + 1
    pad = (64 - unpadded % 64) % 64
    return body.encode("ascii") + b" " * pad + b"\n"


def npy_write(path, array: np.ndarray) -> None:
    """Write a float32/float64 array of 2 or 3 dimensions as NPY v1.0."""
    arr = np.asarray(array)
    if arr.ndim not in (2, 3):
        raise NpyUnsupportedError(f"only 2D/3D arrays are written, got {arr.ndim}D")
    if arr.dtype == np.float32:
        descr = "<f4"
    elif arr.dtype == np.float64:
        descr = "<f8"
    else:
        raise NpyUnsupportedError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    arr = np.ascontiguousarray(arr)
    header = _build_header(descr, arr.shape)
    with open(path, "wb") as fh:
        fh.write(_NPY_MAGIC)
        fh.write(bytes((1, 0)))
        fh.write(len(header).to_bytes(2, "little"))
        fh.write(header)
        fh.write(arr.tobytes(order="C"))


def npy_read(path) -> np.ndarray:
    """Read an NPY v1.0 file from the supported subset."""
    blob = Path(path).read_bytes()
    if blob[:6] != _NPY_MAGIC:
        raise NpyMagicError(f"{path}: not an NPY file (bad magic)")
    if len(blob) < 10:
        raise NpyTruncatedError(f"{path}: header cut short")
    major, minor = blob[6], blob[7]
    if (major, minor) != (1, 0):
        raise NpyUnsupportedError(f"{path}: NPY version {major}.{minor} not supported")
    hlen = int.from_bytes(blob[8:10], "little")
    if len(blob) < 10 + hlen:
        raise NpyTruncatedError(f"{path}: header cut short")
    try:
        meta = ast.literal_eval(blob[10 : 10 + hlen].decode("ascii").strip())
    except (ValueError, SyntaxError) as exc:
        raise NpyUnsupportedError(f"{path}: unparseable header") from exc
    if not isinstance(meta, dict) or set(meta) != {"descr", "fortran_order", "shape"}:
        raise NpyUnsupportedError(f"{path}: unexpected header keys")
    if meta["descr"] not in _SUPPORTED_DESCR:
        raise NpyUnsupportedError(f"{path}: dtype {meta['descr']!r} not supported")
    if meta["fortran_order"]:
        raise NpyUnsupportedError(f"{path}: Fortran-ordered payloads not supported")
    shape = tuple(meta["shape"])
    if len(shape) not in (2, 3) or any(n < 0 for n in shape):
        raise NpyUnsupportedError(f"{path}: shape {shape} not supported")
    dtype = _SUPPORTED_DESCR[meta["descr"]]
    count = int(np.prod(shape)) if shape else 0
    payload = blob[10 + hlen :]
    if len(payload) < count * dtype.itemsize:
        raise NpyTruncatedError(
            f"{path}: payload holds {len(payload)} bytes, expected {count * dtype.itemsize}"
        )
    data = np.frombuffer(payload[: count * dtype.itemsize], dtype=dtype)
    return data.reshape(shape).copy()


def render_field(v: np.ndarray, path, color_range: tuple[float, float]) -> None:
    """8-bit grayscale PGM of a (nx, nz) field; the surface row is image row 0.

    color_range maps linearly onto [0, 255]; values outside are clamped.
    """
    arr = np.asarray(v, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError("render_field expects a 2D field")
    lo, hi = color_range
    if not (hi > lo):
        raise ValueError(f"invalid color range ({lo}, {hi})")
    # Grid index iz grows upward; images grow downward.
    img = arr.T[::-1, :]
    scaled = np.clip(np.rint((img - lo) / (hi - lo) * 255.0), 0, 255).astype(np.uint8)
    h, w = scaled.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(scaled.tobytes(order="C"))


def read_pgm(path) -> np.ndarray:
    """Parse a binary (P5) PGM into a (height, width) uint8 array."""
    blob = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        if pos >= len(blob):
            raise ArrayIOError(f"{path}: PGM header cut short")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            pos = blob.index(b"\n", pos) + 1
        elif ch.isspace():
            pos += 1
        else:
            end = pos
            while end < len(blob) and not blob[end : end + 1].isspace():
                end += 1
            tokens.append(blob[pos:end])
            pos = end
    if tokens[0] != b"P5":
        raise ArrayIOError(f"{path}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:4])
    if maxval != 255:
        raise ArrayIOError(f"{path}: only maxval 255 is supported, got {maxval}")
    start = pos + 1  # single whitespace byte after maxval
    data = blob[start : start + w * h]
    if len(data) < w * h:
        raise ArrayIOError(f"{path}: pixel data cut short")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w).copy()


def write_csv(path, header, rows) -> None:
    """RFC-4180 CSV with a header row; floats go through repr for stability."""

    def cell(x):
        # np.float64 subclasses float, so route both through the plain-float
        # repr; repr(np.float64) itself carries a type prefix on numpy >= 2
        if isinstance(x, (float, np.floating)):
            return repr(float(x))
        if isinstance(x, (np.integer,)):
            return str(int(x))
        return x

    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(list(header))
        for row in rows:
            writer.writerow([cell(x) for x in row])
