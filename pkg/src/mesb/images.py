"""Image files: 16-bit binary PGM for viewing, headered float32 for round-trips."""

from __future__ import annotations

import re
import struct
from pathlib import Path

import numpy as np

from .errors import InvalidArgument

F32_MAGIC = b"MESBIMG1"
_F32_HEADER = struct.Struct("<8sII")
_PGM_RANGE = re.compile(rb"# mesb min=(\S+) max=(\S+)")


def write_f32(path, image) -> None:
    img = np.asarray(image)
    if img.ndim != 2:
        raise InvalidArgument(".f32 images must be 2-D")
    rows, cols = img.shape
    with open(path, "wb") as fh:
        fh.write(_F32_HEADER.pack(F32_MAGIC, rows, cols))
        fh.write(np.ascontiguousarray(img, dtype="<f4").tobytes())


def read_f32(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < _F32_HEADER.size:
        raise InvalidArgument(f"{path}: truncated header")
    magic, rows, cols = _F32_HEADER.unpack_from(data)
    if magic != F32_MAGIC:
        raise InvalidArgument(f"{path}: bad magic {magic!r}")
    body = data[_F32_HEADER.size:]
    if len(body) != 4 * rows * cols:
        raise InvalidArgument(f"{path}: expected {rows}x{cols} float32 payload")
    return np.frombuffer(body, dtype="<f4").reshape(rows, cols).astype(np.float64)


def write_pgm(path, image) -> None:
    """P5 with maxval 65535; values are min/max scaled and the range is kept
    in a header comment so :func:`read_pgm` can undo the scaling."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise InvalidArgument("PGM images must be 2-D")
    if not np.all(np.isfinite(img)):
        raise InvalidArgument("cannot write non-finite values to PGM")
    lo, hi = float(img.min()), float(img.max())
    scale = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    pixels = np.rint(scale * 65535).astype(">u2")
    rows, cols = img.shape
    header = f"P5\n# mesb min={lo!r} max={hi!r}\n{cols} {rows}\n65535\n".encode("ascii")
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(pixels.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    m = _PGM_RANGE.search(data)
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5" or int(tokens[3]) != 65535:
        raise InvalidArgument(f"{path}: only 16-bit P5 files are supported")
    cols, rows = int(tokens[1]), int(tokens[2])
    raw = np.frombuffer(data[pos + 1:pos + 1 + 2 * rows * cols], dtype=">u2").reshape(rows, cols)
    out = raw.astype(np.float64) / 65535
    if m:
        lo, hi = float(m.group(1)), float(m.group(2))
        out = lo + out * (hi - lo)
    return out
