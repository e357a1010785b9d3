"""Binary frames for the external denoiser (stdin/stdout of a subprocess).

All integers are little-endian u32, ``t`` is a little-endian float64 and
tensor payloads are little-endian float32 in row-major order.

Request::

    b"MESBDNZ1" | u32 type=1 | u32 ndim | u32 dims[ndim] | f64 t |
    f32 X_t[prod(dims)] | f32 X_corrupt[prod(dims)]

Response::

    b"MESBDNZ1" | u32 type=2 | u32 ndim | u32 dims[ndim] | f32 eps[prod(dims)]
    b"MESBDNZ1" | u32 type=3 | u32 nbytes | utf-8 message[nbytes]
"""

from __future__ import annotations

import math
import struct
from typing import BinaryIO, Callable

import numpy as np

from .errors import ProtocolError

MAGIC = b"MESBDNZ1"
MSG_DENOISE = 1
MSG_EPS_REPLY = 2
MSG_ERROR = 3
MAX_NDIM = 4
MAX_ELEMENTS = 1 << 28

_U32 = struct.Struct("<I")
_F64 = struct.Struct("<d")
_F32LE = np.dtype("<f4")


def _dims_header(shape) -> bytes:
    if not 1 <= len(shape) <= MAX_NDIM:
        raise ProtocolError(f"tensor rank must be 1..{MAX_NDIM}, got {len(shape)}")
    return struct.pack(f"<{1 + len(shape)}I", len(shape), *shape)


def encode_request(x_t: np.ndarray, t: float, x_corrupt: np.ndarray) -> bytes:
    if np.shape(x_t) != np.shape(x_corrupt):
        raise ProtocolError("X_t and X_corrupt must share a shape")
    return b"".join([
        MAGIC, _U32.pack(MSG_DENOISE), _dims_header(np.shape(x_t)), _F64.pack(float(t)),
        np.ascontiguousarray(x_t, dtype=_F32LE).tobytes(),
        np.ascontiguousarray(x_corrupt, dtype=_F32LE).tobytes(),
    ])


def encode_eps_reply(eps: np.ndarray) -> bytes:
    return b"".join([MAGIC, _U32.pack(MSG_EPS_REPLY), _dims_header(np.shape(eps)),
                     np.ascontiguousarray(eps, dtype=_F32LE).tobytes()])


def encode_error(message: str) -> bytes:
    raw = message.encode("utf-8")
    return MAGIC + _U32.pack(MSG_ERROR) + _U32.pack(len(raw)) + raw


def _read_u32(read) -> int:
    return _U32.unpack(read(4))[0]


def _read_magic_and_type(read) -> int:
    magic = read(len(MAGIC))
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    return _read_u32(read)


def _read_dims(read) -> tuple[int, ...]:
    ndim = _read_u32(read)
    if not 1 <= ndim <= MAX_NDIM:
        raise ProtocolError(f"tensor rank must be 1..{MAX_NDIM}, got {ndim}")
    dims = tuple(_read_u32(read) for _ in range(ndim))
    if any(d == 0 for d in dims) or math.prod(dims) > MAX_ELEMENTS:
        raise ProtocolError(f"unsupported tensor dims {dims}")
    return dims


def _read_tensor(read, dims) -> np.ndarray:
    n = math.prod(dims)
    return np.frombuffer(read(4 * n), dtype=_F32LE).astype(np.float64).reshape(dims)


def read_request(read: Callable[[int], bytes]):
    """Parses one request with ``read(n)`` returning exactly n bytes.

    Returns (x_t, t, x_corrupt) as float64 arrays.
    """
    kind = _read_magic_and_type(read)
    if kind != MSG_DENOISE:
        raise ProtocolError(f"unexpected request type {kind}")
    dims = _read_dims(read)
    t = _F64.unpack(read(8))[0]
    x_t = _read_tensor(read, dims)
    x_corrupt = _read_tensor(read, dims)
    return x_t, t, x_corrupt


def read_response(read: Callable[[int], bytes]):
    """Returns ("eps", array) or ("error", message)."""
    kind = _read_magic_and_type(read)
    if kind == MSG_EPS_REPLY:
        dims = _read_dims(read)
        return "eps", _read_tensor(read, dims)
    if kind == MSG_ERROR:
        n = _read_u32(read)
        if n > 1 << 20:
            raise ProtocolError(f"error message too long ({n} bytes)")
        return "error", read(n).decode("utf-8", errors="replace")
    raise ProtocolError(f"unexpected response type {kind}")


def exact_reader(stream: BinaryIO) -> Callable[[int], bytes]:
    """Blocking read(n) over a binary stream; raises EOFError on short reads."""

    def read(n: int) -> bytes:
        chunks = []
        while n > 0:
            chunk = stream.read(n)
            if not chunk:
                raise EOFError("stream closed mid-frame")
            chunks.append(chunk)
            n -= len(chunk)
        return b"".join(chunks)

    return read
