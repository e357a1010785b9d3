"""Dense float64 tensors, seeded random streams and basic vector algebra.

Tensors are plain ``numpy.ndarray`` objects of dtype float64 in C (row-major)
order.  Random streams are ``numpy.random.Generator`` instances backed by the
PCG64 bit generator, seeded through ``SeedSequence``; both the bit stream and
the ziggurat normal sampler are platform independent, so a given seed
reproduces the same tensors everywhere.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgument

Tensor = np.ndarray
SeededRng = np.random.Generator


def seeded_rng(seed: int) -> SeededRng:
    if seed < 0 or seed >= 2**64:
        raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed))))


def derive_seed(*keys: int) -> int:
    """Deterministically mixes integer keys into a fresh 64-bit seed."""
    state = np.random.SeedSequence([int(k) for k in keys]).generate_state(1, np.uint64)
    return int(state[0])


def as_tensor(x) -> Tensor:
    return np.ascontiguousarray(x, dtype=np.float64)


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0 or any(s < 1 for s in shape):
        raise InvalidArgument(f"shape must be non-empty with all dims >= 1, got {shape}")
    return shape


def gaussian(shape, rng: SeededRng) -> Tensor:
    """I.i.d. standard normal tensor drawn from ``rng``."""
    return rng.standard_normal(_check_shape(shape))


def _same_shape(x: Tensor, y: Tensor):
    if np.shape(x) != np.shape(y):
        raise InvalidArgument(f"shape mismatch: {np.shape(x)} vs {np.shape(y)}")


def axpby(a: float, x: Tensor, b: float, y: Tensor) -> Tensor:
    _same_shape(x, y)
    return a * x + b * y


def dot(x: Tensor, y: Tensor) -> float:
    _same_shape(x, y)
    return float(np.dot(np.ravel(x), np.ravel(y)))


def norm2(x: Tensor) -> float:
    return float(np.sqrt(dot(x, x)))


def require_finite(x: Tensor, what: str = "tensor") -> Tensor:
    if not np.all(np.isfinite(x)):
        raise InvalidArgument(f"{what} contains non-finite values")
    return x
