"""Matrix-free linear operators for measurement systems and regularisers."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .errors import InvalidArgument
from .tensor import Tensor, dot, norm2, seeded_rng

Shape = tuple[int, ...]


@dataclass(frozen=True)
class LinearOperator:
    shape_in: Shape
    shape_out: Shape
    _apply: Callable[[Tensor], Tensor]
    _adjoint: Callable[[Tensor], Tensor]
    name: str = "operator"

    def apply(self, x: Tensor) -> Tensor:
        if np.shape(x) != self.shape_in:
            raise InvalidArgument(f"{self.name}: expected input {self.shape_in}, got {np.shape(x)}")
        return self._apply(np.asarray(x, dtype=np.float64))

    def adjoint(self, y: Tensor) -> Tensor:
        if np.shape(y) != self.shape_out:
            raise InvalidArgument(f"{self.name}: expected adjoint input {self.shape_out}, got {np.shape(y)}")
        return self._adjoint(np.asarray(y, dtype=np.float64))

    def gram(self, x: Tensor) -> Tensor:
        """x -> A^T A x."""
        return self.adjoint(self.apply(x))

    @property
    def size_in(self) -> int:
        return math.prod(self.shape_in)

    @property
    def size_out(self) -> int:
        return math.prod(self.shape_out)

    @property
    def T(self) -> "LinearOperator":
        return LinearOperator(self.shape_out, self.shape_in, self._adjoint, self._apply,
                              f"{self.name}^T")

    def scaled(self, c: float) -> "LinearOperator":
        c = float(c)
        return LinearOperator(self.shape_in, self.shape_out,
                              lambda x: c * self._apply(x), lambda y: c * self._adjoint(y),
                              f"{c:g}*{self.name}")

    def to_dense(self) -> np.ndarray:
        """Dense (size_out, size_in) matrix, by probing with unit vectors."""
        cols = []
        for j in range(self.size_in):
            e = np.zeros(self.size_in)
            e[j] = 1.0
            cols.append(self.apply(e.reshape(self.shape_in)).ravel())
        return np.stack(cols, axis=1)


def _check_image_shape(image_shape) -> Shape:
    shape = tuple(int(s) for s in image_shape)
    if len(shape) != 2 or min(shape) < 1:
        raise InvalidArgument(f"expected a 2-D image shape, got {image_shape}")
    return shape


def identity(shape) -> LinearOperator:
    shape = tuple(int(s) for s in shape)
    return LinearOperator(shape, shape, lambda x: x.copy(), lambda y: y.copy(), "identity")


def dense(matrix: np.ndarray, name: str = "dense") -> LinearOperator:
    """Wraps an explicit (m, n) matrix acting on flat vectors."""
    M = np.asarray(matrix, dtype=np.float64)
    if M.ndim != 2:
        raise InvalidArgument("dense operator needs a 2-D matrix")
    return LinearOperator((M.shape[1],), (M.shape[0],), lambda x: M @ x, lambda y: M.T @ y, name)


def gaussian_blur(image_shape, kernel_sigma: float) -> LinearOperator:
    """Periodic convolution with the discrete Gaussian kernel of variance sigma^2.

    Per axis the kernel is exp(-s) I_n(s) with s = sigma^2 (I_n the modified
    Bessel function), i.e. transfer function exp(sigma^2 (cos(omega) - 1)).  It is
    nonnegative with unit mass, symmetric, and composes exactly: blurring with
    sigma_a then sigma_b equals one blur with sqrt(sigma_a^2 + sigma_b^2).
    """
    shape = _check_image_shape(image_shape)
    if not kernel_sigma > 0:
        raise InvalidArgument(f"kernel_sigma must be positive, got {kernel_sigma}")
    wr = 2.0 * np.pi * np.fft.fftfreq(shape[0])
    wc = 2.0 * np.pi * np.fft.rfftfreq(shape[1])
    H = np.exp(kernel_sigma**2 * ((np.cos(wr)[:, None] - 1.0) + (np.cos(wc)[None, :] - 1.0)))

    def blur(x):
        return np.fft.irfft2(np.fft.rfft2(x) * H, s=shape)

    return LinearOperator(shape, shape, blur, blur, f"blur(sigma={kernel_sigma:g})")


def block_downsample(image_shape, factor: int) -> LinearOperator:
    shape = _check_image_shape(image_shape)
    f = int(factor)
    if f < 1 or shape[0] % f or shape[1] % f:
        raise InvalidArgument(f"image dims {shape} not divisible by factor {factor}")
    small = (shape[0] // f, shape[1] // f)

    def down(x):
        return x.reshape(small[0], f, small[1], f).mean(axis=(1, 3))

    def spread(y):
        return np.repeat(np.repeat(y, f, axis=0), f, axis=1) / (f * f)

    return LinearOperator(shape, small, down, spread, f"downsample(x{f})")


def nearest_upsample(small_shape, factor: int) -> LinearOperator:
    small = _check_image_shape(small_shape)
    f = int(factor)
    if f < 1:
        raise InvalidArgument("factor must be >= 1")
    big = (small[0] * f, small[1] * f)

    def up(y):
        return np.repeat(np.repeat(y, f, axis=0), f, axis=1)

    def block_sum(x):
        return x.reshape(small[0], f, small[1], f).sum(axis=(1, 3))

    return LinearOperator(small, big, up, block_sum, f"upsample(x{f})")


def mask(image_shape, kept_index_set) -> LinearOperator:
    """Keeps the listed flat (row-major) pixel indices; output is a 1-D vector."""
    shape = tuple(int(s) for s in image_shape)
    size = math.prod(shape)
    idx = np.asarray(list(kept_index_set), dtype=np.int64)
    if idx.size == 0:
        raise InvalidArgument("mask needs at least one kept index")
    if idx.min() < 0 or idx.max() >= size:
        raise InvalidArgument("mask index out of range")
    if np.unique(idx).size != idx.size:
        raise InvalidArgument("mask indices must be unique")
    idx.setflags(write=False)

    def select(x):
        return x.ravel()[idx]

    def embed(y):
        out = np.zeros(size)
        out[idx] = y
        return out.reshape(shape)

    return LinearOperator(shape, (idx.size,), select, embed, f"mask({idx.size}/{size})")


def radon_matrix(image_size: int, n_views: int, n_detectors: int) -> sp.csr_matrix:
    """Sparse parallel-beam projector with bilinear interpolation along rays.

    Views are equally spaced in [0, pi); detectors are centred on the image and
    spaced so the fan of rays covers the image diagonal.  Each ray is sampled at
    half-pixel steps, and every sample spreads its step length onto its four
    neighbouring pixels with bilinear weights.
    """
    n = image_size
    centre = (n - 1) / 2.0
    half_diag = n / math.sqrt(2.0)
    det_spacing = 2.0 * half_diag / n_detectors
    offsets = (np.arange(n_detectors) - (n_detectors - 1) / 2.0) * det_spacing
    step = 0.5
    n_samples = int(math.ceil(half_diag / step))
    u = np.arange(-n_samples, n_samples + 1) * step

    rows, cols, vals = [], [], []
    for v in range(n_views):
        theta = math.pi * v / n_views
        d = np.array([math.sin(theta), math.cos(theta)])
        nrm = np.array([math.cos(theta), -math.sin(theta)])
        r = centre + offsets[:, None] * nrm[0] + u[None, :] * d[0]
        c = centre + offsets[:, None] * nrm[1] + u[None, :] * d[1]
        r0 = np.floor(r)
        c0 = np.floor(c)
        fr = r - r0
        fc = c - c0
        ray = np.broadcast_to((v * n_detectors + np.arange(n_detectors))[:, None], r.shape)
        for dr, dc, w in (
            (0, 0, (1 - fr) * (1 - fc)),
            (0, 1, (1 - fr) * fc),
            (1, 0, fr * (1 - fc)),
            (1, 1, fr * fc),
        ):
            rr = r0.astype(np.int64) + dr
            cc = c0.astype(np.int64) + dc
            ok = (rr >= 0) & (rr < n) & (cc >= 0) & (cc < n) & (w > 0)
            rows.append(ray[ok])
            cols.append(rr[ok] * n + cc[ok])
            vals.append(step * w[ok])
    return sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(n_views * n_detectors, n * n),
    ).tocsr()


def toy_radon(image_size: int, n_views: int, n_detectors: int | None = None) -> LinearOperator:
    if image_size < 8:
        raise InvalidArgument("toy_radon needs image_size >= 8")
    if n_views < 1:
        raise InvalidArgument("toy_radon needs n_views >= 1")
    if n_detectors is None:
        n_detectors = int(math.ceil(image_size * math.sqrt(2.0)))
    if n_detectors < 2:
        raise InvalidArgument("toy_radon needs n_detectors >= 2")
    R = radon_matrix(image_size, n_views, n_detectors)
    RT = R.T.tocsr()
    shape = (image_size, image_size)
    sino = (n_views, n_detectors)
    return LinearOperator(
        shape, sino,
        lambda x: (R @ x.ravel()).reshape(sino),
        lambda y: (RT @ y.ravel()).reshape(shape),
        f"radon({n_views} views)",
    )


def laplacian_T(image_shape, weight: float = 0.5) -> LinearOperator:
    """Gram operator G = T^T T = -weight * Laplacian (5-point, periodic)."""
    shape = _check_image_shape(image_shape)

    def neg_lap(x):
        lap = (np.roll(x, 1, 0) + np.roll(x, -1, 0) + np.roll(x, 1, 1) + np.roll(x, -1, 1)
               - 4.0 * x)
        return -weight * lap

    return LinearOperator(shape, shape, neg_lap, neg_lap, "laplacian")


def adjoint_mismatch(A: LinearOperator, n_pairs: int = 32, seed: int = 0) -> float:
    """Worst relative gap |<Ax, y> - <x, A^T y>| over random probe pairs."""
    rng = seeded_rng(seed)
    worst = 0.0
    for _ in range(n_pairs):
        x = rng.standard_normal(A.shape_in)
        y = rng.standard_normal(A.shape_out)
        Ax, ATy = A.apply(x), A.adjoint(y)
        lhs, rhs = dot(Ax, y), dot(x, ATy)
        scale = max(norm2(Ax) * norm2(y), norm2(x) * norm2(ATy), np.finfo(float).tiny)
        worst = max(worst, abs(lhs - rhs) / scale)
    return worst


def partial_isometry_check(A: LinearOperator, tolerance: float = 1e-10,
                           n_probes: int = 32, seed: int = 0) -> float | None:
    """Returns alpha0 with A == alpha0 * A A^T A on random probes, else None.

    alpha0 is the least-squares fit of Ax against A A^T A x pooled over the
    probes; every probe must then satisfy
    ||Ax - alpha0 A A^T A x|| <= tolerance * ||Ax||.
    """
    rng = seeded_rng(seed)
    pairs = []
    for _ in range(max(n_probes, 1)):
        x = rng.standard_normal(A.shape_in)
        Ax = A.apply(x)
        pairs.append((Ax, A.apply(A.adjoint(Ax))))
    num = sum(dot(u, w) for u, w in pairs)
    den = sum(dot(w, w) for _, w in pairs)
    if not den > 0 or not num > 0:
        return None
    alpha0 = num / den
    for u, w in pairs:
        if norm2(u - alpha0 * w) > tolerance * norm2(u):
            return None
    return alpha0
