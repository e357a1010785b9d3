"""Conjugate gradients over matrix-free symmetric positive definite operators."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np

from .errors import InvalidArgument, OperatorContractError
from .tensor import Tensor, dot, norm2, seeded_rng

DEFAULT_RESIDUAL_TOL = 1e-10
_SYMMETRY_RTOL = 1e-8


@dataclass(frozen=True)
class SpdSystem:
    operator: Callable[[Tensor], Tensor]
    rhs: Tensor


class CGResult(NamedTuple):
    x: Tensor
    iters_used: int
    final_residual: float


def check_symmetry(operator, shape, seed: int = 0, rtol: float = _SYMMETRY_RTOL) -> bool:
    rng = seeded_rng(seed)
    u = rng.standard_normal(shape)
    v = rng.standard_normal(shape)
    Mu, Mv = operator(u), operator(v)
    a, b = dot(Mu, v), dot(u, Mv)
    scale = max(norm2(Mu) * norm2(v), norm2(u) * norm2(Mv), np.finfo(float).tiny)
    return abs(a - b) <= rtol * scale


def cg_solve(system: SpdSystem, x0: Tensor, max_iters: int,
             residual_tol: float = DEFAULT_RESIDUAL_TOL,
             verify_symmetry: bool = True, callback=None) -> CGResult:
    """Runs at most ``max_iters`` CG iterations from ``x0``.

    Stops early once ||b - M x|| <= residual_tol * ||b||.  ``final_residual`` is
    that relative residual for the returned iterate (absolute when b == 0).
    ``callback(k, x, r)`` is invoked after every iteration.

    Raises OperatorContractError if a probe finds M non-symmetric (iteration 0)
    or a search direction has non-positive curvature (the failing iteration).
    """
    if max_iters < 1:
        raise InvalidArgument("max_iters must be >= 1")
    M = system.operator
    b = np.asarray(system.rhs, dtype=np.float64)
    if np.shape(x0) != b.shape:
        raise InvalidArgument(f"x0 shape {np.shape(x0)} does not match rhs {b.shape}")
    if verify_symmetry and not check_symmetry(M, b.shape):
        raise OperatorContractError("operator is not symmetric (probe at iteration 0)", 0)

    x = np.array(x0, dtype=np.float64, copy=True)
    b_norm = norm2(b)
    scale = b_norm if b_norm > 0 else 1.0
    r = b - M(x)
    rr = dot(r, r)
    if np.sqrt(rr) <= residual_tol * b_norm:
        return CGResult(x, 0, np.sqrt(rr) / scale)
    d = r.copy()
    k = 0
    for k in range(1, max_iters + 1):
        Md = M(d)
        curvature = dot(d, Md)
        if not curvature > 0:
            raise OperatorContractError(
                f"non-positive curvature <d, Md> = {curvature:.3e} at iteration {k}", k)
        step = rr / curvature
        x += step * d
        r -= step * Md
        rr_new = dot(r, r)
        if callback is not None:
            callback(k, x, r)
        if np.sqrt(rr_new) <= residual_tol * b_norm:
            rr = rr_new
            break
        d = r + (rr_new / rr) * d
        rr = rr_new
    return CGResult(x, k, float(np.sqrt(rr)) / scale)
