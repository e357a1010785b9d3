"""Noise schedules and discrete generative time grids.

A schedule tabulates the diffusion rate beta on a uniform base grid with
``n_base`` intervals (``n_base + 1`` nodes, so t = 0.5 is a node whenever
``n_base`` is even).  Between nodes beta is the linear interpolant of the
table and the accumulated variances are its exact integrals, which agree with
trapezoid quadrature at the nodes and keep d(sigma2)/dt == beta(t) everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .errors import InvalidArgument

DEFAULT_N_BASE = 1000
DEFAULT_BETA_MIN = 1e-4
DEFAULT_BETA_MAX = 0.15


@dataclass(frozen=True)
class NoiseSchedule:
    beta_table: np.ndarray
    cumulative: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        beta = np.asarray(self.beta_table, dtype=np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise InvalidArgument("beta_table needs at least two nodes")
        if not np.all(np.isfinite(beta)) or np.any(beta < 0):
            raise InvalidArgument("beta must be finite and nonnegative")
        beta.setflags(write=False)
        h = 1.0 / (beta.size - 1)
        cum = np.concatenate([[0.0], np.cumsum(0.5 * h * (beta[1:] + beta[:-1]))])
        cum.setflags(write=False)
        object.__setattr__(self, "beta_table", beta)
        object.__setattr__(self, "cumulative", cum)

    @classmethod
    def from_function(cls, beta_fn: Callable, n_base: int = DEFAULT_N_BASE):
        if n_base < 1:
            raise InvalidArgument("n_base must be >= 1")
        t = np.linspace(0.0, 1.0, n_base + 1)
        return cls(np.asarray(beta_fn(t), dtype=np.float64) * np.ones_like(t))

    @property
    def n_base(self) -> int:
        return self.beta_table.size - 1

    @property
    def h(self) -> float:
        return 1.0 / self.n_base

    def _locate(self, t):
        t = np.asarray(t, dtype=np.float64)
        if np.any(~np.isfinite(t)) or np.any(t < 0.0) or np.any(t > 1.0):
            raise InvalidArgument(f"time must lie in [0, 1], got {t}")
        i = np.minimum((t * self.n_base).astype(np.int64), self.n_base - 1)
        return t, i, t - i * self.h

    def beta(self, t):
        t, i, s = self._locate(t)
        b = self.beta_table
        out = b[i] + (b[i + 1] - b[i]) * (s / self.h)
        return float(out) if out.ndim == 0 else out

    def sigma2(self, t):
        t, i, s = self._locate(t)
        b = self.beta_table
        slope = (b[i + 1] - b[i]) / self.h
        out = self.cumulative[i] + s * b[i] + 0.5 * s * s * slope
        out = np.where(t == 1.0, self.cumulative[-1], out)
        return float(out) if out.ndim == 0 else out

    def sigma_bar2(self, t):
        out = np.maximum(self.sigma2_total - np.asarray(self.sigma2(t)), 0.0)
        return float(out) if out.ndim == 0 else out

    def alpha2(self, t_a, t_b) -> float:
        if not t_a < t_b:
            raise InvalidArgument(f"alpha2 needs t_a < t_b, got {t_a}, {t_b}")
        return self.sigma2(t_b) - self.sigma2(t_a)

    @property
    def sigma2_total(self) -> float:
        return float(self.cumulative[-1])

    def breakpoints(self, rtol: float = 1e-9) -> np.ndarray:
        """Interior nodes where the piecewise-linear beta changes slope."""
        b = self.beta_table
        scale = max(float(np.max(np.abs(b))), np.finfo(float).tiny)
        kink = np.abs(np.diff(b, 2)) > rtol * scale
        return (np.nonzero(kink)[0] + 1) * self.h


def make_symmetric_beta(
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
    n_base: int = DEFAULT_N_BASE,
) -> NoiseSchedule:
    """Triangular beta: beta_min at both ends, beta_max at t = 0.5."""
    if not (beta_min > 0 and beta_max > 0):
        raise InvalidArgument("beta_min and beta_max must be positive")
    if beta_min > beta_max:
        raise InvalidArgument("beta_min must not exceed beta_max")
    return NoiseSchedule.from_function(
        lambda t: beta_min + (beta_max - beta_min) * (1.0 - np.abs(2.0 * t - 1.0)),
        n_base,
    )


@dataclass(frozen=True)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=np.float64)
        if t.ndim != 1 or t.size < 2:
            raise InvalidArgument("a time grid needs at least two points")
        if t[0] != 0.0 or t[-1] != 1.0:
            raise InvalidArgument("time grid must start at 0 and end at 1")
        if np.any(np.diff(t) <= 0):
            raise InvalidArgument("time grid must be strictly increasing")
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @property
    def N(self) -> int:
        return self.times.size - 1

    def __getitem__(self, n: int) -> float:
        return float(self.times[n])


def quadratic_time_grid(N: int, dense_near: str = "zero") -> TimeGrid:
    """t_n = (n/N)^2, densest near t = 0 (or mirrored with ``dense_near="one"``)."""
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    n = np.arange(N + 1, dtype=np.float64)
    if dense_near == "zero":
        t = (n / N) ** 2
    elif dense_near == "one":
        t = 1.0 - ((N - n) / N) ** 2
    else:
        raise InvalidArgument(f"dense_near must be 'zero' or 'one', got {dense_near!r}")
    t[0], t[-1] = 0.0, 1.0
    return TimeGrid(t)


def uniform_time_grid(N: int) -> TimeGrid:
    if N < 1:
        raise InvalidArgument("N must be >= 1")
    return TimeGrid(np.linspace(0.0, 1.0, N + 1))
