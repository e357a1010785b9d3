"""Denoisers: the epsilon-prediction interface and in-process implementations.

A denoiser predicts eps_hat from (X_t, t, conditioning); the clean estimate is
X0_hat = X_t - sigma_t * eps_hat.  Implementations that can do better than
that round trip (e.g. closed forms) override :meth:`Denoiser.predict_x0`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Any, Sequence

import numpy as np

from .errors import CapabilityError, InvalidArgument
from .schedule import NoiseSchedule, make_symmetric_beta
from .tensor import SeededRng, Tensor, as_tensor


@dataclass(frozen=True)
class Conditioning:
    x_corrupt: Tensor
    measurement: Any = None


class Denoiser:
    has_vjp = False

    def predict_eps(self, x_t: Tensor, t: float, cond: Conditioning) -> Tensor:
        raise NotImplementedError

    def predict_x0(self, x_t: Tensor, t: float, cond: Conditioning, sigma: float) -> Tensor:
        eps = self.predict_eps(x_t, t, cond)
        if np.shape(eps) != np.shape(x_t):
            raise InvalidArgument(f"denoiser returned shape {np.shape(eps)}, expected {np.shape(x_t)}")
        return x_t - sigma * eps

    def vjp(self, x_t: Tensor, t: float, cond: Conditioning, v: Tensor) -> Tensor:
        """v -> J^T v for the Jacobian J of X_t -> X0_hat(X_t)."""
        raise CapabilityError(f"{type(self).__name__} does not provide a vector-Jacobian product")

    def close(self):
        pass


def _sigma(schedule: NoiseSchedule, t: float) -> float:
    if not 0.0 < t <= 1.0:
        raise InvalidArgument(f"denoiser queried at t={t}; t must lie in (0, 1]")
    s = math.sqrt(schedule.sigma2(t))
    if s == 0.0:
        raise InvalidArgument(f"sigma_t vanishes at t={t}")
    return s


def x0_hat(denoiser: Denoiser, x_t: Tensor, t: float, cond: Conditioning,
           schedule: NoiseSchedule) -> Tensor:
    """Clean-image estimate X_t - sigma_t * eps_hat."""
    sigma = _sigma(schedule, t)
    out = denoiser.predict_x0(x_t, t, cond, sigma)
    if np.shape(out) != np.shape(x_t):
        raise InvalidArgument(f"denoiser returned shape {np.shape(out)}, expected {np.shape(x_t)}")
    return out


class ZeroDenoiser(Denoiser):
    """Predicts eps_hat = 0, so X0_hat = X_t."""

    has_vjp = True

    def predict_eps(self, x_t, t, cond):
        return np.zeros_like(x_t)

    def predict_x0(self, x_t, t, cond, sigma):
        return np.array(x_t, dtype=np.float64, copy=True)

    def vjp(self, x_t, t, cond, v):
        return np.array(v, dtype=np.float64, copy=True)


class GaussianAnalyticDenoiser(Denoiser):
    """Exact posterior mean E[X0 | X_t, X1] under X0 ~ N(mu0, s0sq I).

    With X_t | X0, X1 ~ N(a X0 + b X1, v I) from the bridge marginal, the
    posterior mean is written in a form that stays finite at both ends of the
    bridge::

        mean = (sigma2 mu0 / s0sq + X_t - b X1) / (sigma2 / s0sq + sigma_bar2 / S)

    where S = sigma2 + sigma_bar2 and b = sigma2 / S.  X1 is taken from the
    conditioning's ``x_corrupt``.  The map X_t -> mean is a scalar multiple of
    the identity, so its VJP is exact.
    """

    has_vjp = True

    def __init__(self, mu0, s0sq: float, schedule: NoiseSchedule):
        if not s0sq > 0:
            raise InvalidArgument("s0sq must be positive")
        self.mu0 = as_tensor(mu0)
        self.s0sq = float(s0sq)
        self.schedule = schedule

    def _coeffs(self, t):
        s2 = self.schedule.sigma2(t)
        sb2 = self.schedule.sigma_bar2(t)
        total = s2 + sb2
        gain = 1.0 / (s2 / self.s0sq + sb2 / total)
        return s2, s2 / total, gain

    def predict_x0(self, x_t, t, cond, sigma=None):
        s2, b, gain = self._coeffs(t)
        return gain * (s2 * self.mu0 / self.s0sq + x_t - b * cond.x_corrupt)

    def predict_eps(self, x_t, t, cond):
        sigma = _sigma(self.schedule, t)
        return (x_t - self.predict_x0(x_t, t, cond)) / sigma

    def vjp(self, x_t, t, cond, v):
        return self._coeffs(t)[2] * np.asarray(v, dtype=np.float64)


class OracleDenoiser(Denoiser):
    """Error-free regressor: X0_hat is always ``x0_true``."""

    has_vjp = True

    def __init__(self, x0_true, schedule: NoiseSchedule | None = None):
        self.x0_true = as_tensor(x0_true)
        self.schedule = schedule if schedule is not None else make_symmetric_beta()

    def predict_eps(self, x_t, t, cond):
        return (x_t - self.x0_true) / _sigma(self.schedule, t)

    def predict_x0(self, x_t, t, cond, sigma=None):
        return self.x0_true.copy()

    def vjp(self, x_t, t, cond, v):
        return np.zeros_like(np.asarray(v, dtype=np.float64))


def make_gaussian_analytic_denoiser(mu0, s0sq: float, schedule: NoiseSchedule) -> Denoiser:
    return GaussianAnalyticDenoiser(mu0, s0sq, schedule)


def make_oracle_denoiser(x0_true, schedule: NoiseSchedule | None = None) -> Denoiser:
    return OracleDenoiser(x0_true, schedule)


def make_external_denoiser(command_line, timeout_ms: int = 10_000) -> Denoiser:
    from .external import ExternalDenoiser

    return ExternalDenoiser(command_line, timeout_ms)


def bridge_sample(x0: Tensor, x1: Tensor, t: float, schedule: NoiseSchedule,
                  rng: SeededRng) -> Tensor:
    """One draw of X_t from the bridge marginal q(X_t | X0, X1)."""
    if not 0.0 < t < 1.0:
        raise InvalidArgument(f"bridge sampling needs 0 < t < 1, got {t}")
    s2 = schedule.sigma2(t)
    sb2 = schedule.sigma_bar2(t)
    total = s2 + sb2
    mean = (sb2 * x0 + s2 * x1) / total
    return mean + math.sqrt(s2 * sb2 / total) * rng.standard_normal(np.shape(x0))


def bridge_matching_loss(denoiser: Denoiser, pairs: Sequence[tuple[Tensor, Tensor]],
                         schedule: NoiseSchedule, n_draws: int, rng: SeededRng,
                         times: Sequence[float] | None = None) -> float:
    """Monte-Carlo estimate of E || eps_hat(X_t, t) - (X_t - X0) / sigma_t ||.

    Each draw picks a pair and a time uniformly; times default to the schedule's
    base nodes with t = 0 excluded.  At t = 1 the bridge is pinned to X1.
    """
    if not pairs:
        raise InvalidArgument("bridge_matching_loss needs at least one (X0, X1) pair")
    if n_draws < 1:
        raise InvalidArgument("n_draws must be >= 1")
    grid = np.asarray(times if times is not None else
                      np.linspace(0.0, 1.0, schedule.n_base + 1)[1:], dtype=np.float64)
    total = 0.0
    for _ in range(n_draws):
        x0, x1 = pairs[int(rng.integers(len(pairs)))]
        t = float(grid[int(rng.integers(grid.size))])
        x_t = np.array(x1, dtype=np.float64) if t == 1.0 else bridge_sample(x0, x1, t, schedule, rng)
        sigma = _sigma(schedule, t)
        eps = denoiser.predict_eps(x_t, t, Conditioning(as_tensor(x1)))
        total += float(np.linalg.norm(np.ravel(eps - (x_t - x0) / sigma)))
    return total / n_draws
