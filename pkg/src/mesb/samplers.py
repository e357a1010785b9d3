"""Bridge forward sampling and the reverse samplers.

Every reverse sampler shares one loop: starting from X_N = X_corrupt, each
step predicts X0_hat from the denoiser, replaces it with a kind-specific
X0_new, and draws X_{n-1} from the DDPM posterior between X0_new and X_n.

=========  ==============================================================
kind       X0_new
=========  ==============================================================
I2SB       X0_hat (no data consistency)
PROJECT    X0_hat projected onto {A X = y} with p CG steps on A A^T
CDDB       X0_hat + alpha A^T (y - A X0_hat)
CDDB_DEEP  X0_hat - alpha grad_{X_n} ||A X0_hat(X_n) - y||^2 (needs a VJP)
MESB       argmin ||X - X0_hat||^2 + k_y ||A X - y||^2
                  + k_e ||X - X0_e||^2 + ||T (X - X0_hat)||^2, p CG steps
=========  ==============================================================
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .denoise import Conditioning, Denoiser, bridge_sample, x0_hat as predict_x0_hat
from .errors import CapabilityError, InvalidArgument, MesbError
from .linalg import DEFAULT_RESIDUAL_TOL, CGResult, SpdSystem, cg_solve
from .linop import LinearOperator
from .schedule import NoiseSchedule, TimeGrid, quadratic_time_grid
from .tensor import SeededRng, Tensor, norm2, seeded_rng


class SamplerKind(str, Enum):
    I2SB = "i2sb"
    PROJECT = "project"
    CDDB = "cddb"
    CDDB_DEEP = "cddb_deep"
    MESB = "mesb"


@dataclass(frozen=True)
class SamplerConfig:
    """Reverse sampler settings.

    ``k_y`` is the data-fit weight (``math.inf`` selects the projection route),
    ``k_E`` scales the per-step extrapolation weight
    k_e = k_E * sigma_n^2 * sigma_bar_n^2 / sigma_N^4, and ``T_gram`` is the
    regulariser Gram operator T^T T (None means T = 0).  ``alpha`` is the CDDB
    / CDDB-deep step length; for CDDB-deep with measurement noise variance
    s^2 the step length implied by the bridge is sigma_t^2 / (2 s^2), see
    :func:`cddb_deep_step_length`.  Only the fields relevant to ``kind`` are
    read.
    """

    kind: SamplerKind
    N: int = 10
    p: int = 5
    k_y: float = math.inf
    k_E: float = 0.0
    T_gram: LinearOperator | None = None
    alpha: float = 1.0
    stochastic: bool = True
    seed: int = 0
    cg_tol: float = DEFAULT_RESIDUAL_TOL

    def __post_init__(self):
        object.__setattr__(self, "kind", SamplerKind(self.kind))
        if self.N < 1:
            raise InvalidArgument("N must be >= 1")
        if self.p < 1:
            raise InvalidArgument("p must be >= 1")
        if math.isnan(self.k_y) or self.k_y < 0 or not self.k_E >= 0 or math.isinf(self.k_E):
            raise InvalidArgument("k_y and k_E must be nonnegative (k_E finite)")
        if self.alpha < 0:
            raise InvalidArgument("alpha must be nonnegative")
        if self.kind is SamplerKind.MESB and math.isinf(self.k_y) and self.T_gram is not None:
            raise InvalidArgument("k_y = inf (hard projection) cannot be combined with a T regulariser")

    def replace(self, **changes) -> "SamplerConfig":
        return dataclasses.replace(self, **changes)

    @property
    def t_name(self) -> str:
        return "none" if self.T_gram is None else self.T_gram.name


def cddb_deep_step_length(sigma_t2: float, noise_var: float) -> float:
    """Step length sigma_t^2 / (2 s^2) under y ~ N(A X0_hat(X_t), s^2 I)."""
    return sigma_t2 / (2.0 * noise_var)


@dataclass(frozen=True)
class TaskInputs:
    x_corrupt: Tensor
    y: Tensor | None = None
    A: LinearOperator | None = None


@dataclass
class StepRecord:
    n: int
    t: float
    x0_hat: Tensor
    x0_new: Tensor
    cg_residual: float
    data_residual: float


@dataclass
class TrajectoryRecord:
    steps: list[StepRecord] = field(default_factory=list)
    x0: Tensor | None = None


# --------------------------------------------------------------------------
# forward / posterior kernels


def forward_sample(x0: Tensor, x1: Tensor, t: float, schedule: NoiseSchedule,
                   rng: SeededRng) -> Tensor:
    """X_t ~ N((sb2 X0 + s2 X1) / (s2 + sb2), s2 sb2 / (s2 + sb2) I)."""
    return bridge_sample(x0, x1, t, schedule, rng)


def ddpm_posterior_sample(x0_in: Tensor, x_n: Tensor, n: int, grid: TimeGrid,
                          schedule: NoiseSchedule, rng: SeededRng | None,
                          stochastic: bool = True) -> Tensor:
    if not 1 <= n <= grid.N:
        raise InvalidArgument(f"step index n={n} outside 1..{grid.N}")
    s2_prev = schedule.sigma2(grid[n - 1])
    if s2_prev == 0.0:
        return np.array(x0_in, dtype=np.float64, copy=True)
    a2 = schedule.alpha2(grid[n - 1], grid[n])
    total = a2 + s2_prev
    mean = (a2 * x0_in + s2_prev * x_n) / total
    if not stochastic:
        return mean
    return mean + math.sqrt(s2_prev * a2 / total) * rng.standard_normal(np.shape(x_n))


# --------------------------------------------------------------------------
# data-consistency updates


def _project(x0_hat, y, A: LinearOperator, p, tol) -> tuple[Tensor, CGResult]:
    rhs = y - A.apply(x0_hat)
    res = cg_solve(SpdSystem(lambda z: A.apply(A.adjoint(z)), rhs), np.zeros_like(rhs), p, tol)
    return x0_hat + A.adjoint(res.x), res


def project_update(x0_hat: Tensor, y: Tensor, A: LinearOperator, p: int,
                   tol: float = DEFAULT_RESIDUAL_TOL) -> Tensor:
    """x0_hat + A^T z with z the p-step CG solution of (A A^T) z = y - A x0_hat."""
    return _project(x0_hat, y, A, p, tol)[0]


def cddb_update(x0_hat: Tensor, y: Tensor, A: LinearOperator, alpha: float) -> Tensor:
    if alpha < 0:
        raise InvalidArgument("alpha must be nonnegative")
    return x0_hat + alpha * A.adjoint(y - A.apply(x0_hat))


def cddb_deep_update(x_n: Tensor, t_n: float, cond: Conditioning, denoiser: Denoiser,
                     y: Tensor, A: LinearOperator, alpha: float, schedule: NoiseSchedule,
                     x0_hat: Tensor | None = None) -> Tensor:
    """X0_hat - alpha * J^T (2 A^T (A X0_hat - y)), J = d X0_hat / d X_n."""
    if not denoiser.has_vjp:
        raise CapabilityError("CDDB-deep needs a denoiser with a vector-Jacobian product")
    if x0_hat is None:
        x0_hat = predict_x0_hat(denoiser, x_n, t_n, cond, schedule)
    grad = denoiser.vjp(x_n, t_n, cond, 2.0 * A.adjoint(A.apply(x0_hat) - y))
    return x0_hat - alpha * grad


def extrapolation_weight(k_E: float, schedule: NoiseSchedule, t_n: float) -> float:
    total = schedule.sigma2_total
    return k_E * schedule.sigma2(t_n) * schedule.sigma_bar2(t_n) / (total * total)


def extrapolation_target(x_n: Tensor, x_corrupt: Tensor, schedule: NoiseSchedule,
                         t_n: float) -> Tensor:
    """X0_e = (sigma_N^2 X_n - sigma_n^2 X_corrupt) / sigma_bar_n^2.

    At t_n = 1 the denominator vanishes and X_corrupt is returned instead,
    the limit of the formula along X_n -> X_corrupt.
    """
    sb2 = schedule.sigma_bar2(t_n)
    if sb2 == 0.0:
        return np.array(x_corrupt, dtype=np.float64, copy=True)
    return (schedule.sigma2_total * x_n - schedule.sigma2(t_n) * x_corrupt) / sb2


def _mesb_solve(x0_hat, y, A, k_y, k_e, x0_e, T_gram, p, tol) -> tuple[Tensor, CGResult | None]:
    if math.isinf(k_y):
        if T_gram is not None:
            raise InvalidArgument("k_y = inf cannot be combined with a T regulariser")
        start = x0_hat if k_e == 0.0 else (x0_hat + k_e * x0_e) / (1.0 + k_e)
        return _project(start, y, A, p, tol)

    def M(x):
        out = (1.0 + k_e) * x
        if T_gram is not None:
            out = out + T_gram.apply(x)
        if k_y != 0.0:
            out = out + k_y * A.gram(x)
        return out

    rhs = x0_hat if T_gram is None else x0_hat + T_gram.apply(x0_hat)
    if k_e != 0.0:
        rhs = rhs + k_e * x0_e
    if k_y != 0.0:
        rhs = rhs + k_y * A.adjoint(y)
    res = cg_solve(SpdSystem(M, rhs), x0_hat, p, tol)
    return res.x, res


def mesb_solve(x0_hat: Tensor, y: Tensor | None, A: LinearOperator | None, k_y: float,
               k_e: float = 0.0, x0_e: Tensor | None = None,
               T_gram: LinearOperator | None = None, p: int = 5,
               tol: float = DEFAULT_RESIDUAL_TOL) -> Tensor:
    """p CG steps from x0_hat on the normal equations

        [(1 + k_e) I + T^T T + k_y A^T A] X = (I + T^T T) x0_hat + k_e x0_e + k_y A^T y
    """
    return _mesb_solve(x0_hat, y, A, k_y, k_e, x0_e, T_gram, p, tol)[0]


def _mesb_step(x_n, x0_hat, x_corrupt, y, A, config: SamplerConfig,
               schedule: NoiseSchedule, t_n: float):
    k_e = extrapolation_weight(config.k_E, schedule, t_n) if config.k_E > 0 else 0.0
    x0_e = extrapolation_target(x_n, x_corrupt, schedule, t_n) if k_e > 0 else None
    return _mesb_solve(x0_hat, y, A, config.k_y, k_e, x0_e, config.T_gram, config.p,
                       config.cg_tol)


def mesb_update(x_n: Tensor, x0_hat: Tensor, x_corrupt: Tensor, y: Tensor,
                A: LinearOperator, config: SamplerConfig, schedule: NoiseSchedule,
                grid: TimeGrid, n: int) -> Tensor:
    return _mesb_step(x_n, x0_hat, x_corrupt, y, A, config, schedule, grid[n])[0]


# --------------------------------------------------------------------------
# reverse loop


def _require_measurement(task: TaskInputs, kind: SamplerKind):
    if task.A is None or task.y is None:
        raise InvalidArgument(f"{kind.value} sampler needs a measurement y and operator A")


def reverse_run(denoiser: Denoiser, task: TaskInputs, config: SamplerConfig,
                schedule: NoiseSchedule, grid: TimeGrid | None = None,
                keep_states: bool = True) -> tuple[Tensor, TrajectoryRecord]:
    """Runs the reverse chain for ``config.kind`` and returns (X_0, trajectory).

    Errors raised inside a step carry the step index as ``failed_step``.
    """
    kind = config.kind
    grid = grid if grid is not None else quadratic_time_grid(config.N)
    if grid.N != config.N:
        raise InvalidArgument(f"grid has {grid.N} steps but config.N = {config.N}")
    if kind is not SamplerKind.I2SB:
        _require_measurement(task, kind)
    if kind is SamplerKind.CDDB_DEEP and not denoiser.has_vjp:
        raise CapabilityError("CDDB-deep needs a denoiser with a vector-Jacobian product")

    rng = seeded_rng(config.seed)
    x_corrupt = np.asarray(task.x_corrupt, dtype=np.float64)
    y, A = task.y, task.A
    cond = Conditioning(x_corrupt, y)
    x = x_corrupt.copy()
    record = TrajectoryRecord()
    for n in range(grid.N, 0, -1):
        t = grid[n]
        try:
            x0 = predict_x0_hat(denoiser, x, t, cond, schedule)
            cg = None
            if kind is SamplerKind.I2SB:
                x0_new = x0
            elif kind is SamplerKind.PROJECT:
                x0_new, cg = _project(x0, y, A, config.p, config.cg_tol)
            elif kind is SamplerKind.CDDB:
                x0_new = cddb_update(x0, y, A, config.alpha)
            elif kind is SamplerKind.CDDB_DEEP:
                x0_new = cddb_deep_update(x, t, cond, denoiser, y, A, config.alpha, schedule, x0)
            else:
                x0_new, cg = _mesb_step(x, x0, x_corrupt, y, A, config, schedule, t)
            data_res = norm2(A.apply(x0_new) - y) if A is not None and y is not None else math.nan
            record.steps.append(StepRecord(
                n, t,
                x0 if keep_states else None,
                x0_new if keep_states else None,
                cg.final_residual if cg is not None else 0.0,
                data_res,
            ))
            x = ddpm_posterior_sample(x0_new, x, n, grid, schedule, rng, config.stochastic)
        except MesbError as exc:
            exc.failed_step = n
            raise
    record.x0 = x
    return x, record


def i2sb_reverse(denoiser: Denoiser, x_corrupt: Tensor, config: SamplerConfig,
                 schedule: NoiseSchedule, grid: TimeGrid | None = None):
    return reverse_run(denoiser, TaskInputs(x_corrupt), config.replace(kind=SamplerKind.I2SB),
                       schedule, grid)
