"""Numerical checks of the bridge potentials, the drift identity and the
CDDB / least-squares equivalence for partially isometric operators."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import InvalidArgument, PreconditionError
from .linop import LinearOperator, dense, partial_isometry_check
from .samplers import cddb_update, mesb_solve
from .schedule import NoiseSchedule
from .tensor import norm2, seeded_rng


@dataclass(frozen=True)
class GridSpec:
    """Evaluation lattice and stencil spacings for the PDE residual checks.

    Residuals are evaluated on a fixed (x, t) lattice; each refinement level
    halves both finite-difference steps.
    """

    x_half_width: float = 0.25
    n_x: int = 11
    t_min: float = 0.1
    t_max: float = 0.9
    n_t: int = 17
    h_x: float = 0.02
    h_t: float = 0.004
    levels: int = 3


@dataclass
class PdeResidualReport:
    h_x: list[float]
    h_t: list[float]
    max_residual: list[float]
    order: float
    pairwise_orders: list[float] = field(default_factory=list)
    n_points: int = 0

    def within(self, target: float = 2.0, tol: float = 0.3) -> bool:
        return abs(self.order - target) <= tol

    def __str__(self):
        rows = [f"{'h_x':>10} {'h_t':>10} {'max|residual|':>14}"]
        for hx, ht, r in zip(self.h_x, self.h_t, self.max_residual):
            rows.append(f"{hx:10.3e} {ht:10.3e} {r:14.6e}")
        pair = ", ".join(f"{o:.3f}" for o in self.pairwise_orders)
        rows.append(f"observed order {self.order:.3f} (pairwise: {pair}) over {self.n_points} points")
        return "\n".join(rows)


def _log_gauss(x, centre, var):
    return -0.5 * (x - centre) ** 2 / var - 0.5 * np.log(2.0 * np.pi * var)


def _pde_residual(log_field, beta, sign, schedule, grid: GridSpec, centre) -> PdeResidualReport:
    if grid.levels < 3:
        raise InvalidArgument("order estimation needs at least three refinement levels")
    if not (0.0 < grid.t_min - grid.h_t and grid.t_max + grid.h_t < 1.0 and grid.t_min <= grid.t_max):
        raise InvalidArgument("PDE check time range (with stencil) must stay inside (0, 1)")
    xs = centre + np.linspace(-grid.x_half_width, grid.x_half_width, grid.n_x)
    ts = np.linspace(grid.t_min, grid.t_max, grid.n_t)
    # central differences in t lose an order where beta has a kink inside the stencil
    kinks = schedule.breakpoints()
    keep = np.array([not np.any(np.abs(kinks - t) < grid.h_t) for t in ts])
    ts = ts[keep]
    X, Tt = np.meshgrid(xs, ts, indexing="ij")
    B = np.asarray(beta(Tt))

    hxs, hts, errs = [], [], []
    for level in range(grid.levels):
        hx = grid.h_x / 2**level
        ht = grid.h_t / 2**level
        f0 = log_field(X, Tt)
        d_t = (log_field(X, Tt + ht) - log_field(X, Tt - ht)) / (2 * ht)
        fxp, fxm = log_field(X + hx, Tt), log_field(X - hx, Tt)
        d_x = (fxp - fxm) / (2 * hx)
        d_xx = (fxp - 2 * f0 + fxm) / hx**2
        res = d_t + sign * 0.5 * B * (d_xx + d_x**2)
        hxs.append(hx)
        hts.append(ht)
        errs.append(float(np.max(np.abs(res))))
    e = np.asarray(errs)
    with np.errstate(divide="ignore", invalid="ignore"):
        pairwise = list(np.log2(e[:-1] / e[1:]))
        if np.all(e > 0):
            order = float(np.polyfit(np.log2(hts), np.log2(e), 1)[0])
        else:
            order = math.nan
    return PdeResidualReport(hxs, hts, errs, order, [float(o) for o in pairwise], X.size)


def log_psi(x, t, x_corrupt, schedule: NoiseSchedule):
    """log N(x; x_corrupt, sigma_bar_t^2) for scalar x (elementwise)."""
    return _log_gauss(x, x_corrupt, np.asarray(schedule.sigma_bar2(np.asarray(t))))


def psi_pde_residual(x_corrupt_scalar: float, schedule: NoiseSchedule,
                     grid_spec: GridSpec = GridSpec()) -> PdeResidualReport:
    """Residual of d_t log Psi + beta/2 (d_xx log Psi + (d_x log Psi)^2).

    Psi(x, t) = N(x; x_corrupt, sigma_bar_t^2) solves d_t Psi = -beta/2 Lap Psi,
    which in the log domain is the expression above; it is evaluated with
    central differences and should vanish at second order.
    """
    return _pde_residual(
        lambda x, t: log_psi(x, t, x_corrupt_scalar, schedule),
        schedule.beta, +1.0, schedule, grid_spec, x_corrupt_scalar,
    )


def psi_hat_component_pde_residual(x0_scalar: float, schedule: NoiseSchedule,
                                   grid_spec: GridSpec = GridSpec(),
                                   log_c: float = 0.0) -> PdeResidualReport:
    """Same check for C * N(x; x0, sigma_t^2), which solves d_t = +beta/2 Lap."""

    def field(x, t):
        return log_c + _log_gauss(x, x0_scalar, np.asarray(schedule.sigma2(np.asarray(t))))

    return _pde_residual(field, schedule.beta, -1.0, schedule, grid_spec, x0_scalar)


def grad_log_psi(x, x_corrupt, sigma_bar2: float):
    return -(np.asarray(x) - x_corrupt) / sigma_bar2


def grad_log_psi_check(x_corrupt, t: float, schedule: NoiseSchedule, n_points: int = 16,
                       step: float = 1e-5, seed: int = 0) -> float:
    """Max relative error of the closed-form gradient of log Psi against
    central differences, over ``n_points`` random states around x_corrupt."""
    if not 0.0 < t < 1.0:
        raise InvalidArgument("t must lie in (0, 1)")
    xc = np.atleast_1d(np.asarray(x_corrupt, dtype=np.float64))
    sb2 = schedule.sigma_bar2(t)
    rng = seeded_rng(seed)

    def logp(x):
        return float(np.sum(_log_gauss(x, xc, sb2)))

    worst = 0.0
    for _ in range(n_points):
        x = xc + math.sqrt(sb2) * rng.standard_normal(xc.shape)
        g = grad_log_psi(x, xc, sb2)
        fd = np.empty_like(x)
        for i in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[i] = step
            fd[i] = (logp(x + e) - logp(x - e)) / (2 * step)
        scale = max(float(np.max(np.abs(g))), np.finfo(float).tiny)
        worst = max(worst, float(np.max(np.abs(fd - g))) / scale)
    return worst


class Theorem2Result(NamedTuple):
    cddb_result: np.ndarray
    dense_opt_result: np.ndarray
    discrepancy: float
    alpha0: float
    alpha: float


MAX_DENSE_UNKNOWNS = 256


def theorem2_check(A: LinearOperator, k: float, x0_hat, y, tolerance: float = 1e-10) -> Theorem2Result:
    """CDDB with alpha = alpha0 k / (alpha0 + k) against the dense minimiser of
    ||X - x0_hat||^2 + k ||A X - y||^2.

    Raises PreconditionError if A is not a scaled partial isometry or not of
    full row rank.
    """
    if A.size_in > MAX_DENSE_UNKNOWNS:
        raise InvalidArgument(f"dense check limited to {MAX_DENSE_UNKNOWNS} unknowns")
    if not k > 0:
        raise InvalidArgument("k must be positive")
    alpha0 = partial_isometry_check(A, tolerance)
    if alpha0 is None:
        raise PreconditionError(f"{A.name} is not a scaled partial isometry (A != a0 A A^T A)")
    Ad = A.to_dense()
    if np.linalg.matrix_rank(Ad) < Ad.shape[0]:
        raise PreconditionError(f"{A.name} is not of full row rank")
    alpha = alpha0 * k / (alpha0 + k)
    x0 = np.asarray(x0_hat, dtype=np.float64)
    got = cddb_update(x0, y, A, alpha)
    lhs = np.eye(A.size_in) + k * Ad.T @ Ad
    rhs = x0.ravel() + k * Ad.T @ np.ravel(y)
    want = np.linalg.solve(lhs, rhs).reshape(A.shape_in)
    disc = norm2(got - want) / max(norm2(want), np.finfo(float).tiny)
    return Theorem2Result(got, want, disc, alpha0, alpha)


class EquivalenceResult(NamedTuple):
    d: int
    literal: np.ndarray
    normal_cg: np.ndarray
    normal_dense: np.ndarray
    discrepancy: float


def mesb_equivalence_check(schedule: NoiseSchedule, d: int, seed: int = 0) -> EquivalenceResult:
    """Solves one random instance of the per-step MESB system two ways.

    The literal system is

        M X = (X_n - s2/S X_c) + s2 Sigma^-1 X0_hat + s2/sy2 A^T y,
        M   = (1 - s2/S) I + s2 Sigma^-1 + s2/sy2 A^T A,
        Sigma^-1 = (I + T^T T) / sx2,

    with s2 = sigma_n^2 and S = sigma_N^2.  It is compared with the weighted
    least-squares form solved by :func:`mesb_solve` (CG) and by a dense solve,
    using k_e = sb2 sx2 / (s2 S), k_y = sx2 / sy2 and
    X0_e = (S X_n - s2 X_c) / sb2.
    """
    rng = seeded_rng(seed)
    m, r = max(1, d // 2), max(1, d // 2)
    A = rng.standard_normal((m, d)) / math.sqrt(d)
    T = rng.standard_normal((r, d)) / math.sqrt(d)
    sx2 = rng.uniform(0.5, 2.0)
    sy2 = rng.uniform(0.05, 1.0)
    t = rng.uniform(0.05, 0.95)
    S = schedule.sigma2_total
    s2 = schedule.sigma2(t)
    sb2 = S - s2
    x_n, x_c, x0_hat = (rng.standard_normal(d) for _ in range(3))
    y = rng.standard_normal(m)

    G = T.T @ T
    Sinv = (np.eye(d) + G) / sx2
    M = (1.0 - s2 / S) * np.eye(d) + s2 * Sinv + (s2 / sy2) * A.T @ A
    b = (x_n - s2 / S * x_c) + s2 * Sinv @ x0_hat + (s2 / sy2) * A.T @ y
    literal = np.linalg.solve(M, b)

    k_e = sb2 * sx2 / (s2 * S)
    k_y = sx2 / sy2
    x0_e = (S * x_n - s2 * x_c) / sb2
    normal_cg = mesb_solve(x0_hat, y, dense(A, "A"), k_y, k_e, x0_e, dense(G, "TtT"),
                           p=4 * d, tol=1e-15)
    lhs = (1.0 + k_e) * np.eye(d) + G + k_y * A.T @ A
    rhs = (np.eye(d) + G) @ x0_hat + k_e * x0_e + k_y * A.T @ y
    normal_dense = np.linalg.solve(lhs, rhs)
    ref = norm2(literal)
    disc = max(norm2(normal_cg - literal), norm2(normal_dense - literal)) / ref
    return EquivalenceResult(d, literal, normal_cg, normal_dense, disc)


# --------------------------------------------------------------------------
# named suites used by the ``verify`` command

PDE_ORDER = 2.0
PDE_ORDER_TOL = 0.3
GRAD_TOL = 1e-6
THEOREM2_TOL = 1e-10
EQUIVALENCE_TOL = 1e-8


def _pde_suite(rep: PdeResidualReport):
    ok = rep.within(PDE_ORDER, PDE_ORDER_TOL)
    return ok, f"{rep}\n{'ok' if ok else 'FAIL'}: expected order {PDE_ORDER} +/- {PDE_ORDER_TOL}"


def check_psi_pde(schedule):
    return _pde_suite(psi_pde_residual(0.3, schedule))


def check_psi_hat_pde(schedule):
    return _pde_suite(psi_hat_component_pde_residual(-0.2, schedule, log_c=1.5))


def check_grad_log_psi(schedule):
    rng = seeded_rng(11)
    worst = 0.0
    for t in (0.1, 0.3, 0.5, 0.7, 0.9):
        worst = max(worst, grad_log_psi_check(rng.standard_normal(6), t, schedule))
    ok = worst <= GRAD_TOL
    return ok, f"max relative error {worst:.3e} (tolerance {GRAD_TOL:g})"


def theorem2_operators():
    """Scaled partial isometries of full row rank used by the CDDB least-squares suite."""
    from .linop import block_downsample, mask

    rng = seeded_rng(5)
    keep = np.sort(rng.permutation(64)[:40])
    return [mask((8, 8), keep), block_downsample((8, 8), 2).scaled(3.0)]


def check_theorem2(schedule=None):
    from .linop import gaussian_blur

    lines, ok = [], True
    rng = seeded_rng(3)
    for A in theorem2_operators():
        for k in (0.1, 1.0, 10.0):
            x0 = rng.standard_normal(A.shape_in)
            y = rng.standard_normal(A.shape_out)
            res = theorem2_check(A, k, x0, y)
            good = res.discrepancy <= THEOREM2_TOL
            ok &= good
            lines.append(f"{A.name:>24} k={k:<5g} alpha0={res.alpha0:.6g} "
                         f"discrepancy={res.discrepancy:.3e} {'ok' if good else 'FAIL'}")
    blur = gaussian_blur((8, 8), 1.0)
    try:
        theorem2_check(blur, 1.0, np.zeros(blur.shape_in), np.zeros(blur.shape_out))
        ok = False
        lines.append("gaussian blur accepted by the partial-isometry precondition: FAIL")
    except PreconditionError as exc:
        lines.append(f"gaussian blur rejected: {exc}")
    return ok, "\n".join(lines)


def check_equivalence(schedule):
    lines, ok = [], True
    for i, d in enumerate(np.linspace(16, 64, 10).astype(int)):
        res = mesb_equivalence_check(schedule, int(d), seed=i)
        good = res.discrepancy <= EQUIVALENCE_TOL
        ok &= good
        lines.append(f"d={res.d:3d} relative discrepancy {res.discrepancy:.3e} {'ok' if good else 'FAIL'}")
    return ok, "\n".join(lines)


CHECKS = {
    "psi_pde": check_psi_pde,
    "psi_hat_pde": check_psi_hat_pde,
    "grad_log_psi": check_grad_log_psi,
    "cddb_lsq": check_theorem2,
    "equivalence": check_equivalence,
}
