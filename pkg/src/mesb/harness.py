"""Synthetic tasks, image metrics, experiment tables and parameter sweeps."""

from __future__ import annotations

import csv
import io
import logging
import math
import time
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy import ndimage

from . import linop
from .denoise import Denoiser, make_gaussian_analytic_denoiser, make_oracle_denoiser
from .errors import InvalidArgument, MesbError
from .linalg import SpdSystem, cg_solve
from .samplers import SamplerConfig, TaskInputs, reverse_run
from .schedule import (DEFAULT_BETA_MAX, DEFAULT_BETA_MIN, NoiseSchedule, make_symmetric_beta,
                       quadratic_time_grid)
from .tensor import SeededRng, Tensor, derive_seed, norm2, seeded_rng

log = logging.getLogger(__name__)

CSV_COLUMNS = ("task", "sampler", "N", "p", "k_y", "k_E", "T", "phantom_index", "seed",
               "psnr_db", "ssim", "data_residual", "wall_ms")


class TaskKind(str, Enum):
    DEBLUR_GAUSS = "deblur_gauss"
    SR_BLOCK = "sr_block"
    INPAINT = "inpaint"
    CT_TOY = "ct_toy"


@dataclass(frozen=True)
class TaskSpec:
    """A synthetic inverse problem.

    ``noise_percent`` is relative to the peak of the clean measurement:
    sigma_noise = noise_percent / 100 * max |A x_true|.
    """

    kind: TaskKind
    size: int = 32
    noise_percent: float = 0.0
    blur_sigma: float = 1.5
    factor: int = 4
    keep_fraction: float = 0.5
    n_views: int = 16
    n_detectors: int | None = None
    phantom_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "kind", TaskKind(self.kind))
        if self.size < 1:
            raise InvalidArgument("task size must be positive")
        if self.noise_percent < 0:
            raise InvalidArgument("noise_percent must be nonnegative")
        if not 0 < self.keep_fraction <= 1:
            raise InvalidArgument("keep_fraction must lie in (0, 1]")


@dataclass
class Task:
    spec: TaskSpec
    x_true: Tensor
    y: Tensor
    x_corrupt: Tensor
    A: linop.LinearOperator
    noise_sigma: float

    @property
    def inputs(self) -> TaskInputs:
        return TaskInputs(self.x_corrupt, self.y, self.A)


def make_phantom(size: int, rng: SeededRng) -> Tensor:
    """Piecewise-constant ellipses plus a few smooth Gaussian blobs, in [0, 1]."""
    r, c = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    img = np.zeros((size, size))
    for _ in range(int(rng.integers(3, 6))):
        cr, cc = rng.uniform(0.25, 0.75, 2)
        ar, ac = rng.uniform(0.1, 0.35, 2)
        th = rng.uniform(0, np.pi)
        u = (r - cr) * np.cos(th) + (c - cc) * np.sin(th)
        v = -(r - cr) * np.sin(th) + (c - cc) * np.cos(th)
        img[(u / ar) ** 2 + (v / ac) ** 2 <= 1.0] = rng.uniform(0.2, 0.9)
    for _ in range(int(rng.integers(1, 4))):
        cr, cc = rng.uniform(0.2, 0.8, 2)
        w = rng.uniform(0.05, 0.15)
        img += rng.uniform(0.1, 0.3) * np.exp(-((r - cr) ** 2 + (c - cc) ** 2) / (2 * w * w))
    return np.clip(img, 0.0, 1.0)


def build_operator(spec: TaskSpec, rng: SeededRng) -> linop.LinearOperator:
    shape = (spec.size, spec.size)
    if spec.kind is TaskKind.DEBLUR_GAUSS:
        return linop.gaussian_blur(shape, spec.blur_sigma)
    if spec.kind is TaskKind.SR_BLOCK:
        return linop.block_downsample(shape, spec.factor)
    if spec.kind is TaskKind.INPAINT:
        n = spec.size * spec.size
        keep = max(1, int(round(spec.keep_fraction * n)))
        return linop.mask(shape, np.sort(rng.permutation(n)[:keep]))
    return linop.toy_radon(spec.size, spec.n_views, spec.n_detectors)


def least_squares_cg(A: linop.LinearOperator, y: Tensor, iters: int = 10) -> Tensor:
    """``iters`` CG steps on A^T A x = A^T y from zero."""
    rhs = A.adjoint(y)
    return cg_solve(SpdSystem(A.gram, rhs), np.zeros_like(rhs), iters, residual_tol=0.0).x


def make_task(spec: TaskSpec, rng: SeededRng) -> Task:
    """Draws (x_true, y, x_corrupt, A); the phantom, mask and noise all come from rng."""
    x_true = make_phantom(spec.size, rng)
    A = build_operator(spec, rng)
    clean = A.apply(x_true)
    sigma = spec.noise_percent / 100.0 * float(np.max(np.abs(clean)))
    y = clean + sigma * rng.standard_normal(clean.shape) if sigma > 0 else clean
    if spec.kind is TaskKind.DEBLUR_GAUSS:
        x_corrupt = y.copy()
    elif spec.kind is TaskKind.SR_BLOCK:
        x_corrupt = linop.nearest_upsample(A.shape_out, spec.factor).apply(y)
    elif spec.kind is TaskKind.INPAINT:
        x_corrupt = A.adjoint(y)
    else:
        x_corrupt = least_squares_cg(A, y, 10)
    return Task(spec, x_true, y, x_corrupt, A, sigma)


# --------------------------------------------------------------------------
# metrics


def psnr(x: Tensor, ref: Tensor, data_range: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images give +inf."""
    if np.shape(x) != np.shape(ref):
        raise InvalidArgument("psnr: shape mismatch")
    if not data_range > 0:
        raise InvalidArgument("data_range must be positive")
    mse = float(np.mean((np.asarray(x, dtype=np.float64) - ref) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(data_range**2 / mse)


SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1, SSIM_K2 = 0.01, 0.03


def ssim_window() -> np.ndarray:
    half = SSIM_WINDOW // 2
    w = np.exp(-np.arange(-half, half + 1) ** 2 / (2 * SSIM_SIGMA**2))
    return w / w.sum()


def ssim(x: Tensor, ref: Tensor, data_range: float = 1.0) -> float:
    """Mean SSIM with an 11x11 Gaussian window (sigma 1.5), K1 = 0.01, K2 = 0.03.

    Local statistics use symmetric (edge-mirrored) padding, so every pixel
    contributes to the mean and small images are supported.
    """
    if np.shape(x) != np.shape(ref):
        raise InvalidArgument("ssim: shape mismatch")
    if np.ndim(x) != 2:
        raise InvalidArgument("ssim expects 2-D images")
    if not data_range > 0:
        raise InvalidArgument("data_range must be positive")
    w = ssim_window()

    def filt(img):
        out = ndimage.correlate1d(img, w, axis=0, mode="reflect")
        return ndimage.correlate1d(out, w, axis=1, mode="reflect")

    a = np.asarray(x, dtype=np.float64)
    b = np.asarray(ref, dtype=np.float64)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = filt(a), filt(b)
    var_a = filt(a * a) - mu_a**2
    var_b = filt(b * b) - mu_b**2
    cov = filt(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


def relative_data_residual(A: linop.LinearOperator, x: Tensor, y: Tensor) -> float:
    return norm2(A.apply(x) - y) / max(norm2(y), np.finfo(float).tiny)


# --------------------------------------------------------------------------
# experiments

DenoiserFactory = Callable[[Task, NoiseSchedule], Denoiser]


def analytic_factory(mu0: float = 0.5, s0sq: float = 0.1) -> DenoiserFactory:
    """Gaussian posterior-mean denoiser with a constant prior mean image."""
    return lambda task, schedule: make_gaussian_analytic_denoiser(
        np.full(task.x_true.shape, mu0), s0sq, schedule)


TRAINING_SEED_TAG = 7919


def fit_gaussian_prior(size: int, n_train: int = 200, seed: int = 0) -> tuple[Tensor, float]:
    """Mean image and pooled per-pixel variance of ``n_train`` phantoms.

    Training phantoms are drawn from a seed stream disjoint from the
    evaluation phantoms of any experiment.
    """
    if n_train < 2:
        raise InvalidArgument("n_train must be >= 2")
    xs = np.stack([make_phantom(size, seeded_rng(derive_seed(TRAINING_SEED_TAG, seed, i)))
                   for i in range(n_train)])
    mu0 = xs.mean(axis=0)
    return mu0, float(np.mean((xs - mu0) ** 2))


def fitted_prior_factory(size: int, n_train: int = 200, seed: int = 0) -> DenoiserFactory:
    """Analytic denoiser whose Gaussian prior is fitted to training phantoms."""
    mu0, s0sq = fit_gaussian_prior(size, n_train, seed)
    return lambda task, schedule: make_gaussian_analytic_denoiser(mu0, s0sq, schedule)


def oracle_factory() -> DenoiserFactory:
    return lambda task, schedule: make_oracle_denoiser(task.x_true, schedule)


@dataclass(frozen=True)
class Experiment:
    task: TaskSpec
    samplers: Sequence[SamplerConfig]
    n_phantoms: int = 1
    seed: int = 0
    beta_min: float = DEFAULT_BETA_MIN
    beta_max: float = DEFAULT_BETA_MAX
    dense_near: str = "zero"
    record_wall_time: bool = False

    def __post_init__(self):
        if self.n_phantoms < 1:
            raise InvalidArgument("n_phantoms must be >= 1")
        if not self.samplers:
            raise InvalidArgument("an experiment needs at least one sampler configuration")

    def schedule(self) -> NoiseSchedule:
        return make_symmetric_beta(self.beta_min, self.beta_max)

    def phantom_task(self, index: int) -> Task:
        return make_task(self.task, seeded_rng(derive_seed(self.task.phantom_seed, index)))

    def run_seed(self, index: int) -> int:
        return derive_seed(self.seed, index, 1)


@dataclass
class MetricRow:
    task: str
    sampler: str
    N: int
    p: int
    k_y: float
    k_E: float
    T: str
    phantom_index: int | str
    seed: int
    psnr_db: float
    ssim: float
    data_residual: float
    wall_ms: float | None = None
    error: str | None = None

    def key(self):
        return (self.sampler, self.N, self.p, self.k_y, self.k_E, self.T)


@dataclass
class MetricTable:
    rows: list[MetricRow] = field(default_factory=list)

    @property
    def failures(self) -> list[MetricRow]:
        return [r for r in self.rows if r.error is not None]

    def summary(self) -> list[MetricRow]:
        """Mean metrics per sampler cell, in first-seen order."""
        groups: dict = {}
        for r in self.rows:
            groups.setdefault(r.key(), []).append(r)
        out = []
        for rows in groups.values():
            r0 = rows[0]
            walls = [r.wall_ms for r in rows if r.wall_ms is not None]
            out.append(MetricRow(
                r0.task, r0.sampler, r0.N, r0.p, r0.k_y, r0.k_E, r0.T, "mean", len(rows),
                _mean(r.psnr_db for r in rows), _mean(r.ssim for r in rows),
                _mean(r.data_residual for r in rows),
                _mean(walls) if walls else None,
            ))
        return out

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def _mean(values: Iterable[float]) -> float:
    vals = list(values)
    if any(math.isnan(v) for v in vals):
        return math.nan
    return float(np.mean(vals)) if vals else math.nan


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def rows_to_csv(rows: Iterable[MetricRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(getattr(r, c)) for c in CSV_COLUMNS])
    return buf.getvalue()


def run_cell(task: Task, config: SamplerConfig, denoiser: Denoiser, schedule: NoiseSchedule,
             dense_near: str = "zero", keep_states: bool = False):
    """One reverse run; returns (x0, trajectory, wall milliseconds)."""
    start = time.perf_counter()
    x0, traj = reverse_run(denoiser, task.inputs, config, schedule,
                           quadratic_time_grid(config.N, dense_near), keep_states=keep_states)
    return x0, traj, 1000.0 * (time.perf_counter() - start)


def run_experiment(experiment: Experiment, denoiser_factory: DenoiserFactory,
                   on_result: Callable | None = None, keep_states: bool = False) -> MetricTable:
    """Runs every (sampler config, phantom) cell.

    Each cell is seeded from (experiment seed, phantom index), so rows do not
    depend on execution order.  Sampler failures are recorded on the row
    (metrics NaN) instead of aborting the table.  ``on_result(index, task,
    config, x0, trajectory)`` is called after each successful cell.
    """
    schedule = experiment.schedule()
    table = MetricTable()
    for index in range(experiment.n_phantoms):
        task = experiment.phantom_task(index)
        seed = experiment.run_seed(index)
        denoiser = denoiser_factory(task, schedule)
        try:
            for config in experiment.samplers:
                cfg = config.replace(seed=seed)
                row = MetricRow(task.spec.kind.value, cfg.kind.value, cfg.N, cfg.p, cfg.k_y, cfg.k_E,
                                cfg.t_name, index, seed, math.nan, math.nan, math.nan)
                try:
                    x0, traj, wall = run_cell(task, cfg, denoiser, schedule, experiment.dense_near,
                                              keep_states)
                except MesbError as exc:
                    log.warning("cell %s N=%d phantom %d failed: %s", cfg.kind.value, cfg.N, index, exc)
                    row.error = f"{type(exc).__name__}: {exc}"
                    table.rows.append(row)
                    continue
                row.psnr_db = psnr(x0, task.x_true)
                row.ssim = ssim(x0, task.x_true)
                row.data_residual = relative_data_residual(task.A, x0, task.y)
                row.wall_ms = wall if experiment.record_wall_time else None
                table.rows.append(row)
                if on_result is not None:
                    on_result(index, task, cfg, x0, traj)
        finally:
            denoiser.close()
    return table


SWEEP_PARAMETERS = ("k_y", "k_E")


def sweep(experiment: Experiment, parameter: str, values: Sequence[float],
          denoiser_factory: DenoiserFactory) -> MetricTable:
    """One mean-metric row per (value, sampler config), everything else fixed."""
    if parameter not in SWEEP_PARAMETERS:
        raise InvalidArgument(f"sweep parameter must be one of {SWEEP_PARAMETERS}, got {parameter!r}")
    if not values:
        raise InvalidArgument("sweep needs at least one value")
    if any(not v >= 0 for v in values):
        raise InvalidArgument("sweep values must be nonnegative")
    out = MetricTable()
    for v in values:
        configs = [c.replace(**{parameter: float(v)}) for c in experiment.samplers]
        exp = Experiment(experiment.task, configs, experiment.n_phantoms, experiment.seed,
                         experiment.beta_min, experiment.beta_max, experiment.dense_near,
                         experiment.record_wall_time)
        for row in run_experiment(exp, denoiser_factory).summary():
            row.seed = experiment.seed
            out.rows.append(row)
    return out
