"""Schrodinger-bridge samplers for linear inverse problems.

Submodules: ``tensor`` (arrays, seeded RNG), ``schedule`` (noise schedules,
time grids), ``linop`` (matrix-free operators), ``linalg`` (CG), ``denoise``
(denoiser interface, analytic/oracle/external denoisers), ``samplers``
(I2SB, Project, CDDB, CDDB-deep, MESB), ``theory`` (numerical checks),
``harness`` (tasks, metrics, experiments) and ``cli``.
"""

__version__ = "0.1.0"
