"""Command-line entry point.

    mesb run CONFIG [--output DIR]
    mesb sweep CONFIG --param {k_y,k_E} --values 1,4,16,inf [--output DIR]
    mesb verify --check NAME
    mesb denoiser-check --command "python -m mesb.server --mode zero"

Exit codes: 0 success, 1 configuration or usage error, 2 runtime failure
(sampler or denoiser), 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import load_run_config
from .denoise import Conditioning, make_external_denoiser
from .errors import ConfigError, MesbError
from .harness import SWEEP_PARAMETERS, rows_to_csv, run_experiment, sweep
from .images import write_f32, write_pgm
from .schedule import make_symmetric_beta
from .theory import CHECKS

log = logging.getLogger("mesb")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_IO = 0, 1, 2, 3
NOISE_CONVENTION = "sigma_noise = noise_percent / 100 * max|A x_true|"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _write_text(path: Path, text: str):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _output_dir(args, cfg) -> Path:
    out = Path(args.output if args.output else cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_image(stem: Path, image):
    write_pgm(stem.with_suffix(".pgm"), image)
    write_f32(stem.with_suffix(".f32"), image)


def _run_info(cfg, command: str) -> str:
    exp = cfg.experiment
    info = {
        "command": command,
        "task": {k: (v.value if hasattr(v, "value") else v) for k, v in vars(exp.task).items()},
        "n_phantoms": exp.n_phantoms,
        "seed": exp.seed,
        "noise_convention": NOISE_CONVENTION,
        "schedule": {"beta_min": exp.beta_min, "beta_max": exp.beta_max, "dense_near": exp.dense_near},
        "denoiser": {k: v for k, v in vars(cfg.denoiser).items() if v is not None},
        "version": __version__,
    }
    return json.dumps(info, indent=2, sort_keys=True, default=str) + "\n"


def _trajectory_csv(traj) -> str:
    lines = ["n,t,cg_residual,data_residual"]
    for s in traj.steps:
        lines.append(f"{s.n},{s.t!r},{s.cg_residual!r},{s.data_residual!r}")
    return "\n".join(lines) + "\n"


def cmd_run(args) -> int:
    cfg = load_run_config(args.config)
    out = _output_dir(args, cfg)
    emit = cfg.output.emit_trajectory
    written = set()

    def on_result(index, task, config, x0, traj):
        pdir = out / f"phantom_{index:03d}"
        if index not in written:
            pdir.mkdir(exist_ok=True)
            _save_image(pdir / "x_true", task.x_true)
            _save_image(pdir / "x_corrupt", task.x_corrupt)
            written.add(index)
        label = f"{config.kind.value}_N{config.N}"
        _save_image(pdir / f"x0_{label}", x0)
        if emit:
            _write_text(pdir / f"trajectory_{label}.csv", _trajectory_csv(traj))
            for step in traj.steps:
                write_f32(pdir / f"x0_new_{label}_step{step.n:03d}.f32", step.x0_new)

    table = run_experiment(cfg.experiment, cfg.denoiser.factory(cfg.experiment.task),
                           on_result=on_result, keep_states=emit)
    _write_text(out / "metrics.csv", table.to_csv())
    _write_text(out / "summary.csv", rows_to_csv(table.summary()))
    _write_text(out / "run_info.json", _run_info(cfg, "run"))
    for row in table.summary():
        print(f"{row.sampler:>10} N={row.N:<3} psnr={row.psnr_db:.3f} dB ssim={row.ssim:.4f} "
              f"data_residual={row.data_residual:.3e}")
    if table.failures:
        for row in table.failures:
            print(f"error: phantom {row.phantom_index} {row.sampler} N={row.N}: {row.error}",
                  file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _parse_values(text: str) -> list[float]:
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        try:
            v = float(tok)
        except ValueError:
            raise ConfigError(f"--values: cannot parse {tok!r}") from None
        if math.isnan(v) or (math.isinf(v) and tok.lower() not in ("inf", "+inf")):
            raise ConfigError(f"--values: cannot parse {tok!r}")
        if v < 0:
            raise ConfigError(f"--values: {tok} is negative")
        vals.append(v)
    return vals


def cmd_sweep(args) -> int:
    cfg = load_run_config(args.config)
    values = _parse_values(args.values)
    if args.param == "k_E" and any(math.isinf(v) for v in values):
        raise ConfigError("--values: k_E must be finite")
    out = _output_dir(args, cfg)
    table = sweep(cfg.experiment, args.param, values, cfg.denoiser.factory(cfg.experiment.task))
    _write_text(out / "sweep.csv", table.to_csv())
    _write_text(out / "run_info.json", _run_info(cfg, f"sweep {args.param}"))
    for row in table.rows:
        print(f"{args.param}={getattr(row, args.param)!r:>10} N={row.N:<3} psnr={row.psnr_db:.4f} dB "
              f"ssim={row.ssim:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    if args.check not in CHECKS:
        raise ConfigError(f"unknown check {args.check!r}; available: {', '.join(CHECKS)}")
    ok, report = CHECKS[args.check](make_symmetric_beta())
    print(report)
    print(f"{args.check}: {'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_RUNTIME


def cmd_denoiser_check(args) -> int:
    shape = (4, 4)
    x_t = np.linspace(-1.0, 1.0, 16).reshape(shape)
    cond = Conditioning(np.zeros(shape))
    with make_external_denoiser(args.command, args.timeout_ms) as den:
        eps = den.predict_eps(x_t, 0.5, cond)
    if eps.shape != shape or not np.all(np.isfinite(eps)):
        print(f"denoiser reply invalid: shape {eps.shape}", file=sys.stderr)
        return EXIT_RUNTIME
    print(f"denoiser ok: reply shape {eps.shape}, max|eps| = {float(np.max(np.abs(eps))):.6g}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="mesb", description="Schrodinger-bridge inverse-problem samplers")
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run every sampler configuration over the phantom set")
    r.add_argument("config")
    r.add_argument("--output", help="override [output] directory")
    r.set_defaults(func=cmd_run)

    s = sub.add_parser("sweep", help="sweep k_y or k_E, one row per value")
    s.add_argument("config")
    s.add_argument("--param", required=True, choices=SWEEP_PARAMETERS)
    s.add_argument("--values", required=True, help="comma-separated, e.g. 1,4,16,inf")
    s.add_argument("--output", help="override [output] directory")
    s.set_defaults(func=cmd_sweep)

    v = sub.add_parser("verify", help="run a numerical theory check")
    v.add_argument("--check", required=True, help=f"one of: {', '.join(CHECKS)}")
    v.set_defaults(func=cmd_verify)

    d = sub.add_parser("denoiser-check", help="send one probe frame to an external denoiser")
    d.add_argument("--command", required=True)
    d.add_argument("--timeout-ms", type=int, default=10_000)
    d.set_defaults(func=cmd_denoiser_check)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MesbError as exc:
        step = getattr(exc, "failed_step", None)
        where = f" (step {step})" if step is not None else ""
        print(f"error{where}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
