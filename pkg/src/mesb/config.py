"""Run configuration files.

Flat ``key = value`` lines grouped under ``[task]``, ``[sampler]``,
``[denoiser]`` and ``[output]``.  ``#`` and ``;`` start comments.  Numbers
use ``.`` as the decimal separator and ``inf`` is the only non-numeric
numeric token.  ``N`` may be a comma-separated list, giving one sampler
configuration per step count.
"""

from __future__ import annotations

import math
import shlex
from dataclasses import dataclass
from pathlib import Path

from . import linop
from .errors import ConfigError, InvalidArgument
from .harness import (DenoiserFactory, Experiment, TaskKind, TaskSpec, analytic_factory,
                      fitted_prior_factory, oracle_factory)
from .denoise import make_external_denoiser
from .samplers import SamplerConfig, SamplerKind


def _int(s):
    return int(s)


def _float(s):
    v = float(s)
    if math.isnan(v) or (math.isinf(v) and s.strip().lower() not in ("inf", "+inf")):
        raise ValueError(s)
    return v


def _finite(s):
    v = _float(s)
    if math.isinf(v):
        raise ValueError("must be finite")
    return v


def _bool(s):
    low = s.lower()
    if low in ("true", "yes", "1"):
        return True
    if low in ("false", "no", "0"):
        return False
    raise ValueError("expected true or false")


def _int_list(s):
    return [int(v) for v in s.split(",")]


def _str(s):
    return s


def _choice(*options):
    def conv(s):
        if s not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return s
    return conv


SCHEMA = {
    "task": {
        "kind": _choice(*(k.value for k in TaskKind)),
        "size": _int,
        "noise_percent": _finite,
        "blur_sigma": _finite,
        "factor": _int,
        "keep_fraction": _finite,
        "n_views": _int,
        "n_detectors": _int,
        "phantom_seed": _int,
        "n_phantoms": _int,
    },
    "sampler": {
        "kind": _choice(*(k.value for k in SamplerKind)),
        "N": _int_list,
        "p": _int,
        "k_y": _float,
        "k_E": _finite,
        "T": _choice("none", "laplacian"),
        "alpha": _finite,
        "stochastic": _bool,
        "seed": _int,
        "cg_tol": _finite,
        "beta_min": _finite,
        "beta_max": _finite,
        "dense_near": _choice("zero", "one"),
    },
    "denoiser": {
        "kind": _choice("gaussian_analytic", "oracle", "external"),
        "prior": _choice("fitted", "constant"),
        "mu0": _finite,
        "s0sq": _finite,
        "n_train": _int,
        "prior_seed": _int,
        "command": _str,
        "timeout_ms": _int,
    },
    "output": {
        "directory": _str,
        "emit_trajectory": _bool,
        "record_wall_time": _bool,
    },
}

REQUIRED = {"task": ("kind",), "sampler": ("kind",), "denoiser": ("kind",)}


def parse_sections(text: str) -> dict[str, dict[str, tuple[object, int]]]:
    """Parses and type-checks ``text`` against :data:`SCHEMA`.

    Returns {section: {key: (value, line_number)}}.
    """
    out: dict[str, dict[str, tuple[object, int]]] = {}
    section = None
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].split(";", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"malformed section header {raw.strip()!r}", line=lineno)
            section = line[1:-1].strip()
            if section not in SCHEMA:
                raise ConfigError(f"unknown section [{section}]", line=lineno)
            if section in out:
                raise ConfigError(f"duplicate section [{section}]", line=lineno)
            out[section] = {}
            continue
        if "=" not in line:
            raise ConfigError("expected key = value", line=lineno)
        key, value = (part.strip() for part in line.split("=", 1))
        if section is None:
            raise ConfigError("key outside of any section", line=lineno, key=key)
        if key not in SCHEMA[section]:
            known = ", ".join(SCHEMA[section])
            raise ConfigError(f"unknown key in [{section}] (known: {known})", line=lineno, key=key)
        if key in out[section]:
            raise ConfigError("duplicate key", line=lineno, key=key)
        try:
            out[section][key] = (SCHEMA[section][key](value), lineno)
        except ValueError as exc:
            raise ConfigError(f"invalid value {value!r}: {exc}", line=lineno, key=key) from None
    for sec, keys in REQUIRED.items():
        if sec not in out:
            raise ConfigError(f"missing section [{sec}]")
        for k in keys:
            if k not in out[sec]:
                raise ConfigError(f"missing required key in [{sec}]", key=k)
    return out


@dataclass(frozen=True)
class DenoiserSpec:
    kind: str
    prior: str = "fitted"
    mu0: float = 0.5
    s0sq: float = 0.1
    n_train: int = 200
    prior_seed: int = 0
    command: str | None = None
    timeout_ms: int = 10000

    def factory(self, task: TaskSpec) -> DenoiserFactory:
        if self.kind == "oracle":
            return oracle_factory()
        if self.kind == "external":
            argv = shlex.split(self.command)
            return lambda t, schedule: make_external_denoiser(argv, self.timeout_ms)
        if self.prior == "fitted":
            return fitted_prior_factory(task.size, self.n_train, self.prior_seed)
        return analytic_factory(self.mu0, self.s0sq)


@dataclass(frozen=True)
class OutputSpec:
    directory: str = "mesb_out"
    emit_trajectory: bool = False
    record_wall_time: bool = False


@dataclass(frozen=True)
class RunConfig:
    experiment: Experiment
    denoiser: DenoiserSpec
    output: OutputSpec


def _values(section):
    return {k: v for k, (v, _) in section.items()}


def _located(section, key, exc):
    line = section[key][1] if key in section else None
    return ConfigError(str(exc), line=line, key=key if key in section else None)


def build_run_config(sections) -> RunConfig:
    t_sec, s_sec, d_sec = sections["task"], sections["sampler"], sections["denoiser"]
    task_vals = _values(t_sec)
    n_phantoms = task_vals.pop("n_phantoms", 1)
    try:
        task = TaskSpec(**task_vals)
    except InvalidArgument as exc:
        raise ConfigError(f"[task]: {exc}") from None
    if n_phantoms < 1:
        raise _located(t_sec, "n_phantoms", "n_phantoms must be >= 1")

    sv = _values(s_sec)
    schedule_keys = {k: sv.pop(k) for k in ("beta_min", "beta_max", "dense_near") if k in sv}
    n_list = sv.pop("N", [10])
    t_name = sv.pop("T", "none")
    if t_name == "laplacian":
        sv["T_gram"] = linop.laplacian_T((task.size, task.size))
    configs = []
    for n in n_list:
        try:
            configs.append(SamplerConfig(N=n, **sv))
        except InvalidArgument as exc:
            raise ConfigError(f"[sampler]: {exc}") from None
    try:
        experiment = Experiment(task, configs, n_phantoms, sv.get("seed", 0), **schedule_keys)
        experiment.schedule()
    except InvalidArgument as exc:
        raise ConfigError(f"[sampler]: {exc}") from None

    dv = _values(d_sec)
    if dv["kind"] == "external" and "command" not in dv:
        raise ConfigError("external denoiser needs a command", line=d_sec["kind"][1], key="command")
    if dv.get("s0sq", 1.0) <= 0:
        raise _located(d_sec, "s0sq", "s0sq must be positive")
    if dv.get("timeout_ms", 1) <= 0:
        raise _located(d_sec, "timeout_ms", "timeout_ms must be positive")
    if dv.get("n_train", 2) < 2:
        raise _located(d_sec, "n_train", "n_train must be >= 2")
    denoiser = DenoiserSpec(**dv)

    ov = _values(sections.get("output", {}))
    output = OutputSpec(**ov)
    if output.record_wall_time:
        experiment = Experiment(task, configs, n_phantoms, experiment.seed, experiment.beta_min,
                                experiment.beta_max, experiment.dense_near, True)
    return RunConfig(experiment, denoiser, output)


def load_run_config(path) -> RunConfig:
    """Reads and validates a config file; raises ConfigError or OSError."""
    text = Path(path).read_text(encoding="utf-8")
    return build_run_config(parse_sections(text))
