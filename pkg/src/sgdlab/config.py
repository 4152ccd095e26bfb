"""Sectioned key-value experiment configuration.

The file format is INI-style with an explicit ``spec_version`` in [meta].
Parsing is strict: unknown sections or keys, missing required keys, and
malformed values all raise ConfigError naming the offending entry. Configs
round-trip losslessly through to_text()/parse().
"""

from __future__ import annotations

import configparser
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .simulate import NOISE_MODES, SAMPLING_MODES, OptimizerConfig

SPEC_VERSION = 1

SPECTRUM_KINDS = ("geometric", "uniform", "explicit")
THETA0_KINDS = ("mu", "zero")


class ConfigError(ValueError):
    """Configuration problem with section/key diagnostics."""

    def __init__(self, message: str, section: str | None = None, key: str | None = None):
        loc = ""
        if section is not None:
            loc = f"[{section}]" + (f" {key}" if key else "")
            message = f"{loc}: {message}"
        super().__init__(message)
        self.section = section
        self.key = key


@dataclass(frozen=True)
class ProblemSpec:
    n: int
    d: int
    spectrum: str = "geometric"
    rho_max: float = 1.0
    rho_min: float = 0.1
    values: tuple[float, ...] = ()
    sigma_gen: float = 0.1
    theta_bar: float = 1.0
    seed: int = 0

    def target_spectrum(self) -> np.ndarray:
        if self.spectrum == "geometric":
            return np.geomspace(self.rho_max, self.rho_min, self.d)
        if self.spectrum == "uniform":
            return np.linspace(self.rho_max, self.rho_min, self.d)
        return np.asarray(self.values, dtype=float)


@dataclass(frozen=True)
class RunSpec:
    steps: int
    burn_in: int = 0  # -1 means "auto"
    stride: int = 1
    replicas: int = 1
    noise_mode: str = "minibatch"
    sampling: str = "replacement"
    theta0: str = "mu"
    theta0_offset: float = 0.0
    seed: int = 1


@dataclass(frozen=True)
class AnalysisSpec:
    top_k: int = 10
    fit_window_start: float = 1.0 / 3.0
    time_points: int = 200
    plane: tuple[int, int] = (1, 2)
    grid_points: int = 21
    grid_radius: float = 3.0
    horizon: int = 0  # 0 means "use run.steps"


@dataclass(frozen=True)
class OutputSpec:
    dir: str = "out"


@dataclass(frozen=True)
class ExperimentConfig:
    problem: ProblemSpec
    optimizer: OptimizerConfig
    run: RunSpec
    analysis: AnalysisSpec = field(default_factory=AnalysisSpec)
    output: OutputSpec = field(default_factory=OutputSpec)


_SCHEMA = {
    "meta": {"spec_version": (int, True)},
    "problem": {
        "n": (int, True),
        "d": (int, True),
        "spectrum": (str, False),
        "rho_max": (float, False),
        "rho_min": (float, False),
        "values": ("floats", False),
        "sigma_gen": (float, False),
        "theta_bar": (float, False),
        "seed": (int, False),
    },
    "optimizer": {
        "eta": (float, True),
        "beta": (float, False),
        "weight_decay": (float, False),
        "batch_size": (int, True),
    },
    "run": {
        "steps": (int, True),
        "burn_in": ("burn_in", False),
        "stride": (int, False),
        "replicas": (int, False),
        "noise_mode": (str, False),
        "sampling": (str, False),
        "theta0": (str, False),
        "theta0_offset": (float, False),
        "seed": (int, False),
    },
    "analysis": {
        "top_k": (int, False),
        "fit_window_start": (float, False),
        "time_points": (int, False),
        "plane": ("plane", False),
        "grid_points": (int, False),
        "grid_radius": (float, False),
        "horizon": (int, False),
    },
    "output": {"dir": (str, False)},
}


def _convert(section: str, key: str, kind, raw: str):
    try:
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw.strip()
        if kind == "floats":
            return tuple(float(x) for x in raw.split(",") if x.strip())
        if kind == "plane":
            parts = [int(x) for x in raw.split(",")]
            if len(parts) != 2:
                raise ValueError("expected two comma-separated mode indices")
            return (parts[0], parts[1])
        if kind == "burn_in":
            return -1 if raw.strip() == "auto" else int(raw)
    except ValueError as exc:
        raise ConfigError(f"cannot parse value {raw!r} ({exc})", section, key) from None
    raise AssertionError(f"unknown kind {kind}")


def parse(text: str) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config file: {exc}") from None

    values: dict[str, dict] = {}
    for section in parser.sections():
        if section not in _SCHEMA:
            raise ConfigError("unknown section", section)
        values[section] = {}
        for key, raw in parser.items(section):
            if key not in _SCHEMA[section]:
                raise ConfigError("unknown key", section, key)
            values[section][key] = _convert(section, key, _SCHEMA[section][key][0], raw)

    for section, keys in _SCHEMA.items():
        required = [k for k, (_, req) in keys.items() if req]
        if required and section not in values:
            raise ConfigError(f"missing required section with keys {required}", section)
        for key in required:
            if key not in values.get(section, {}):
                raise ConfigError("missing required key", section, key)

    if values["meta"]["spec_version"] != SPEC_VERSION:
        raise ConfigError(
            f"unsupported spec_version {values['meta']['spec_version']}", "meta", "spec_version"
        )

    problem = ProblemSpec(**values.get("problem", {}))
    if problem.spectrum not in SPECTRUM_KINDS:
        raise ConfigError(f"spectrum must be one of {SPECTRUM_KINDS}", "problem", "spectrum")
    if problem.spectrum == "explicit":
        if len(problem.values) != problem.d:
            raise ConfigError(
                f"explicit spectrum needs exactly d={problem.d} values", "problem", "values"
            )
    try:
        optimizer = OptimizerConfig(**values.get("optimizer", {}))
    except ValueError as exc:
        raise ConfigError(str(exc), "optimizer") from None
    run = RunSpec(**values.get("run", {}))
    if run.noise_mode not in NOISE_MODES:
        raise ConfigError(f"noise_mode must be one of {NOISE_MODES}", "run", "noise_mode")
    if run.sampling not in SAMPLING_MODES:
        raise ConfigError(f"sampling must be one of {SAMPLING_MODES}", "run", "sampling")
    if run.theta0 not in THETA0_KINDS:
        raise ConfigError(f"theta0 must be one of {THETA0_KINDS}", "run", "theta0")
    analysis = AnalysisSpec(**values.get("analysis", {}))
    if analysis.top_k > problem.d:
        raise ConfigError("top_k cannot exceed d", "analysis", "top_k")
    output = OutputSpec(**values.get("output", {}))
    return ExperimentConfig(
        problem=problem, optimizer=optimizer, run=run, analysis=analysis, output=output
    )


def load(path: str | Path) -> ExperimentConfig:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"config file not found: {path}")
    return parse(path.read_text())


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in value)
    return str(value)


def to_text(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    parser["meta"] = {"spec_version": str(SPEC_VERSION)}
    parser["problem"] = {
        "n": str(cfg.problem.n),
        "d": str(cfg.problem.d),
        "spectrum": cfg.problem.spectrum,
        "rho_max": _fmt(cfg.problem.rho_max),
        "rho_min": _fmt(cfg.problem.rho_min),
        "sigma_gen": _fmt(cfg.problem.sigma_gen),
        "theta_bar": _fmt(cfg.problem.theta_bar),
        "seed": str(cfg.problem.seed),
    }
    if cfg.problem.values:
        parser["problem"]["values"] = _fmt(cfg.problem.values)
    parser["optimizer"] = {
        "eta": _fmt(cfg.optimizer.eta),
        "beta": _fmt(cfg.optimizer.beta),
        "weight_decay": _fmt(cfg.optimizer.weight_decay),
        "batch_size": str(cfg.optimizer.batch_size),
    }
    parser["run"] = {
        "steps": str(cfg.run.steps),
        "burn_in": "auto" if cfg.run.burn_in == -1 else str(cfg.run.burn_in),
        "stride": str(cfg.run.stride),
        "replicas": str(cfg.run.replicas),
        "noise_mode": cfg.run.noise_mode,
        "sampling": cfg.run.sampling,
        "theta0": cfg.run.theta0,
        "theta0_offset": _fmt(cfg.run.theta0_offset),
        "seed": str(cfg.run.seed),
    }
    parser["analysis"] = {
        "top_k": str(cfg.analysis.top_k),
        "fit_window_start": _fmt(cfg.analysis.fit_window_start),
        "time_points": str(cfg.analysis.time_points),
        "plane": f"{cfg.analysis.plane[0]},{cfg.analysis.plane[1]}",
        "grid_points": str(cfg.analysis.grid_points),
        "grid_radius": _fmt(cfg.analysis.grid_radius),
        "horizon": str(cfg.analysis.horizon),
    }
    parser["output"] = {"dir": cfg.output.dir}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()
