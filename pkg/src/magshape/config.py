"""Experiment configuration: INI-style ``[section]`` / ``key = value`` files."""
from __future__ import annotations

import configparser
import dataclasses
import hashlib
import io
from dataclasses import dataclass, field
from pathlib import Path

from .mesh import MotorGeometryParams, Region


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class MaterialConfig:
    curve: str = "analytic"  # "analytic", "vacuum", or a path to an `s nu` sample file
    eps: float = 1.6e-4
    c: float = 3.8e3
    n_samples: int = 50
    s_max: float = 2.0


@dataclass(frozen=True)
class SourceConfig:
    remanence: float = 1.2
    coil_current_density: float = 0.0


@dataclass(frozen=True)
class TargetConfig:
    amplitude: float = 0.5
    harmonic: int = 4


@dataclass(frozen=True)
class SolverConfig:
    newton_tol: float = 1e-10
    linear_tol: float = 1e-12
    max_newton: int = 50


@dataclass(frozen=True)
class OptimizerConfig:
    tau_init_factor: float = 0.5  # times pocket width / max|V|
    tau_min_factor: float = 2.0**-20
    max_iter: int = 60
    n_side_points: int = 71
    n_top_points: int = 9


@dataclass(frozen=True)
class AlphaConfig:
    inside: float = 1.0
    near: float = 10.0
    far: float = 100.0
    epsilon: float = 0.0  # 0 selects two design-element diameters


@dataclass(frozen=True)
class OutputConfig:
    directory: str = "runs/default"


@dataclass(frozen=True)
class RunConfig:
    geometry: MotorGeometryParams = field(default_factory=MotorGeometryParams)
    material: MaterialConfig = field(default_factory=MaterialConfig)
    source: SourceConfig = field(default_factory=SourceConfig)
    target: TargetConfig = field(default_factory=TargetConfig)
    solver: SolverConfig = field(default_factory=SolverConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    alpha: AlphaConfig = field(default_factory=AlphaConfig)
    output: OutputConfig = field(default_factory=OutputConfig)
    seed: int = 0

    def validate(self) -> None:
        s = self.solver
        if min(s.newton_tol, s.linear_tol) <= 0 or s.max_newton < 1:
            raise ConfigError("solver tolerances must be positive and max_newton >= 1")
        if self.target.harmonic < 1:
            raise ConfigError("target harmonic must be a positive integer")
        o = self.optimizer
        if o.tau_init_factor < 0 or o.tau_min_factor <= 0 or o.max_iter < 0:
            raise ConfigError("optimizer factors must be non-negative (tau_min_factor positive)")
        a = self.alpha
        if min(a.inside, a.near, a.far) <= 0 or a.epsilon < 0:
            raise ConfigError("alpha values must be positive and epsilon non-negative")
        if self.material.n_samples < 2 or self.material.s_max <= 0:
            raise ConfigError("material sampling needs n_samples >= 2 and s_max > 0")
        self.geometry.check()

    def with_output(self, directory: str) -> "RunConfig":
        return dataclasses.replace(self, output=OutputConfig(directory))

    def with_seed(self, seed: int) -> "RunConfig":
        return dataclasses.replace(self, seed=seed)

    def hash(self) -> str:
        return hashlib.sha256(dump_config(self).encode()).hexdigest()

    @property
    def current_density(self) -> dict[int, float]:
        return {int(Region.Coil): self.source.coil_current_density}


_SECTIONS = ("geometry", "material", "source", "target", "solver", "optimizer", "alpha", "output")


def _coerce(kind, text: str, where: str):
    try:
        if kind is bool:
            return text.strip().lower() in ("1", "true", "yes", "on")
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text.strip()
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {text!r} as {kind.__name__}") from None


def parse_config(text: str) -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str  # keep key case
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    default = RunConfig()
    parts = {}
    for name in _SECTIONS:
        base = getattr(default, name)
        fields = {f.name: f for f in dataclasses.fields(base)}
        values = {}
        if cp.has_section(name):
            for key, raw in cp.items(name):
                if key not in fields:
                    raise ConfigError(f"[{name}] unknown key {key!r}")
                values[key] = _coerce(type(getattr(base, key)), raw, f"[{name}] {key}")
        parts[name] = dataclasses.replace(base, **values)
    unknown = set(cp.sections()) - set(_SECTIONS) - {"run"}
    if unknown:
        raise ConfigError(f"unknown section(s): {sorted(unknown)}")
    seed = 0
    if cp.has_section("run"):
        for key, raw in cp.items("run"):
            if key != "seed":
                raise ConfigError(f"[run] unknown key {key!r}")
            seed = _coerce(int, raw, "[run] seed")
    cfg = RunConfig(seed=seed, **parts)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text)


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def dump_config(cfg: RunConfig) -> str:
    out = io.StringIO()
    for name in _SECTIONS:
        out.write(f"[{name}]\n")
        for f in dataclasses.fields(getattr(cfg, name)):
            out.write(f"{f.name} = {_fmt(getattr(getattr(cfg, name), f.name))}\n")
        out.write("\n")
    out.write(f"[run]\nseed = {cfg.seed}\n")
    return out.getvalue()
