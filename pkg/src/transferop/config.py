"""Run configuration: TOML sections, validated before any computation.

Every key has a typed default; unknown sections or keys and ill-typed
values raise :class:`ConfigError`, naming the offending ``section.key``.
Overrides (``section.key=value`` strings, as produced by command-line
flags) are applied on top of the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

__all__ = ["ConfigError", "DEFAULT_BETA", "RunConfig", "SystemSpec", "load_config", "parse_grid", "parse_value"]


class ConfigError(ValueError):
    """Invalid configuration; the CLI reports it with exit code 2."""


# inverse temperature used when the configuration does not set system.beta
DEFAULT_BETA = {"ou": 4.0, "lemon_slice": 2.0, "triple_well": 2.0}


@dataclass
class SystemSpec:
    name: str = "ou"
    alpha: float = 1.0
    beta: float = 4.0
    n_wells: int = 5
    omega: float = 1.0
    hbar: float = 1.0
    mass: float = 1.0


@dataclass
class DataSpec:
    m: int = 20000
    lag_time: float = 0.5
    lag_steps: int = 0
    h: float = 0.005
    seed: int = 0
    burn_in: int = 1000
    stride: int = 0
    t0: float = 0.0
    t1: float = 40.0
    flow_h: float = 0.01
    domain: list = field(default_factory=lambda: [[-5.0, 5.0]])
    sampling: str = "uniform_random"


@dataclass
class ModelSpec:
    widths: list = field(default_factory=lambda: [256, 512, 256])
    activation: str = "tanh"
    distribution: str = "normal"
    scale: float = 1.0
    bias_scale: float = 1.0
    fan_in_scaling: bool = True
    tol: float = 1e-10
    mode: str = "koopman_eigen"
    n: int = 4
    symmetrize: bool = True
    seed: int = 0


@dataclass
class TrainingSpec:
    epochs: int = 100
    step_size: float = 1.0
    optimizer: str = "gd"
    output_activation: str = "tanh"
    seed: int = 0


@dataclass
class EnsembleSpec:
    members: int = 20
    base_seed: int = 0
    bootstrap: bool = False
    grid: str = ""


@dataclass
class ClusterSpec:
    k: int = 5
    include_first: bool = True
    restarts: int = 10
    weighted: bool = False
    seed: int = 0


@dataclass
class BenchmarkSpec:
    systems: list = field(default_factory=lambda: ["ou", "lemon_slice", "triple_well"])
    repetitions: int = 3


@dataclass
class OutputSpec:
    dir: str = "out"


_SECTIONS = {
    "system": SystemSpec,
    "data": DataSpec,
    "model": ModelSpec,
    "training": TrainingSpec,
    "ensemble": EnsembleSpec,
    "cluster": ClusterSpec,
    "benchmark": BenchmarkSpec,
    "output": OutputSpec,
}

_CHOICES = {
    ("system", "name"): ("ou", "lemon_slice", "triple_well", "qho", "bickley"),
    ("data", "sampling"): ("uniform_random", "regular_grid"),
    ("model", "activation"): ("tanh", "relu", "gaussian"),
    ("model", "distribution"): ("normal", "uniform"),
    ("model", "mode"): ("koopman_eigen", "singular", "schrodinger"),
    ("training", "optimizer"): ("gd", "preconditioned"),
    ("training", "output_activation"): ("tanh", "gaussian", "identity"),
}


@dataclass
class RunConfig:
    system: SystemSpec = field(default_factory=SystemSpec)
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    training: TrainingSpec = field(default_factory=TrainingSpec)
    ensemble: EnsembleSpec = field(default_factory=EnsembleSpec)
    cluster: ClusterSpec = field(default_factory=ClusterSpec)
    benchmark: BenchmarkSpec = field(default_factory=BenchmarkSpec)
    output: OutputSpec = field(default_factory=OutputSpec)

    def as_dict(self):
        return dataclasses.asdict(self)

    def set(self, section: str, key: str, value):
        """Assign one value with type checking."""
        if section not in _SECTIONS:
            raise ConfigError(f"unknown section [{section}]")
        spec = getattr(self, section)
        names = {f.name: f for f in dataclasses.fields(spec)}
        if key not in names:
            raise ConfigError(f"unknown key {section}.{key}")
        default = names[key].default if names[key].default is not dataclasses.MISSING else names[key].default_factory()
        setattr(spec, key, _coerce(f"{section}.{key}", value, default))

    def validate(self):
        for (section, key), choices in _CHOICES.items():
            v = getattr(getattr(self, section), key)
            if v not in choices:
                raise ConfigError(f"{section}.{key} must be one of {list(choices)}, got {v!r}")
        positive = [("data", "m"), ("data", "h"), ("data", "flow_h"), ("model", "n"), ("cluster", "restarts"),
                    ("benchmark", "repetitions")]
        for section, key in positive:
            if getattr(getattr(self, section), key) <= 0:
                raise ConfigError(f"{section}.{key} must be positive")
        nonneg = [("data", "lag_steps"), ("data", "burn_in"), ("data", "stride"), ("data", "lag_time"),
                  ("training", "epochs"), ("training", "step_size")]
        for section, key in nonneg:
            if getattr(getattr(self, section), key) < 0:
                raise ConfigError(f"{section}.{key} must be nonnegative")
        if not self.model.widths or any(int(w) < 1 or int(w) != w for w in self.model.widths):
            raise ConfigError("model.widths must be a non-empty list of positive integers")
        if not 0 < self.model.tol < 1:
            raise ConfigError("model.tol must lie in (0, 1)")
        if self.ensemble.members < 2:
            raise ConfigError(f"ensemble.members must be at least 2, got {self.ensemble.members}")
        if self.cluster.k < 2:
            raise ConfigError(f"cluster.k must be at least 2, got {self.cluster.k}")
        if self.data.t1 < self.data.t0:
            raise ConfigError("data.t1 must not precede data.t0")
        if self.system.name in ("ou", "lemon_slice", "triple_well") and self.lag_steps() < 1:
            raise ConfigError("data.lag_time / data.h must give at least one step")
        for name in ("alpha", "beta", "omega", "hbar", "mass"):
            if getattr(self.system, name) <= 0:
                raise ConfigError(f"system.{name} must be positive")
        if not self.benchmark.systems:
            raise ConfigError("benchmark.systems must list at least one system")
        return self

    def lag_steps(self) -> int:
        if self.data.lag_steps:
            return self.data.lag_steps
        return int(round(self.data.lag_time / self.data.h))


def _coerce(key, value, default):
    if isinstance(default, bool):
        if isinstance(value, bool):
            return value
        if isinstance(value, str) and value.lower() in ("true", "false"):
            return value.lower() == "true"
        raise ConfigError(f"{key} must be a boolean, got {value!r}")
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, (int, float)) or int(value) != value:
            raise ConfigError(f"{key} must be an integer, got {value!r}")
        return int(value)
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{key} must be a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"{key} must be a string, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"{key} must be a list, got {value!r}")
        return value
    raise ConfigError(f"{key}: unsupported value {value!r}")  # pragma: no cover


def parse_value(text: str):
    """Interpret an override value with TOML syntax, falling back to a bare string."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_config(path: Optional[str] = None, overrides=()) -> RunConfig:
    """Build a validated :class:`RunConfig` from an optional TOML file and
    ``section.key=value`` overrides (overrides win)."""
    cfg = RunConfig()
    explicit = set()
    if path is not None:
        try:
            with open(path, "rb") as fh:
                raw = tomllib.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from exc
        for section, table in raw.items():
            if not isinstance(table, dict):
                raise ConfigError(f"top-level key {section!r} must be a [section]")
            for key, value in table.items():
                cfg.set(section, key, value)
                explicit.add((section, key))
    for item in overrides:
        if isinstance(item, str):
            if "=" not in item:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            dotted, text = item.split("=", 1)
            value = parse_value(text.strip())
        else:
            dotted, value = item
        if "." not in dotted:
            raise ConfigError(f"override key {dotted!r} must be section.key")
        section, key = dotted.strip().split(".", 1)
        cfg.set(section, key, value)
        explicit.add((section, key))
    if ("system", "beta") not in explicit:
        cfg.system.beta = DEFAULT_BETA.get(cfg.system.name, cfg.system.beta)
    return cfg.validate()


def parse_grid(text: str):
    """Parse ``"lo:hi:n,lo:hi:n"`` into a list of ``(lo, hi, n)`` per axis."""
    axes = []
    for part in text.split(","):
        bits = part.strip().split(":")
        if len(bits) != 3:
            raise ConfigError(f"grid axis {part!r} must be lo:hi:n")
        try:
            lo, hi, n = float(bits[0]), float(bits[1]), int(bits[2])
        except ValueError as exc:
            raise ConfigError(f"grid axis {part!r}: {exc}") from exc
        if n < 1 or not hi > lo:
            raise ConfigError(f"grid axis {part!r} needs hi > lo and n >= 1")
        axes.append((lo, hi, n))
    if not axes:
        raise ConfigError("empty grid specification")
    return axes
