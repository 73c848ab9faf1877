"""Experiment configuration: YAML sections validated into dataclasses.

Precedence, lowest to highest: built-in defaults, the config file, then
``--set section.key=value`` overrides.  Unknown sections or keys are
rejected with the dotted field path in the message.
"""
from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field

import yaml

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "parse_config",
    "load_config",
    "apply_overrides",
    "dump_config",
    "config_to_dict",
]


class ConfigError(ValueError):
    """Invalid configuration; the message starts with the offending field path."""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}")
        self.path = path


def _require(cond: bool, path: str, message: str) -> None:
    if not cond:
        raise ConfigError(path, message)


@dataclass
class NetworkSection:
    arch: str = "ffn"
    depth: int = 2
    widths: list[int] = field(default_factory=lambda: [16, 16])
    sigma1: float = 1.0
    activation: str = "tanh"

    def validate(self, p: str) -> None:
        _require(self.arch in ("ffn", "resnet"), f"{p}.arch", "must be 'ffn' or 'resnet'")
        _require(self.depth >= 1, f"{p}.depth", "must be >= 1")
        _require(len(self.widths) == self.depth, f"{p}.widths", "needs exactly `depth` entries")
        _require(all(w >= 1 for w in self.widths), f"{p}.widths", "entries must be >= 1")
        _require(self.sigma1 >= 0, f"{p}.sigma1", "must be non-negative")
        _require(self.activation in ("relu", "tanh"), f"{p}.activation", "must be 'relu' or 'tanh'")
        if self.arch == "resnet":
            _require(len(set(self.widths)) == 1, f"{p}.widths", "resnet layers must share one width")


@dataclass
class BallSection:
    rho: float = 0.5
    rho1: float = 0.5

    def validate(self, p: str) -> None:
        _require(self.rho >= 0, f"{p}.rho", "must be non-negative")
        _require(self.rho1 >= 0, f"{p}.rho1", "must be non-negative")


@dataclass
class DataSection:
    n: int = 8
    d: int = 4
    teacher_seed: int = 1
    noise_std: float = 0.0

    def validate(self, p: str) -> None:
        _require(self.n >= 1, f"{p}.n", "must be >= 1")
        _require(self.d >= 1, f"{p}.d", "must be >= 1")
        _require(self.noise_std >= 0, f"{p}.noise_std", "must be non-negative")


@dataclass
class WidthSection:
    outer: int = 32
    restarts: int = 8
    steps: int = 50
    step_size: float = 0.1
    khintchine_n: list[int] = field(default_factory=lambda: [4, 16, 64, 256])
    khintchine_outer: int = 4000

    def validate(self, p: str) -> None:
        _require(self.outer >= 2, f"{p}.outer", "must be >= 2")
        _require(self.restarts >= 1, f"{p}.restarts", "must be >= 1")
        _require(self.steps >= 0, f"{p}.steps", "must be >= 0")
        _require(self.step_size > 0, f"{p}.step_size", "must be positive")
        _require(len(self.khintchine_n) >= 2 and all(v >= 1 for v in self.khintchine_n), f"{p}.khintchine_n", "needs >= 2 positive sizes")
        _require(self.khintchine_outer >= 2, f"{p}.khintchine_outer", "must be >= 2")


@dataclass
class ReuseSection:
    eta: float = 0.1
    T: int = 256
    n_grid: list[int] = field(default_factory=lambda: [64, 256, 1024, 4096])
    trials: int = 20
    T_grid: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256, 512, 1024])
    d: int = 10
    noise_std: float = 0.5

    def validate(self, p: str) -> None:
        _require(self.eta > 0, f"{p}.eta", "must be positive")
        _require(self.T >= 1, f"{p}.T", "must be >= 1")
        ok = len(self.n_grid) >= 4 and min(self.n_grid) >= 1 and max(self.n_grid) >= 16 * min(self.n_grid)
        _require(ok, f"{p}.n_grid", "needs >= 4 points spanning a factor of 16 or more")
        _require(self.trials >= 2, f"{p}.trials", "must be >= 2")
        _require(len(self.T_grid) >= 2 and min(self.T_grid) >= 1, f"{p}.T_grid", "needs >= 2 positive horizons")
        _require(self.d >= 1, f"{p}.d", "must be >= 1")
        _require(self.noise_std >= 0, f"{p}.noise_std", "must be non-negative")


@dataclass
class ConvergeSection:
    T_grid: list[int] = field(default_factory=lambda: [100, 200, 400, 800])
    n_grid: list[int] = field(default_factory=lambda: [16, 32, 64, 128])
    T: int = 400
    n: int = 64
    trials: int = 3

    def validate(self, p: str) -> None:
        _require(len(self.T_grid) >= 2 and min(self.T_grid) >= 1, f"{p}.T_grid", "needs >= 2 positive horizons")
        _require(len(self.n_grid) >= 2 and min(self.n_grid) >= 2, f"{p}.n_grid", "needs >= 2 sizes >= 2")
        _require(self.T >= 1, f"{p}.T", "must be >= 1")
        _require(self.n >= 1, f"{p}.n", "must be >= 1")
        _require(self.trials >= 2, f"{p}.trials", "must be >= 2")


@dataclass
class LemmasSection:
    widths: list[int] = field(default_factory=lambda: [64, 256])
    depth: int = 2
    sigma1: float = 0.5
    rho: float = 1.0
    trials: int = 1000
    sic_n: list[int] = field(default_factory=lambda: [4, 8, 12])
    sic_families: int = 50

    def validate(self, p: str) -> None:
        _require(len(self.widths) >= 1 and min(self.widths) >= 1, f"{p}.widths", "needs positive widths")
        _require(self.depth >= 1, f"{p}.depth", "must be >= 1")
        _require(self.sigma1 >= 0, f"{p}.sigma1", "must be non-negative")
        _require(self.rho >= 0, f"{p}.rho", "must be non-negative")
        _require(self.trials >= 100, f"{p}.trials", "must be >= 100")
        _require(all(1 <= v <= 16 for v in self.sic_n), f"{p}.sic_n", "entries must lie in [1, 16]")
        _require(self.sic_families >= 1, f"{p}.sic_families", "must be >= 1")


@dataclass
class GdRatioSection:
    seeds: int = 5
    T: int = 200
    quad_mu: float = 0.3
    quad_n: int = 32

    def validate(self, p: str) -> None:
        _require(self.seeds >= 1, f"{p}.seeds", "must be >= 1")
        _require(self.T >= 1, f"{p}.T", "must be >= 1")
        _require(self.quad_n >= 1, f"{p}.quad_n", "must be >= 1")


@dataclass
class ProfileSection:
    T: int = 200
    l0_threshold: float = 1e-6

    def validate(self, p: str) -> None:
        _require(self.T >= 0, f"{p}.T", "must be >= 0")
        _require(self.l0_threshold >= 0, f"{p}.l0_threshold", "must be non-negative")


@dataclass
class OutputSection:
    path: str = "results"
    format: str = "csv"

    def validate(self, p: str) -> None:
        _require(bool(self.path), f"{p}.path", "must be non-empty")
        _require(self.format in ("csv", "json"), f"{p}.format", "must be 'csv' or 'json'")


@dataclass
class ExperimentConfig:
    seed: int = 0
    network: NetworkSection = field(default_factory=NetworkSection)
    ball: BallSection = field(default_factory=BallSection)
    data: DataSection = field(default_factory=DataSection)
    width: WidthSection = field(default_factory=WidthSection)
    reuse: ReuseSection = field(default_factory=ReuseSection)
    converge: ConvergeSection = field(default_factory=ConvergeSection)
    lemmas: LemmasSection = field(default_factory=LemmasSection)
    gd_ratio: GdRatioSection = field(default_factory=GdRatioSection)
    profile: ProfileSection = field(default_factory=ProfileSection)
    output: OutputSection = field(default_factory=OutputSection)

    def validate(self) -> None:
        _require(0 <= self.seed < 2**64, "seed", "must be a 64-bit unsigned integer")
        for f in dataclasses.fields(self):
            if f.name != "seed":
                getattr(self, f.name).validate(f.name)


def _coerce(value, hint, path: str):
    if hint is int:
        _require(isinstance(value, int) and not isinstance(value, bool), path, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
        _require(ok, path, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        _require(isinstance(value, str), path, f"expected a string, got {value!r}")
        return value
    if typing.get_origin(hint) is list:
        _require(isinstance(value, (list, tuple)), path, f"expected a list, got {value!r}")
        (item,) = typing.get_args(hint)
        return [_coerce(v, item, f"{path}[{i}]") for i, v in enumerate(value)]
    raise TypeError(f"unsupported field type {hint!r}")


def _build_section(cls, raw, path: str, base=None):
    _require(isinstance(raw, dict), path, "expected a mapping")
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls)}
    for key in raw:
        _require(key in known, f"{path}.{key}", "unknown key")
    values = {} if base is None else dataclasses.asdict(base)
    for key, val in raw.items():
        values[key] = _coerce(val, hints[key], f"{path}.{key}")
    return cls(**values)


def parse_config(raw: dict | None, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Merge a raw mapping over ``base`` (defaults if omitted) and validate."""
    raw = {} if raw is None else raw
    _require(isinstance(raw, dict), "<root>", "config must be a mapping")
    base = base or ExperimentConfig()
    hints = typing.get_type_hints(ExperimentConfig)
    values = {}
    for f in dataclasses.fields(ExperimentConfig):
        current = getattr(base, f.name)
        if f.name not in raw:
            values[f.name] = current
        elif f.name == "seed":
            values[f.name] = _coerce(raw["seed"], int, "seed")
        else:
            values[f.name] = _build_section(hints[f.name], raw[f.name], f.name, current)
    for key in raw:
        _require(key in values, key, "unknown section")
    cfg = ExperimentConfig(**values)
    cfg.validate()
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError("--config", f"malformed YAML: {exc}") from exc
    return parse_config(raw)


def apply_overrides(cfg: ExperimentConfig, overrides) -> ExperimentConfig:
    """Apply ``section.key=value`` strings; values are parsed as YAML scalars or lists."""
    raw: dict = {}
    for item in overrides or []:
        if "=" not in item:
            raise ConfigError(item, "override must look like section.key=value")
        key, text = item.split("=", 1)
        try:
            value = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(key, f"cannot parse override value {text!r}") from exc
        parts = key.strip().split(".")
        if parts == ["seed"]:
            raw["seed"] = value
        elif len(parts) == 2:
            raw.setdefault(parts[0], {})
            _require(isinstance(raw[parts[0]], dict), key, "cannot override a section and its keys together")
            raw[parts[0]][parts[1]] = value
        else:
            raise ConfigError(key, "override keys are 'seed' or 'section.key'")
    return parse_config(raw, cfg)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    return dataclasses.asdict(cfg)


def dump_config(cfg: ExperimentConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False)
