"""Run configuration: nested dataclasses loaded from YAML, unknown keys rejected.

Two default profiles mirror the published hyperparameter tables: a
low-dimensional one for gridded terrains and a high-dimensional one.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any

import yaml

from .bridge import BridgeConfig
from .conjugate import ConjugateConfig
from .fields import TerrainSpec
from .npf import NpfTrainConfig, OptimConfig
from .sampler import SamplerConfig


class ConfigError(ValueError):
    """Invalid configuration document; the message names the offending key path."""


@dataclass
class IcnnSection:
    width: int = 64
    depth: int = 4
    rank: int = 1
    activation: str = "elu"
    delta_min: float = 1e-2


@dataclass
class FieldSection:
    # terrain | grid | identity | tent | four-well | double-well | quadratic
    kind: str = "terrain"
    path: str | None = None  # grid CSV for kind = grid
    n_samples: int = 4096  # analytic sources
    dim: int = 2  # identity field
    terrain: TerrainSpec = dc_field(default_factory=TerrainSpec)


@dataclass
class MetricsSection:
    c: int = 128
    n_anchors: int = 16
    eps_factor: float = 0.05
    n_mc: int = 2048
    tol: float = 1e-6
    max_iterations: int = 10000
    n_eval: int = 512
    cosine_draws: int = 1


@dataclass
class SamplerSection:
    objective: str = "four-well"
    params: SamplerConfig = dc_field(default_factory=SamplerConfig)
    theta_opt: OptimConfig = dc_field(default_factory=lambda: OptimConfig(1e-4, 0.5, 0.5, "cosine", 0.1, 30000))
    phi_opt: OptimConfig = dc_field(default_factory=lambda: OptimConfig(5e-4, 0.9, 0.999, "constant"))
    psi_opt: OptimConfig = dc_field(default_factory=lambda: OptimConfig(5e-4, 0.9, 0.999, "constant"))
    # single-basin start: particles drawn around this point (None: uniform over Omega)
    start: list[float] | None = None
    start_spread: float = 0.1


@dataclass
class BenchmarkSection:
    benchmark: str = "gauss-diag"
    dim: int = 4
    variant: str = "ours"
    steps: int = 1000
    batch_size: int = 128
    n_train: int = 20000
    n_eval: int = 2048
    repeats: int = 1
    lr: float = 1e-3
    v_hidden: list[int] = dc_field(default_factory=lambda: [64, 64])


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    profile: str = "topography"
    icnn: IcnnSection = dc_field(default_factory=IcnnSection)
    conjugate: ConjugateConfig = dc_field(default_factory=ConjugateConfig)
    npf: NpfTrainConfig = dc_field(default_factory=NpfTrainConfig)
    bridge: BridgeConfig = dc_field(default_factory=BridgeConfig)
    metrics: MetricsSection = dc_field(default_factory=MetricsSection)
    field: FieldSection = dc_field(default_factory=FieldSection)
    sampler: SamplerSection = dc_field(default_factory=SamplerSection)
    benchmark: BenchmarkSection = dc_field(default_factory=BenchmarkSection)


PROFILES = ("topography", "highdim")


def profile_defaults(name: str) -> RunConfig:
    """Defaults of the named profile (before any user overrides)."""
    if name == "topography":
        return RunConfig(profile=name)
    if name == "highdim":
        cfg = RunConfig(profile=name)
        cfg.icnn = IcnnSection(width=128)
        cfg.npf = NpfTrainConfig(
            steps=10000,
            theta_opt=OptimConfig(1e-3, 0.5, 0.5, "cosine", 0.01),
            phi_opt=OptimConfig(5e-4, 0.9, 0.999, "cosine", 0.01),
        )
        cfg.bridge = BridgeConfig(
            sigma=1.0, hidden=[512, 512], train_steps=50000, opt=OptimConfig(5e-4, 0.9, 0.999, "cosine", 0.01)
        )
        cfg.conjugate = ConjugateConfig(max_iterations=700, gtol=0.1)
        return cfg
    raise ConfigError(f"profile: unknown profile {name!r} (choose from {', '.join(PROFILES)})")


def _is_dataclass_type(tp) -> bool:
    return isinstance(tp, type) and dataclasses.is_dataclass(tp)


def _coerce(tp, value, path: str):
    origin = typing.get_origin(tp)
    args = typing.get_args(tp)
    if origin in (typing.Union, types.UnionType):
        if value is None and type(None) in args:
            return None
        inner = [a for a in args if a is not type(None)]
        errors = []
        for a in inner:
            try:
                return _coerce(a, value, path)
            except ConfigError as exc:
                errors.append(str(exc))
        raise ConfigError(errors[0])
    if _is_dataclass_type(tp):
        if not isinstance(value, dict):
            raise ConfigError(f"{path}: expected a mapping")
        return _build(tp, value, path)
    if origin is list:
        if not isinstance(value, list):
            raise ConfigError(f"{path}: expected a list")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path}: expected a list of {len(args)} values")
        return tuple(_coerce(a, v, f"{path}[{i}]") for i, (a, v) in enumerate(zip(args, value)))
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path}: expected true/false")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path}: expected an integer")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path}: expected a number")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path}: expected a string")
        return value
    if tp is type(None):
        if value is not None:
            raise ConfigError(f"{path}: expected null")
        return None
    raise ConfigError(f"{path}: unsupported field type {tp}")


def _build(cls, data: dict, path: str, base=None):
    hints = typing.get_type_hints(cls)
    known = {f.name for f in dataclasses.fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f"{path}." if path else ""
        raise ConfigError(f"{where}{unknown[0]}: unknown key")
    kwargs = {}
    for f in dataclasses.fields(cls):
        if not f.init:
            continue
        sub = f"{path}.{f.name}" if path else f.name
        current = getattr(base, f.name) if base is not None else None
        if f.name in data:
            value = data[f.name]
            if _is_dataclass_type(hints[f.name]) and isinstance(value, dict) and current is not None:
                kwargs[f.name] = _build(hints[f.name], value, sub, current)
            else:
                kwargs[f.name] = _coerce(hints[f.name], value, sub)
        elif current is not None:
            kwargs[f.name] = current
    try:
        return cls(**kwargs)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{path or 'config'}: {exc}") from None


def config_from_dict(data: dict | None, profile: str | None = None) -> RunConfig:
    """Overlay a (possibly partial) document on the selected profile's defaults."""
    data = dict(data or {})
    name = profile or data.get("profile", "topography")
    if not isinstance(name, str):
        raise ConfigError("profile: expected a string")
    base = profile_defaults(name)
    data["profile"] = name
    return _build(RunConfig, data, "", base)


def load_config(path: str | Path | None, profile: str | None = None) -> RunConfig:
    if path is None:
        return config_from_dict({}, profile)
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{p}: invalid YAML ({exc})") from None
    if data is not None and not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a mapping")
    return config_from_dict(data, profile)


def config_to_dict(cfg) -> dict[str, Any]:
    def conv(v):
        if isinstance(v, tuple):
            return [conv(x) for x in v]
        if isinstance(v, list):
            return [conv(x) for x in v]
        if isinstance(v, dict):
            return {k: conv(x) for k, x in v.items()}
        return v

    return conv(dataclasses.asdict(cfg))


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(config_to_dict(cfg), sort_keys=False, default_flow_style=False)
