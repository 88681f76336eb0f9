"""Run configuration: one TOML file with a section per stage.

Every key is checked against the dataclass below before anything runs;
unknown sections or keys, wrong types and out-of-range values all raise
:class:`ConfigError`.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .envs import ENV_NAMES
from .errors import ConfigError

GUIDE_TYPES = ("none", "value-net", "analytic-quadratic", "goal-inpaint")
CONTROLLERS = ("waypoint-pd", "random")


@dataclass
class EnvSection:
    name: str = "pointmass-umaze"
    episodes: int = 50
    controller: str = "waypoint-pd"
    episode_length: int = 0  # 0 means the environment default


@dataclass
class ModelSection:
    horizon: int = 64
    n_steps: int = 20
    channels: list[int] = field(default_factory=lambda: [32, 64, 128])
    embed_dim: int = 32
    kernel_size: int = 5
    groups: int = 8
    clip_denoised: float = 0.0  # clamp the clean estimate to [-c, c] while sampling; 0 turns it off


@dataclass
class TrainSection:
    learning_rate: float = 4e-5
    batch_size: int = 32
    steps: int = 2000
    log_every: int = 100
    checkpoint_every: int = 500


@dataclass
class ValueSection:
    learning_rate: float = 2e-4
    batch_size: int = 32
    steps: int = 1000
    discount: float = 0.997
    log_every: int = 100


@dataclass
class GuideSection:
    type: str = "goal-inpaint"
    scale: float = 0.1
    target: list[float] = field(default_factory=list)
    mask: list[float] = field(default_factory=list)


@dataclass
class PlannerSection:
    warm_start_steps: int = 0
    open_loop: bool = True
    episodes: int = 50
    max_episode_steps: int = 80
    goal_tolerance: float = 0.1
    goal_deadline: bool = True


@dataclass
class RunConfig:
    seed: int = 0
    env: EnvSection = field(default_factory=EnvSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    value: ValueSection = field(default_factory=ValueSection)
    guide: GuideSection = field(default_factory=GuideSection)
    planner: PlannerSection = field(default_factory=PlannerSection)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()

    def validate(self) -> "RunConfig":
        _check_ranges(self)
        return self


SECTIONS = {f.name: f for f in dataclasses.fields(RunConfig) if f.name != "seed"}


def _section_types(cls) -> dict[str, type]:
    # defaults carry the runtime type; annotations are strings here
    out = {}
    for f in dataclasses.fields(cls):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        out[f.name] = type(default)
    return out


def _coerce(where: str, value, kind: type, default):
    if kind is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}", key=where)
        return value
    if kind is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}", key=where)
        return value
    if kind is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{where} must be a number, got {value!r}", key=where)
        return float(value)
    if kind is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where} must be a string, got {value!r}", key=where)
        return value
    if kind is list:
        if not isinstance(value, list):
            raise ConfigError(f"{where} must be an array, got {value!r}", key=where)
        elem = type(default[0]) if default else float
        return [_coerce(f"{where}[{k}]", v, elem, None) for k, v in enumerate(value)]
    raise ConfigError(f"{where}: unsupported type", key=where)


def from_dict(raw: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig` from parsed TOML."""
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a table")
    cfg = RunConfig()
    for key, value in raw.items():
        if key == "seed":
            cfg.seed = _coerce("seed", value, int, None)
            continue
        if key not in SECTIONS:
            raise ConfigError(f"unknown section [{key}]; expected one of {', '.join(SECTIONS)}", key=key)
        if not isinstance(value, dict):
            raise ConfigError(f"[{key}] must be a table", key=key)
        section = getattr(cfg, key)
        types = _section_types(type(section))
        for name, item in value.items():
            if name not in types:
                raise ConfigError(f"unknown key {key}.{name}; expected one of {', '.join(types)}", key=f"{key}.{name}")
            setattr(section, name, _coerce(f"{key}.{name}", item, types[name], getattr(section, name)))
    return cfg.validate()


def _require(cond: bool, message: str, key: str):
    if not cond:
        raise ConfigError(message, key=key)


def _check_ranges(cfg: RunConfig) -> None:
    _require(0 <= cfg.seed < 2**64, "seed must fit in an unsigned 64-bit integer", "seed")
    e, m, t, v, g, p = cfg.env, cfg.model, cfg.train, cfg.value, cfg.guide, cfg.planner
    _require(e.name in ENV_NAMES, f"env.name must be one of {', '.join(ENV_NAMES)}", "env.name")
    _require(e.controller in CONTROLLERS, f"env.controller must be one of {', '.join(CONTROLLERS)}", "env.controller")
    _require(e.episodes >= 1, "env.episodes must be at least 1", "env.episodes")
    _require(e.episode_length >= 0, "env.episode_length must be >= 0", "env.episode_length")
    _require(m.n_steps >= 2, "model.n_steps must be at least 2", "model.n_steps")
    _require(len(m.channels) == 3 and all(c > 0 for c in m.channels),
             "model.channels must list three positive widths", "model.channels")
    _require(all(c % m.groups == 0 for c in m.channels), "model.groups must divide every channel width", "model.groups")
    _require(m.embed_dim >= 2 and m.embed_dim % 2 == 0, "model.embed_dim must be even and >= 2", "model.embed_dim")
    _require(m.clip_denoised >= 0, "model.clip_denoised must be >= 0", "model.clip_denoised")
    _require(m.kernel_size >= 1 and m.kernel_size % 2 == 1, "model.kernel_size must be odd", "model.kernel_size")
    depth = len(m.channels) - 1
    _require(m.horizon > 0 and m.horizon % (2 ** depth) == 0,
             f"model.horizon must be a positive multiple of {2 ** depth}", "model.horizon")
    for name, sec in (("train", t), ("value", v)):
        _require(sec.learning_rate > 0, f"{name}.learning_rate must be positive", f"{name}.learning_rate")
        _require(sec.batch_size >= 1, f"{name}.batch_size must be at least 1", f"{name}.batch_size")
        _require(sec.steps >= 0, f"{name}.steps must be >= 0", f"{name}.steps")
        _require(sec.log_every >= 1, f"{name}.log_every must be at least 1", f"{name}.log_every")
    _require(t.checkpoint_every >= 1 and t.checkpoint_every % t.log_every == 0,
             "train.checkpoint_every must be a positive multiple of train.log_every", "train.checkpoint_every")
    _require(0 < v.discount <= 1, "value.discount must lie in (0, 1]", "value.discount")
    _require(g.type in GUIDE_TYPES, f"guide.type must be one of {', '.join(GUIDE_TYPES)}", "guide.type")
    _require(g.scale >= 0, "guide.scale must be >= 0", "guide.scale")
    if g.type == "analytic-quadratic":
        _require(len(g.target) > 0, "guide.target is required for analytic-quadratic", "guide.target")
    if g.mask:
        _require(len(g.mask) == len(g.target), "guide.mask must match guide.target in length", "guide.mask")
    _require(0 <= p.warm_start_steps <= m.n_steps, f"planner.warm_start_steps must lie in 0..{m.n_steps}",
             "planner.warm_start_steps")
    _require(p.episodes >= 0, "planner.episodes must be >= 0", "planner.episodes")
    _require(p.max_episode_steps >= 0, "planner.max_episode_steps must be >= 0", "planner.max_episode_steps")
    _require(p.goal_tolerance > 0, "planner.goal_tolerance must be positive", "planner.goal_tolerance")


def loads(text: str) -> RunConfig:
    try:
        raw = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"config is not valid TOML: {exc}") from exc
    return from_dict(raw)


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}", path=str(path)) from exc
    return loads(text)


def dumps(cfg: RunConfig) -> str:
    """Serialize back to TOML (round-trips through :func:`loads`)."""
    d = cfg.to_dict()
    lines = [f"seed = {d.pop('seed')}", ""]
    for section, items in d.items():
        lines.append(f"[{section}]")
        for key, value in items.items():
            lines.append(f"{key} = {_toml_value(value)}")
        lines.append("")
    return "\n".join(lines)


def _toml_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return json.dumps(value)
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, list):
        return "[" + ", ".join(_toml_value(v) for v in value) + "]"
    return str(value)
