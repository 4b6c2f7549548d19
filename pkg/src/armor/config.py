"""Run configuration: YAML/JSON file plus ``key=value`` overrides."""

from __future__ import annotations

import dataclasses
import enum
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import yaml

from armor.errors import ConfigError
from armor.io import digest

DEFAULT_CONF_HINT = (
    "- Each candidate's conf is the historical precision of its matched rule on conflicting reactions; "
    "treat it as supporting evidence, not as the only criterion.\n"
)
DEFAULT_TIEBREAK = "- If two candidates remain equally convincing, prefer the one with the higher conf.\n"


class Ablation(str, enum.Enum):
    NONE = "none"
    WITHOUT_CONFLICT = "without_conflict"
    WITHOUT_UTILITY = "without_utility"
    WITHOUT_HIERARCHY = "without_hierarchy"


# file key -> attribute
_ALIASES = {"M": "m", "N_schedule": "n_schedule", "L": "top_l", "K": "top_k"}


@dataclass
class ArmorConfig:
    rho: float = 25.0
    m: int = 100
    n_schedule: tuple[int, ...] = (5, 10, 25, 45)
    tau1: float = 1.0
    tau2: float = 1.0
    tau3: float = 0.5
    top_l: int = 5
    top_k: int = 8
    seed: int = 0
    ablation: Ablation = Ablation.NONE
    fp_width: int = 2048
    fp_nmax: int = 3
    workers: int = 1
    llm_max_chars: int | None = 20000
    conf_hint: str = DEFAULT_CONF_HINT
    tiebreak: str = DEFAULT_TIEBREAK
    backend: dict[str, Any] = field(default_factory=lambda: {"kind": "scripted", "scenario": "oracle"})
    paths: dict[str, str] = field(default_factory=dict)
    base_dir: str = field(default=".", compare=False)

    def __post_init__(self) -> None:
        self.ablation = Ablation(self.ablation)
        self.n_schedule = tuple(int(n) for n in self.n_schedule)
        if not 0 < self.rho < 100:
            raise ConfigError(f"rho must lie in (0, 100), got {self.rho}")
        for name in ("tau1", "tau2", "tau3"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.m < 1 or not self.n_schedule or min(self.n_schedule) < 1:
            raise ConfigError("M and every N in N_schedule must be positive")
        if self.top_l < 1 or self.top_k < 1:
            raise ConfigError("L and K must be positive")
        if self.fp_width % 8:
            raise ConfigError("fp_width must be a multiple of 8")

    def path(self, key: str, default: str | None = None) -> Path:
        raw = self.paths.get(key, default)
        if raw is None:
            raise ConfigError(f"paths.{key} is not configured")
        p = Path(raw)
        return p if p.is_absolute() else Path(self.base_dir) / p

    def to_json(self) -> dict[str, Any]:
        out = {}
        for f in dataclasses.fields(self):
            if f.name == "base_dir":
                continue
            v = getattr(self, f.name)
            out[f.name] = v.value if isinstance(v, enum.Enum) else (list(v) if isinstance(v, tuple) else v)
        return out

    @property
    def digest(self) -> str:
        return digest(self.to_json())

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any], base_dir: str | Path = ".") -> "ArmorConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        kwargs: dict[str, Any] = {}
        for key, value in data.items():
            name = _ALIASES.get(key, key)
            if name not in known or name == "base_dir":
                raise ConfigError(f"unknown config key {key!r}")
            kwargs[name] = value
        try:
            return cls(**kwargs, base_dir=str(base_dir))
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from None


def _parse_value(text: str) -> Any:
    try:
        return yaml.safe_load(text)
    except yaml.YAMLError:
        return text


def apply_overrides(data: dict[str, Any], overrides: Iterable[str]) -> dict[str, Any]:
    """Apply ``a.b=value`` overrides; values are parsed as YAML scalars/lists."""
    data = json.loads(json.dumps(data))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override inside non-mapping key {part!r}")
        node[parts[-1]] = _parse_value(raw)
    return data


def load_config(path: str | Path | None, overrides: Iterable[str] = ()) -> ArmorConfig:
    data: dict[str, Any] = {}
    base = Path(".")
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        try:
            with open(path, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config root must be a mapping")
        base = path.parent
    return ArmorConfig.from_mapping(apply_overrides(data, overrides), base)
