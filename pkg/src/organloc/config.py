"""Flat ``key = value`` configuration covering every tunable in the pipeline.

Keys are dotted ``section.field`` names (``env.alpha``, ``train.epochs``,
``phantom.noise_std``, ``net.hidden``) plus the top-level ``seed``,
``data.n_train`` and ``data.n_test``. Lines starting with ``#`` are comments.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Iterable, Mapping

from organloc.environment import EnvConfig
from organloc.geometry import Spacing
from organloc.phantom import PhantomSpec
from organloc.trainer import TrainConfig

_NET_FIELDS = {"hidden", "precision"}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class Config:
    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    n_train: int = 16
    n_test: int = 8
    seed: int = 0

    def items(self) -> list[tuple[str, str]]:
        """Every key with its effective value, formatted as it would be written."""
        out = [("seed", str(self.seed)), ("data.n_train", str(self.n_train)), ("data.n_test", str(self.n_test))]
        for f in dataclasses.fields(self.env):
            out.append((f"env.{f.name}", _format(getattr(self.env, f.name))))
        for f in dataclasses.fields(self.train):
            if f.name != "seed":
                section = "net" if f.name in _NET_FIELDS else "train"
                out.append((f"{section}.{f.name}", _format(getattr(self.train, f.name))))
        for f in dataclasses.fields(self.phantom):
            if f.name != "seed":
                out.append((f"phantom.{f.name}", _format(getattr(self.phantom, f.name))))
        return out

    def dump(self) -> str:
        return "\n".join(f"{k} = {v}" for k, v in self.items()) + "\n"


def _format(v: Any) -> str:
    if isinstance(v, Spacing):
        return ",".join(repr(s) for s in v.as_tuple())
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if v is None:
        return "none"
    return str(v)


def _parse_like(default: Any, text: str, key: str) -> Any:
    text = text.strip()
    try:
        if isinstance(default, bool):
            if text.lower() in ("1", "true", "yes"):
                return True
            if text.lower() in ("0", "false", "no"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float) or default is None:
            return None if text.lower() == "none" else float(text)
        if isinstance(default, str):
            return text
        if isinstance(default, Spacing):
            parts = [float(p) for p in text.split(",")]
            return Spacing(*(parts * 3 if len(parts) == 1 else parts))
        if isinstance(default, tuple):
            parts = [p for p in text.split(",") if p.strip()]
            conv = type(default[0]) if default else float
            vals = tuple(conv(p) for p in parts)
            if key == "phantom.dims" and len(vals) == 1:
                vals = vals * 3
            return vals
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: cannot parse {text!r}: {exc}") from None
    raise ConfigError(f"{key}: unsupported value type")


def _defaults() -> dict[str, Any]:
    d: dict[str, Any] = {"seed": 0, "data.n_train": 16, "data.n_test": 8}
    for f in dataclasses.fields(EnvConfig):
        d[f"env.{f.name}"] = getattr(EnvConfig(), f.name)
    for f in dataclasses.fields(TrainConfig):
        if f.name != "seed":
            section = "net" if f.name in _NET_FIELDS else "train"
            d[f"{section}.{f.name}"] = getattr(TrainConfig(), f.name)
    for f in dataclasses.fields(PhantomSpec):
        if f.name != "seed":
            d[f"phantom.{f.name}"] = getattr(PhantomSpec(), f.name)
    return d


KNOWN_KEYS = tuple(_defaults())


def parse_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        values[key] = value
    return values


def _build(parsed: Mapping[str, Any]) -> Config:
    sec: dict[str, dict[str, Any]] = {"env": {}, "train": {}, "phantom": {}}
    for key, v in parsed.items():
        if key in ("seed", "data.n_train", "data.n_test"):
            continue
        section, name = key.split(".", 1)
        sec["train" if section == "net" else section][name] = v
    seed = parsed.get("seed", 0)
    return Config(
        env=EnvConfig(**sec["env"]),
        train=TrainConfig(seed=seed, **sec["train"]),
        phantom=PhantomSpec(**sec["phantom"]),
        n_train=parsed.get("data.n_train", 16),
        n_test=parsed.get("data.n_test", 8),
        seed=seed,
    )


def build(overrides: Mapping[str, str]) -> Config:
    """Resolve string overrides on top of the defaults; unknown keys are rejected."""
    defaults = _defaults()
    parsed: dict[str, Any] = {}
    for key, text in overrides.items():
        if key not in defaults:
            raise ConfigError(f"unknown config key {key!r}")
        parsed[key] = _parse_like(defaults[key], text, key)
    if not 0 <= parsed.get("seed", 0) < 2**64:
        raise ConfigError("seed: must be an unsigned 64-bit integer")
    for key in ("data.n_train", "data.n_test"):
        if key in parsed and parsed[key] < 1:
            raise ConfigError(f"{key}: must be at least 1")
    try:
        return _build(parsed)
    except (TypeError, ValueError) as exc:
        # pin the message on the first key that fails on its own
        for key, v in parsed.items():
            try:
                _build({key: v})
            except (TypeError, ValueError) as single:
                raise ConfigError(f"{key}: {single}") from None
        raise ConfigError(str(exc)) from None


def load(path: str | Path | None = None, overrides: Mapping[str, str] | None = None) -> Config:
    values: dict[str, str] = {}
    if path is not None:
        values.update(parse_text(Path(path).read_text(encoding="utf-8"), str(path)))
    values.update(overrides or {})
    return build(values)


def parse_assignments(items: Iterable[str]) -> dict[str, str]:
    out = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        k, v = item.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def with_seed(cfg: Config, seed: int) -> Config:
    return replace(cfg, seed=seed, train=replace(cfg.train, seed=seed))
