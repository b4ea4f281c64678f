"""Experiment configuration: a flat-section INI file, overridable by flags.

Sections map one-to-one onto dataclasses (``[env]``, ``[dha]``, ``[ppo]``,
``[run]``). Tuples are written comma-separated. Unknown sections or keys are
rejected so typos cannot silently fall back to defaults.
"""

from __future__ import annotations

import configparser
import io
from dataclasses import dataclass, field, fields, replace

from dhal.dha import DhaConfig
from dhal.errors import ConfigError
from dhal.mcppo.train import PpoConfig


@dataclass
class EnvSection:
    name: str = "cart"
    episodes: int = 200
    steps: int = 100
    period: float = 4.0
    bound: float = 1.0  # action bound h for every action dimension


@dataclass
class RunSection:
    seed: int = 0
    out_dir: str = "runs"
    dha_epochs: int = 50
    iterations: int = 300
    checkpoint_every: int = 50


@dataclass
class ExperimentConfig:
    env: EnvSection = field(default_factory=EnvSection)
    dha: DhaConfig = field(default_factory=DhaConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    run: RunSection = field(default_factory=RunSection)


SECTIONS = ("env", "dha", "ppo", "run")

PRESETS = {
    "default": {},
    "gaussian": {"ppo": {"policy": "gaussian"}},
    "single-transfer": {"ppo": {"critics": "single-transfer"}},
    "single-raw": {"ppo": {"critics": "single-raw"}},
}


def _format(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse(raw: str, default, key: str):
    try:
        if isinstance(default, bool):
            low = raw.strip().lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            items = [s.strip() for s in raw.split(",") if s.strip()]
            kind = type(default[0]) if default else float
            return tuple(kind(s) for s in items)
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {type(default).__name__}") from None


def serialize(cfg: ExperimentConfig) -> str:
    parser = configparser.ConfigParser()
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        parser[sec] = {f.name: _format(getattr(obj, f.name)) for f in fields(obj)}
    buf = io.StringIO()
    parser.write(buf)
    return buf.getvalue()


def apply_overrides(cfg: ExperimentConfig, overrides: dict) -> ExperimentConfig:
    """``overrides`` maps section -> {key: value}; values may be strings or typed."""
    sections = {}
    for sec in SECTIONS:
        obj = getattr(cfg, sec)
        given = dict(overrides.get(sec, {}))
        known = {f.name for f in fields(obj)}
        unknown = sorted(set(given) - known)
        if unknown:
            raise ConfigError(f"unknown key(s) in [{sec}]: {', '.join(unknown)}")
        typed = {}
        for key, val in given.items():
            default = getattr(obj, key)
            typed[key] = _parse(val, default, f"{sec}.{key}") if isinstance(val, str) else val
        try:
            sections[sec] = replace(obj, **typed)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid [{sec}] settings: {exc}") from exc
    extra = sorted(set(overrides) - set(SECTIONS))
    if extra:
        raise ConfigError(f"unknown section(s): {', '.join(extra)}")
    return ExperimentConfig(**sections)


def parse(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"malformed config: {exc}") from exc
    overrides = {sec: dict(parser[sec]) for sec in parser.sections()}
    return apply_overrides(base or ExperimentConfig(), overrides)


def load(path) -> ExperimentConfig:
    try:
        with open(path) as fh:
            return parse(fh.read())
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc


def preset(name: str) -> ExperimentConfig:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return apply_overrides(ExperimentConfig(), PRESETS[name])
