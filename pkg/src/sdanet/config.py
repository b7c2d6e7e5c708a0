"""RunConfig: a key=value text file plus ``--key value`` overrides.

Every field of TrainConfig, PhantomConfig, ShiftConfig (prefixed ``shift_``)
and BenchmarkConfig is addressable. ``task`` and ``seed`` are shared between
the training and phantom configs. Unknown keys are an error.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

from .benchmark.phantoms import PhantomConfig, ShiftConfig
from .benchmark.runner import BenchmarkConfig
from .pipelines import TrainConfig


class ConfigError(ValueError):
    pass


SHIFT_PREFIX = "shift_"


def _fields(cls):
    return {f.name: f for f in dataclasses.fields(cls)}


def _registry():
    reg = {}
    for cls in (TrainConfig, PhantomConfig, BenchmarkConfig):
        for name, f in _fields(cls).items():
            reg.setdefault(name, f)
    for name, f in _fields(ShiftConfig).items():
        reg[SHIFT_PREFIX + name] = f
    return reg


KNOWN_KEYS = _registry()


def _default(f):
    if f.default is not dataclasses.MISSING:
        return f.default
    return f.default_factory()


def _coerce(key, raw, f):
    default = _default(f)
    text = str(raw).strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(text)
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        if isinstance(default, tuple):
            return tuple(float(v) for v in text.strip("()").split(",") if v.strip())
    except ValueError as exc:
        raise ConfigError(f"{key}: cannot parse {text!r} as {type(default).__name__}") from exc
    return text


def parse_config_text(text, source="<config>"):
    values = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{n}: expected key=value, got {line!r}")
        values[key.strip().replace("-", "_")] = value.strip()
    return values


def parse_overrides(tokens):
    """``["--lr", "0.01", "--seed=3"]`` -> {"lr": "0.01", "seed": "3"}."""
    out = {}
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--") or len(tok) == 2:
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
            i += 1
        else:
            if i + 1 >= len(tokens):
                raise ConfigError(f"flag {tok} needs a value")
            value = tokens[i + 1]
            i += 2
        out[key.replace("-", "_")] = value
    return out


@dataclasses.dataclass
class RunConfig:
    values: dict = dataclasses.field(default_factory=dict)
    sources: dict = dataclasses.field(default_factory=dict)

    @classmethod
    def load(cls, path=None, overrides=None):
        raw, sources = {}, {}
        if path is not None:
            p = Path(path)
            if not p.exists():
                raise FileNotFoundError(f"config file {p} does not exist")
            for k, v in parse_config_text(p.read_text(encoding="utf-8"), str(p)).items():
                raw[k], sources[k] = v, str(p)
        for k, v in (overrides or {}).items():
            raw[k], sources[k] = v, "flag"
        unknown = sorted(set(raw) - set(KNOWN_KEYS))
        if unknown:
            raise ConfigError(f"unknown config key {unknown[0]!r}")
        values = {k: _coerce(k, v, KNOWN_KEYS[k]) for k, v in raw.items()}
        return cls(values, sources)

    def get(self, key, default=None):
        return self.values.get(key, default)

    def _build(self, cls, prefix="", **defaults):
        kwargs = dict(defaults)
        for name in _fields(cls):
            if prefix + name in self.values:
                kwargs[name] = self.values[prefix + name]
        return cls(**kwargs)

    def train_config(self, **defaults):
        cfg = self._build(TrainConfig, **defaults)
        cfg.validate()
        return cfg

    def phantom_config(self, **defaults):
        cfg = self._build(PhantomConfig, **defaults)
        cfg.validate()
        return cfg

    def shift_config(self, **defaults):
        cfg = self._build(ShiftConfig, SHIFT_PREFIX, **defaults)
        cfg.validate()
        return cfg

    def benchmark_config(self, **defaults):
        return self._build(BenchmarkConfig, **defaults)

    def echo(self, *configs):
        """Provenance lines: every field of the effective configs, with the
        origin of each explicitly set value."""
        lines = []
        for cfg in configs:
            prefix = SHIFT_PREFIX if isinstance(cfg, ShiftConfig) else ""
            for name, value in dataclasses.asdict(cfg).items():
                key = prefix + name
                origin = self.sources.get(key, "default")
                if isinstance(value, (list, tuple)):
                    value = ",".join(repr(v) for v in value)
                lines.append(f"{key}={value}  # {origin}")
        seen, unique = set(), []
        for line in lines:
            k = line.split("=", 1)[0]
            if k not in seen:
                seen.add(k)
                unique.append(line)
        return unique
