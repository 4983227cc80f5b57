"""Plain-text ``section.key = value`` run configuration.

One pair per line, ``#`` starts a comment. Every key must name a field of one
of the section dataclasses below; values are parsed to the type of that
field's default. Command-line overrides are applied after the file.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path

from .mae import PretrainConfig
from .tasks.segmentation import SegHeadConfig
from .tasks.unmixing import UnmixConfig


class ConfigError(ValueError):
    pass


@dataclass
class SynthConfig:
    h: int = 64
    w: int = 64
    c: int = 100
    ca: int = 0
    noise: float = 0.0
    seed: int = 0


@dataclass
class BenchConfig:
    mech: str = "ssa,full"
    nlist: tuple = (64, 256, 1024, 4096)
    dp: int = 64
    np: int = 8
    repeats: int = 5
    seed: int = 0


@dataclass
class InspectConfig:
    depth: int = 8
    dim: int = 64
    heads: int = 4
    patch: int = 8
    n_spec: int = 100
    n_points: int = 8
    seed: int = 0


SECTIONS = {
    "synth": SynthConfig,
    "pretrain": PretrainConfig,
    "unmix": UnmixConfig,
    "seg": SegHeadConfig,
    "bench": BenchConfig,
    "inspect": InspectConfig,
}


def _parse_value(raw: str, default, key: str):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        if isinstance(default, tuple):
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key} (expected {type(default).__name__})") from None
    return raw


def _format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _defaults(section: str) -> dict:
    return {f.name: f.default for f in dataclasses.fields(SECTIONS[section])}


def parse_lines(lines, origin: str = "<config>") -> dict[str, str]:
    pairs = {}
    for lineno, line in enumerate(lines, 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{origin}:{lineno}: expected key = value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


class RunConfig:
    """Typed values for every section, with file and override provenance resolved."""

    def __init__(self, pairs: dict[str, str] | None = None):
        self.values = {name: _defaults(name) for name in SECTIONS}
        self.explicit: set[str] = set()
        for key, raw in (pairs or {}).items():
            self.set(key, raw)

    def set(self, key: str, raw) -> None:
        section, _, name = key.partition(".")
        if section not in SECTIONS or name not in self.values[section]:
            raise ConfigError(f"unknown config key {key!r}")
        default = _defaults(section)[name]
        self.values[section][name] = _parse_value(raw, default, key) if isinstance(raw, str) else raw
        self.explicit.add(key)

    @classmethod
    def load(cls, path=None, overrides: dict | None = None) -> "RunConfig":
        pairs = {}
        if path is not None:
            path = Path(path)
            try:
                text = path.read_text()
            except OSError as exc:
                raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
            pairs = parse_lines(text.splitlines(), str(path))
        cfg = cls(pairs)
        for key, value in (overrides or {}).items():
            if value is not None:
                cfg.set(key, value)
        return cfg

    def get(self, key: str):
        section, _, name = key.partition(".")
        return self.values[section][name]

    def section(self, name: str):
        try:
            return SECTIONS[name](**self.values[name])
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid {name} config: {exc}") from None

    def echo(self, *sections: str) -> list[str]:
        """``section.key = value`` lines, parseable by :func:`parse_lines`."""
        out = []
        for name in sections or tuple(SECTIONS):
            for key, value in self.values[name].items():
                out.append(f"{name}.{key} = {_format_value(value)}")
        return out
