"""Scenario files: sectioned ``key = value`` text with bracketed arrays.

Scalars are written with the shortest decimal string that round-trips
(``repr``), arrays as JSON-style brackets, so parse -> serialize -> parse
reproduces the configuration exactly.

Example::

    [scenario]
    plant = boost
    controller = delayed_stabilizer
    delta = 0.0001
    horizon = 3.0

    [nodes]
    C = [0.0068, 0.0068]
"""

from __future__ import annotations

import configparser
import json
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np

PLANTS = ("boost", "buck", "lph")
CONTROLLERS = {
    "boost": ("delayed_stabilizer", "stabilizer"),
    "buck": ("consensus",),
    "lph": ("stabilizer", "consensus"),
}


class ConfigError(ValueError):
    pass


def _parse_value(text: str):
    text = text.strip()
    if text.startswith("["):
        try:
            return json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed array {text!r}: {exc}") from exc
    low = text.lower()
    if low in ("true", "false"):
        return low == "true"
    for conv in (int, float):
        try:
            return conv(text)
        except ValueError:
            pass
    return text


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (list, tuple)):
        return "[" + ", ".join(_format_value(v) for v in value) + "]"
    return str(value)


@dataclass
class Scenario:
    sections: dict[str, dict[str, object]]
    path: Path | None = field(default=None, compare=False)

    def get(self, section: str, key: str, default=None):
        return self.sections.get(section, {}).get(key, default)

    def require(self, section: str, key: str):
        try:
            return self.sections[section][key]
        except KeyError:
            raise ConfigError(f"missing [{section}] {key}") from None

    def array(self, section: str, key: str, default=None) -> np.ndarray:
        val = self.get(section, key, default)
        if val is None:
            raise ConfigError(f"missing [{section}] {key}")
        try:
            return np.asarray(val, dtype=float)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {key} is not numeric") from exc

    def number(self, section: str, key: str, default=None) -> float:
        val = self.get(section, key, default)
        if isinstance(val, bool) or not isinstance(val, (int, float)):
            raise ConfigError(f"[{section}] {key} must be a number, got {val!r}")
        return float(val)

    @property
    def plant(self) -> str:
        return str(self.require("scenario", "plant"))

    @property
    def controller(self) -> str:
        return str(self.require("scenario", "controller"))

    @property
    def delta(self) -> float:
        return self.number("scenario", "delta")

    @property
    def horizon(self) -> float:
        return self.number("scenario", "horizon")

    @property
    def seed(self) -> int:
        return int(self.number("scenario", "seed", 0))

    @property
    def n_steps(self) -> int:
        return int(round(self.horizon / self.delta))

    def override(self, **values) -> "Scenario":
        """Copy with ``[scenario]`` entries replaced (``None`` values are ignored)."""
        sections = {k: dict(v) for k, v in self.sections.items()}
        for key, val in values.items():
            if val is not None:
                sections["scenario"][key] = val
        out = Scenario(sections, self.path)
        out.validate()
        return out

    def validate(self) -> None:
        if self.plant not in PLANTS:
            raise ConfigError(f"unknown plant {self.plant!r}")
        if self.controller not in CONTROLLERS[self.plant]:
            raise ConfigError(f"controller {self.controller!r} not available for plant {self.plant!r}")
        d, h = self.delta, self.horizon
        if not (math.isfinite(d) and d > 0):
            raise ConfigError("delta must be positive")
        if not (math.isfinite(h) and h >= d):
            raise ConfigError("horizon must be at least delta")

    def dumps(self) -> str:
        lines = []
        for name, entries in self.sections.items():
            lines.append(f"[{name}]")
            lines.extend(f"{k} = {_format_value(v)}" for k, v in entries.items())
            lines.append("")
        return "\n".join(lines)

    def save(self, path) -> None:
        Path(path).write_text(self.dumps())


def loads(text: str, path: Path | None = None) -> Scenario:
    parser = configparser.ConfigParser(interpolation=None, comment_prefixes=("#", ";"),
                                       inline_comment_prefixes=("#",))
    parser.optionxform = str
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from exc
    sections = {name: {k: _parse_value(v) for k, v in parser[name].items()} for name in parser.sections()}
    scn = Scenario(sections, path)
    scn.validate()
    return scn


def load(path) -> Scenario:
    p = Path(path)
    if not p.is_file():
        data = resources.files("krasovskii") / "data"
        for name in (p.name, p.name + ".scenario"):
            if (data / name).is_file():
                return loads((data / name).read_text(), p)
        raise ConfigError(f"scenario file {path} not found")
    return loads(p.read_text(), p)


def bundled(name: str) -> Scenario:
    """Load one of the scenarios shipped with the package (``boost4``, ``buck4``, ``lph_random``)."""
    return load(name if name.endswith(".scenario") else name + ".scenario")
