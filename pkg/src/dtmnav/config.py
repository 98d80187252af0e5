"""Scenario configuration files.

The format is TOML restricted to flat ``key = value`` pairs, grouped either
with ``[section]`` headers or dotted keys (``terrain.kind = "flat"``).  Keys
mirror the field names of :class:`~dtmnav.sim.ScenarioConfig` and its nested
dataclasses; unknown keys and ill-typed values are reported with the line
they appear on.
"""
from __future__ import annotations

import dataclasses
import re
import typing
from pathlib import Path

import tomli

from .ekf import NoiseConfig
from .errors import ConfigError
from .pose_solver import SolverConfig
from .sim import FilterConfig, ImuConfig, ScenarioConfig, TerrainSpec, TrajectorySpec, read_matrix_csv

_NESTED = {
    (ScenarioConfig, "terrain"): TerrainSpec,
    (ScenarioConfig, "trajectory"): TrajectorySpec,
    (ScenarioConfig, "imu"): ImuConfig,
    (ScenarioConfig, "filter"): FilterConfig,
    (ScenarioConfig, "solver"): SolverConfig,
    (FilterConfig, "noise"): NoiseConfig,
}


def _line_of(text: str, dotted: str) -> int | None:
    """Best-effort line number of the key ``dotted`` in ``text``."""
    section = ""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        m = re.match(r"^\[([^\]]+)\]$", line)
        if m:
            section = m.group(1).strip()
            continue
        m = re.match(r"^([A-Za-z0-9_.\- ]+?)\s*=", line)
        if not m:
            continue
        key = ".".join(p.strip() for p in m.group(1).split("."))
        full = f"{section}.{key}" if section else key
        if full == dotted:
            return lineno
    return None


def _fail(text, source, dotted, message):
    line = _line_of(text, dotted)
    where = f"{source}:{line}" if line is not None else str(source)
    raise ConfigError(f"{where}: field '{dotted}': {message}")


def _coerce(value, hint, text, source, dotted):
    origin = typing.get_origin(hint)
    if origin is typing.Union:
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        return _coerce(value, args[0], text, source, dotted)
    if hint is bool:
        if not isinstance(value, bool):
            _fail(text, source, dotted, f"expected true/false, got {value!r}")
        return value
    if hint is int:
        if isinstance(value, bool) or not isinstance(value, int):
            _fail(text, source, dotted, f"expected an integer, got {value!r}")
        return value
    if hint is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            _fail(text, source, dotted, f"expected a number, got {value!r}")
        return float(value)
    if hint is str:
        if not isinstance(value, str):
            _fail(text, source, dotted, f"expected a string, got {value!r}")
        return value
    if hint is tuple:
        if not isinstance(value, list):
            _fail(text, source, dotted, f"expected an array, got {value!r}")
        return tuple(tuple(v) if isinstance(v, list) else v for v in value)
    return value


def _build(cls, data: dict, text: str, source, prefix: str = ""):
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in data.items():
        dotted = f"{prefix}{key}"
        if key not in names:
            _fail(text, source, dotted, "unknown field")
        nested = _NESTED.get((cls, key))
        if nested is not None:
            if not isinstance(value, dict):
                _fail(text, source, dotted, "expected a section")
            kwargs[key] = _build(nested, value, text, source, dotted + ".")
        else:
            kwargs[key] = _coerce(value, hints[key], text, source, dotted)
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        # point at the first field the validation message names, if any
        for key in data:
            if re.search(rf"\b{re.escape(key)}\b", str(exc)):
                _fail(text, source, f"{prefix}{key}", str(exc))
        raise ConfigError(f"{source}: section '{prefix.rstrip('.') or 'top level'}': {exc}") from exc


def parse_config(text: str, source="<string>", base_dir: Path | None = None) -> ScenarioConfig:
    """Parse configuration text into a :class:`ScenarioConfig`.

    ``filter.r_file`` may name a 6x6 CSV (as written by ``calibrate-r``); it is
    resolved relative to ``base_dir`` and loaded into ``filter.r_matrix``.
    """
    try:
        data = tomli.loads(text)
    except tomli.TOMLDecodeError as exc:
        raise ConfigError(f"{source}: {exc}") from exc
    filt = data.get("filter")
    if isinstance(filt, dict) and "r_file" in filt:
        r_path = filt.pop("r_file")
        if not isinstance(r_path, str):
            _fail(text, source, "filter.r_file", "expected a string path")
        path = Path(r_path)
        if not path.is_absolute() and base_dir is not None:
            path = base_dir / path
        try:
            filt["r_matrix"] = [float(v) for v in read_matrix_csv(path).ravel()]
        except (OSError, ValueError) as exc:
            _fail(text, source, "filter.r_file", str(exc))
    return _build(ScenarioConfig, data, text, source)


def load_config(path) -> ScenarioConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    return parse_config(text, path, path.parent)
