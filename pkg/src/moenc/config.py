"""YAML config files checked against dataclass schemas.

Every key is validated before any dataclass is built, so a typo fails with
the file, line and dotted key rather than a bare ``TypeError``.
"""
from __future__ import annotations

import dataclasses
from pathlib import Path

import yaml

from moenc.errors import ConfigurationError
from moenc.flops import LlmSpec, ScenarioSpec
from moenc.objective import LossWeights
from moenc.trainer import TrainConfig
from moenc.workload import WorkloadConfig

# nested dataclass fields; everything else is a scalar checked against its default's type
_NESTED = {
    (TrainConfig, "weights"): LossWeights,
    (TrainConfig, "workload"): WorkloadConfig,
}
_SCALARS = (bool, int, float, str)


def _schema(cls) -> dict:
    out = {}
    for f in dataclasses.fields(cls):
        sub = _NESTED.get((cls, f.name))
        if sub is not None:
            out[f.name] = _schema(sub)
            continue
        default = f.default if f.default is not dataclasses.MISSING else None
        out[f.name] = type(default) if isinstance(default, _SCALARS) else object
    return out


TRAIN_SCHEMA = {**_schema(TrainConfig), "grid": list}
FLOPS_SCHEMA = {"scenario": {**_schema(ScenarioSpec), "encoders": list}, "llm": _schema(LlmSpec), "zoo": str}


def _type_ok(expected, value) -> bool:
    if expected is object or (expected is str and value is None):
        return True
    if expected is float:
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    if expected is int:
        return isinstance(value, int) and not isinstance(value, bool)
    return isinstance(value, expected)


def _check(node, value, schema: dict, source: str, prefix: str = "") -> None:
    if not isinstance(node, yaml.MappingNode):
        raise ConfigurationError(f"{source}:{node.start_mark.line + 1}: expected a mapping at '{prefix or '<root>'}'")
    for key_node, val_node in node.value:
        key = key_node.value
        line = key_node.start_mark.line + 1
        dotted = f"{prefix}{key}"
        if key not in schema:
            raise ConfigurationError(
                f"{source}:{line}: unknown key '{dotted}' (allowed: {', '.join(sorted(schema))})"
            )
        expected = schema[key]
        if isinstance(expected, dict):
            _check(val_node, value[key], expected, source, dotted + ".")
        elif not _type_ok(expected, value[key]):
            raise ConfigurationError(
                f"{source}:{line}: key '{dotted}' expects {expected.__name__}, got {value[key]!r}"
            )


def read_config(path, schema: dict) -> dict:
    """Parse ``path`` and validate it against ``schema``; an empty file gives ``{}``."""
    source = str(path)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigurationError(f"cannot read config {source}: {exc.strerror}") from None
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        value = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        where = f":{mark.line + 1}" if mark else ""
        raise ConfigurationError(f"{source}{where}: malformed config ({getattr(exc, 'problem', exc)})") from None
    if node is None:
        return {}
    _check(node, value, schema, source)
    return value


def train_config_from(data: dict, **overrides) -> TrainConfig:
    data = {k: v for k, v in data.items() if k != "grid"}
    data.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return TrainConfig(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"invalid training config: {exc}") from None


def sweep_grid_from(data: dict) -> list[LossWeights] | None:
    grid = data.get("grid")
    if grid is None:
        return None
    allowed = {f.name for f in dataclasses.fields(LossWeights)}
    out = []
    for i, row in enumerate(grid):
        if not isinstance(row, dict) or set(row) - allowed:
            raise ConfigurationError(f"grid[{i}]: expected a mapping with keys from {sorted(allowed)}, got {row!r}")
        out.append(LossWeights(**row))
    return out
