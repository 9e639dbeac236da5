"""Run configuration files: ``[section]`` headers, ``key = value`` lines, ``#`` comments.

Sections are ``synth``, ``train``, ``model``, ``weights`` and ``paths``. Every
key must be a known field; values are coerced to the field's type. Tuples are
comma-separated, booleans are ``true``/``false`` and ``none`` clears an
optional integer. :func:`dump` writes the fully resolved configuration back in
the same grammar, so any run can be replayed from its emitted file.
"""

from __future__ import annotations

import dataclasses
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .net import ModelConfig
from .objectives import LossWeights
from .synth import SynthesisConfig
from .trainer import TrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class Paths:
    corpus: str = ""
    out: str = ""
    checkpoint: str = ""


@dataclass
class SynthRun:
    count: int = 16
    workers: int = 1


@dataclass
class RunConfig:
    synth: SynthesisConfig = field(default_factory=SynthesisConfig)
    synth_run: SynthRun = field(default_factory=SynthRun)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: Paths = field(default_factory=Paths)

    def validate(self) -> None:
        try:
            self.synth.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if self.synth_run.count < 0:
            raise ConfigError(f"synth.count must be >= 0, got {self.synth_run.count}")
        if self.synth_run.workers < 1:
            raise ConfigError(f"synth.workers must be >= 1, got {self.synth_run.workers}")


# train keys that live in other sections
_TRAIN_NESTED = {"model", "weights", "corpus"}


def _targets(run: RunConfig) -> dict[str, list]:
    return {
        "synth": [run.synth, run.synth_run],
        "train": [run.train],
        "model": [run.train.model],
        "weights": [run.train.weights],
        "paths": [run.paths],
    }


def _keys(obj, section: str) -> list[str]:
    names = [f.name for f in dataclasses.fields(obj)]
    if section == "train":
        names = [n for n in names if n not in _TRAIN_NESTED]
    return names


def _coerce(text: str, hint, where: str):
    text = text.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    try:
        if origin in (typing.Union, types.UnionType) and type(None) in args:
            if text.lower() == "none":
                return None
            return _coerce(text, next(a for a in args if a is not type(None)), where)
        if origin is tuple:
            parts = [p for p in text.split(",") if p.strip()]
            if len(args) == 2 and args[1] is Ellipsis:
                return tuple(_coerce(p, args[0], where) for p in parts)
            if len(parts) != len(args):
                raise ConfigError(f"{where}: expected {len(args)} comma-separated values, got {text!r}")
            return tuple(_coerce(p, a, where) for p, a in zip(parts, args))
        if hint is bool:
            low = text.lower()
            if low not in ("true", "false"):
                raise ConfigError(f"{where}: expected true or false, got {text!r}")
            return low == "true"
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"{where}: cannot parse {text!r} as {getattr(hint, '__name__', hint)}") from None
    raise ConfigError(f"{where}: unsupported field type {hint}")


def _set(run: RunConfig, section: str, key: str, text: str, where: str) -> RunConfig:
    targets = _targets(run)
    if section not in targets:
        raise ConfigError(f"{where}: unknown section [{section}]; expected one of {sorted(targets)}")
    for obj in targets[section]:
        if key in _keys(obj, section):
            hint = typing.get_type_hints(type(obj))[key]
            value = _coerce(text, hint, f"{where}: {section}.{key}")
            _assign(run, obj, key, value)
            return run
    known = sorted(k for obj in targets[section] for k in _keys(obj, section))
    raise ConfigError(f"{where}: unknown key {key!r} in [{section}]; known keys: {', '.join(known)}")


def _assign(run: RunConfig, obj, key: str, value) -> None:
    # frozen dataclasses are rebuilt and re-attached
    params = getattr(type(obj), "__dataclass_params__", None)
    if params is not None and params.frozen:
        try:
            new = dataclasses.replace(obj, **{key: value})
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if obj is run.train.model:
            run.train.model = new
        else:
            run.train.weights = new
        return
    setattr(obj, key, value)


def parse(text: str, run: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    """Apply a configuration text on top of ``run`` (defaults when omitted)."""
    run = run or RunConfig()
    section = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        where = f"{source}:{lineno}"
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("["):
            if not line.endswith("]"):
                raise ConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip()
            if section not in _targets(run):
                raise ConfigError(f"{where}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if section is None:
            raise ConfigError(f"{where}: key {key!r} appears before any [section] header")
        _set(run, section, key, value, where)
    return run


def load(path, run: RunConfig | None = None) -> RunConfig:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from None
    return parse(text, run, str(path))


def apply_overrides(run: RunConfig, items) -> RunConfig:
    """Apply ``section.key=value`` strings, as given to ``--set``."""
    for item in items:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigError(f"override {item!r} must look like section.key=value")
        dotted, value = item.split("=", 1)
        section, key = dotted.strip().split(".", 1)
        _set(run, section, key, value, "--set")
    return run


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ", ".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def dump(run: RunConfig) -> str:
    lines = []
    for section, objs in _targets(run).items():
        lines.append(f"[{section}]")
        for obj in objs:
            for key in _keys(obj, section):
                lines.append(f"{key} = {_fmt(getattr(obj, key))}")
        lines.append("")
    return "\n".join(lines)
