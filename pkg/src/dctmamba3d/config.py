"""Strict JSON run configuration.

A run document looks like::

    {"data": "scene.hsic", "output_dir": "runs/a", "seed": 0, "train_fraction": 0.1,
     "model": {"mamba": {"d_model": 16}, "optim": {"epochs": 20}}}

Every key except ``data`` has a default. Unknown keys and wrongly typed values
are rejected with the JSON pointer of the offending key.
"""
from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .model import ModelConfig


class ConfigError(ValueError):
    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer or '/'}: {message}")
        self.pointer = pointer


@dataclass
class RunConfig:
    data: str
    output_dir: str = "run"
    seed: int = 0
    train_fraction: float = 0.10
    model: ModelConfig = field(default_factory=ModelConfig)


def _pointer_token(key: str) -> str:
    return key.replace("~", "~0").replace("/", "~1")


def _default_of(f: dataclasses.Field):
    if f.default is not dataclasses.MISSING:
        return f.default
    if f.default_factory is not dataclasses.MISSING:
        return f.default_factory()
    return dataclasses.MISSING


def _check_value(value, default, pointer: str):
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, tuple):
        ok = isinstance(value, list) and all(isinstance(v, int) and not isinstance(v, bool) for v in value)
    else:
        ok = True
    if not ok:
        raise ConfigError(pointer, f"expected {type(default).__name__}, got {json.dumps(value)}")


def _validate(doc, cls, pointer: str) -> dict:
    """Check ``doc`` against dataclass ``cls``; returns constructor kwargs."""
    if not isinstance(doc, dict):
        raise ConfigError(pointer, f"expected an object, got {json.dumps(doc)}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    for key in doc:
        if key not in fields:
            raise ConfigError(f"{pointer}/{_pointer_token(key)}", f"unknown key {key!r}")
    kwargs = {}
    for name, f in fields.items():
        sub = f"{pointer}/{_pointer_token(name)}"
        default = _default_of(f)
        if name not in doc:
            if default is dataclasses.MISSING:
                raise ConfigError(sub, "required key is missing")
            continue
        value = doc[name]
        if dataclasses.is_dataclass(default):
            nested = _validate(value, type(default), sub)
            try:
                kwargs[name] = type(default)(**nested)
            except ValueError as exc:
                raise ConfigError(sub, str(exc)) from exc
        else:
            if default is not dataclasses.MISSING:
                _check_value(value, default, sub)
            elif not isinstance(value, str):
                raise ConfigError(sub, f"expected str, got {json.dumps(value)}")
            kwargs[name] = tuple(value) if isinstance(default, tuple) else value
    return kwargs


def parse_run_config(doc) -> RunConfig:
    kwargs = _validate(doc, RunConfig, "")
    run = RunConfig(**kwargs)
    if not 0 < run.train_fraction <= 1:
        raise ConfigError("/train_fraction", f"must be in (0, 1], got {run.train_fraction}")
    optim_doc = doc.get("model", {}).get("optim", {}) if isinstance(doc.get("model"), dict) else {}
    if "seed" in optim_doc and optim_doc["seed"] != run.seed:
        raise ConfigError("/model/optim/seed", "conflicts with the top-level seed; set only /seed")
    # the top-level seed drives both the split and the model
    run.model.optim.seed = run.seed
    return run


def load_run_config(path) -> RunConfig:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError("", f"invalid JSON: {exc}") from exc
    run = parse_run_config(doc)
    base = Path(path).resolve().parent
    # relative paths are relative to the config file
    if not Path(run.data).is_absolute():
        run.data = str(base / run.data)
    if not Path(run.output_dir).is_absolute():
        run.output_dir = str(base / run.output_dir)
    return run


def run_config_to_dict(run: RunConfig) -> dict:
    return {"data": run.data, "output_dir": run.output_dir, "seed": run.seed,
            "train_fraction": run.train_fraction, "model": run.model.to_dict()}
