"""Run configuration: flat dotted keys, YAML file plus command-line overrides."""

from __future__ import annotations

import json
import subprocess
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

MANIFEST_NAME = "manifest.json"

# every accepted key with its default; the default's type drives coercion
DEFAULTS: dict[str, Any] = {
    "data.root": None,
    "data.kind": "recognition",
    "data.test_fraction": 0.2,
    "backbone.weights": None,
    "backbone.input_size": 224,
    "glint.threshold": 250,
    "transfer.alpha": 1.0,
    "transfer.beta": 1.0,
    "transfer.epochs": 200,
    "transfer.input_size": None,
    "train.epochs": 100,
    "train.lr": 1e-5,
    "train.batch": 64,
    "gaze.epochs": 100,
    "gaze.lr": 1e-5,
    "gaze.batch": 128,
    "seed": 42,
    "out_dir": "runs",
}

_TYPES = {
    "data.root": str, "backbone.weights": str, "transfer.input_size": int,
}


class ConfigError(ValueError):
    pass


def _flatten(tree: Mapping, prefix: str = "") -> dict[str, Any]:
    flat = {}
    for key, value in tree.items():
        name = f"{prefix}{key}"
        if isinstance(value, Mapping):
            flat.update(_flatten(value, name + "."))
        else:
            flat[name] = value
    return flat


def _coerce(key: str, value: Any) -> Any:
    if value is None:
        return None
    kind = _TYPES.get(key) or type(DEFAULTS[key])
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind is float:
            return float(value)
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"config key {key!r}: cannot interpret {value!r} as {kind.__name__}") from None


class RunConfig:
    """Effective settings for one run; ``values`` always holds every key."""

    def __init__(self, values: Optional[Mapping[str, Any]] = None):
        self.values = dict(DEFAULTS)
        self.update(values or {})

    def update(self, values: Mapping[str, Any]) -> "RunConfig":
        flat = _flatten(values)
        unknown = sorted(set(flat) - set(DEFAULTS))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        for key, value in flat.items():
            self.values[key] = _coerce(key, value)
        return self

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    @classmethod
    def load(cls, path=None, overrides: Optional[Mapping[str, Any]] = None) -> "RunConfig":
        """File values first, then non-None ``overrides`` (command-line flags)."""
        cfg = cls()
        if path is not None:
            text = Path(path).read_text()
            data = yaml.safe_load(text) or {}
            if not isinstance(data, Mapping):
                raise ConfigError(f"{path}: expected a mapping of dotted keys")
            cfg.update(data)
        if overrides:
            cfg.update({k: v for k, v in overrides.items() if v is not None})
        return cfg

    def snapshot(self) -> dict[str, Any]:
        return dict(sorted(self.values.items()))

    def dump(self) -> str:
        return yaml.safe_dump(self.snapshot(), sort_keys=True)


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_manifest(out_dir, config: RunConfig, command: str, extra: Optional[Mapping] = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    body = {
        "command": command,
        "seed": config["seed"],
        "git_describe": git_describe(Path(__file__).parent),
        "config": config.snapshot(),
    }
    if extra:
        body["outputs"] = dict(extra)
    path = out / MANIFEST_NAME
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
    return path
