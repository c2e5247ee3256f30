"""Declarative run configuration: one TOML document, sections per stage.

Unknown sections or keys are rejected so a typo cannot silently fall back
to a default. Every run writes the fully resolved document (plus the
toolkit version) next to its outputs, and the resolved file can be fed
back to reproduce the run bit for bit in single-threaded mode.
"""

from __future__ import annotations

import copy
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

DEFAULTS = {
    "run": {
        "seed": 0,
        "threads": 1,
        "out_dir": "runs/latest",
    },
    "data": {
        "source": "demo",            # "demo" or "snapshot-csv"
        "paths": [],                  # per-asset CSVs when source = snapshot-csv
        "assets": [],                 # asset names; inferred from paths/demos when empty
        "resolution": 300,
        "impute": "locf",            # "locf" or "mean"
        "demo_steps": 10_000,
        "demo_assets": 4,
        "demo_gap_rate": 0.005,
    },
    "preprocess": {
        "k": 1,
        "alpha": 0.001,
        "variant": "mm",
        "T": 100,
        "stride": 1,
        "train_stride": 1,            # extra subsampling of training windows only
        "window_days": 5,
        "split": [0.7, 0.15, 0.15],
        "mode": "per-asset",          # "per-asset", "combined", "holdout"
        "holdout": "",
    },
    "classifier": {
        "fcnn_filters": 16,
        "res_blocks": 2,
        "inception_channels": 32,
        "gru_hidden": 64,
        "init_scheme": "glorot",
        "lr": 0.01,
        "epsilon": 1.0,
        "batch": 64,
        "patience": 20,
        "l2_lambda": 1e-4,
        "monitor": "accuracy",
        "max_epochs": 200,
    },
    "allocator": {
        "hidden": 64,
        "lr": 0.001,
        "batch": 64,
        "epochs": 40,
        "period": 10,
    },
    "backtest": {
        "strategies": ["lstm-sr", "lstm-mv", "markowitz-sr", "markowitz-mv", "equal"],
        "markowitz_window": 50,
        "markowitz_restarts": 50,
        "recursion": "gross",
    },
}


class ConfigError(ValueError):
    pass


def resolve(doc=None):
    """Merge a parsed TOML document over the defaults, rejecting unknowns."""
    cfg = copy.deepcopy(DEFAULTS)
    if not doc:
        return cfg
    for section, values in doc.items():
        if section not in cfg:
            raise ConfigError(f"unknown config section [{section}]; "
                              f"known: {sorted(cfg)}")
        if not isinstance(values, dict):
            raise ConfigError(f"[{section}] must be a table of keys")
        for key, value in values.items():
            if key not in cfg[section]:
                raise ConfigError(f"unknown key {key!r} in [{section}]; "
                                  f"known: {sorted(cfg[section])}")
            default = cfg[section][key]
            if isinstance(default, bool) != isinstance(value, bool):
                raise ConfigError(f"[{section}] {key} expects {type(default).__name__}")
            if isinstance(default, (int, float)) and not isinstance(value, (int, float)):
                raise ConfigError(f"[{section}] {key} expects a number")
            if isinstance(default, str) and not isinstance(value, str):
                raise ConfigError(f"[{section}] {key} expects a string")
            if isinstance(default, list) and not isinstance(value, list):
                raise ConfigError(f"[{section}] {key} expects a list")
            cfg[section][key] = value
    return cfg


def load(path):
    with open(path, "rb") as fh:
        doc = tomllib.load(fh)
    return resolve(doc)


def _toml_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return repr(v)
    if isinstance(v, str):
        return '"' + v.replace("\\", "\\\\").replace('"', '\\"') + '"'
    if isinstance(v, (list, tuple)):
        return "[" + ", ".join(_toml_value(x) for x in v) + "]"
    raise ConfigError(f"cannot serialize {type(v).__name__} to TOML")


def dump(cfg, version=None):
    """Resolved config as TOML text; stable ordering for bit-exact reruns."""
    lines = []
    if version is not None:
        lines.append(f'# lobfolio {version}')
    for section in DEFAULTS:
        lines.append(f"[{section}]")
        for key in DEFAULTS[section]:
            lines.append(f"{key} = {_toml_value(cfg[section][key])}")
        lines.append("")
    return "\n".join(lines)


def write_resolved(cfg, out_dir, version=None):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "resolved.toml"
    path.write_text(dump(cfg, version=version))
    return path
