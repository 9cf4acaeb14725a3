"""Run configuration: plain-text config files plus flag overrides.

File schema: one `key = value` per line, `#` comments. Values are parsed as
JSON when possible (numbers, booleans, lists, quoted strings) and kept as
bare strings otherwise. Dotted keys namespace into argument dicts:

    dataset = synthetic-blobs
    dataset.num_classes = 4      # -> dataset_args["num_classes"]
    train.epochs = 10            # -> train_args["epochs"]
    backbone.seed = 7            # -> backbone_seed

Resolution order: defaults < config file < command-line flags.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, fields
from pathlib import Path

from .exceptions import ConfigError

_SETTINGS = ("unimodal", "multimodal")


@dataclass
class RunConfig:
    dataset: str = "synthetic-blobs"
    dataset_args: dict = field(default_factory=dict)
    setting: str = "unimodal"
    backbone: str = "mock"          # "mock" | "identity" | weights path prefix
    backbone_seed: int = 0
    variant: str = "pretrained-only, gaussian, 0.90"
    variants: list | None = None    # ablation mode: list of variant names
    blocks: list | None = None      # explicit student block indices
    pivot_class: int = 0
    trials: int = 1
    seed: int = 0
    energy: float | None = None     # overrides the variant's threshold
    whiten_finetuned: bool = False
    train_args: dict = field(default_factory=dict)
    flag_threshold: float = 0.25
    demo: str = "confusion"         # diagnose subcommand: confusion | toy | inflation
    cache_dir: str | None = None
    output_dir: str = "runs"

    def validate(self) -> "RunConfig":
        if self.setting not in _SETTINGS:
            raise ConfigError(f"setting must be one of {_SETTINGS}, got {self.setting!r}")
        if self.trials < 1:
            raise ConfigError("trials must be >= 1")
        if self.energy is not None and not 0.0 < self.energy <= 1.0:
            raise ConfigError(f"energy must be in (0, 1], got {self.energy}")
        if self.demo not in ("confusion", "toy", "inflation"):
            raise ConfigError(f"unknown demo {self.demo!r}")
        if self.blocks is not None:
            self.blocks = parse_int_list(self.blocks)
        return self


def parse_int_list(value) -> list[int]:
    """Accept [2, 3], '2,3', or '2 3'."""
    if isinstance(value, (list, tuple)):
        return [int(v) for v in value]
    parts = str(value).replace(",", " ").split()
    try:
        return [int(p) for p in parts]
    except ValueError as exc:
        raise ConfigError(f"cannot parse integer list from {value!r}") from exc


def _coerce(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def parse_config_text(text: str) -> dict:
    flat: dict = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        flat[key.strip()] = _coerce(value.strip())
    return flat


_DOTTED = {"dataset": "dataset_args", "train": "train_args"}
_ALIASES = {"backbone.seed": "backbone_seed"}


def _assign(config_dict: dict, key: str, value) -> None:
    if key in _ALIASES:
        config_dict[_ALIASES[key]] = value
        return
    if "." in key:
        head, _, tail = key.partition(".")
        if head not in _DOTTED:
            raise ConfigError(f"unknown config namespace {head!r} in {key!r}")
        config_dict.setdefault(_DOTTED[head], {})[tail] = value
        return
    config_dict[key] = value


def build_run_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Merge defaults, an optional config file, and non-None overrides."""
    merged: dict = {}
    if path is not None:
        file_path = Path(path)
        if not file_path.exists():
            raise ConfigError(f"config file {file_path} does not exist")
        for key, value in parse_config_text(file_path.read_text()).items():
            _assign(merged, key, value)
    for key, value in (overrides or {}).items():
        if value is not None:
            _assign(merged, key, value)

    known = {f.name for f in fields(RunConfig)}
    unknown = set(merged) - known
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        return RunConfig(**merged).validate()
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
