"""Flat ``section.key = value`` run configuration.

Every known key has a default; files may override any subset. Unknown
sections or keys are rejected with the offending name in the message.
"""

from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path

from .exceptions import ConfigError
from .synth import GeneratorConfig

_SEED_FIELDS = {"seed"}

# None-valued defaults need an explicit element type
_OPTIONAL_TYPES = {
    ("synth", "voxel_lengths"): "int_tuple",
    ("preprocess", "target_length"): int,
    ("stage2", "d_obj"): int,
}


def _section_defaults() -> dict[str, dict[str, object]]:
    synth = {f.name: f.default for f in fields(GeneratorConfig) if f.name not in _SEED_FIELDS}
    return {
        "run": {"seed": 0},
        "synth": synth,
        "preprocess": {"patch_size": 16, "target_length": None},
        "stage1": {"dim": 64, "layers": 4, "heads": 4, "decoder_dim": 48, "decoder_layers": 2,
                   "decoder_heads": 4, "mask_ratio": 0.75, "epochs": 30, "batch_size": 64,
                   "lr": 7.5e-4, "weight_decay": 0.05, "warmup_epochs": 3},
        "stage2": {"d_obj": None, "heads": 4, "use_cross_attention": True,
                   "use_subject_loss": True, "use_orth_loss": True, "orth_weight": 0.1,
                   "epochs": 20, "batch_size": 64, "lr": 7.5e-4, "weight_decay": 0.05,
                   "warmup_epochs": 2, "retract_basis": False},
        "eval": {"threshold": 0.5, "auc_average": "macro"},
        "attribute": {"class_id": 0, "subject_id": 0, "statistic": "median",
                      "residual": False, "threshold": 0.5},
        "baselines": {"kmeans_restarts": 10, "kmeans_max_iter": 300, "kmeans_tol": 1e-6,
                      "ridge": 1e-8, "linear_epochs": 200, "linear_lr": 1e-2},
    }


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "yes", "on", "1"):
        return True
    if low in ("false", "no", "off", "0"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_value(section: str, key: str, default, text: str):
    kind = _OPTIONAL_TYPES.get((section, key))
    if kind is not None:
        if text.lower() in ("none", ""):
            return None
        if kind == "int_tuple":
            return tuple(int(t) for t in text.replace(";", ",").split(",") if t.strip())
        return kind(text)
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def _format_value(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


class RunConfig:
    """Resolved configuration; ``cfg["stage1.epochs"]`` or ``cfg.section("stage1")``."""

    def __init__(self, values: dict[str, dict[str, object]] | None = None, source_text: str = ""):
        self._values = _section_defaults()
        self.source_text = source_text
        for section, items in (values or {}).items():
            for key, v in items.items():
                self.set(f"{section}.{key}", v)

    def _locate(self, dotted: str) -> tuple[str, str]:
        if "." not in dotted:
            raise ConfigError(f"config key {dotted!r} must have the form section.key")
        section, key = dotted.split(".", 1)
        if section not in self._values:
            raise ConfigError(f"unknown config section {section!r} in key {dotted!r}")
        if key not in self._values[section]:
            raise ConfigError(f"unknown config key {dotted!r}")
        return section, key

    def __getitem__(self, dotted: str):
        section, key = self._locate(dotted)
        return self._values[section][key]

    def set(self, dotted: str, value) -> None:
        section, key = self._locate(dotted)
        if isinstance(value, str):
            try:
                value = _parse_value(section, key, self._values[section][key], value.strip())
            except ValueError as exc:
                raise ConfigError(f"bad value for {dotted}: {exc}") from None
        self._values[section][key] = value

    def section(self, name: str) -> dict[str, object]:
        if name not in self._values:
            raise ConfigError(f"unknown config section {name!r}")
        return dict(self._values[name])

    @property
    def seed(self) -> int:
        return int(self._values["run"]["seed"])

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(seed=self.seed, **self.section("synth"))

    def dumps(self) -> str:
        lines = []
        for section in self._values:
            for key, value in self._values[section].items():
                lines.append(f"{section}.{key} = {_format_value(value)}")
        return "\n".join(lines) + "\n"


def parse_config(text: str) -> RunConfig:
    """Parse ``section.key = value`` lines; ``#`` starts a comment."""
    cfg = RunConfig(source_text=text)
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        cfg.set(key, value)
    return cfg


def load_config(path: str | os.PathLike | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    return parse_config(p.read_text(encoding="utf-8"))
