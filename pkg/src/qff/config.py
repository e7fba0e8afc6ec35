"""Flat ``section.key = value`` run configuration files.

Lines are ``key = value``; blank lines and lines starting with ``#`` or ``;``
are ignored. Every key must be known; unknown keys are rejected by name.
Defaults that depend on the task (image vs. SDF) are resolved by
:meth:`RunConfig.get`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable


class ConfigError(ValueError):
    """Malformed or invalid configuration."""


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(v) for v in text.split(",") if v.strip())


def _names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any  # a value, or a dict {"image": ..., "sdf": ...}
    doc: str


# fmt: off
KEYS: dict[str, Key] = {
    "task.type":            Key(str, None, "image | sdf; normally implied by the command"),
    "task.image":           Key(str, None, "target image path (PPM P6 or PNG), relative to the config file"),
    "task.crop":            Key(int, 0, "center-crop the target to this square size (0 = no crop)"),
    "task.shape":           Key(str, "sphere", "sphere | box | torus"),
    "task.radius":          Key(float, 0.5, "sphere radius"),
    "task.half_extents":    Key(_floats, (0.4, 0.3, 0.3), "box half extents, comma separated"),
    "task.major_radius":    Key(float, 0.5, "torus ring radius"),
    "task.minor_radius":    Key(float, 0.2, "torus tube radius"),
    "task.eikonal_weight":  Key(float, 0.1, "weight of the eikonal term in the SDF loss"),
    "task.sampling":        Key(str, "permutation", "image batch scheduling: permutation | random"),
    "encoder.variant":      Key(str, {"image": "qff_lite", "sdf": "qff3d"}, "none | pe | qff_lite | qff3d"),
    "encoder.K":            Key(int, None, "input dimensions; must match the task (2 image, 3 SDF)"),
    "encoder.L":            Key(int, {"image": 8, "sdf": 4}, "frequency levels"),
    "encoder.M":            Key(int, {"image": 64, "sdf": 32}, "bins per encoding component"),
    "encoder.N":            Key(int, {"image": 1, "sdf": 8}, "feature channels per bin"),
    "encoder.add_pe":       Key(_bool, True, "add the positional encoding to the quantized features"),
    "mlp.layers":           Key(int, {"image": 3, "sdf": 2}, "hidden layers"),
    "mlp.width":            Key(int, 256, "hidden width"),
    "mlp.activation":       Key(str, "relu", "relu | sine"),
    "mlp.omega0":           Key(float, 30.0, "frequency factor of sine activations"),
    "optim.lr":             Key(float, 5e-4, "single learning rate for image fitting"),
    "optim.bank_lr":        Key(float, 1e-2, "feature-bank learning rate for SDF fitting"),
    "optim.mlp_lr":         Key(float, 5e-4, "MLP learning rate for SDF fitting"),
    "optim.beta1":          Key(float, 0.9, "Adam beta1"),
    "optim.beta2":          Key(float, 0.999, "Adam beta2"),
    "optim.eps":            Key(float, 1e-8, "Adam epsilon"),
    "optim.steps":          Key(int, 2000, "training steps"),
    "optim.batch":          Key(int, {"image": 4096, "sdf": 2048}, "samples per step"),
    "optim.seed":           Key(int, 0, "random seed"),
    "output.dir":           Key(str, "out", "output directory"),
    "output.eval_interval": Key(int, 100, "steps between evaluations"),
    "bench.variants":       Key(_names, ("pe", "qff3d"), "encoder variants compared by bench-convergence"),
    "bench.target":         Key(float, None, "metric target; default is the first variant's final metric"),
    "bench.early_stop":     Key(_bool, True, "stop SDF runs once the target is known and reached"),
}
# fmt: on


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=dict)
    task: str = "image"
    base_dir: Path = field(default_factory=Path)

    def get(self, key: str):
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        if key in self.values:
            return self.values[key]
        default = KEYS[key].default
        return default[self.task] if isinstance(default, dict) else default

    def set(self, key: str, value) -> None:
        if key not in KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def with_task(self, task: str) -> "RunConfig":
        declared = self.values.get("task.type")
        if declared is not None and declared != task:
            raise ConfigError(f"config declares task.type = {declared}, command needs {task}")
        return RunConfig(dict(self.values), task, self.base_dir)

    def path(self, key: str) -> Path | None:
        value = self.get(key)
        if value is None:
            return None
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p


def parse_config(text: str, base_dir: Path | str = ".") -> RunConfig:
    cfg = RunConfig(base_dir=Path(base_dir))
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line[0] in "#;":
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in cfg.values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        try:
            cfg.values[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"line {lineno}: bad value for {key}: {exc}") from None
    if "task.type" in cfg.values:
        if cfg.values["task.type"] not in ("image", "sdf"):
            raise ConfigError(f"task.type must be image or sdf, got {cfg.values['task.type']!r}")
        cfg.task = cfg.values["task.type"]
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), path.parent)


def describe_keys() -> str:
    """One line per key with its default, for help output and docs."""
    lines = []
    for name, key in KEYS.items():
        default = key.default
        if isinstance(default, dict):
            default = ", ".join(f"{k}: {v}" for k, v in default.items())
        lines.append(f"{name:<22} default {default!s:<24} {key.doc}")
    return "\n".join(lines)
