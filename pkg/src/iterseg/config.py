"""Plain-text ``key = value`` run configuration, validated against a schema.

Blank lines and ``#`` comments are ignored. Lists are comma separated.
Optional values accept ``none``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from .engine import IterationConfig, OptimConfig
from .metrics import LossConfig
from .network import ConfigError, NetworkConfig


def parse_kv(text: str, source: str = "<config>") -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{lineno}: empty key")
        if key in out:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _parse_bool(s: str) -> bool:
    v = s.lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _parse_int_list(s: str) -> tuple:
    return tuple(int(p) for p in s.split(",") if p.strip())


def _optional(conv):
    def parse(s: str):
        return None if s.lower() in ("", "none", "auto") else conv(s)

    return parse


@dataclass
class RunConfig:
    seed: int = 0
    tag: str = "run"
    # network
    input_height: int = 256
    input_width: int = 320
    stages: int = 4
    base_channels: int = 16
    merge_points: Optional[tuple] = None
    precision: str = "float32"
    # refinement loop
    threshold: Optional[float] = None
    max_iterations: int = 8
    binarize_feedback: bool = True
    binarize_threshold: float = 0.5
    # objective and optimiser
    epsilon: float = 1e-6
    lr: float = 0.01
    momentum: float = 0.9
    batch_size: int = 4
    epochs: int = 1
    # global gradient-norm cap per optimiser step; none disables it
    grad_clip: Optional[float] = 1.0
    # data; an empty data_root means a synthetic corpus
    data_root: str = ""
    allow_color: bool = False
    train_count: Optional[int] = None
    augment: str = ""
    synth_family: str = "blob"
    synth_count: int = 16
    synth_test_count: int = 4
    synth_contrast: Optional[float] = None
    synth_noise: Optional[float] = None
    record_timing: bool = False

    def __post_init__(self):
        if self.precision not in ("float32", "float64"):
            raise ConfigError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.synth_family not in ("disk", "ring", "blob"):
            raise ConfigError(f"synth_family must be disk, ring or blob, got {self.synth_family!r}")
        for key in ("epochs", "batch_size", "synth_count"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if self.grad_clip is not None and not self.grad_clip > 0:
            raise ConfigError(f"grad_clip must be positive or none, got {self.grad_clip}")
        try:
            self.network()
            self.iteration()
            self.loss()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def network(self) -> NetworkConfig:
        return NetworkConfig(self.input_height, self.input_width, self.stages, self.base_channels, self.merge_points)

    def iteration(self) -> IterationConfig:
        return IterationConfig(self.threshold, self.max_iterations, self.binarize_feedback, self.binarize_threshold)

    def loss(self) -> LossConfig:
        return LossConfig(self.epsilon)

    def optim(self) -> OptimConfig:
        return OptimConfig(self.lr, self.momentum, self.batch_size, self.grad_clip)

    def replace(self, **changes) -> "RunConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                s = "none"
            elif isinstance(v, bool):
                s = "true" if v else "false"
            elif isinstance(v, tuple):
                s = ",".join(str(x) for x in v)
            else:
                s = str(v)
            lines.append(f"{f.name} = {s}")
        return "\n".join(lines) + "\n"


_CONVERTERS = {
    "int": int,
    "float": float,
    "str": str,
    "bool": _parse_bool,
    "Optional[float]": _optional(float),
    "Optional[int]": _optional(int),
    "Optional[tuple]": _optional(_parse_int_list),
}


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    raw = parse_kv(text, source)
    fields = {f.name: f for f in dataclasses.fields(RunConfig)}
    values = {}
    for key, s in raw.items():
        if key not in fields:
            raise ConfigError(f"{source}: unknown key {key!r}")
        conv = _CONVERTERS[fields[key].type]
        try:
            values[key] = conv(s)
        except ValueError as exc:
            raise ConfigError(f"{source}: bad value for {key!r}: {exc}") from exc
    return RunConfig(**values)


def load_config(path: Union[str, Path]) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return parse_config(text, str(path))
