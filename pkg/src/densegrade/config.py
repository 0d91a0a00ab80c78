"""Run configuration as flat ``section.key = value`` text.

Lines starting with ``#`` are comments. Tuples are comma separated. Every
key has a default, so an empty file is a valid config; unknown keys are an
error rather than silently ignored.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Mapping, Optional

from .augmentation import AugmentationPolicy
from .data import TaskMode
from .model import PRESETS, DenseNetConfig
from .train import TrainConfig


class ConfigError(ValueError):
    pass


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, str]:
    out: Dict[str, str] = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{n}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"{source}:{n}: empty key")
        out[key] = value
    return out


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _parse_like(default, text: str):
    if isinstance(default, bool):
        return _parse_bool(text)
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        return tuple(int(v) for v in text.replace(" ", "").split(",") if v)
    return text


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, (tuple, list)):
        return ",".join(str(v) for v in value)
    return str(value)


@dataclass
class DataSection:
    root: str = ""
    task: str = "fine18"
    resolution: int = 256
    split_seed: int = 0
    ratios: str = "0.6,0.2,0.2"
    workers: int = 1
    normalize: bool = True

    def ratio_tuple(self):
        parts = [float(v) for v in self.ratios.split(",")]
        if len(parts) != 3 or any(p < 0 for p in parts) or abs(sum(parts) - 1.0) > 1e-9:
            raise ConfigError(f"data.ratios must be three non-negative numbers summing to 1, got {self.ratios}")
        return tuple(parts)


@dataclass
class ModelSection:
    preset: str = "densenet201"
    growth_rate: int = 0  # 0 keeps the preset value
    block_layout: tuple = ()
    compression: float = 0.0
    stem_channels: int = 0
    bottleneck: str = "preset"


@dataclass
class RunSection:
    out: str = "runs/run"
    seed: int = 0
    threads: int = 0  # 0 leaves BLAS threading alone


@dataclass
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationPolicy = field(default_factory=AugmentationPolicy)
    run: RunSection = field(default_factory=RunSection)

    # train.seed and train.task are derived from run.seed and data.task
    _DERIVED = {"train.seed", "train.task"}

    def sections(self):
        return {"data": self.data, "model": self.model, "train": self.train,
                "augment": self.augment, "run": self.run}

    def to_flat(self) -> Dict[str, str]:
        flat = {}
        for name, sec in self.sections().items():
            for f in dataclasses.fields(sec):
                key = f"{name}.{f.name}"
                if key not in self._DERIVED:
                    flat[key] = _format(getattr(sec, f.name))
        return flat

    def dumps(self) -> str:
        lines = ["# resolved densegrade run configuration"]
        lines += [f"{k} = {v}" for k, v in sorted(self.to_flat().items())]
        return "\n".join(lines) + "\n"

    def apply(self, values: Mapping[str, str], source: str = "override") -> "RunConfig":
        sections = self.sections()
        for key, text in values.items():
            sec_name, _, attr = key.partition(".")
            sec = sections.get(sec_name)
            if sec is None or key in self._DERIVED or attr not in {f.name for f in dataclasses.fields(sec)}:
                raise ConfigError(f"{source}: unknown config key {key!r}")
            try:
                setattr(sec, attr, _parse_like(getattr(sec, attr), str(text)))
            except ValueError as exc:
                raise ConfigError(f"{source}: bad value for {key}: {exc}") from None
        return self

    def finalize(self) -> "RunConfig":
        """Propagate derived fields and validate everything."""
        try:
            task = TaskMode.parse(self.data.task)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        self.data.task = task.value
        self.train.seed = self.run.seed
        self.train.task = task.value
        if self.data.resolution < 8:
            raise ConfigError(f"data.resolution must be >= 8, got {self.data.resolution}")
        if self.model.preset not in PRESETS:
            raise ConfigError(f"unknown model preset {self.model.preset!r}; choose from {sorted(PRESETS)}")
        self.data.ratio_tuple()
        try:
            self.train.validate()
            self.augment.validate()
            self.model_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    def model_config(self) -> DenseNetConfig:
        base = dict(PRESETS[self.model.preset])
        m = self.model
        if m.growth_rate:
            base["growth_rate"] = m.growth_rate
        if m.block_layout:
            base["block_layout"] = tuple(m.block_layout)
        if m.compression:
            base["compression"] = m.compression
        if m.stem_channels:
            base["stem_channels"] = m.stem_channels
        if m.bottleneck != "preset":
            base["bottleneck"] = _parse_bool(m.bottleneck)
        res = self.data.resolution
        return DenseNetConfig(num_classes=TaskMode.parse(self.data.task).num_classes,
                              input_resolution=(res, res, 3), **base)


def load_config(path: Optional[str] = None, overrides: Optional[Mapping[str, str]] = None) -> RunConfig:
    """Defaults, then the file (if any), then ``overrides``; validated."""
    cfg = RunConfig()
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        cfg.apply(parse_config_text(p.read_text(), str(p)), str(p))
    if overrides:
        cfg.apply(overrides)
    return cfg.finalize()
