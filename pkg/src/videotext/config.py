"""Run configuration: a flat ``key = value`` text format covering the model,
optimizer, training loop and synthetic-data settings.

Unknown keys are an error; the resolved configuration echoes every key so a
run can be reproduced from its own ``config.resolved``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Dict, List, Tuple

from .model import ModelConfig
from .training import OptimizerConfig, TrainConfig


@dataclass
class DataConfig:
    videos_per_class: int = 80
    eval_per_class: int = 16
    native_frames: int = 16
    native_height: int = 36
    native_width: int = 36
    noise: float = 0.04
    data_seed: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def sections(self) -> Tuple[Tuple[str, object], ...]:
        return (
            ("model", self.model),
            ("optimizer", self.optimizer),
            ("train", self.train),
            ("data", self.data),
        )

    def to_text(self) -> str:
        lines: List[str] = []
        for section_name, section in self.sections():
            lines.append(f"# {section_name}")
            for f in fields(section):
                lines.append(f"{f.name} = {getattr(section, f.name)}")
        return "\n".join(lines) + "\n"


def _key_owners() -> Dict[str, str]:
    owners: Dict[str, str] = {}
    for section_name, cls in (
        ("model", ModelConfig),
        ("optimizer", OptimizerConfig),
        ("train", TrainConfig),
        ("data", DataConfig),
    ):
        for f in fields(cls):
            if f.name in owners:
                raise RuntimeError(f"config key collision: {f.name}")
            owners[f.name] = section_name
    return owners


_OWNERS = _key_owners()


def _coerce(section, name: str, raw: str):
    current = getattr(section, name)
    if isinstance(current, bool):
        if raw.lower() in ("true", "1", "yes"):
            return True
        if raw.lower() in ("false", "0", "no"):
            return False
        raise ValueError(f"cannot parse boolean for {name}: {raw!r}")
    if isinstance(current, int):
        return int(raw)
    if isinstance(current, float):
        return float(raw)
    return raw


def apply_assignments(cfg: RunConfig, assignments: Dict[str, str]) -> RunConfig:
    sections = dict(cfg.sections())
    for key, raw in assignments.items():
        if key not in _OWNERS:
            raise KeyError(f"unknown config key: {key}")
        section = sections[_OWNERS[key]]
        setattr(section, key, _coerce(section, key, str(raw).strip()))
    # re-run dataclass validation
    cfg.model.__post_init__()
    cfg.optimizer.__post_init__()
    cfg.train.__post_init__()
    return cfg


def parse_config_text(text: str) -> Dict[str, str]:
    assignments: Dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = stripped.partition("=")
        assignments[key.strip()] = value.strip()
    return assignments


def load_config(path, overrides: Dict[str, str] = None) -> RunConfig:
    cfg = RunConfig()
    if path is not None:
        text = Path(path).read_text()
        apply_assignments(cfg, parse_config_text(text))
    if overrides:
        apply_assignments(cfg, dict(overrides))
    return cfg
