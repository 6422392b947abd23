"""Run configuration: a flat ``key = value`` file with ``[section]`` headers.

Every key is addressed as ``section.field`` on the command line
(``--set reamil.lr=0.005``). Unknown sections or fields are errors.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields, replace
from pathlib import Path
from typing import Any

from .backbone import BackboneConfig
from .data import SynthConfig
from .objectives import LossConfig
from .trainer import EVIDENCE_DEFAULTS, TrainConfig


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class PathsConfig:
    data: str = ""  # dataset directory holding manifest.tsv
    baseline: str = ""  # baseline checkpoint for train-reamil / ablate
    model: str = ""  # checkpoint to evaluate


@dataclass(frozen=True)
class EvalConfig:
    split: str = "test"
    tau: float = 0.90
    workers: int = 1
    slide: str = ""  # overlay target
    top_k: int = 8  # overlay: tiles outlined and listed
    tile_size: float = 0.0  # overlay square side in coordinate units; 0 = range / sqrt(N)


@dataclass(frozen=True)
class GradcheckConfig:
    tolerance: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    data: SynthConfig = field(default_factory=SynthConfig)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    baseline: TrainConfig = field(default_factory=TrainConfig)
    reamil: TrainConfig = field(default_factory=lambda: TrainConfig(**EVIDENCE_DEFAULTS))
    loss: LossConfig = field(default_factory=LossConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)
    gradcheck: GradcheckConfig = field(default_factory=GradcheckConfig)

    def evidence_train(self) -> TrainConfig:
        """Evidence-phase schedule carrying the [loss] section."""
        return replace(self.reamil, loss=self.loss)


SECTIONS = [f.name for f in fields(RunConfig)]


def _section_fields(section_obj) -> dict[str, dataclasses.Field]:
    # TrainConfig.loss is configured through the [loss] section instead.
    return {f.name: f for f in fields(section_obj) if f.name != "loss"}


def _coerce(raw: str, current: Any, key: str):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r} (expected {type(current).__name__})") from None
    return raw


def apply(cfg: RunConfig, key: str, raw: str) -> RunConfig:
    """Return ``cfg`` with ``section.field`` set from the string ``raw``."""
    if "." not in key:
        raise ConfigError(f"key {key!r} must be section.field")
    section, name = key.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown section {section!r} in {key!r}")
    sub = getattr(cfg, section)
    known = _section_fields(sub)
    if name not in known:
        raise ConfigError(f"unknown key {key!r}")
    value = _coerce(raw, getattr(sub, name), key)
    try:
        new_sub = replace(sub, **{name: value})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {key}: {exc}") from None
    return replace(cfg, **{section: new_sub})


def parse_text(text: str, cfg: RunConfig | None = None, source: str = "<config>") -> RunConfig:
    cfg = cfg or RunConfig()
    section = None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section not in SECTIONS:
                raise ConfigError(f"{source}:{lineno}: unknown section [{section}]")
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        if section is None:
            raise ConfigError(f"{source}:{lineno}: key outside any [section]")
        k, v = line.split("=", 1)
        try:
            cfg = apply(cfg, f"{section}.{k.strip()}", v)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
    return cfg


def load(path) -> RunConfig:
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    return parse_text(p.read_text(), source=str(p))


def dump(cfg: RunConfig) -> str:
    """Serialize every field; ``parse_text(dump(c)) == c``."""
    out = []
    for section in SECTIONS:
        sub = getattr(cfg, section)
        out.append(f"[{section}]")
        for name in _section_fields(sub):
            v = getattr(sub, name)
            if isinstance(v, bool):
                text = "true" if v else "false"
            elif isinstance(v, str):
                text = v
            else:
                text = repr(v)
            out.append(f"{name} = {text}")
        out.append("")
    return "\n".join(out)


def defaults_help() -> str:
    return dump(RunConfig())
