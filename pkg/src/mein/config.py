"""Run configuration and its flat ``section.key = value`` text format.

Example file::

    # desk profile with a smaller expert
    model.hidden_dim = 32
    train.expert_epochs = 20
    synth.noise = 0.1

Values are Python literals (numbers, tuples, quoted strings); anything that
does not parse as a literal is taken as a bare string. ``#`` starts a comment.
"""

from __future__ import annotations

import ast
import dataclasses
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

from .data import SynthSpec


@dataclass(frozen=True)
class ModelConfig:
    emb_dim: int = 32
    hidden_dim: int = 64
    mlp_dim: int = 16
    imitator_emb_dim: int = 32
    kernel_dim: int = 64
    windows: tuple[int, ...] = (1, 2, 3, 4)
    dropout: float = 0.5


@dataclass(frozen=True)
class OptimConfig:
    batch_size: int = 32
    lr: float = 1e-3
    finetune_lr: float = 1e-4
    decay: float = 0.9998
    clip_norm: float | None = None
    expert_epochs: int = 30
    imitator_epochs: int = 10
    finetune_epochs: int = 30
    eval_batch_size: int = 256


@dataclass(frozen=True)
class VocabConfig:
    min_count: int = 2
    bpe_merges: int = 20000
    max_len: int = 400


@dataclass(frozen=True)
class DataConfig:
    corpus: str = ""            # directory in the documented format; empty means synthesize
    subsample_seed: int = 0     # unlabeled subsampling for the size sweep


@dataclass(frozen=True)
class RunConfig:
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)
    jobs: int = 1


SECTIONS = {
    "model": ModelConfig,
    "train": OptimConfig,
    "vocab": VocabConfig,
    "data": DataConfig,
    "synth": SynthSpec,
    "run": RunConfig,
}


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: OptimConfig = field(default_factory=OptimConfig)
    vocab: VocabConfig = field(default_factory=VocabConfig)
    data: DataConfig = field(default_factory=DataConfig)
    synth: SynthSpec = field(default_factory=SynthSpec)
    run: RunConfig = field(default_factory=RunConfig)

    def __post_init__(self):
        m, t = self.model, self.train
        dims = (m.emb_dim, m.hidden_dim, m.mlp_dim, m.imitator_emb_dim, m.kernel_dim)
        if min(dims) < 1:
            raise ConfigError(f"model dimensions must be positive, got {dims}")
        if not m.windows or min(m.windows) < 1 or len(set(m.windows)) != len(m.windows):
            raise ConfigError(f"model.windows must be distinct positive integers, got {m.windows}")
        if t.batch_size < 1 or t.eval_batch_size < 1:
            raise ConfigError("batch sizes must be >= 1")
        if not (0.0 <= m.dropout < 1.0):
            raise ConfigError("model.dropout must lie in [0, 1)")
        if not self.run.seeds:
            raise ConfigError("run.seeds must name at least one seed")

    @classmethod
    def desk(cls) -> "TrainConfig":
        """Scaled-down dims for single-core runs on the synthetic corpus."""
        return cls(
            train=OptimConfig(expert_epochs=30, imitator_epochs=5, finetune_epochs=30),
            vocab=VocabConfig(bpe_merges=1000),
        )

    @classmethod
    def full_scale(cls) -> "TrainConfig":
        """Full-scale dims (the published hyperparameter table)."""
        return cls(
            model=ModelConfig(emb_dim=256, hidden_dim=1024, mlp_dim=30, imitator_emb_dim=512, kernel_dim=512),
            vocab=VocabConfig(bpe_merges=20000),
        )

    def replace(self, **sections) -> "TrainConfig":
        return dataclasses.replace(self, **sections)

    def with_overrides(self, overrides: Mapping[str, Any]) -> "TrainConfig":
        grouped: dict[str, dict[str, Any]] = {}
        for dotted, value in overrides.items():
            section, key = _split_key(dotted)
            grouped.setdefault(section, {})[key] = _coerce(section, key, value)
        updated = {s: dataclasses.replace(getattr(self, s), **kv) for s, kv in grouped.items()}
        return dataclasses.replace(self, **updated)

    def flat(self) -> dict[str, Any]:
        out = {}
        for section in SECTIONS:
            for f in dataclasses.fields(getattr(self, section)):
                value = getattr(getattr(self, section), f.name)
                out[f"{section}.{f.name}"] = list(value) if isinstance(value, tuple) else value
        return out

    def dumps(self) -> str:
        lines = []
        for key, value in self.flat().items():
            lines.append(f"{key} = {_format(value)}")
        return "\n".join(lines) + "\n"

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def from_flat(cls, flat: Mapping[str, Any], base: "TrainConfig | None" = None) -> "TrainConfig":
        return (base or cls()).with_overrides(flat)


def _split_key(dotted: str) -> tuple[str, str]:
    if "." not in dotted:
        raise ConfigError(f"config key {dotted!r} must look like section.key")
    section, key = dotted.split(".", 1)
    if section not in SECTIONS:
        raise ConfigError(f"unknown config section {section!r} (known: {', '.join(SECTIONS)})")
    names = {f.name for f in dataclasses.fields(SECTIONS[section])}
    if key not in names:
        raise ConfigError(f"unknown config key {dotted!r}")
    return section, key


def _coerce(section: str, key: str, value: Any) -> Any:
    default = getattr(SECTIONS[section](), key)
    if isinstance(default, tuple):
        if isinstance(value, (int, float)):
            value = (value,)
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{section}.{key} expects a sequence, got {value!r}")
        return tuple(value)
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects True or False, got {value!r}")
        return value
    if isinstance(default, int) and default is not None:
        if isinstance(value, float) and value.is_integer():
            value = int(value)
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if not isinstance(value, (int, float)) or isinstance(value, bool):
            raise ConfigError(f"{section}.{key} expects a number, got {value!r}")
        return float(value)
    if isinstance(default, str):
        return str(value)
    if value is not None and not isinstance(value, (int, float)):  # optional numeric (clip_norm)
        raise ConfigError(f"{section}.{key} expects a number or None, got {value!r}")
    return None if value is None else float(value)


def _format(value: Any) -> str:
    if isinstance(value, list):
        return ", ".join(str(v) for v in value) if value else "()"
    return repr(value)


def parse_value(text: str) -> Any:
    text = text.strip()
    try:
        value = ast.literal_eval(text)
    except (ValueError, SyntaxError):
        return text
    return list(value) if isinstance(value, tuple) else value


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'section.key = value'")
        key, value = (part.strip() for part in line.split("=", 1))
        try:
            _split_key(key)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {exc}") from None
        out[key] = parse_value(value)
    return out


def parse_override(item: str) -> tuple[str, Any]:
    if "=" not in item:
        raise ConfigError(f"override {item!r} must look like section.key=value")
    key, value = item.split("=", 1)
    return key.strip(), parse_value(value)


def load_config(path: str | Path | None = None, overrides: Mapping[str, Any] | None = None,
                base: TrainConfig | None = None) -> TrainConfig:
    """Desk defaults, then the file, then ``overrides``; unknown keys raise."""
    config = base or TrainConfig.desk()
    if path is not None:
        config = config.with_overrides(parse_config_text(Path(path).read_text(encoding="utf-8"), str(path)))
    if overrides:
        config = config.with_overrides(overrides)
    return config
