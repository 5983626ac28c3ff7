"""Pipeline configuration: one nested key/value file drives every stage.

Sections map 1:1 onto the stage dataclasses. Unknown keys are rejected so a
typo cannot silently fall back to a default. The resolved config dict is
hashed (sha256 over canonical JSON) and that hash is stamped into every
artifact manifest, which is how downstream stages verify provenance.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from fewgen.contrastive import SslConfig
from fewgen.errors import ValidationError
from fewgen.fewshot import FinetuneConfig
from fewgen.trainer import TrainConfig
from fewgen.utils import config_hash


@dataclass
class ModelConfig:
    """Generator/discriminator scale knobs."""

    latent_dim: int = 128
    image_size: int = 64
    channels: int = 1
    base_channels: int = 96

    def __post_init__(self):
        if self.latent_dim < 1 or self.base_channels < 1:
            raise ValidationError("latent_dim and base_channels must be positive")


@dataclass
class DataConfig:
    """Toy dataset shape (the few-shot source when no real chips are given)."""

    classes: int = 10
    per_class: int = 8
    test_per_class: int = 20
    seed: int = 0


@dataclass
class SynthConfig:
    """Synthesis stage: how many images to draw from the trained generator."""

    count: int = 5000
    seed: int = 0
    batch: int = 64


@dataclass
class PipelineConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    ssl: SslConfig = field(default_factory=SslConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)

    def to_dict(self) -> dict:
        return asdict(self)

    @property
    def hash(self) -> str:
        return config_hash(self.to_dict())


_SECTIONS = {
    "model": ModelConfig,
    "data": DataConfig,
    "train": TrainConfig,
    "ssl": SslConfig,
    "finetune": FinetuneConfig,
    "synth": SynthConfig,
}


def _build_section(cls, payload: dict, where: str):
    allowed = {f.name for f in fields(cls)}
    unknown = set(payload) - allowed
    if unknown:
        raise ValidationError(f"unknown key(s) {sorted(unknown)} in section '{where}'")
    return cls(**payload)


def config_from_dict(d: dict) -> PipelineConfig:
    unknown = set(d) - set(_SECTIONS)
    if unknown:
        raise ValidationError(f"unknown config section(s) {sorted(unknown)}")
    kwargs = {}
    for name, cls in _SECTIONS.items():
        payload = d.get(name, {}) or {}
        if not isinstance(payload, dict):
            raise ValidationError(f"section '{name}' must be a mapping")
        kwargs[name] = _build_section(cls, payload, name)
    return PipelineConfig(**kwargs)


def load_config(path: str | Path | None = None,
                overrides: list[str] | None = None) -> PipelineConfig:
    """Read a YAML config file and apply ``section.key=value`` overrides."""
    raw = {}
    if path is not None:
        loaded = yaml.safe_load(Path(path).read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ValidationError(f"config root in {path} must be a mapping")
        raw = loaded
    for item in overrides or []:
        raw = apply_override(raw, item)
    return config_from_dict(raw)


def apply_override(raw: dict, item: str) -> dict:
    """Apply one ``dotted.key=value`` override; values parse as YAML scalars."""
    if "=" not in item:
        raise ValidationError(f"override {item!r} must look like section.key=value")
    key, value = item.split("=", 1)
    parts = key.strip().split(".")
    if len(parts) < 2:
        raise ValidationError(f"override key {key!r} must be section.key")
    node = raw
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise ValidationError(f"cannot override through non-mapping key {p!r}")
    parsed = yaml.safe_load(value)
    if isinstance(parsed, str):
        # YAML 1.1 reads "1e-3" as a string; a numeric-looking override
        # should become a number, not surface as a type error much later
        try:
            parsed = float(parsed)
        except ValueError:
            pass
    node[parts[-1]] = parsed
    return raw


def save_config(cfg: PipelineConfig, path: str | Path):
    import json

    from fewgen.utils import canonical_json

    # round-trip through JSON so tuples become plain lists for the YAML dumper
    plain = json.loads(canonical_json(cfg.to_dict()))
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(yaml.safe_dump(plain, sort_keys=True))
