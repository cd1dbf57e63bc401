"""
Run configuration: a YAML document with [data], [model], [train] and [stage]
sections. Unknown keys are rejected with the key and section named.
"""

from pathlib import Path
from typing import List, Literal, Tuple

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from engine.errors import ConfigurationError

STAGES = ('coarse-seg', 'bone-det', 'face-det', 'refine-seg', 'thin-seg', 'tooth-det')

PositiveTriple = Tuple[float, float, float]
IntTriple = Tuple[int, int, int]


def _positive(values):
    if any(v <= 0 for v in values):
        raise ValueError('all components must be > 0')
    return values


class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid')


class DataConfig(_Section):
    coarse_spacing: float = Field(2.0, gt=0)
    refine_spacing: float = Field(0.4, gt=0)
    tooth_spacing: float = Field(0.8, gt=0)
    intensity_shift: float = 0.0
    intensity_scale: float = 1000.0
    sphere_radius: int = Field(3, ge=1)

    @field_validator('intensity_scale')
    @classmethod
    def _non_zero(cls, v):
        if v == 0:
            raise ValueError('intensity_scale must be non-zero')
        return v


class ModelConfig(_Section):
    depth: int = Field(4, ge=2)
    base_channels: int = Field(16, ge=1)


class TrainConfig(_Section):
    seed: int = 0
    epochs: int = Field(40, ge=0)
    batch_size: int = Field(2, ge=1)
    learning_rate: float = Field(1e-3, ge=0)
    lr_step_epochs: int = Field(20, ge=1)
    lr_decay: float = Field(0.5, gt=0)
    focal_gamma: float = Field(2.0, ge=0)
    alpha_background: float = Field(0.75, ge=0)
    alpha_foreground: float = Field(0.25, ge=0)
    flip_augmentation: bool = False
    patches_per_volume: int = Field(8, ge=1)
    validation_patches: int = Field(4, ge=1)
    foreground_fraction: float = Field(0.5, ge=0, le=1)
    landmark_jitter_mm: float = Field(5.0, ge=0)
    num_workers: int = Field(0, ge=0)


class StageConfig(_Section):
    refine_patch: IntTriple = (48, 48, 48)
    overlap: float = Field(0.5, ge=0, lt=1)
    global_margin_mm: float = Field(5.0, ge=0)
    thin_half_extent_mm: PositiveTriple = (15.0, 15.0, 15.0)
    tooth_patch_extent_mm: PositiveTriple = (25.6, 25.6, 25.6)
    decode_threshold: float = Field(0.5, ge=0, lt=1)
    decode_method: Literal['centroid', 'argmax'] = 'centroid'
    merge_rule: Literal['precedence', 'probability'] = 'precedence'
    tau_mm: float = Field(4.0, gt=0)

    @field_validator('refine_patch')
    @classmethod
    def _patch_positive(cls, v):
        return _positive(v)

    @field_validator('thin_half_extent_mm', 'tooth_patch_extent_mm')
    @classmethod
    def _extent_positive(cls, v):
        return _positive(v)


class EngineConfig(_Section):
    data: DataConfig = DataConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    stage: StageConfig = StageConfig()

    def alpha(self, num_classes: int) -> List[float]:
        return [self.train.alpha_background] + [self.train.alpha_foreground] * (num_classes - 1)

    def to_dict(self) -> dict:
        return self.model_dump(mode='json')


def _describe(error: ValidationError) -> str:
    messages = []
    for err in error.errors():
        loc = [str(part) for part in err['loc']]
        if err['type'] == 'extra_forbidden':
            key = loc[-1]
            section = loc[0] if len(loc) > 1 else '<top level>'
            messages.append(f"unknown key '{key}' in section [{section}]")
        else:
            section = loc[0] if loc else '<top level>'
            key = '.'.join(loc[1:]) or section
            messages.append(f"invalid value for '{key}' in section [{section}]: {err['msg']}")
    return '; '.join(messages)


def parse_config(raw: dict) -> EngineConfig:
    try:
        return EngineConfig(**(raw or {}))
    except ValidationError as e:
        raise ConfigurationError(_describe(e)) from e
    except TypeError as e:
        raise ConfigurationError(f'config must be a mapping of sections: {e}') from e


def load_config(path=None) -> EngineConfig:
    """Load a YAML run config; None gives the documented defaults."""
    if path is None:
        return EngineConfig()
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f'config file not found: {path}')
    try:
        raw = yaml.safe_load(path.read_text(encoding='utf-8'))
    except yaml.YAMLError as e:
        raise ConfigurationError(f'cannot parse config {path}: {e}') from e
    if raw is not None and not isinstance(raw, dict):
        raise ConfigurationError(f'config {path} must be a mapping of sections')
    return parse_config(raw)


def save_config(config: EngineConfig, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False), encoding='utf-8')
