import json
import logging
from pathlib import Path
from typing import Literal

from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator
from pydantic_settings import (
    BaseSettings,
    JsonConfigSettingsSource,
    PydanticBaseSettingsSource,
    SettingsConfigDict,
)

from core.errors import ConfigurationError

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    PROJECT_NAME: str = "DaSNet-V2"
    PROJECT_VERSION: str = "2.0.0"
    LOG_LEVEL: str = "INFO"
    LOG_FILE: str = "dasnet.log"
    DEBUG: bool = Field(default=False)

    model_config = SettingsConfigDict(env_file=".env", extra="ignore")


settings = Settings()


class Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class BackboneConfig(Section):
    stem_channels: int = Field(default=16, gt=0)
    channel_schedule: list[int] = Field(default=[16, 32, 64, 128, 256])
    blocks_per_stage: list[int] = Field(default=[1, 1, 2, 2, 2])
    residual_width_ratio: float = Field(default=0.125, gt=0.0, le=1.0)

    @field_validator("channel_schedule")
    @classmethod
    def _check_schedule(cls, value: list[int]) -> list[int]:
        if len(value) != 5:
            raise ValueError("channel_schedule needs exactly 5 downsampling stages")
        if any(c <= 0 for c in value):
            raise ValueError("channel counts must be positive")
        if any(b < a for a, b in zip(value, value[1:])):
            raise ValueError("channel_schedule must be non-decreasing")
        return value

    @field_validator("blocks_per_stage")
    @classmethod
    def _check_blocks(cls, value: list[int]) -> list[int]:
        if len(value) != 5 or any(b < 0 for b in value):
            raise ValueError("blocks_per_stage needs 5 non-negative entries")
        if sum(value) != 8:
            raise ValueError(f"blocks_per_stage must sum to 8, got {sum(value)}")
        return value


class GatedFpnConfig(Section):
    fpn_channels: int = Field(default=128, gt=0)
    levels: tuple[str, str, str] = ("P3", "P4", "P5")


class AsppConfig(Section):
    dilation_rates: tuple[int, int, int] = (1, 2, 4)
    include_pointwise: bool = True
    branch_channels: int = Field(default=16, gt=0)

    @field_validator("dilation_rates")
    @classmethod
    def _check_rates(cls, value: tuple[int, int, int]) -> tuple[int, int, int]:
        if any(r < 1 for r in value):
            raise ValueError("dilation rates must be >= 1")
        return value


class HeadConfig(Section):
    head_channels: int = Field(default=32, gt=0)
    mask_decoder_channels: list[int] = Field(default=[64, 32, 16, 8, 8])
    semantic_fusion_level: Literal["P3"] = "P3"

    @field_validator("mask_decoder_channels")
    @classmethod
    def _check_decoder(cls, value: list[int]) -> list[int]:
        if len(value) != 5 or any(c <= 0 for c in value):
            raise ValueError("mask decoder needs 5 positive stage widths (1x1 -> 32x32)")
        return value


DEFAULT_ANCHORS = [
    (24.0, 24.0),
    (40.0, 40.0),
    (64.0, 64.0),
    (96.0, 96.0),
    (144.0, 144.0),
    (208.0, 208.0),
]


def validate_anchor_pairs(pairs: list[tuple[float, float]]) -> list[tuple[float, float]]:
    if len(pairs) != 6:
        raise ConfigurationError(f"expected 6 anchor (width, height) pairs, got {len(pairs)}")
    for w, h in pairs:
        if w <= 0 or h <= 0:
            raise ConfigurationError(f"anchor sizes must be positive, got ({w}, {h})")
    return [(float(w), float(h)) for w, h in pairs]


class ModelSection(Section):
    input_size: tuple[int, int] = (416, 416)
    backbone: BackboneConfig = Field(default_factory=BackboneConfig)
    fpn: GatedFpnConfig = Field(default_factory=GatedFpnConfig)
    aspp: AsppConfig = Field(default_factory=AsppConfig)
    heads: HeadConfig = Field(default_factory=HeadConfig)
    anchors: list[tuple[float, float]] = Field(default_factory=lambda: list(DEFAULT_ANCHORS))
    num_anchors: Literal[2] = 2
    num_classes: Literal[1] = 1
    seed: int = 0

    @field_validator("input_size")
    @classmethod
    def _check_input(cls, value: tuple[int, int]) -> tuple[int, int]:
        if value[0] <= 0 or value[1] <= 0 or value[0] % 32 or value[1] % 32:
            raise ValueError(f"input_size {value} must be positive multiples of 32")
        return value

    @field_validator("anchors")
    @classmethod
    def _check_anchors(cls, value: list[tuple[float, float]]) -> list[tuple[float, float]]:
        try:
            return validate_anchor_pairs(value)
        except ConfigurationError as e:
            raise ValueError(e.message) from e


class LossWeights(Section):
    focal: float = Field(default=1.0, ge=0.0)
    box: float = Field(default=1.0, ge=0.0)
    mask: float = Field(default=1.0, ge=0.0)
    semantic: float = Field(default=1.0, ge=0.0)


class AugmentPolicy(Section):
    hflip: bool = True
    rot90: bool = True
    inmask_color: bool = True
    scale_amplifier: bool = True
    amplifier_probability: float = Field(default=0.5, ge=0.0, le=1.0)


class TrainSection(Section):
    lr: float = Field(default=0.01, ge=0.0)
    decay: float = Field(default=0.9, gt=0.0, le=1.0)
    epochs: int = Field(default=30, ge=1)
    batch_size: int = Field(default=4, ge=1)
    seed: int = 0
    loss_weights: LossWeights = Field(default_factory=LossWeights)
    focal_alpha: float = Field(default=0.25, ge=0.0, le=1.0)
    focal_gamma: float = Field(default=2.0, ge=0.0)
    ignore_iou: float = Field(default=0.5, gt=0.0, lt=1.0)
    augmentation: AugmentPolicy = Field(default_factory=AugmentPolicy)


class EvalSection(Section):
    conf_threshold: float = Field(default=0.3, ge=0.0, le=1.0)
    nms_iou: float = Field(default=0.45, gt=0.0, lt=1.0)
    match_iou: float = Field(default=0.5, gt=0.0, le=1.0)
    mask_threshold: float = Field(default=0.5, gt=0.0, lt=1.0)


class Intrinsics(Section):
    fx: float = Field(default=615.0, gt=0.0)
    fy: float = Field(default=615.0, gt=0.0)
    cx: float = 320.0
    cy: float = 240.0
    depth_scale: float = Field(default=0.001, gt=0.0)


class CameraSection(Section):
    intrinsics: Intrinsics = Field(default_factory=Intrinsics)
    stride: int = Field(default=1, ge=1)
    min_depth: float | None = Field(default=None, ge=0.0)
    max_depth: float | None = Field(default=None, gt=0.0)
    branch_original_color: bool = False


class SynthSection(Section):
    image_size: tuple[int, int] = (416, 416)
    fruit_count: tuple[int, int] = (3, 8)
    branch_count: tuple[int, int] = (2, 5)
    fruit_radius: tuple[int, int] = (12, 60)
    branch_width: tuple[int, int] = (4, 12)
    min_visible_area: int = Field(default=30, ge=0)
    depth_noise_mm: float = Field(default=5.0, ge=0.0)
    near_depth_mm: tuple[int, int] = (500, 1500)
    far_depth_mm: tuple[int, int] = (2500, 3500)

    @model_validator(mode="after")
    def _check_ranges(self) -> "SynthSection":
        for name in ("fruit_count", "branch_count", "fruit_radius", "branch_width",
                     "near_depth_mm", "far_depth_mm"):
            lo, hi = getattr(self, name)
            if lo < 0 or hi < lo:
                raise ValueError(f"{name} must be an ordered non-negative range")
        return self


class RunConfig(BaseSettings):
    model: ModelSection = Field(default_factory=ModelSection)
    train: TrainSection = Field(default_factory=TrainSection)
    eval: EvalSection = Field(default_factory=EvalSection)
    camera: CameraSection = Field(default_factory=CameraSection)
    synth: SynthSection = Field(default_factory=SynthSection)

    model_config = SettingsConfigDict(
        env_prefix="DASNET_",
        env_nested_delimiter="__",
        extra="forbid",
        protected_namespaces=(),
    )

    @classmethod
    def settings_customise_sources(
        cls,
        settings_cls: type[BaseSettings],
        init_settings: PydanticBaseSettingsSource,
        env_settings: PydanticBaseSettingsSource,
        dotenv_settings: PydanticBaseSettingsSource,
        file_secret_settings: PydanticBaseSettingsSource,
    ) -> tuple[PydanticBaseSettingsSource, ...]:
        return (init_settings, env_settings, JsonConfigSettingsSource(settings_cls))


def load_config(path: Path | str | None = None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e

    class FileRunConfig(RunConfig):
        model_config = SettingsConfigDict(json_file=path, json_file_encoding="utf-8")

    logger.info(f"Loading run config from {path}")
    return RunConfig.model_validate(FileRunConfig().model_dump())


def dump_config(cfg: RunConfig) -> str:
    return cfg.model_dump_json(indent=2)
