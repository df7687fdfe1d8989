"""Configuration settings for TERMCast."""

import configparser
import os
from enum import Enum
from pathlib import Path
from typing import List, Optional, Union

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from termcast.errors import ConfigError

# Load environment variables
load_dotenv()

# Runtime Configuration
LOG_LEVEL = os.getenv("TERMCAST_LOG_LEVEL", "INFO")
WORKERS = int(os.getenv("TERMCAST_WORKERS", "1"))
CHECK_FINITE = os.getenv("TERMCAST_CHECK_FINITE", "1").lower() not in ("0", "false", "no")
OUT_DIR = os.getenv("TERMCAST_OUT_DIR", "runs")

# Component Configuration
CLOSENESS_LEN = 6
COMPONENT_LEN = 7  # period / trend length (closeness slots + target slot)
DAYS_PER_WEEK = 7
SECONDS_PER_DAY = 86400

# Model Configuration
D_RELATION = 256
CONV_FILTERS = 32
CONV_LAYERS = 3
TRANSFORMER_DEPTH = 2
TRANSFORMER_HEADS = 4
MLP_EXTRA_HIDDEN = 128
LAYER_NORM_EPS = 1e-5
COSINE_EPS = 1e-8
PE_BASE = 10000.0

# Training Configuration
LEARNING_RATE = 1e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8
BATCH_SIZE = 16
MAX_EPOCHS = 300
EARLY_STOP_PATIENCE = 20
VALIDATION_FRACTION = 0.1
TRAIN_FRACTION = 0.8
DEFAULT_SEEDS = [0, 1, 2, 3, 4]

# Synthetic data defaults (Monday 2024-01-01 00:00 UTC)
SYNTH_START_TIME = 1704067200
# Lag-one noise coefficient range and outflow-to-inflow coupling
SYNTH_PERSISTENCE = (0.6, 0.95)
SYNTH_TRANSFER = 0.5


class FusionMode(str, Enum):
    C0 = "C0"
    C1 = "C1"
    C2 = "C2"
    C3 = "C3"
    C4 = "C4"
    C5 = "C5"


class Variant(str, Enum):
    FULL = "full"
    V1 = "V1"
    V2 = "V2"
    V3 = "V3"


def parse_fusion(value: Union[str, FusionMode]) -> FusionMode:
    """Parse a fusion mode name, case-insensitively."""
    if isinstance(value, FusionMode):
        return value
    try:
        return FusionMode(str(value).strip().upper())
    except ValueError:
        raise ConfigError(f"unknown fusion mode: {value!r}") from None


def parse_variant(value: Union[str, Variant]) -> Variant:
    """Parse an ablation variant name, case-insensitively."""
    if isinstance(value, Variant):
        return value
    text = str(value).strip()
    if text.lower() == "full":
        return Variant.FULL
    try:
        return Variant(text.upper())
    except ValueError:
        raise ConfigError(f"unknown variant: {value!r}") from None


class ModelConfig(BaseModel):
    """Full TERMCast hyperparameter set.

    ``height``, ``width`` and ``intervals_per_day`` may be left unset in a
    config file; they are filled from the dataset with :meth:`for_series`.
    """

    model_config = ConfigDict(extra="forbid", frozen=True)

    height: Optional[int] = None
    width: Optional[int] = None
    intervals_per_day: Optional[int] = None
    d_relation: int = D_RELATION
    closeness_len: int = CLOSENESS_LEN
    component_len: int = COMPONENT_LEN
    conv_filters: int = CONV_FILTERS
    conv_layers: int = CONV_LAYERS
    transformer_depth: int = TRANSFORMER_DEPTH
    heads: int = TRANSFORMER_HEADS
    g_hidden: Optional[int] = None  # defaults to d_relation
    mlp_r_hidden: Optional[int] = None  # defaults to 2 * d_relation
    mlp_extra_hidden: int = MLP_EXTRA_HIDDEN
    fusion: FusionMode = FusionMode.C5
    variant: Variant = Variant.FULL
    alpha: float = Field(default=1.0, ge=0.0)
    beta: float = Field(default=1.0, ge=0.0)

    @field_validator("fusion", mode="before")
    @classmethod
    def _fusion(cls, v):
        return parse_fusion(v)

    @field_validator("variant", mode="before")
    @classmethod
    def _variant(cls, v):
        return parse_variant(v)

    @field_validator("height", "width", "intervals_per_day")
    @classmethod
    def _positive_or_unset(cls, v):
        if v is not None and v < 1:
            raise ValueError("must be >= 1")
        return v

    @field_validator("d_relation", "conv_filters", "conv_layers", "transformer_depth", "heads", "mlp_extra_hidden")
    @classmethod
    def _positive(cls, v):
        if v < 1:
            raise ValueError("must be >= 1")
        return v

    @model_validator(mode="after")
    def _check_shapes(self):
        if self.d_relation % 2:
            raise ValueError("d_relation must be even for the positional encoding")
        if self.d_relation % self.heads:
            raise ValueError("d_relation must be divisible by heads")
        if self.component_len != self.closeness_len + 1:
            raise ValueError("component_len must equal closeness_len + 1")
        return self

    @property
    def g_width(self) -> int:
        return self.g_hidden or self.d_relation

    @property
    def mlp_r_width(self) -> int:
        return self.mlp_r_hidden or 2 * self.d_relation

    @property
    def extra_dim(self) -> int:
        return self.require_intervals_per_day() + DAYS_PER_WEEK

    def require_intervals_per_day(self) -> int:
        if self.intervals_per_day is None:
            raise ConfigError("intervals_per_day is not set; resolve the config against a dataset first")
        return self.intervals_per_day

    def grid_shape(self) -> tuple:
        if self.height is None or self.width is None:
            raise ConfigError("height/width are not set; resolve the config against a dataset first")
        return (2, self.height, self.width)

    def for_series(self, height: int, width: int, intervals_per_day: int) -> "ModelConfig":
        """Fill dataset-derived fields, rejecting values that disagree."""
        for name, value in (("height", height), ("width", width), ("intervals_per_day", intervals_per_day)):
            current = getattr(self, name)
            if current is not None and current != value:
                raise ConfigError(f"{name}={current} does not match the dataset ({value})")
        return self.model_copy(update={"height": height, "width": width, "intervals_per_day": intervals_per_day})

    def with_options(self, **updates) -> "ModelConfig":
        """Validated copy with ``updates`` applied."""
        return build_model(ModelConfig, {**self.model_dump(), **updates})


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    epochs: int = Field(default=MAX_EPOCHS, ge=1)
    batch_size: int = Field(default=BATCH_SIZE, ge=1)
    lr: float = Field(default=LEARNING_RATE, ge=0.0)
    seed: int = 0
    early_stop_patience: int = Field(default=EARLY_STOP_PATIENCE, ge=1)
    validation_fraction: float = Field(default=VALIDATION_FRACTION, gt=0.0, lt=1.0)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    path: Optional[str] = None
    train_fraction: float = Field(default=TRAIN_FRACTION, gt=0.0, lt=1.0)


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    seeds: List[int] = Field(default_factory=lambda: list(DEFAULT_SEEDS))
    workers: int = Field(default=WORKERS, ge=1)

    @field_validator("seeds", mode="before")
    @classmethod
    def _split_seeds(cls, v):
        if isinstance(v, str):
            return [int(s) for s in v.replace(",", " ").split()]
        return v

    @field_validator("seeds")
    @classmethod
    def _nonempty(cls, v):
        if not v:
            raise ValueError("at least one seed is required")
        return v


class RunConfig(BaseModel):
    """Everything a CLI run needs; serialized as INI-style sections."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    model: ModelConfig = Field(default_factory=ModelConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    experiment: ExperimentConfig = Field(default_factory=ExperimentConfig)

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        parser = configparser.ConfigParser(interpolation=None)
        try:
            parser.read_string(text)
        except configparser.Error as e:
            raise ConfigError(f"cannot parse config: {e}") from None

        unknown = [s for s in parser.sections() if s not in cls.model_fields]
        if unknown:
            raise ConfigError(f"unknown config section(s): {', '.join(unknown)}")
        sections = {name: dict(parser.items(name)) for name in parser.sections()}
        return build_model(cls, sections)

    @classmethod
    def from_file(cls, path: Union[str, Path]) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from None
        return cls.from_text(text)

    def to_text(self) -> str:
        """Render the fully-resolved configuration; unset values are omitted."""
        lines = []
        for section in type(self).model_fields:
            lines.append(f"[{section}]")
            for key, value in getattr(self, section).model_dump(mode="json").items():
                if value is None:
                    continue
                if isinstance(value, list):
                    value = ", ".join(str(v) for v in value)
                lines.append(f"{key} = {value}")
            lines.append("")
        return "\n".join(lines)

    def with_overrides(self, **sections) -> "RunConfig":
        """Apply per-section updates, e.g. ``with_overrides(train={"seed": 3})``."""
        data = self.model_dump()
        for section, updates in sections.items():
            data[section].update({k: v for k, v in updates.items() if v is not None})
        return build_model(RunConfig, data)


def build_model(model_cls, data: dict):
    """Validate ``data`` into ``model_cls``, converting pydantic errors to ConfigError."""
    try:
        return model_cls.model_validate(data)
    except ValidationError as e:
        problems = "; ".join(
            f"{'.'.join(str(p) for p in err['loc']) or '<root>'}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None
