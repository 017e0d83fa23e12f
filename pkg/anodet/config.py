"""
Experiment configuration.

Typed configuration records for the networks, the training loop, the
per-category preprocessing and the flat experiment file that unites them.

Experiment files use the same ``KEY=value`` syntax as a ``.env`` file::

    # texture run on the synthetic corpus
    category=synthetic
    kind=texture
    alpha=1e-4
"""

import difflib
import logging
import math
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, Optional, Tuple, Type, TypeVar, Union

from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from anodet.errors import ConfigurationError
from anodet.settings import get_settings

logger = logging.getLogger(__name__)

Kind = Literal['object', 'texture']

ConfigT = TypeVar('ConfigT', bound=BaseModel)

# name -> (kind, native side, channels, rotation eligible); textures always rotate
MVTEC_CATEGORIES: Dict[str, Tuple[str, int, int, bool]] = {
    'carpet': ('texture', 1024, 3, True),
    'grid': ('texture', 1024, 1, True),
    'leather': ('texture', 1024, 3, True),
    'tile': ('texture', 840, 3, True),
    'wood': ('texture', 1024, 3, True),
    'bottle': ('object', 900, 3, True),
    'cable': ('object', 1024, 3, False),
    'capsule': ('object', 1000, 3, False),
    'hazelnut': ('object', 1024, 3, True),
    'metal_nut': ('object', 700, 3, True),
    'pill': ('object', 800, 3, False),
    'screw': ('object', 1024, 1, True),
    'toothbrush': ('object', 1024, 3, False),
    'transistor': ('object', 1024, 3, False),
    'zipper': ('object', 1024, 1, False),
}

OBJECT_ROTATION = (-45.0, 45.0)
TEXTURE_ROTATION = (0.0, 45.0)


def _is_power_of_two(value: int) -> bool:
    return value > 0 and (value & (value - 1)) == 0


class NetworkConfig(BaseModel):
    """Shape parameters shared by the encoder, generator and critic."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    image_side: int = Field(128, ge=32, description="input image side in pixels")
    channels: int = Field(3, description="image channels (1 or 3)")
    latent_dim: int = Field(64, ge=1, description="latent space dimension")
    base_width: int = Field(32, ge=8, description="filters in the first convolution")
    max_width: Optional[int] = Field(None, ge=8, description="cap on filters per stage (default 8 x base_width)")
    leaky_slope: float = Field(0.2, ge=0.0, lt=1.0, description="negative slope of LeakyReLU")

    @field_validator('image_side')
    @classmethod
    def _side_is_power_of_two(cls, value: int) -> int:
        if not _is_power_of_two(value):
            raise ValueError(f"must be a power of two >= 32, got {value}")
        return value

    @field_validator('channels')
    @classmethod
    def _channels_supported(cls, value: int) -> int:
        if value not in (1, 3):
            raise ValueError(f"must be 1 or 3, got {value}")
        return value

    @property
    def stages(self) -> int:
        """Number of resolution-halving stages between image_side and 4x4."""
        return int(math.log2(self.image_side)) - 2

    def widths(self) -> Tuple[int, ...]:
        """Filter count at each resolution, from image_side down to 4x4."""
        cap = self.max_width or 8 * self.base_width
        return tuple(min(self.base_width * 2 ** i, cap) for i in range(self.stages + 1))

    @property
    def feature_dim(self) -> int:
        """Width of the critic's joint representation (the feature tap)."""
        return self.widths()[-1]


class TrainConfig(BaseModel):
    """Hyperparameters of the alternating optimization."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    alpha: float = Field(1e-4, ge=0.0, le=1.0, description="weight of the consistency loss in the E,G objective")
    gp_coefficient: float = Field(10.0, ge=0.0, description="gradient penalty coefficient")
    batch_size: int = Field(32, ge=1, description="real samples per minibatch")
    learning_rate: float = Field(1e-4, gt=0.0, description="Adam learning rate")
    adam_beta1: float = Field(0.5, ge=0.0, lt=1.0, description="Adam beta1")
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0, description="Adam beta2")
    latent_dim: int = Field(64, ge=1, description="latent space dimension")
    total_steps: int = Field(10000, ge=1, description="number of training steps")
    seed: int = Field(0, description="seed of every random stream")
    category_kind: Kind = Field('object', description="object or texture pipeline")
    checkpoint_every: int = Field(1000, ge=0, description="steps between checkpoints (0: final only)")
    log_every: int = Field(10, ge=1, description="steps between metrics log records")
    critic_steps: int = Field(1, ge=1, description="critic updates per E,G update")

    @property
    def variant(self) -> str:
        """Name of the objective the alpha endpoint selects."""
        if self.alpha == 0.0:
            return 'egbad'
        if self.alpha == 1.0:
            return 'double_autoencoder'
        return 'cbigan'


class CategorySpec(BaseModel):
    """Per-category preprocessing. ``kind`` alone selects the pipeline."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    name: str
    kind: Kind
    channels: int = 3
    train_side: int = Field(128, ge=1, description="side of the network input (object image or texture patch)")
    resize_side: int = Field(128, ge=1, description="side every image is resized to before cropping or tiling")
    rotation_range: Optional[Tuple[float, float]] = Field(
        None, description="clockwise rotation range in degrees for training augmentation"
    )

    @model_validator(mode='after')
    def _sides_consistent(self) -> 'CategorySpec':
        if self.kind == 'object' and self.train_side != self.resize_side:
            raise ValueError("object categories train on the resized image: train_side must equal resize_side")
        if self.kind == 'texture' and self.resize_side % self.train_side != 0:
            raise ValueError("texture resize_side must be a multiple of the patch side")
        return self


class ExperimentConfig(BaseModel):
    """Everything one experiment needs, as stored in a flat config file."""

    model_config = ConfigDict(frozen=True, extra='forbid')

    # category and paths
    category: str = Field('synthetic', min_length=1, description="category name (MVTec name or custom)")
    kind: Optional[Kind] = Field(None, description="object or texture (default: MVTec preset)")
    channels: Optional[int] = Field(None, description="image channels (default: MVTec preset, else 3)")
    rotation: Optional[bool] = Field(None, description="enable rotation augmentation for objects (default: preset)")
    dataset_root: Path = Field(Path('data'), description="root of the MVTec-style dataset tree")
    output_dir: Optional[Path] = Field(None, description="run directory (default: ANODET_OUTPUT_ROOT/<category>)")

    # preprocessing
    object_side: int = Field(128, ge=32, description="side object images are resized to")
    texture_side: int = Field(512, ge=32, description="side texture images are resized to")
    patch_side: int = Field(64, ge=32, description="texture patch side")
    stride: Optional[int] = Field(None, ge=1, description="test tiling stride (default: patch_side)")

    # networks
    latent_dim: int = Field(64, ge=1, description="latent space dimension")
    base_width: int = Field(32, ge=8, description="filters in the first convolution")
    max_width: Optional[int] = Field(None, ge=8, description="cap on filters per stage")
    leaky_slope: float = Field(0.2, ge=0.0, lt=1.0, description="negative slope of LeakyReLU")

    # training
    alpha: float = Field(1e-4, ge=0.0, le=1.0, description="weight of the consistency loss")
    gp_coefficient: float = Field(10.0, ge=0.0, description="gradient penalty coefficient")
    batch_size: int = Field(32, ge=1, description="real samples per minibatch")
    learning_rate: float = Field(1e-4, gt=0.0, description="Adam learning rate")
    adam_beta1: float = Field(0.5, ge=0.0, lt=1.0, description="Adam beta1")
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0, description="Adam beta2")
    total_steps: int = Field(10000, ge=1, description="number of training steps")
    seed: int = Field(0, description="seed of every random stream")
    checkpoint_every: int = Field(1000, ge=0, description="steps between checkpoints (0: final only)")
    log_every: int = Field(10, ge=1, description="steps between metrics log records")
    critic_steps: int = Field(1, ge=1, description="critic updates per E,G update")

    # scoring
    score_lambda: float = Field(0.1, ge=0.0, le=1.0, description="weight of the feature term in the anomaly score")

    @field_validator('object_side', 'patch_side')
    @classmethod
    def _power_of_two(cls, value: int) -> int:
        if not _is_power_of_two(value):
            raise ValueError(f"must be a power of two, got {value}")
        return value

    @field_validator('channels')
    @classmethod
    def _channels_supported(cls, value: Optional[int]) -> Optional[int]:
        if value is not None and value not in (1, 3):
            raise ValueError(f"must be 1 or 3, got {value}")
        return value

    @model_validator(mode='after')
    def _texture_tiling(self) -> 'ExperimentConfig':
        if self.texture_side % self.patch_side != 0:
            raise ValueError(f"texture_side {self.texture_side} is not divisible by patch_side {self.patch_side}")
        if self.category not in MVTEC_CATEGORIES and self.kind is None:
            raise ValueError(f"custom category '{self.category}' needs an explicit kind")
        return self

    def resolved_kind(self) -> str:
        if self.kind is not None:
            return self.kind
        return MVTEC_CATEGORIES[self.category][0]

    def category_spec(self) -> CategorySpec:
        preset = MVTEC_CATEGORIES.get(self.category)
        kind = self.resolved_kind()
        channels = self.channels or (preset[2] if preset else 3)
        if kind == 'object':
            rotate = self.rotation if self.rotation is not None else bool(preset and preset[3])
            return CategorySpec(
                name=self.category, kind='object', channels=channels,
                train_side=self.object_side, resize_side=self.object_side,
                rotation_range=OBJECT_ROTATION if rotate else None,
            )
        return CategorySpec(
            name=self.category, kind='texture', channels=channels,
            train_side=self.patch_side, resize_side=self.texture_side,
            rotation_range=TEXTURE_ROTATION,
        )

    def network_config(self) -> NetworkConfig:
        spec = self.category_spec()
        return parse_config(NetworkConfig, {
            'image_side': spec.train_side,
            'channels': spec.channels,
            'latent_dim': self.latent_dim,
            'base_width': self.base_width,
            'max_width': self.max_width,
            'leaky_slope': self.leaky_slope,
        })

    def train_config(self) -> TrainConfig:
        return parse_config(TrainConfig, {
            'alpha': self.alpha,
            'gp_coefficient': self.gp_coefficient,
            'batch_size': self.batch_size,
            'learning_rate': self.learning_rate,
            'adam_beta1': self.adam_beta1,
            'adam_beta2': self.adam_beta2,
            'latent_dim': self.latent_dim,
            'total_steps': self.total_steps,
            'seed': self.seed,
            'category_kind': self.resolved_kind(),
            'checkpoint_every': self.checkpoint_every,
            'log_every': self.log_every,
            'critic_steps': self.critic_steps,
        })

    def run_dir(self) -> Path:
        if self.output_dir is not None:
            return self.output_dir
        return get_settings().output_root / self.category


def parse_config(cls: Type[ConfigT], values: Mapping[str, Any]) -> ConfigT:
    """Validate ``values`` into ``cls``, turning the first failure into a ConfigurationError."""
    try:
        return cls.model_validate(dict(values))
    except ValidationError as e:
        error = e.errors()[0]
        field = '.'.join(str(part) for part in error['loc']) or cls.__name__
        message = error['msg']
        if error['type'] == 'extra_forbidden':
            matches = difflib.get_close_matches(field, list(cls.model_fields), n=1)
            message = "unknown key" + (f"; did you mean '{matches[0]}'?" if matches else "")
        raise ConfigurationError(field, message) from None


def validate_config(config: ConfigT) -> ConfigT:
    """Re-validate an existing config (e.g. one built with ``model_construct``)."""
    return parse_config(type(config), config.model_dump())


def load_config(path: Union[str, Path, None] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """Load a flat ``KEY=value`` experiment file and apply non-None overrides."""
    values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigurationError('config', f"file not found: {path}")
        for key, value in dotenv_values(path).items():
            if value is None:
                raise ConfigurationError(key.lower(), "missing '=' and value")
            values[key.lower()] = value
    for key, value in (overrides or {}).items():
        if value is not None:
            values[key] = value

    config = parse_config(ExperimentConfig, values)
    logger.debug(f"Loaded experiment config for category '{config.category}'")
    return config


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, Path):
        return value.as_posix()
    return str(value)


def dump_config(config: ExperimentConfig, path: Union[str, Path, None] = None) -> str:
    """Serialize to the canonical flat form; unset optional keys are written commented out."""
    lines = []
    for name in sorted(ExperimentConfig.model_fields):
        field = ExperimentConfig.model_fields[name]
        value = getattr(config, name)
        lines.append(f"# {field.description}")
        if value is None:
            lines.append(f"#{name}=")
        else:
            lines.append(f"{name}={_format_value(value)}")
    text = '\n'.join(lines) + '\n'
    if path is not None:
        Path(path).write_text(text)
    return text
