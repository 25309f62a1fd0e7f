"""
Run configuration: TrainConfig (model + schedule) and DataConfig (synthetic benchmark)

Sources, lowest to highest precedence:
    dataclass defaults < key=value config file < environment
    (LESIONSEG_SEED, LESIONSEG_OUTPUT_DIR) < CLI overrides
"""

import os
from dataclasses import dataclass, fields, asdict, replace

from dotenv import dotenv_values

from errors import ConfigError, SynthDataError
from synthdata import DatasetSpec, low_contrast_variant

ENV_SEED = "LESIONSEG_SEED"
ENV_OUTPUT_DIR = "LESIONSEG_OUTPUT_DIR"

_TRUE = {"1", "true", "yes", "on"}
_FALSE = {"0", "false", "no", "off"}


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 8
    epochs: int = 30
    image_size: int = 64
    patch_size: int = 8
    embed_dim: int = 32
    vision_depth: int = 2
    text_depth: int = 2
    encoder_heads: int = 4
    text_length: int = 16
    n_learnable_tokens: int = 10
    margin: float = 0.4
    tpca_heads: int = 4
    decoder_hidden: int = 0  # 0 -> embed_dim
    freeze_encoder: bool = True
    seed: int = 0
    augment_flip: bool = True
    use_learnable_prompt: bool = True
    use_tpca: bool = True
    use_mc_loss: bool = True
    mask_pad_queries: bool = False
    linear_bias: bool = True
    eval_every: int = 5
    category: str = "lesionblob"
    output_dir: str = "runs/default"

    def __post_init__(self):
        positive = ("learning_rate", "batch_size", "epochs", "image_size", "patch_size", "embed_dim",
                    "vision_depth", "text_depth", "encoder_heads", "text_length", "tpca_heads", "eval_every")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)!r}")
        if self.n_learnable_tokens < 0 or self.decoder_hidden < 0 or self.seed < 0:
            raise ConfigError("n_learnable_tokens, decoder_hidden and seed must be non-negative")
        if not 0.0 < self.margin <= 1.0:
            raise ConfigError(f"margin must lie in (0, 1], got {self.margin}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size {self.image_size} is not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.encoder_heads:
            raise ConfigError(f"embed_dim {self.embed_dim} is not divisible by encoder_heads {self.encoder_heads}")
        if self.use_tpca and self.tpca_heads > self.embed_dim:
            raise ConfigError(f"tpca_heads {self.tpca_heads} exceeds embed_dim {self.embed_dim}")
        if not self.category.strip():
            raise ConfigError("category must be a non-empty word")
        if self.use_learnable_prompt and self.anchor_length + self.n_learnable_tokens > self.text_length:
            raise ConfigError(
                f"{self.anchor_length} template words + {self.n_learnable_tokens} learnable tokens "
                f"do not fit text_length {self.text_length}")

    @property
    def anchor_length(self):
        """Words in "a photo of a normal [obj]" once the category is filled in"""
        return 5 + len(self.category.split())


@dataclass
class DataConfig:
    data_seed: int = 0
    train_normal: int = 64
    train_abnormal: int = 64
    test_normal: int = 24
    test_abnormal: int = 24
    lesion_min: int = 1
    lesion_max: int = 3
    contrast: float = 0.5
    texture_scale: int = 16
    min_area: int = 20
    max_area: int = 900
    min_radius: int = 3
    max_radius: int = 10
    feather_radius: int = 0
    low_contrast: float = 0.12
    low_contrast_feather: int = 3

    def to_spec(self, image_size, category="lesionblob"):
        try:
            return DatasetSpec(
                seed=self.data_seed,
                train_normal=self.train_normal, train_abnormal=self.train_abnormal,
                test_normal=self.test_normal, test_abnormal=self.test_abnormal,
                image_size=image_size,
                lesion_min=self.lesion_min, lesion_max=self.lesion_max,
                contrast=self.contrast, texture_scale=self.texture_scale,
                min_area=self.min_area, max_area=self.max_area,
                min_radius=self.min_radius, max_radius=self.max_radius,
                feather_radius=self.feather_radius, category=category)
        except SynthDataError as e:
            raise ConfigError(f"invalid dataset settings: {e}") from e

    def hard_spec(self, image_size, category="lesionblob"):
        """Low-contrast split with feathered rims"""
        return low_contrast_variant(self.to_spec(image_size, category),
                                    self.low_contrast, self.low_contrast_feather)


@dataclass
class Settings:
    train: TrainConfig
    data: DataConfig

    def dataset_spec(self):
        return self.data.to_spec(self.train.image_size, self.train.category)

    def hard_dataset_spec(self):
        return self.data.hard_spec(self.train.image_size, self.train.category)

    def with_train(self, **changes):
        return Settings(replace(self.train, **changes), self.data)

    def as_mapping(self):
        values = asdict(self.train)
        values.update(asdict(self.data))
        return values

    def to_lines(self):
        """Sorted key=value lines; floats in repr form so they parse back exactly"""
        return [f"{key}={format_value(value)}" for key, value in sorted(self.as_mapping().items())]


TRAIN_KEYS = {f.name: f for f in fields(TrainConfig)}
DATA_KEYS = {f.name: f for f in fields(DataConfig)}


def format_value(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_bool(key, value):
    if isinstance(value, bool):
        return value
    text = str(value).strip().lower()
    if text in _TRUE:
        return True
    if text in _FALSE:
        return False
    raise ConfigError(f"{key}: expected true/false, got {value!r}")


def _coerce(key, field_type, value):
    if value is None:
        raise ConfigError(f"{key}: missing value")
    kind = field_type if isinstance(field_type, type) else {"int": int, "float": float,
                                                           "bool": bool, "str": str}[field_type]
    if kind is bool:
        return parse_bool(key, value)
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value) if not isinstance(value, str) else int(value.strip())
        if kind is float:
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot read {value!r} as {kind.__name__}") from None
    return str(value).strip()


def settings_from_mapping(values):
    """Build Settings from a flat key -> raw value mapping; unknown keys are errors"""
    unknown = sorted(set(values) - set(TRAIN_KEYS) - set(DATA_KEYS))
    if unknown:
        raise ConfigError(f"unknown configuration keys: {', '.join(unknown)}")
    train = {k: _coerce(k, TRAIN_KEYS[k].type, v) for k, v in values.items() if k in TRAIN_KEYS}
    data = {k: _coerce(k, DATA_KEYS[k].type, v) for k, v in values.items() if k in DATA_KEYS}
    return Settings(TrainConfig(**train), DataConfig(**data))


def read_config_file(path):
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    return dict(dotenv_values(path))


def load_settings(path=None, env=None, overrides=None):
    """Merge every configuration source; `env` defaults to os.environ"""
    values = {}
    if path:
        values.update(read_config_file(path))
    env = os.environ if env is None else env
    if env.get(ENV_SEED):
        values["seed"] = env[ENV_SEED]
    if env.get(ENV_OUTPUT_DIR):
        values["output_dir"] = env[ENV_OUTPUT_DIR]
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return settings_from_mapping(values)


def settings_from_lines(lines):
    """Inverse of Settings.to_lines (checkpoint config snapshot)"""
    values = {}
    for line in lines:
        if not line.strip():
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise ConfigError(f"malformed config line: {line!r}")
        values[key.strip()] = value.strip()
    return settings_from_mapping(values)
