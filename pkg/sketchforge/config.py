"""
Configuration models and the key = value config file reader.
"""

import logging
import os
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from sketchforge.errors import ConfigError, UnknownComponentError

logger = logging.getLogger(__name__)

TV_PRESETS = {"cufs": 1e-5, "cufsf": 1e-2}


def worker_count() -> int:
    """Thread pool size, capped by SKETCHFORGE_THREADS."""
    env = os.environ.get("SKETCHFORGE_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            logger.warning("Ignoring non-integer SKETCHFORGE_THREADS=%r", env)
    return os.cpu_count() or 1


# ============ MODELS ============

class LossWeights(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    lambda_p: float = Field(1.0, ge=0)
    lambda_adv: float = Field(1e3, ge=0)
    lambda_tv: float = Field(1e-5, ge=0)
    layers: Tuple[int, ...] = (3, 4, 5)

    @field_validator("layers")
    @classmethod
    def _check_layers(cls, layers):
        if not layers:
            raise ValueError("layer set must not be empty")
        bad = [l for l in layers if not 1 <= l <= 5]
        if bad:
            raise ValueError(f"layers must lie in 1..5, got {bad}")
        return tuple(sorted(set(layers)))

    @classmethod
    def preset(cls, name: str, **overrides) -> "LossWeights":
        """Weights with the total-variation weight of a named preset ('cufs' or 'cufsf')."""
        key = name.strip().lower()
        if key not in TV_PRESETS:
            raise UnknownComponentError(f"Unknown tv preset '{name}', expected one of {', '.join(TV_PRESETS)}")
        return cls(**{"lambda_tv": TV_PRESETS[key], **overrides})

    @property
    def taps(self) -> Tuple[str, ...]:
        return tuple(f"relu{l}_1" for l in self.layers)


class AugmentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    brightness: bool = True
    contrast: bool = True
    saturation: bool = True
    sharpness: bool = True
    brightness_delta: float = Field(0.2, ge=0)
    factor_range: Tuple[float, float] = (0.8, 1.2)

    @classmethod
    def off(cls) -> "AugmentConfig":
        return cls(brightness=False, contrast=False, saturation=False, sharpness=False)

    @property
    def enabled(self) -> bool:
        return self.brightness or self.contrast or self.saturation or self.sharpness


class TrainConfig(BaseModel):
    model_config = ConfigDict(extra="forbid")

    batch_size: int = Field(6, ge=1)
    iterations: int = Field(1000, ge=0)
    lr_max: float = Field(1e-3, gt=0)
    lr_min: float = Field(1e-5, gt=0)
    lr_drops: Tuple[float, ...] = (0.4, 0.8)
    seed: int = 0
    k_ref: int = Field(5, ge=1)
    patch_k: int = Field(3, ge=1)
    gen_features: int = Field(32, ge=1)
    gen_blocks: int = Field(4, ge=0)
    disc_features: int = Field(16, ge=1)
    checkpoint_every: int = Field(0, ge=0)
    log_every: int = Field(50, ge=1)
    progress: bool = False
    augment: AugmentConfig = AugmentConfig()
    weights: LossWeights = LossWeights()

    @field_validator("patch_k")
    @classmethod
    def _odd_patch(cls, k):
        if k % 2 == 0:
            raise ValueError(f"patch_k must be odd, got {k}")
        return k

    @field_validator("lr_drops")
    @classmethod
    def _check_drops(cls, drops):
        if any(not 0 < d < 1 for d in drops):
            raise ValueError(f"lr_drops are fractions of the run in (0, 1), got {drops}")
        return tuple(sorted(drops))

    @model_validator(mode="after")
    def _check_lr(self):
        if self.lr_min > self.lr_max:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr_max {self.lr_max}")
        return self


class FsimParams(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    scales: int = Field(4, ge=1)
    orientations: int = Field(4, ge=1)
    min_length: float = Field(6.0, gt=0)
    mult: float = Field(2.0, gt=0)
    sigma_f: float = Field(0.5978, gt=0)
    delta_theta: float = Field(1.2, gt=0)
    k: float = 2.0
    t1: float = 0.85
    t2: float = 160.0


class RunConfig(BaseModel):
    """Everything a config file may set. Unknown keys are rejected."""
    model_config = ConfigDict(extra="forbid")

    # paths
    photos: Optional[Path] = None
    sketches: Optional[Path] = None
    landmarks: Optional[Path] = None
    store: Optional[Path] = None
    checkpoints: Optional[Path] = None
    extractor: Optional[Path] = None
    out: Optional[Path] = None
    extra_photos: List[Path] = []

    # numerics
    precision: str = "float32"
    seed: int = 0

    # training
    batch_size: int = 6
    iterations: int = 1000
    lr_max: float = 1e-3
    lr_min: float = 1e-5
    lr_drops: Tuple[float, ...] = (0.4, 0.8)
    k_ref: int = 5
    patch_k: int = 3
    gen_features: int = 32
    gen_blocks: int = 4
    disc_features: int = 16
    checkpoint_every: int = 0
    log_every: int = 50
    progress: bool = False
    augment: bool = True

    # losses
    lambda_p: float = 1.0
    lambda_adv: float = 1e3
    lambda_tv: Optional[float] = None
    tv_preset: str = "cufs"
    pm_layers: Tuple[int, ...] = (3, 4, 5)

    # metrics
    data_range: float = 1.0
    bilateral_sigma_spatial: float = 3.0
    bilateral_sigma_range: float = 0.1
    bilateral_radius: int = 7
    fsim_sigma_f: float = 0.5978

    @field_validator("precision")
    @classmethod
    def _check_precision(cls, value):
        if value not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got '{value}'")
        return value

    def loss_weights(self) -> LossWeights:
        overrides = {"lambda_p": self.lambda_p, "lambda_adv": self.lambda_adv, "layers": self.pm_layers}
        try:
            if self.lambda_tv is not None:
                return LossWeights(lambda_tv=self.lambda_tv, **overrides)
            return LossWeights.preset(self.tv_preset, **overrides)
        except ValidationError as e:
            raise ConfigError(f"invalid loss settings: {_describe(e)}") from None

    def train_config(self) -> TrainConfig:
        try:
            return self._train_config()
        except ValidationError as e:
            raise ConfigError(f"invalid training settings: {_describe(e)}") from None

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size,
            iterations=self.iterations,
            lr_max=self.lr_max,
            lr_min=self.lr_min,
            lr_drops=self.lr_drops,
            seed=self.seed,
            k_ref=self.k_ref,
            patch_k=self.patch_k,
            gen_features=self.gen_features,
            gen_blocks=self.gen_blocks,
            disc_features=self.disc_features,
            checkpoint_every=self.checkpoint_every,
            log_every=self.log_every,
            progress=self.progress,
            augment=AugmentConfig() if self.augment else AugmentConfig.off(),
            weights=self.loss_weights(),
        )

    def fsim_params(self) -> FsimParams:
        return FsimParams(sigma_f=self.fsim_sigma_f)


# ============ CONFIG FILE ============

_LIST_KEYS = {"extra_photos", "lr_drops", "pm_layers"}


def _describe(error: ValidationError) -> str:
    return "; ".join(
        f"{'.'.join(str(p) for p in err['loc']) or 'config'}: {err['msg']}" for err in error.errors()
    )


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, Any]:
    """
    Parse `key = value` lines. `#` starts a comment; list keys take comma-separated values.

    Returns:
        Raw values keyed by name, ready for RunConfig validation
    """
    values: Dict[str, Any] = {}
    for number, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{number}: expected 'key = value', got '{raw.strip()}'")
        key, value = (part.strip() for part in line.split("=", 1))
        key = key.lower().replace("-", "_")
        if key in _LIST_KEYS:
            values[key] = [item.strip() for item in value.split(",") if item.strip()]
        else:
            values[key] = value
    return values


def build_run_config(file_values: Dict[str, Any], overrides: Dict[str, Any]) -> RunConfig:
    """Merge file values with command-line overrides (flags win) and validate."""
    merged = {**file_values, **{k: v for k, v in overrides.items() if v is not None}}
    try:
        return RunConfig(**merged)
    except ValidationError as e:
        raise ConfigError(f"invalid configuration: {_describe(e)}") from None


def load_run_config(path: Optional[Path], overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    file_values: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        file_values = parse_config_text(path.read_text(encoding="utf-8"), str(path))
    return build_run_config(file_values, overrides or {})


def require_paths(config: RunConfig, *names: str, must_exist: bool = True) -> None:
    """Check that the named path settings are present (and exist) before any work starts."""
    for name in names:
        value = getattr(config, name)
        if value is None:
            raise ConfigError(f"missing required setting '{name}'")
        if must_exist and not Path(value).exists():
            raise ConfigError(f"'{name}' path does not exist: {value}")
