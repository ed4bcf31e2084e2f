"""
Configuration models

Every default mirrors the published training setup unless the field says
otherwise. The ``desk`` profile shrinks volumes and networks so experiments
finish on a workstation CPU.
"""

import json
import os
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from ddreg.errors import ConfigurationError

Design = Literal["BL-N", "BL-NS", "SG-ND", "SG-NSD", "UW-NSD", "UW-NSDH"]
Profile = Literal["desk", "paper"]

# Loss terms per ablation design, and whether their weights are learned
DESIGNS: Dict[str, Tuple[Tuple[str, ...], bool]] = {
    "BL-N": (("NCC",), False),
    "BL-NS": (("NCC", "SSIM"), False),
    "SG-ND": (("NCC", "DSC"), False),
    "SG-NSD": (("NCC", "SSIM", "DSC"), False),
    "UW-NSD": (("NCC", "SSIM", "DSC"), True),
    "UW-NSDH": (("NCC", "SSIM", "DSC", "HD"), True),
}


class StrictModel(BaseModel):
    """Base model rejecting unknown keys"""

    model_config = ConfigDict(extra="forbid")


class AugmentConfig(StrictModel):
    """
    Bounds of the on-the-fly moving image synthesis
    """

    gamma_range: Tuple[float, float] = Field(
        (0.5, 2.0),
        title="Gamma range",
        description="Gamma exponent is drawn uniformly from this closed interval",
    )
    brightness_frac: float = Field(0.2, ge=0, le=1, description="Maximum additive brightness shift")
    max_rotation_deg: float = Field(10.0, ge=0, description="Bound on each Euler angle")
    max_rigid_translation_mm: float = Field(30.0, ge=0, description="Bound on the translation norm")
    max_nonrigid_mm: float = Field(
        6.0,
        ge=0,
        description="Bound on the displacement norm at each TPS control point",
    )
    control_grid: Tuple[int, int, int] = Field((8, 8, 8), description="TPS control nodes per axis")
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("gamma_range")
    @classmethod
    def _check_gamma(cls, value):
        low, high = value
        if not 0 < low <= high:
            raise ValueError("gamma range must satisfy 0 < low <= high")
        return value

    @field_validator("control_grid")
    @classmethod
    def _check_grid(cls, value):
        if any(n < 2 for n in value):
            raise ValueError("control grid needs at least 2 nodes per axis")
        return value

    @classmethod
    def identity(cls, seed: int = 0) -> "AugmentConfig":
        """Configuration that reproduces the fixed image exactly"""
        return cls(
            gamma_range=(1.0, 1.0),
            brightness_frac=0.0,
            max_rotation_deg=0.0,
            max_rigid_translation_mm=0.0,
            max_nonrigid_mm=0.0,
            seed=seed,
        )


class NetConfig(StrictModel):
    """
    U-Net displacement predictor layout
    """

    depth: int = Field(3, ge=1)
    filters: List[int] = Field([8, 16, 32], description="Convolution filters per level")
    head_filters: int = Field(16, ge=1)
    leaky_slope: float = Field(0.2, gt=0, lt=1)
    input_channels: Literal[2] = 2
    output_channels: Literal[3] = 3
    input_shape: Tuple[int, int, int] = Field((64, 64, 64), description="Network input voxels")

    @model_validator(mode="after")
    def _check_layout(self):
        if len(self.filters) != self.depth:
            raise ValueError(f"depth {self.depth} needs {self.depth} filter counts, got {self.filters}")
        divisor = 2**self.depth
        if any(n % divisor for n in self.input_shape):
            raise ValueError(f"input shape {self.input_shape} must be divisible by {divisor}")
        return self


class SchedulerConfig(StrictModel):
    """Reduce-on-plateau learning rate schedule"""

    factor: float = Field(0.1, gt=0, lt=1)
    patience: int = Field(10, ge=1)
    min_delta: float = Field(1e-4, ge=0, description="Relative improvement needed to reset patience")


class TrainSettings(StrictModel):
    """
    Training loop settings, the `train` section of an experiment
    """

    design: Design = "UW-NSD"
    lr: float = Field(1e-3, gt=0)
    finetune_lr: float = Field(1e-4, gt=0, description="Initial learning rate for transfer learning")
    accumulation: int = Field(8, ge=1, description="Samples averaged per optimizer step")
    scheduler: SchedulerConfig = SchedulerConfig()
    max_epochs: int = Field(200, ge=0)
    step1_epochs: Optional[int] = Field(
        None,
        ge=0,
        description="Frozen-encoder epochs of two-step finetuning, default a quarter of max_epochs",
    )
    seed: int = Field(0, ge=0)
    reg_weight: float = Field(5e-3, gt=0, lt=1, description="Initial regularizer weight")
    ncc_window: Optional[int] = Field(None, description="Odd window for local NCC, global when unset")
    precomputed_pairs: bool = Field(
        False,
        description="Generate training pairs once and reuse them every epoch",
    )
    validation_pairs: int = Field(1, ge=1, description="Fixed validation pairs per validation volume")

    @field_validator("ncc_window")
    @classmethod
    def _check_window(cls, value):
        if value is not None and (value < 1 or value % 2 == 0):
            raise ValueError("ncc_window must be a positive odd integer")
        return value


class TrainConfig(TrainSettings):
    """Training settings together with the augmentation and network they drive"""

    augment: AugmentConfig = AugmentConfig()
    net: NetConfig = NetConfig()

    @property
    def terms(self) -> Tuple[str, ...]:
        """Loss terms of the design"""
        return DESIGNS[self.design][0]

    @property
    def learned_weights(self) -> bool:
        """True for uncertainty-weighted designs"""
        return DESIGNS[self.design][1]

    @property
    def two_step_epochs(self) -> int:
        """Length of the frozen-encoder phase"""
        if self.step1_epochs is not None:
            return min(self.step1_epochs, self.max_epochs)
        return self.max_epochs // 4


class DataConfig(StrictModel):
    """Dataset locations and preprocessing"""

    manifest: Optional[Path] = Field(None, description="Dataset manifest (JSON list)")
    pairs: Optional[Path] = Field(None, description="Evaluation pair manifest")
    target_spacing: Optional[float] = Field(1.0, gt=0)
    crop_margin_mm: Optional[float] = Field(None, ge=0)
    shape: Optional[Tuple[int, int, int]] = None


class EvalConfig(StrictModel):
    """Evaluation pair generation and metrics"""

    pairs_per_volume: int = Field(1, ge=1)
    split: Literal["train", "val", "test"] = "test"
    seed: int = Field(1, ge=0, description="Augmentation seed of the evaluation pairs")
    labels: Optional[List[int]] = Field(None, description="Labels to score, all when unset")


class ExperimentConfig(StrictModel):
    """Complete experiment description"""

    data: DataConfig = DataConfig()
    augment: AugmentConfig = AugmentConfig()
    net: NetConfig = NetConfig()
    train: TrainSettings = TrainSettings()
    eval: EvalConfig = EvalConfig()

    def train_config(self) -> TrainConfig:
        """Assemble the training configuration from the sections"""
        return TrainConfig(**dict(self.train), augment=self.augment, net=self.net)


PROFILES: Dict[str, dict] = {
    "desk": {
        "net": {"depth": 2, "filters": [8, 16], "input_shape": [32, 32, 32]},
        "train": {"max_epochs": 200},
        "data": {"shape": [32, 32, 32]},
    },
    "paper": {
        "net": {
            "depth": 6,
            "filters": [32, 64, 128, 256, 512, 1024],
            "input_shape": [128, 128, 128],
        },
        "train": {"max_epochs": 100000},
        "data": {"shape": [128, 128, 128]},
    },
}


def deep_merge(base: dict, override: dict) -> dict:
    """Recursively merge `override` onto `base`"""
    merged = dict(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def json_pointer(loc) -> str:
    """JSON pointer for a pydantic error location"""
    return "/" + "/".join(str(part) for part in loc)


class ConfigSchemaError(ConfigurationError):
    """A configuration document failed validation"""

    def __init__(self, pointer: str, message: str):
        super().__init__(f"{pointer}: {message}")
        self.pointer = pointer


def _resolve_paths(document: dict, base: Path) -> dict:
    data = dict(document.get("data", {}))
    for key in ("manifest", "pairs"):
        if data.get(key) is not None:
            path = Path(data[key])
            data[key] = str(path if path.is_absolute() else (base / path).resolve())
    return {**document, "data": data}


def load_experiment(
    path: Optional[Path] = None,
    profile: Profile = "desk",
    seed: Optional[int] = None,
) -> ExperimentConfig:
    """
    Load a configuration file on top of a profile

    Paths are resolved relative to the configuration file; ``seed`` overrides
    both the training and augmentation seeds.
    """
    document: dict = {}
    if path is not None:
        path = Path(path)
        try:
            document = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigSchemaError("/", f"invalid JSON ({e})") from e
        if not isinstance(document, dict):
            raise ConfigSchemaError("/", "configuration must be a JSON object")
        document = _resolve_paths(document, path.parent)

    document = deep_merge(PROFILES[profile], document)
    if seed is not None:
        document = deep_merge(document, {"train": {"seed": seed}, "augment": {"seed": seed}})

    try:
        return ExperimentConfig.model_validate(document)
    except ValidationError as e:
        first = e.errors()[0]
        raise ConfigSchemaError(json_pointer(first["loc"]), first["msg"]) from e


def worker_threads() -> int:
    """Thread cap from ``DDREG_THREADS`` (default 1)"""
    try:
        return max(1, int(os.environ.get("DDREG_THREADS", "1")))
    except ValueError:
        return 1
