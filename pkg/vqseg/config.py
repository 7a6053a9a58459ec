"""
Run configuration.
Pydantic models for every knob of a run, loaded from YAML with optional
environment overrides (.env via python-dotenv).
"""

import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .errors import ConfigurationError

ENV_PREFIX = "VQSEG_"


class VQConfig(BaseModel):
    """Vector-quantisation bottleneck settings."""
    model_config = ConfigDict(extra="forbid")

    beta: float = Field(0.25, description="Commitment weight")
    K: int = Field(19, description="Number of code vectors")
    d: int = Field(32, description="Code dimension")
    seed: int = Field(0, description="Seed for codebook initialisation")

    @model_validator(mode="after")
    def _check(self):
        if self.K < 1 or self.d < 1:
            raise ConfigurationError(f"codebook needs K >= 1 and d >= 1, got K={self.K}, d={self.d}")
        if not self.beta > 0:
            raise ConfigurationError(f"beta must be > 0, got {self.beta}")
        return self


class ModelConfig(BaseModel):
    """Encoder / decoder topology."""
    model_config = ConfigDict(extra="forbid")

    num_classes: int = Field(8, description="Number of segmentation classes")
    widths: List[int] = Field(default_factory=lambda: [16, 24, 32, 48], description="Channel width per encoder stage")
    strides: List[int] = Field(default_factory=lambda: [2, 2, 2, 2], description="Stride per encoder stage")
    attention_stages: List[int] = Field(default_factory=lambda: [2, 3], description="Stages followed by a local-global block")
    expansion: int = Field(2, description="Inverted-residual expansion ratio")
    heads: int = Field(2, description="Attention heads")
    transformer_depth: int = Field(1, description="Transformer layers per local-global block")
    mlp_ratio: float = Field(2.0, description="Feed-forward hidden width relative to token width")
    bottleneck_dim: int = Field(32, description="Channels entering the quantiser")
    patch_size: Tuple[int, int] = Field((2, 2), description="Patch (w, h) for interpatch attention")
    use_vq: bool = Field(True, description="False bypasses the quantiser (baseline)")
    dtype: Literal["float32", "float64"] = Field("float32", description="Parameter precision")
    vq: VQConfig = Field(default_factory=VQConfig)

    @model_validator(mode="after")
    def _check(self):
        if self.num_classes < 2:
            raise ConfigurationError(f"num_classes must be >= 2, got {self.num_classes}")
        if len(self.widths) != len(self.strides) or not self.widths:
            raise ConfigurationError(f"widths {self.widths} and strides {self.strides} must be non-empty and equally long")
        if any(s not in (1, 2) for s in self.strides):
            raise ConfigurationError(f"strides must be 1 or 2, got {self.strides}")
        if any(w < 1 for w in self.widths):
            raise ConfigurationError(f"widths must be positive, got {self.widths}")
        if self.bottleneck_dim != self.vq.d:
            raise ConfigurationError(
                f"bottleneck_dim ({self.bottleneck_dim}) must equal vq.d ({self.vq.d})"
            )
        for stage in self.attention_stages:
            if not 0 <= stage < len(self.widths):
                raise ConfigurationError(f"attention stage {stage} outside 0..{len(self.widths) - 1}")
            if self.widths[stage] % self.heads:
                raise ConfigurationError(
                    f"stage {stage} width {self.widths[stage]} not divisible by heads={self.heads}"
                )
        if min(self.patch_size) < 1:
            raise ConfigurationError(f"patch size must be positive, got {self.patch_size}")
        return self

    @property
    def downsampling(self) -> int:
        factor = 1
        for s in self.strides:
            factor *= s
        return factor


class AugmentConfig(BaseModel):
    """Training-time augmentation: random resize, crop, horizontal flip."""
    model_config = ConfigDict(extra="forbid")

    enabled: bool = True
    scale_range: Tuple[float, float] = (0.5, 2.0)
    crop: Tuple[int, int] = (64, 64)
    hflip_prob: float = 0.5
    seed: int = 0

    @model_validator(mode="after")
    def _check(self):
        lo, hi = self.scale_range
        if not (0 < lo <= hi):
            raise ConfigurationError(f"scale_range must be positive and ordered, got {self.scale_range}")
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise ConfigurationError(f"hflip_prob must be in [0, 1], got {self.hflip_prob}")
        if min(self.crop) < 1:
            raise ConfigurationError(f"crop must be positive, got {self.crop}")
        return self


class DataConfig(BaseModel):
    """Where samples come from and how they are normalised."""
    model_config = ConfigDict(extra="forbid")

    kind: Literal["synthetic", "folder"] = "synthetic"
    root: Optional[str] = Field(None, description="Dataset root with {split}/{images,labels}")
    train_split: str = "train"
    val_split: str = "val"
    num_train: int = 500
    num_val: int = 100
    image_size: int = 64
    noise: float = 0.05
    mean: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: Tuple[float, float, float] = (0.25, 0.25, 0.25)
    ignore_index: int = 255
    remap_file: Optional[str] = Field(None, description="YAML mapping raw label id -> train id")
    class_names: Optional[List[str]] = None
    num_workers: int = 0

    @model_validator(mode="after")
    def _check(self):
        if self.kind == "folder" and not self.root:
            raise ConfigurationError("data.kind = folder requires data.root")
        if any(s <= 0 for s in self.std):
            raise ConfigurationError(f"normalisation std must be positive, got {self.std}")
        return self


class TrainConfig(BaseModel):
    """Optimisation schedule."""
    model_config = ConfigDict(extra="forbid")

    lr0: float = 1e-3
    max_iters: int = 2000
    batch_size: int = 8
    poly_power: float = 1.0
    weight_decay: float = 0.01
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    eval_interval: int = 500
    checkpoint_interval: int = 500
    log_interval: int = 50
    window: Optional[int] = Field(None, description="Sliding-window size at evaluation (default: full image)")
    window_stride: Optional[int] = None

    @model_validator(mode="after")
    def _check(self):
        if not self.lr0 > 0:
            raise ConfigurationError(f"lr0 must be > 0, got {self.lr0}")
        if self.max_iters < 1:
            raise ConfigurationError(f"max_iters must be >= 1, got {self.max_iters}")
        if not self.poly_power > 0:
            raise ConfigurationError(f"poly_power must be > 0, got {self.poly_power}")
        if self.batch_size < 1:
            raise ConfigurationError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("eval_interval", "checkpoint_interval", "log_interval"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.window_stride is not None and self.window is None:
            raise ConfigurationError("window_stride given without window")
        return self


class RunConfig(BaseModel):
    """Root configuration for train / eval / ablate."""
    model_config = ConfigDict(extra="forbid")

    name: str = "desk"
    run_dir: str = "runs/desk"
    seed: int = 0
    model: ModelConfig = Field(default_factory=ModelConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)

    def with_overrides(self, **changes: Any) -> "RunConfig":
        """Return a validated copy with dotted-path overrides applied."""
        data = self.model_dump()
        for dotted, value in changes.items():
            _set_dotted(data, dotted, value)
        return build_config(data)

    def seeded(self, seed: int) -> "RunConfig":
        """Propagate one seed to every seeded component."""
        return self.with_overrides(**{"seed": seed, "model.vq.seed": seed, "augment.seed": seed})


def _set_dotted(data: Dict[str, Any], dotted: str, value: Any) -> None:
    keys = dotted.split(".")
    node = data
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def build_config(data: Dict[str, Any]) -> RunConfig:
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration: {e}") from e


def _env_overrides() -> Dict[str, Any]:
    load_dotenv()
    overrides: Dict[str, Any] = {}
    if os.getenv(f"{ENV_PREFIX}RUN_DIR"):
        overrides["run_dir"] = os.environ[f"{ENV_PREFIX}RUN_DIR"]
    if os.getenv(f"{ENV_PREFIX}NUM_WORKERS"):
        overrides["data.num_workers"] = int(os.environ[f"{ENV_PREFIX}NUM_WORKERS"])
    if os.getenv(f"{ENV_PREFIX}DTYPE"):
        overrides["model.dtype"] = os.environ[f"{ENV_PREFIX}DTYPE"]
    return overrides


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None) -> RunConfig:
    """
    Load a run configuration.

    Args:
        path: YAML file; None gives the built-in desk-scale defaults
        overrides: Dotted-path overrides applied after the file and environment

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    if path is not None:
        config_file = Path(path)
        if not config_file.exists():
            raise ConfigurationError(f"config file not found: {path}")
        with open(config_file, "r") as f:
            data = yaml.safe_load(f) or {}
        if not isinstance(data, dict):
            raise ConfigurationError(f"config file {path} must contain a mapping")
    for dotted, value in {**_env_overrides(), **(overrides or {})}.items():
        _set_dotted(data, dotted, value)
    cfg = build_config(data)
    if overrides and "seed" in overrides:
        cfg = cfg.seeded(int(overrides["seed"]))
    return cfg


def _flatten(data: Any, prefix: str = "") -> Dict[str, Any]:
    if isinstance(data, dict):
        flat: Dict[str, Any] = {}
        for k, v in data.items():
            flat.update(_flatten(v, f"{prefix}{k}."))
        return flat
    return {prefix[:-1]: data}


def config_diff(a: Dict[str, Any], b: Dict[str, Any]) -> List[str]:
    """Dotted names of fields whose values differ between two config dumps."""
    fa, fb = _flatten(a), _flatten(b)
    return sorted(k for k in set(fa) | set(fb) if fa.get(k) != fb.get(k))
