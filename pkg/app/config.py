"""Experiment configuration.

Every knob the pipeline exposes lives on one of these models, with its
documented default. Config files are JSON; unknown keys are rejected.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import List, Literal, Optional, Sequence, Tuple

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .errors import ConfigurationError


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid")


# --- tomography / dataset ---
class DataConfig(StrictModel):
    image_size: int = 64
    n_phantoms: int = Field(default=20, ge=1)
    rotations: int = Field(default=5, ge=1)
    complexity: int = Field(default=3, ge=1)
    n_angles: Optional[int] = None  # defaults to image_size
    n_bins: Optional[int] = None  # defaults to ceil(image_size * sqrt(2)), rounded up to even
    total_counts: float = Field(default=5e6, gt=0)
    mlem_iters: int = Field(default=60, ge=1)
    mlem_subsets: int = Field(default=4, ge=1)
    train_fraction: float = Field(default=0.85, ge=0, le=1)
    val_fraction: float = Field(default=0.05, ge=0, le=1)
    test_fraction: float = Field(default=0.10, ge=0, le=1)
    sinogram_percentile: float = Field(default=99.9, gt=0, le=100)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _fractions_sum_to_one(self):
        total = self.train_fraction + self.val_fraction + self.test_fraction
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"split fractions must sum to 1, got {total}")
        return self


# --- networks ---
class UNetConfig(StrictModel):
    image_size: int = 64
    in_channels: int = Field(default=1, ge=1)
    out_channels: int = Field(default=1, ge=1)
    base_channels: int = Field(default=32, ge=1)
    channel_multipliers: List[int] = Field(default_factory=lambda: [1, 2, 2, 4])
    n_res_blocks_per_level: int = Field(default=1, ge=1)
    attention_levels: List[int] = Field(default_factory=lambda: [2, 3])
    time_embedding: bool = True
    time_embedding_dim: Optional[int] = None  # defaults to 4 * base_channels
    dropout: float = Field(default=0.0, ge=0, lt=1)
    bias_adapter: bool = False
    zero_init_output: bool = True
    n_encoder_levels: Literal[4] = 4
    n_middle_blocks: Literal[2] = 2

    @field_validator("channel_multipliers")
    @classmethod
    def _four_levels(cls, value: List[int]) -> List[int]:
        if len(value) != 4 or any(m < 1 for m in value):
            raise ValueError("channel_multipliers needs 4 positive entries, one per encoder level")
        return value

    @field_validator("attention_levels")
    @classmethod
    def _levels_in_range(cls, value: List[int]) -> List[int]:
        if any(level not in range(4) for level in value):
            raise ValueError("attention_levels entries must be in 0..3")
        return sorted(set(value))


class PriorLossConfig(StrictModel):
    lambda1: float = Field(default=0.1, ge=0)
    include_ll: bool = False


class OptimConfig(StrictModel):
    lr: float = Field(default=3e-5, gt=0)
    batch_size: int = Field(default=4, ge=1)
    epochs: int = Field(default=120, ge=0)
    weight_decay: float = Field(default=0.0, ge=0)


def _prior_unet() -> UNetConfig:
    return UNetConfig(time_embedding=False)


class PriorConfig(StrictModel):
    unet: UNetConfig = Field(default_factory=_prior_unet)
    loss: PriorLossConfig = Field(default_factory=PriorLossConfig)
    optim: OptimConfig = Field(default_factory=OptimConfig)


# --- diffusion ---
class ScheduleConfig(StrictModel):
    T: int = Field(default=1000, ge=1)
    beta_start: float = 1e-4
    beta_end: float = 0.02


class GuidanceConfig(StrictModel):
    p_dp: float = Field(default=0.1, ge=0, le=1)
    lambda2: float = Field(default=0.0, ge=0)


def _diffusion_unet() -> UNetConfig:
    # noisy image plus the resampled sinogram
    return UNetConfig(in_channels=2)


def _diffusion_optim() -> OptimConfig:
    return OptimConfig(lr=1e-4, epochs=100)


class DiffusionConfig(StrictModel):
    unet: UNetConfig = Field(default_factory=_diffusion_unet)
    schedule: ScheduleConfig = Field(default_factory=ScheduleConfig)
    guidance: GuidanceConfig = Field(default_factory=GuidanceConfig)
    optim: OptimConfig = Field(default_factory=_diffusion_optim)
    use_prior_features: bool = True
    eval_every: int = Field(default=20, ge=0)  # 0 disables periodic validation
    val_items: Optional[int] = Field(default=None, ge=1)
    save_snapshots: bool = False
    ema: bool = False
    ema_decay: float = Field(default=0.999, gt=0, lt=1)
    unfreeze_prior: bool = False
    clip_range: Tuple[float, float] = (-1.0, 3.0)


def _regression_optim() -> OptimConfig:
    return OptimConfig(lr=1e-4, epochs=100)


class RegressionConfig(StrictModel):
    unet: UNetConfig = Field(default_factory=_prior_unet)
    optim: OptimConfig = Field(default_factory=_regression_optim)


# --- evaluation / experiments ---
class EvalConfig(StrictModel):
    split: Literal["train", "val", "test"] = "test"
    seed: int = 0
    data_range: float = Field(default=1.0, gt=0)
    max_items: Optional[int] = Field(default=None, ge=1)
    save_error_maps: bool = True


class AblationConfig(StrictModel):
    epochs: int = Field(default=100, ge=1)
    cadence: int = Field(default=20, ge=1)
    seeds: List[int] = Field(default_factory=lambda: [0, 1, 2])
    lambda2_sweep: List[float] = Field(default_factory=lambda: [0.0, 0.5, 1.0, 2.0])


class ReportConfig(StrictModel):
    n_panels: int = Field(default=2, ge=0)
    methods: List[Literal["guided", "cdpm", "regression"]] = Field(
        default_factory=lambda: ["regression", "cdpm", "guided"]
    )


class PathsConfig(StrictModel):
    output_root: Optional[str] = None  # falls back to SINOGUIDE_OUTPUT_ROOT


class SeedsConfig(StrictModel):
    root: int = 0


class ExperimentConfig(StrictModel):
    data: DataConfig = Field(default_factory=DataConfig)
    prior: PriorConfig = Field(default_factory=PriorConfig)
    diffusion: DiffusionConfig = Field(default_factory=DiffusionConfig)
    regression: RegressionConfig = Field(default_factory=RegressionConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    report: ReportConfig = Field(default_factory=ReportConfig)
    paths: PathsConfig = Field(default_factory=PathsConfig)
    seeds: SeedsConfig = Field(default_factory=SeedsConfig)


def config_hash(cfg: BaseModel) -> str:
    payload = json.dumps(cfg.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def _parse_value(raw: str):
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: dict, overrides: Sequence[str]) -> dict:
    """Apply ``a.b.c=value`` overrides to a nested dict in place."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' must look like key.path=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            child = node.get(part)
            if not isinstance(child, dict):
                raise ConfigurationError(f"unknown config section '{part}' in '{key}'")
            node = child
        node[parts[-1]] = _parse_value(raw.strip())
    return data


def load_config(path: Optional[Path] = None, overrides: Sequence[str] = ()) -> ExperimentConfig:
    data: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigurationError(f"config file {path} not found")
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigurationError(f"config file {path} is not valid JSON: {e}") from e
    if overrides:
        # Start from the full default tree so overrides can reach sections the file omits.
        merged = ExperimentConfig().model_dump(mode="json")
        _deep_update(merged, data)
        data = apply_overrides(merged, overrides)
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(str(e)) from e


def _deep_update(base: dict, update: dict) -> dict:
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(base.get(key), dict):
            _deep_update(base[key], value)
        else:
            base[key] = value
    return base
