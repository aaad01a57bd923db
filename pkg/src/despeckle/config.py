"""Configuration trees, YAML loading and dotted ``key.subkey=value`` overrides."""

from __future__ import annotations

import math
from pathlib import Path
from typing import Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

__all__ = [
    "ModelConfig",
    "LossWeights",
    "ScheduleConfig",
    "TrainConfig",
    "DataConfig",
    "AblationSpec",
    "ConfigError",
    "load_config",
    "apply_overrides",
    "toy_model_config",
]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelConfig(_Strict):
    image_size: int = 224
    patch_size: int = 4
    embed_dim: int = 64
    stage_depths: tuple[int, int, int, int] = (2, 4, 32, 2)
    heads_per_stage: tuple[int, int, int, int] = (2, 4, 8, 16)
    stripe_widths: tuple[int, int, int, int] = (1, 2, 7, 7)
    decoder_channels: tuple[int, ...] = (256, 128, 64, 32, 16)
    mlp_ratio: float = 4.0
    projection_dim: int = 128
    encoder_kind: Literal["transformer", "cnn"] = "transformer"
    decoder_kind: Literal["transformer", "cnn"] = "cnn"

    @property
    def grid_sides(self) -> tuple[int, ...]:
        side = self.image_size // self.patch_size
        return tuple(side >> s for s in range(4))

    @property
    def stage_dims(self) -> tuple[int, ...]:
        return tuple(self.embed_dim << s for s in range(4))

    @property
    def num_tokens(self) -> int:
        return self.grid_sides[0] ** 2

    @model_validator(mode="after")
    def _check(self):
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        side = self.image_size // self.patch_size
        if side % 8:
            raise ValueError(f"patch grid side {side} must be divisible by 8 for three patch merges")
        if min(self.stage_depths) < 1:
            raise ValueError("stage_depths entries must be >= 1")
        for s, (g, sw, heads, dim) in enumerate(zip(self.grid_sides, self.stripe_widths, self.heads_per_stage, self.stage_dims)):
            if sw < 1 or g % min(sw, g):
                raise ValueError(f"stripe width {sw} does not divide stage {s + 1} grid side {g}")
            branches = 1 if sw >= g else 2
            if heads % branches or dim % heads or (dim // branches) % (heads // branches):
                raise ValueError(f"stage {s + 1}: {heads} heads incompatible with dim {dim} and {branches} stripe branches")
        upsample = self.image_size // self.grid_sides[-1]
        if 2 ** len(self.decoder_channels) != upsample:
            raise ValueError(
                f"decoder needs log2({upsample}) = {int(math.log2(upsample))} stages, got {len(self.decoder_channels)}"
            )
        return self


def toy_model_config(**kw) -> ModelConfig:
    """Small 32 x 32 configuration used for oracle and gradient tests."""
    base = dict(
        image_size=32,
        patch_size=4,
        embed_dim=16,
        stage_depths=(1, 1, 1, 1),
        heads_per_stage=(2, 2, 4, 8),
        stripe_widths=(2, 2, 2, 1),
        decoder_channels=(64, 32, 16, 16, 8),
        projection_dim=32,
    )
    base.update(kw)
    return ModelConfig(**base)


class LossWeights(_Strict):
    alpha: float = 0.5
    beta: float = 0.7

    @field_validator("alpha", "beta")
    @classmethod
    def _nonneg(cls, v):
        if not (math.isfinite(v) and v >= 0):
            raise ValueError("loss weights must be finite and nonnegative")
        return v


class ScheduleConfig(_Strict):
    factor: float = 0.5
    patience: int = 10
    monitor: Literal["val_psnr"] = "val_psnr"


class DataConfig(_Strict):
    name: str = "synthetic"
    root: str | None = None
    manifest: str | None = None
    synthetic_count: int = Field(16, ge=2)
    eval_sigmas: tuple[float, ...] = (0.25, 0.5, 0.75)


class TrainConfig(_Strict):
    learning_rate: float = Field(1e-3, gt=0)
    epochs: int = Field(200, ge=1)
    max_steps: int | None = None
    batch_size: int = Field(8, ge=1)
    optimizer: Literal["adamw"] = "adamw"
    betas: tuple[float, float] = (0.9, 0.999)
    weight_decay: float = 0.01
    schedule: ScheduleConfig = ScheduleConfig()
    seed: int = 0
    loss_weights: LossWeights = LossWeights()
    sigma: float = Field(0.5, ge=0)
    clip_noisy: bool = True
    anchor_count: int = Field(256, ge=1)
    window: int = 5
    tau_noise: float = Field(1.92, gt=0)
    temperature: float = Field(0.07, gt=0)
    bank_capacity: int = Field(4096, ge=1)
    exclude_same_image: bool = True
    split_ratio: float = Field(0.7, gt=0, lt=1)
    eval_every: int = Field(1, ge=1)
    model: ModelConfig = ModelConfig()
    data: DataConfig = DataConfig()

    @field_validator("window")
    @classmethod
    def _odd(cls, v):
        if v < 1 or v % 2 == 0:
            raise ValueError("window must be a positive odd integer")
        return v


class AblationSpec(_Strict):
    enable_hybrid: bool = True
    enable_pixel: bool = True
    enable_instance: bool = True
    encoder_kind: Literal["transformer", "cnn"] = "transformer"
    decoder_kind: Literal["transformer", "cnn"] = "cnn"

    @model_validator(mode="after")
    def _nesting(self):
        pure_cnn = self.encoder_kind == "cnn" and self.decoder_kind == "cnn"
        if not self.enable_hybrid:
            if self.enable_pixel or self.enable_instance:
                raise ValueError("pixel/instance contrast requires the hybrid pipeline")
            if not pure_cnn:
                raise ValueError("the non-hybrid configuration is the pure CNN encoder-decoder")
        elif pure_cnn:
            raise ValueError("a hybrid configuration needs a transformer encoder or decoder")
        return self

    @property
    def label(self) -> str:
        mark = lambda b: "Y" if b else "N"  # noqa: E731
        return (
            f"hybrid={mark(self.enable_hybrid)} pixel={mark(self.enable_pixel)} instance={mark(self.enable_instance)} "
            f"{self.encoder_kind}/{self.decoder_kind}"
        )

    def apply(self, cfg: TrainConfig) -> TrainConfig:
        w = cfg.loss_weights
        weights = LossWeights(alpha=w.alpha if self.enable_pixel else 0.0, beta=w.beta if self.enable_instance else 0.0)
        model = cfg.model.model_copy(update={"encoder_kind": self.encoder_kind, "decoder_kind": self.decoder_kind})
        return cfg.model_copy(update={"loss_weights": weights, "model": ModelConfig(**model.model_dump())})


def _set_dotted(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for k in keys[:-1]:
        child = node.setdefault(k, {})
        if not isinstance(child, dict):
            raise ConfigError(f"override {dotted!r} descends into non-mapping key {k!r}")
        node = child
    node[keys[-1]] = value


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``key.subkey=value`` strings; values are parsed as YAML scalars/lists."""
    tree = yaml.safe_load(yaml.safe_dump(tree)) or {}
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        _set_dotted(tree, key.strip(), yaml.safe_load(raw))
    return tree


def build_train_config(tree: dict) -> TrainConfig:
    try:
        return TrainConfig(**tree)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from exc


def load_config(path: str | Path | None = None, overrides: list[str] | None = None) -> TrainConfig:
    """Read a nested YAML config (if given) and apply CLI overrides on top."""
    tree: dict = {}
    if path is not None:
        try:
            tree = yaml.safe_load(Path(path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        if not isinstance(tree, dict):
            raise ConfigError(f"config {path} must be a mapping")
    return build_train_config(apply_overrides(tree, overrides or []))


def dump_config(cfg: BaseModel) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=False)
