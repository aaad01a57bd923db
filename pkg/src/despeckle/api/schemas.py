"""Request and response models shared by the service layer, the HTTP API and the CLI client."""

from __future__ import annotations

from typing import Any, Literal

from pydantic import BaseModel, Field


class _Model(BaseModel):
    model_config = {"extra": "forbid"}


class ConfigSource(_Model):
    """A YAML config file (optional) plus dotted ``key=value`` overrides."""

    config_path: str | None = None
    overrides: list[str] = Field(default_factory=list)


class PrepareRequest(_Model):
    root: str
    dataset: str
    sigmas: list[float] = Field(default_factory=lambda: [0.25, 0.5, 0.75])
    seed: int = 0
    ratio: float = Field(0.7, gt=0, lt=1)
    size: int = Field(224, ge=8)
    output_dir: str | None = None


class PrepareResult(_Model):
    manifest: str
    counts: dict[str, int]
    noisy_dirs: dict[str, str]
    digest: str


class StatsRequest(ConfigSource):
    image: str
    window: int | None = None
    tau: float | None = None
    output_dir: str | None = None


class StatsResult(_Model):
    window: int
    tau: float
    heatmap: str
    rho_array: str
    regions_csv: str
    n_below: int
    n_positions: int
    fraction_below: float


class TrainRequest(ConfigSource):
    output_dir: str | None = None
    resume: str | None = None


class MetricRow(_Model):
    dataset: str
    sigma: float
    method: str
    psnr: float | str
    ssim: float
    rmse: float
    n_images: int
    seed: int


class TrainResult(_Model):
    checkpoint: str
    log: str
    config: str
    eval_csv: str
    steps: int
    epochs: int
    final_loss: float | None
    evaluation: list[MetricRow]


class EvalRequest(_Model):
    checkpoint: str
    sigmas: list[float] | None = None
    output_dir: str | None = None


class EvalResult(_Model):
    csv: str
    rows: list[MetricRow]


class AblateRequest(ConfigSource):
    grid: Literal["table3", "orders"] = "table3"
    output_dir: str | None = None


class TableResult(_Model):
    csv: str
    rows: list[dict[str, Any]]


class SweepRequest(ConfigSource):
    axis: Literal["alpha", "beta", "depths"]
    values: list[Any] | None = None
    output_dir: str | None = None


class FigureRequest(_Model):
    checkpoint: str
    samples: list[str] | None = None
    sigma: float = 0.5
    output: str | None = None


class FigureCaption(_Model):
    id: str
    sigma: float
    psnr: float | str
    ssim: float


class FigureResult(_Model):
    image: str
    sidecar: str
    width: int
    height: int
    captions: list[FigureCaption]


class ErrorBody(_Model):
    error: str
    message: str
    exit_code: int


JobKind = Literal["train", "ablate", "sweep"]


class JobStatus(_Model):
    id: str
    kind: JobKind
    status: Literal["queued", "running", "succeeded", "failed"]
    result: dict[str, Any] | None = None
    error: ErrorBody | None = None
