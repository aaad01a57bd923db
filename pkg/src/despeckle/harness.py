"""Ablation grids, hyperparameter sweeps and dataset assembly from a config."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from .config import AblationSpec, LossWeights, TrainConfig
from .data import ImageSample, load_dataset, load_split, resize_to_canonical, split_dataset, synthetic_dataset
from .metrics import MetricTriple
from .training import EvalReport, ModelDenoiser, TrainResult, evaluate, train

TABLE3 = (
    AblationSpec(enable_hybrid=False, enable_pixel=False, enable_instance=False, encoder_kind="cnn", decoder_kind="cnn"),
    AblationSpec(enable_pixel=False, enable_instance=False),
    AblationSpec(enable_instance=False),
    AblationSpec(),
)

# the CNN/CNN order is the non-hybrid configuration; the other orders train the full objective
ORDERS = (
    AblationSpec(encoder_kind="transformer", decoder_kind="transformer"),
    AblationSpec(encoder_kind="cnn", decoder_kind="transformer"),
    AblationSpec(enable_hybrid=False, enable_pixel=False, enable_instance=False, encoder_kind="cnn", decoder_kind="cnn"),
    AblationSpec(encoder_kind="transformer", decoder_kind="cnn"),
)

GRIDS = {"table3": TABLE3, "orders": ORDERS}

SWEEP_DEFAULTS = {
    "alpha": (0.1, 0.3, 0.5, 0.7),
    "beta": (0.1, 0.3, 0.5, 0.7),
    "depths": ((2, 2, 32, 2), (2, 4, 32, 2), (2, 8, 32, 2), (2, 16, 32, 2)),
}

ABLATION_FIELDS = ("hybrid", "pixel", "instance", "encoder", "decoder", "psnr", "ssim", "rmse", "n_images", "seed")


def datasets_from_config(cfg: TrainConfig) -> tuple[list[ImageSample], list[ImageSample]]:
    """Train and test partitions described by ``cfg.data`` at the model's image size."""
    d, size = cfg.data, cfg.model.image_size
    if d.root is None:
        manifest = synthetic_dataset(d.synthetic_count, size, seed=cfg.seed, source=d.name)
        manifest = split_dataset(manifest, cfg.split_ratio, cfg.seed)
    elif d.manifest is not None:
        manifest = load_split(d.root, d.manifest, d.name, size)
    else:
        raw = load_dataset(d.root, d.name)
        raw.entries = [resize_to_canonical(s, size) for s in raw.entries]
        manifest = split_dataset(raw, cfg.split_ratio, cfg.seed)
    return manifest.subset("train"), manifest.subset("test")


def train_and_evaluate(cfg: TrainConfig, train_set, test_set, sigmas=None, dtype=torch.float32,
                       out_dir=None, log_path=None, method: str = "proposed") -> tuple[TrainResult, EvalReport]:
    # the 30% partition doubles as the validation set for the plateau schedule
    result = train(cfg, train_set, test_set, dtype=dtype, out_dir=out_dir, log_path=log_path)
    sigmas = (cfg.sigma,) if sigmas is None else tuple(sigmas)
    report = evaluate(ModelDenoiser(result.model, method), test_set, sigmas, dataset=cfg.data.name, seed=cfg.seed,
                      batch_size=cfg.batch_size)
    return result, report


@dataclass
class AblationRow:
    spec: AblationSpec
    metrics: MetricTriple
    n_images: int
    seed: int

    def as_dict(self) -> dict:
        mark = lambda b: "Y" if b else "N"  # noqa: E731
        s = self.spec
        return {"hybrid": mark(s.enable_hybrid), "pixel": mark(s.enable_pixel), "instance": mark(s.enable_instance),
                "encoder": s.encoder_kind, "decoder": s.decoder_kind, **self.metrics.as_row(),
                "n_images": self.n_images, "seed": self.seed}


def _write_rows(path, fields, rows: list[dict]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)


def run_ablation(specs: Sequence[AblationSpec], cfg: TrainConfig, train_set, test_set, out_csv=None,
                 dtype=torch.float32) -> list[AblationRow]:
    """Train and evaluate every spec at ``cfg.sigma`` under one seed and one split."""
    rows = []
    for spec in specs:
        run_cfg = spec.apply(cfg)
        _, report = train_and_evaluate(run_cfg, train_set, test_set, dtype=dtype, method=spec.label)
        r = report.rows[0]
        rows.append(AblationRow(spec, r.metrics, r.n_images, cfg.seed))
    if out_csv is not None:
        _write_rows(out_csv, ABLATION_FIELDS, [r.as_dict() for r in rows])
    return rows


def sweep_label(value) -> str:
    if isinstance(value, (tuple, list)):
        return ", ".join(str(v) for v in value)
    return str(value)


def sweep_config(cfg: TrainConfig, axis: str, value) -> TrainConfig:
    if axis == "alpha":
        return cfg.model_copy(update={"loss_weights": LossWeights(alpha=value, beta=cfg.loss_weights.beta)})
    if axis == "beta":
        return cfg.model_copy(update={"loss_weights": LossWeights(alpha=cfg.loss_weights.alpha, beta=value)})
    if axis == "depths":
        model = type(cfg.model)(**{**cfg.model.model_dump(), "stage_depths": tuple(value)})
        return cfg.model_copy(update={"model": model})
    raise ValueError(f"unknown sweep axis {axis!r}")


@dataclass
class SweepRow:
    axis: str
    value: object
    metrics: MetricTriple
    n_images: int
    seed: int

    def as_dict(self) -> dict:
        return {self.axis: sweep_label(self.value), **self.metrics.as_row(), "n_images": self.n_images,
                "seed": self.seed}


def hyperparam_sweep(axis: str, values, cfg: TrainConfig, train_set, test_set, out_csv=None,
                     dtype=torch.float32) -> list[SweepRow]:
    """One train + evaluate per value; the swept value is the first CSV column."""
    values = SWEEP_DEFAULTS[axis] if values is None else list(values)
    if not values:
        raise ValueError("sweep needs at least one value")
    configs = [sweep_config(cfg, axis, v) for v in values]  # validate everything before training
    rows = []
    for value, run_cfg in zip(values, configs):
        _, report = train_and_evaluate(run_cfg, train_set, test_set, dtype=dtype)
        r = report.rows[0]
        rows.append(SweepRow(axis, value, r.metrics, r.n_images, cfg.seed))
    if out_csv is not None:
        _write_rows(out_csv, (axis, "psnr", "ssim", "rmse", "n_images", "seed"), [r.as_dict() for r in rows])
    return rows
