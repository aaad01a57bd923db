"""Operations behind the CLI verbs and the HTTP API.

Every function takes a request model and returns a result model; failures
surface as :class:`ServiceError` subclasses carrying the process exit code.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import torch
from PIL import Image, ImageDraw, ImageFont
from pydantic import ValidationError

from . import harness
from .api import schemas
from .checkpoint import Checkpoint, load_checkpoint
from .config import ConfigError, TrainConfig, dump_config, load_config
from .data import (
    DatasetError,
    NoiseConfig,
    add_speckle,
    derive_seed,
    load_dataset,
    read_image,
    resize_to_canonical,
    save_png,
    split_dataset,
    to_uint8,
    write_manifest,
)
from .stats import below_threshold, rho_map, write_flat_array
from .training import EvalReport, ModelDenoiser, Trainer, TrainingDiverged, evaluate

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = "DESPECKLE_OUTPUT_ROOT"
CAPTION_HEIGHT = 24  # two text lines


class ServiceError(Exception):
    exit_code = 1
    kind = "error"

    def body(self) -> schemas.ErrorBody:
        return schemas.ErrorBody(error=self.kind, message=str(self), exit_code=self.exit_code)


class UserError(ServiceError):
    exit_code = 2
    kind = "config"


class StorageError(ServiceError):
    exit_code = 3
    kind = "io"


class DivergenceError(ServiceError):
    exit_code = 4
    kind = "divergence"


@contextmanager
def _translated():
    try:
        yield
    except ServiceError:
        raise
    except (ConfigError, ValidationError) as exc:
        raise UserError(str(exc)) from exc
    except TrainingDiverged as exc:
        raise DivergenceError(str(exc)) from exc
    except (DatasetError, OSError) as exc:
        raise StorageError(str(exc)) from exc
    except (ValueError, KeyError) as exc:
        raise UserError(str(exc)) from exc


def output_dir(given: str | None, default: str) -> Path:
    """Resolve an output directory; relative paths land under ``$DESPECKLE_OUTPUT_ROOT`` when set."""
    root = Path(os.environ.get(OUTPUT_ROOT_ENV, "runs"))
    if given is None:
        path = root / default
    else:
        path = Path(given)
        if not path.is_absolute() and OUTPUT_ROOT_ENV in os.environ:
            path = root / path
    path.mkdir(parents=True, exist_ok=True)
    return path


def _config(req: schemas.ConfigSource) -> TrainConfig:
    if req.config_path is not None and not Path(req.config_path).is_file():
        raise UserError(f"config file not found: {req.config_path}")
    return load_config(req.config_path, req.overrides)


def _checkpoint(path: str) -> Checkpoint:
    try:
        ckpt = load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UserError(str(exc)) from exc
    if ckpt.train_config is None:
        raise UserError(f"checkpoint {path} carries no training config")
    return ckpt


def _metric_rows(report: EvalReport) -> list[schemas.MetricRow]:
    return [schemas.MetricRow(**r.as_dict()) for r in report.rows]


def _json_float(v: float) -> float | str:
    return "inf" if math.isinf(v) else v


def prepare(req: schemas.PrepareRequest) -> schemas.PrepareResult:
    """Split a raw image directory and pre-render noisy copies per sigma."""
    with _translated():
        manifest = split_dataset(load_dataset(req.root, req.dataset), req.ratio, req.seed)
        out = output_dir(req.output_dir, f"prepare/{req.dataset}")
        write_manifest(manifest, out / "manifest.csv")
        digest = hashlib.sha256((out / "manifest.csv").read_bytes())
        noisy_dirs = {}
        for sigma in req.sigmas:
            d = out / f"noisy_{sigma:g}"
            noise = NoiseConfig(sigma=sigma, seed=derive_seed(req.seed, "prepare", repr(float(sigma))))
            for e in manifest.entries:
                img = add_speckle(resize_to_canonical(e, req.size), noise)
                target = d / f"{e.id}.png"
                target.parent.mkdir(parents=True, exist_ok=True)
                digest.update(save_png(img.pixels, target).encode())
            noisy_dirs[f"{sigma:g}"] = str(d)
            log.info("rendered %d images at sigma=%g into %s", len(manifest.entries), sigma, d)
        return schemas.PrepareResult(manifest=str(out / "manifest.csv"), counts=manifest.counts,
                                     noisy_dirs=noisy_dirs, digest=digest.hexdigest())


def _heatmap(rmap: np.ndarray, tau: float) -> np.ndarray:
    """Ratio map as 8-bit grey: 0 to 2*tau spans black to white; borders are black."""
    scaled = np.where(np.isnan(rmap), 0.0, np.clip(rmap / (2 * tau), 0.0, 1.0))
    return to_uint8(scaled)


def stats(req: schemas.StatsRequest) -> schemas.StatsResult:
    """Windowed mean-to-std ratio map of one image plus the positions below tau."""
    with _translated():
        cfg = _config(req)
        window = cfg.window if req.window is None else req.window
        tau = cfg.tau_noise if req.tau is None else req.tau
        if not tau > 0:
            raise UserError("tau must be positive")
        pixels = read_image(req.image)
        rmap = rho_map(torch.from_numpy(pixels)[None], window)
        hits = below_threshold(rmap, tau)
        out = output_dir(req.output_dir, f"stats/{Path(req.image).stem}")
        arr = rmap.numpy()
        Image.fromarray(_heatmap(arr, tau), mode="L").save(out / "rho.png")
        write_flat_array(arr[None], out / "rho.bin")
        with (out / "regions.csv").open("w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["i", "j", "rho"])
            writer.writerows([(i, j, repr(v)) for i, j, v in hits])
        r = window // 2
        n_pos = max(pixels.shape[0] - 2 * r, 0) * max(pixels.shape[1] - 2 * r, 0)
        return schemas.StatsResult(window=window, tau=tau, heatmap=str(out / "rho.png"), rho_array=str(out / "rho.bin"),
                                   regions_csv=str(out / "regions.csv"), n_below=len(hits), n_positions=n_pos,
                                   fraction_below=len(hits) / n_pos if n_pos else 0.0)


def train(req: schemas.TrainRequest) -> schemas.TrainResult:
    with _translated():
        cfg = _config(req)
        out = output_dir(req.output_dir, "train")
        if req.resume:
            # data and model come from the checkpoint; only the budgets are taken from the request
            train_set, test_set = harness.datasets_from_config(_checkpoint(req.resume).train_config)
            trainer = Trainer.resume(req.resume, train_set, test_set, out_dir=out, epochs=cfg.epochs,
                                     max_steps=cfg.max_steps)
            cfg = trainer.cfg
        else:
            train_set, test_set = harness.datasets_from_config(cfg)
            trainer = Trainer(cfg, train_set, test_set, out_dir=out)
        (out / "config.yaml").write_text(dump_config(cfg))
        result = trainer.fit(out / "log.csv")
        report = evaluate(ModelDenoiser(result.model), test_set, cfg.data.eval_sigmas, dataset=cfg.data.name,
                          seed=cfg.seed, batch_size=cfg.batch_size)
        report.write_csv(out / "eval.csv")
        return schemas.TrainResult(checkpoint=str(result.checkpoint_path), log=str(out / "log.csv"),
                                   config=str(out / "config.yaml"), eval_csv=str(out / "eval.csv"),
                                   steps=trainer.step, epochs=trainer.epoch, final_loss=result.final_loss,
                                   evaluation=_metric_rows(report))


def evaluate_checkpoint(req: schemas.EvalRequest) -> schemas.EvalResult:
    with _translated():
        ckpt = _checkpoint(req.checkpoint)
        cfg = ckpt.train_config
        _, test_set = harness.datasets_from_config(cfg)
        sigmas = cfg.data.eval_sigmas if req.sigmas is None else req.sigmas
        report = evaluate(ModelDenoiser(ckpt.build_model()), test_set, sigmas, dataset=cfg.data.name, seed=cfg.seed,
                          batch_size=cfg.batch_size)
        out = output_dir(req.output_dir, "eval")
        report.write_csv(out / "eval.csv")
        return schemas.EvalResult(csv=str(out / "eval.csv"), rows=_metric_rows(report))


def ablate(req: schemas.AblateRequest) -> schemas.TableResult:
    with _translated():
        cfg = _config(req)
        out = output_dir(req.output_dir, "ablate")
        path = out / f"ablation_{req.grid}.csv"
        rows = harness.run_ablation(harness.GRIDS[req.grid], cfg, *harness.datasets_from_config(cfg), out_csv=path)
        return schemas.TableResult(csv=str(path), rows=[r.as_dict() for r in rows])


def sweep(req: schemas.SweepRequest) -> schemas.TableResult:
    with _translated():
        cfg = _config(req)
        values = req.values
        if values is not None and req.axis == "depths":
            values = [tuple(v) for v in values]
        out = output_dir(req.output_dir, "sweep")
        path = out / f"sweep_{req.axis}.csv"
        rows = harness.hyperparam_sweep(req.axis, values, cfg, *harness.datasets_from_config(cfg), out_csv=path)
        return schemas.TableResult(csv=str(path), rows=[r.as_dict() for r in rows])


def _font():
    try:
        return ImageFont.load_default(size=10)
    except TypeError:  # Pillow without FreeType sizing
        return ImageFont.load_default()


def figure(req: schemas.FigureRequest) -> schemas.FigureResult:
    """Clean | noisy | denoised panels, one row per sample, with metric captions underneath."""
    with _translated():
        ckpt = _checkpoint(req.checkpoint)
        cfg = ckpt.train_config
        _, test_set = harness.datasets_from_config(cfg)
        by_id = {s.id: s for s in test_set}
        ids = req.samples or sorted(by_id)[:1]
        missing = [i for i in ids if i not in by_id]
        if missing:
            raise UserError(f"unknown test sample ids: {', '.join(missing)}")
        # the whole partition, batched as in eval, so captions equal the evaluation's per-sample values
        report = evaluate(ModelDenoiser(ckpt.build_model()), test_set, [req.sigma], seed=cfg.seed,
                          batch_size=cfg.batch_size, keep_samples=True)
        kept = {s.id: s for s in report.samples}
        size = cfg.model.image_size
        row_h = size + CAPTION_HEIGHT
        canvas = Image.new("L", (3 * size, row_h * len(ids)), 0)
        draw = ImageDraw.Draw(canvas)
        font = _font()
        captions = []
        for k, sid in enumerate(ids):
            s, y = kept[sid], k * row_h
            for col, px in enumerate((by_id[sid].pixels, s.noisy, s.denoised)):
                canvas.paste(Image.fromarray(to_uint8(px), mode="L"), (col * size, y))
            draw.text((1, y + size), f"{sid}  sigma {req.sigma:g}", fill=255, font=font)
            draw.text((1, y + size + CAPTION_HEIGHT // 2), f"PSNR {s.metrics.psnr:.2f}  SSIM {s.metrics.ssim:.3f}",
                      fill=255, font=font)
            captions.append(schemas.FigureCaption(id=sid, sigma=req.sigma, psnr=_json_float(s.metrics.psnr),
                                                  ssim=s.metrics.ssim))
        if req.output is None:
            path = output_dir(None, "figure") / "figure.png"
        else:
            path = output_dir(str(Path(req.output).parent), "figure") / Path(req.output).name
        canvas.save(path, format="PNG")
        sidecar = path.with_suffix(".json")
        sidecar.write_text(json.dumps([c.model_dump() for c in captions], indent=2))
        return schemas.FigureResult(image=str(path), sidecar=str(sidecar), width=canvas.width, height=canvas.height,
                                    captions=captions)
