"""Training loop, evaluation and the plateau learning-rate schedule."""

from __future__ import annotations

import csv
import logging
import math
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import contrastive
from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import TrainConfig
from .data import ImageSample, NoiseConfig, add_speckle, derive_seed
from .metrics import MetricTriple, image_metrics, l1_loss, mean_metrics, total_loss
from .model import DespeckleNet, build_model

log = logging.getLogger(__name__)

LOG_FIELDS = ("step", "epoch", "lr", "l1", "l_pixel", "l_instance", "total", "val_psnr")


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, snapshot: Path | None = None):
        super().__init__(message if snapshot is None else f"{message} (snapshot: {snapshot})")
        self.snapshot = snapshot


def image_key(sample_id: str) -> int:
    return derive_seed("bank-key", sample_id)


def _stack(samples: Sequence[ImageSample], dtype) -> torch.Tensor:
    return torch.as_tensor(np.stack([s.pixels for s in samples]), dtype=dtype)


def noisy_copies(samples: Sequence[ImageSample], sigma: float, seed: int, clip: bool = True) -> list[ImageSample]:
    cfg = NoiseConfig(sigma=sigma, seed=seed, clip=clip)
    return [add_speckle(s, cfg) for s in samples]


@dataclass
class LossTerms:
    l1: torch.Tensor
    l_pixel: torch.Tensor
    l_instance: torch.Tensor
    total: torch.Tensor
    clean_embeddings: torch.Tensor | None = None
    n_negatives: int = 0

    def scalars(self) -> dict[str, float]:
        return {k: float(getattr(self, k).detach()) for k in ("l1", "l_pixel", "l_instance", "total")}


def compute_losses(
    model: DespeckleNet,
    noisy: torch.Tensor,
    clean: torch.Tensor,
    cfg: TrainConfig,
    bank: contrastive.MemoryBank,
    anchor_seed: int = 0,
    keys: torch.Tensor | None = None,
) -> LossTerms:
    """Hybrid objective on one batch; both branches share ``model``.

    The clean branch only runs when a contrastive weight is nonzero.
    """
    w = cfg.loss_weights
    b = noisy.shape[0]
    zero = noisy.new_zeros(())
    if w.alpha == 0 and w.beta == 0:
        out = model(noisy)
        l1 = l1_loss(out.prediction[:, 0], clean)
        return LossTerms(l1, zero, zero, total_loss(l1, zero, zero, w))

    out = model(torch.cat([noisy, clean]))
    l1 = l1_loss(out.prediction[:b, 0], clean)
    l_pix, n_neg = zero, 0
    if w.alpha > 0:
        batch, n_neg = contrastive.build_pixel_batch(
            out.features[:b], out.features[b:], cfg.anchor_count, cfg.window, cfg.tau_noise, cfg.temperature, anchor_seed
        )
        l_pix = contrastive.pixel_contrast_loss(batch)
    l_inst, z_clean = zero, None
    if w.beta > 0:
        z = model.head(out.pooled)
        z_clean = z[b:]
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", contrastive.DegenerateBankWarning)
            l_inst = contrastive.instance_contrast_loss(z[:b], z_clean, bank, cfg.temperature, keys)
    return LossTerms(l1, l_pix, l_inst, total_loss(l1, l_pix, l_inst, w), z_clean, n_neg)


class Denoiser:
    """Pluggable evaluation slot: maps a B x H x W batch in [0, 1] to predictions."""

    name = "denoiser"

    def __call__(self, noisy: torch.Tensor) -> torch.Tensor:
        raise NotImplementedError


class IdentityDenoiser(Denoiser):
    name = "identity"

    def __call__(self, noisy):
        return noisy


class ModelDenoiser(Denoiser):
    def __init__(self, model: DespeckleNet, name: str = "proposed"):
        self.model = model
        self.name = name

    @torch.no_grad()
    def __call__(self, noisy):
        self.model.eval()
        dtype = next(self.model.parameters()).dtype
        return self.model(noisy.to(dtype)).prediction[:, 0]


@dataclass
class SampleResult:
    id: str
    sigma: float
    metrics: MetricTriple
    noisy: np.ndarray
    denoised: np.ndarray


@dataclass
class EvalRow:
    dataset: str
    sigma: float
    method: str
    metrics: MetricTriple
    n_images: int
    seed: int
    excluded: int = 0

    def as_dict(self) -> dict:
        return {"dataset": self.dataset, "sigma": self.sigma, "method": self.method, **self.metrics.as_row(),
                "n_images": self.n_images, "seed": self.seed}


EVAL_FIELDS = ("dataset", "sigma", "method", "psnr", "ssim", "rmse", "n_images", "seed")


@dataclass
class EvalReport:
    rows: list[EvalRow]
    config: dict = field(default_factory=dict)
    wall_clock: float = 0.0
    samples: list[SampleResult] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=EVAL_FIELDS)
            writer.writeheader()
            for r in self.rows:
                writer.writerow(r.as_dict())

    def row(self, sigma: float) -> EvalRow:
        return next(r for r in self.rows if r.sigma == sigma)


def eval_noise_seed(seed: int, sigma: float) -> int:
    return derive_seed(seed, "eval", repr(float(sigma)))


def evaluate(
    denoiser: Denoiser | Callable,
    test_set: Sequence[ImageSample],
    sigmas: Sequence[float] = (0.25, 0.5, 0.75),
    dataset: str = "synthetic",
    method: str | None = None,
    seed: int = 0,
    batch_size: int = 8,
    keep_samples: bool = False,
) -> EvalReport:
    """Corrupt each test image at every sigma, denoise, and average PSNR/SSIM/RMSE.

    Images are processed in id order with per-image noise seeds, so the
    report does not depend on how ``test_set`` is ordered.
    """
    if not test_set:
        raise ValueError("empty test set")
    start = time.perf_counter()
    ordered = sorted(test_set, key=lambda s: s.id)
    method = method or getattr(denoiser, "name", "denoiser")
    rows, kept = [], []
    for sigma in sigmas:
        noisy = noisy_copies(ordered, sigma, eval_noise_seed(seed, sigma))
        triples = []
        for i in range(0, len(ordered), batch_size):
            chunk = noisy[i : i + batch_size]
            pred = denoiser(_stack(chunk, torch.float64))
            pred = torch.as_tensor(pred).detach().cpu().to(torch.float64).numpy()
            for s, n, p in zip(ordered[i : i + batch_size], chunk, pred):
                m = image_metrics(p, s.pixels)
                triples.append(m)
                if keep_samples:
                    kept.append(SampleResult(s.id, sigma, m, n.pixels, p))
        mean, excluded = mean_metrics(triples)
        rows.append(EvalRow(dataset, float(sigma), method, mean, len(ordered), seed, excluded))
    return EvalReport(rows, {"sigmas": list(sigmas), "seed": seed}, time.perf_counter() - start, kept)


@dataclass
class TrainResult:
    model: DespeckleNet
    bank: contrastive.MemoryBank
    log: list[dict]
    checkpoint: Checkpoint
    checkpoint_path: Path | None = None

    @property
    def final_loss(self) -> float | None:
        return self.log[-1]["total"] if self.log else None

    @property
    def initial_loss(self) -> float | None:
        return self.log[0]["total"] if self.log else None


class Trainer:
    """Owns the parameters, optimizer, schedule and memory bank of one run."""

    def __init__(self, cfg: TrainConfig, train_set: Sequence[ImageSample], val_set: Sequence[ImageSample] = (),
                 dtype: torch.dtype = torch.float32, out_dir: str | Path | None = None):
        if not train_set:
            raise ValueError("empty training set")
        size = cfg.model.image_size
        for s in list(train_set) + list(val_set):
            if s.shape != (size, size):
                raise ValueError(f"sample {s.id} is {s.shape}, model expects {size}x{size}")
        self.cfg = cfg
        self.train_set = sorted(train_set, key=lambda s: s.id)
        self.val_set = sorted(val_set, key=lambda s: s.id)
        self.dtype = dtype
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.model = build_model(cfg.model, seed=cfg.seed, dtype=dtype)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(), lr=cfg.learning_rate, betas=cfg.betas, weight_decay=cfg.weight_decay
        )
        self.scheduler = torch.optim.lr_scheduler.ReduceLROnPlateau(
            self.optimizer, mode="max", factor=cfg.schedule.factor, patience=cfg.schedule.patience
        )
        self.bank = contrastive.MemoryBank(cfg.bank_capacity, cfg.model.projection_dim, dtype)
        self.step = 0
        self.epoch = 0
        self.log: list[dict] = []
        self.last_val_psnr = math.nan

    @property
    def lr(self) -> float:
        return self.optimizer.param_groups[0]["lr"]

    def batches(self, epoch: int) -> list[list[ImageSample]]:
        order = np.random.default_rng(derive_seed(self.cfg.seed, "epoch", epoch)).permutation(len(self.train_set))
        bs = self.cfg.batch_size
        return [[self.train_set[i] for i in order[k : k + bs]] for k in range(0, len(order), bs)]

    def train_step(self, samples: Sequence[ImageSample]) -> LossTerms:
        cfg = self.cfg
        noisy = noisy_copies(samples, cfg.sigma, derive_seed(cfg.seed, "train", self.step), cfg.clip_noisy)
        self.model.train()
        keys = torch.tensor([image_key(s.id) for s in samples]) if cfg.exclude_same_image else None
        terms = compute_losses(
            self.model, _stack(noisy, self.dtype), _stack(samples, self.dtype), cfg, self.bank,
            anchor_seed=derive_seed(cfg.seed, "anchors", self.step) % 2**32, keys=keys,
        )
        if not torch.isfinite(terms.total):
            snap = self._snapshot("diverged")
            raise TrainingDiverged(f"non-finite loss at step {self.step}: {terms.scalars()}", snap)
        self.optimizer.zero_grad(set_to_none=True)
        terms.total.backward()
        self.optimizer.step()
        if terms.clean_embeddings is not None:
            self.bank.push(terms.clean_embeddings.detach(), keys, check_norm=False)
        self.step += 1
        return terms

    def validate(self) -> float:
        if not self.val_set:
            return math.nan
        report = evaluate(ModelDenoiser(self.model), self.val_set, [self.cfg.sigma], seed=self.cfg.seed,
                          batch_size=self.cfg.batch_size)
        return report.rows[0].metrics.psnr

    def fit(self, log_path: str | Path | None = None) -> TrainResult:
        cfg = self.cfg
        writer = None
        fh = None
        if log_path is not None:
            log_path = Path(log_path)
            log_path.parent.mkdir(parents=True, exist_ok=True)
            new = not log_path.exists()
            fh = log_path.open("a", newline="")
            writer = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
            if new:
                writer.writeheader()
        try:
            while self.epoch < cfg.epochs and not self._done():
                lr = self.lr
                sums: dict[str, list[float]] = {}
                for samples in self.batches(self.epoch):
                    if self._done():
                        break
                    for k, v in self.train_step(samples).scalars().items():
                        sums.setdefault(k, []).append(v)
                self.epoch += 1
                if self.val_set and self.epoch % cfg.eval_every == 0:
                    self.last_val_psnr = self.validate()
                    self.scheduler.step(self.last_val_psnr)
                # one row per epoch: step-averaged loss terms
                row = {"step": self.step, "epoch": self.epoch, "lr": lr,
                       **{k: math.fsum(v) / len(v) for k, v in sums.items()}, "val_psnr": self.last_val_psnr}
                self.log.append(row)
                if writer:
                    writer.writerow(row)
                    fh.flush()
                log.info("epoch %d step %d loss %.5f val_psnr %.3f lr %.2e", self.epoch, self.step, row["total"],
                         self.last_val_psnr, self.lr)
        finally:
            if fh:
                fh.close()
        ckpt = self.checkpoint()
        path = None
        if self.out_dir is not None:
            path = save_checkpoint(ckpt, self.out_dir / "checkpoint")
        return TrainResult(self.model, self.bank, self.log, ckpt, path)

    def _done(self) -> bool:
        return self.cfg.max_steps is not None and self.step >= self.cfg.max_steps

    def checkpoint(self) -> Checkpoint:
        metrics = {"val_psnr": self.last_val_psnr}
        if self.log:
            metrics["train_loss"] = self.log[-1]["total"]
        return Checkpoint(
            model_config=self.cfg.model,
            model_state={k: v.detach().clone() for k, v in self.model.state_dict().items()},
            train_config=self.cfg,
            bank_state=self.bank.state_dict(),
            optimizer_state=self.optimizer.state_dict(),
            scheduler_state=self.scheduler.state_dict(),
            epoch=self.epoch,
            step=self.step,
            seed=self.cfg.seed,
            lr=self.lr,
            metrics=metrics,
        )

    def _snapshot(self, tag: str) -> Path | None:
        if self.out_dir is None:
            return None
        return save_checkpoint(self.checkpoint(), self.out_dir / tag)

    @classmethod
    def resume(cls, path: str | Path, train_set, val_set=(), out_dir=None, epochs: int | None = None,
               max_steps: int | None = None) -> "Trainer":
        """Rebuild a trainer from a checkpoint so training continues where it stopped.

        ``epochs`` and ``max_steps`` replace the budgets of the restored config.
        Continuation is exact when the checkpoint sits on an epoch boundary.
        """
        ckpt = load_checkpoint(path)
        if ckpt.train_config is None:
            raise ValueError("checkpoint carries no training config")
        budget = {k: v for k, v in (("epochs", epochs), ("max_steps", max_steps)) if v is not None}
        cfg = ckpt.train_config.model_copy(update=budget)
        dtype = next(iter(ckpt.model_state.values())).dtype
        trainer = cls(cfg, train_set, val_set, dtype=dtype, out_dir=out_dir)
        trainer.model.load_state_dict(ckpt.model_state)
        if ckpt.optimizer_state is not None:
            trainer.optimizer.load_state_dict(ckpt.optimizer_state)
        if ckpt.scheduler_state is not None:
            trainer.scheduler.load_state_dict(ckpt.scheduler_state)
        if ckpt.bank_state is not None:
            trainer.bank = contrastive.MemoryBank.from_state(ckpt.bank_state)
        trainer.step, trainer.epoch = ckpt.step, ckpt.epoch
        trainer.last_val_psnr = ckpt.metrics.get("val_psnr", math.nan)
        return trainer


def train(cfg: TrainConfig, train_set, val_set=(), dtype=torch.float32, out_dir=None, log_path=None) -> TrainResult:
    return Trainer(cfg, train_set, val_set, dtype=dtype, out_dir=out_dir).fit(log_path)
