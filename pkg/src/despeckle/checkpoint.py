"""Checkpoint container: ``<name>.npz`` named arrays plus ``<name>.json`` metadata sidecar.

Array keys::

    model/<param name>          network parameters
    optim/<param index>/<key>   AdamW moment buffers and step counters
    bank/vectors                memory bank contents, oldest first
    bank/keys                   source key of each bank entry (-1 if none)

Sidecar keys: ``format``, ``model_config``, ``train_config``, ``epoch``,
``step``, ``seed``, ``lr``, ``dtype``, ``metrics``, ``bank`` (capacity and
insertion counter), ``optimizer`` (param groups), ``scheduler``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .config import ModelConfig, TrainConfig
from .contrastive import MemoryBank
from .model import DespeckleNet

FORMAT = "despeckle-checkpoint/1"


@dataclass
class Checkpoint:
    model_config: ModelConfig
    model_state: dict[str, torch.Tensor]
    train_config: TrainConfig | None = None
    bank_state: dict | None = None
    optimizer_state: dict | None = None
    scheduler_state: dict | None = None
    epoch: int = 0
    step: int = 0
    seed: int = 0
    lr: float | None = None
    metrics: dict = field(default_factory=dict)

    def build_model(self) -> DespeckleNet:
        dtype = next(iter(self.model_state.values())).dtype
        model = DespeckleNet(self.model_config).to(dtype)
        model.load_state_dict(self.model_state)
        model.eval()
        return model

    def bank(self) -> MemoryBank | None:
        return None if self.bank_state is None else MemoryBank.from_state(self.bank_state)


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    stem = p.with_suffix("") if p.suffix in (".npz", ".json") else p
    return stem.with_suffix(".npz"), stem.with_suffix(".json")


def _jsonable(obj):
    if isinstance(obj, torch.Tensor):
        return obj.item() if obj.numel() == 1 else obj.tolist()
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float) and not math.isfinite(obj):
        return repr(obj)
    return obj


def _unjson_float(v):
    return float(v) if isinstance(v, str) and v in ("inf", "-inf", "nan") else v


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    npz_path, meta_path = _paths(path)
    npz_path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"model/{k}": v.detach().cpu().numpy() for k, v in ckpt.model_state.items()}
    optim_meta = None
    if ckpt.optimizer_state is not None:
        for idx, st in ckpt.optimizer_state["state"].items():
            for key, val in st.items():
                arrays[f"optim/{idx}/{key}"] = torch.as_tensor(val).detach().cpu().numpy()
        optim_meta = _jsonable(ckpt.optimizer_state["param_groups"])
    bank_meta = None
    if ckpt.bank_state is not None:
        arrays["bank/vectors"] = ckpt.bank_state["vectors"].detach().cpu().numpy()
        arrays["bank/keys"] = ckpt.bank_state["keys"].cpu().numpy()
        bank_meta = {"capacity": ckpt.bank_state["capacity"], "pushed": ckpt.bank_state["pushed"]}
    with npz_path.open("wb") as fh:
        np.savez(fh, **arrays)
    meta = {
        "format": FORMAT,
        "model_config": ckpt.model_config.model_dump(mode="json"),
        "train_config": None if ckpt.train_config is None else ckpt.train_config.model_dump(mode="json"),
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "seed": ckpt.seed,
        "lr": ckpt.lr,
        "dtype": str(next(iter(ckpt.model_state.values())).dtype).replace("torch.", ""),
        "metrics": _jsonable(ckpt.metrics),
        "bank": bank_meta,
        "optimizer": optim_meta,
        "scheduler": _jsonable(ckpt.scheduler_state),
    }
    meta_path.write_text(json.dumps(meta, indent=2, sort_keys=True))
    return npz_path


def load_checkpoint(path: str | Path) -> Checkpoint:
    npz_path, meta_path = _paths(path)
    if not npz_path.is_file() or not meta_path.is_file():
        raise FileNotFoundError(f"checkpoint pair not found: {npz_path} / {meta_path}")
    meta = json.loads(meta_path.read_text())
    if meta.get("format") != FORMAT:
        raise ValueError(f"unsupported checkpoint format {meta.get('format')!r}")
    with np.load(npz_path) as data:
        arrays = {k: torch.from_numpy(data[k].copy()) for k in data.files}
    model_state = {k[len("model/") :]: v for k, v in arrays.items() if k.startswith("model/")}
    optimizer_state = None
    if meta["optimizer"] is not None:
        state: dict[int, dict] = {}
        for k, v in arrays.items():
            if k.startswith("optim/"):
                _, idx, key = k.split("/", 2)
                state.setdefault(int(idx), {})[key] = v
        optimizer_state = {"state": state, "param_groups": meta["optimizer"]}
    bank_state = None
    if meta["bank"] is not None:
        bank_state = dict(meta["bank"], vectors=arrays["bank/vectors"], keys=arrays["bank/keys"])
    sched = meta["scheduler"]
    if sched is not None:
        sched = {k: _unjson_float(v) for k, v in sched.items()}
    return Checkpoint(
        model_config=ModelConfig(**meta["model_config"]),
        model_state=model_state,
        train_config=None if meta["train_config"] is None else TrainConfig(**meta["train_config"]),
        bank_state=bank_state,
        optimizer_state=optimizer_state,
        scheduler_state=sched,
        epoch=meta["epoch"],
        step=meta["step"],
        seed=meta["seed"],
        lr=meta["lr"],
        metrics={k: _unjson_float(v) for k, v in meta["metrics"].items()},
    )
