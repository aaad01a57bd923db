"""Pixel-level and instance-level InfoNCE objectives with a FIFO memory bank."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from . import stats

DEFAULT_TEMPERATURE = 0.07


class DegenerateBankWarning(UserWarning):
    pass


class MemoryBank:
    """Fixed-capacity FIFO queue of detached unit-norm embeddings (oldest first).

    Each entry may carry an integer source key (e.g. a hashed image id) so a
    query can skip stale copies of its own image.
    """

    def __init__(self, capacity: int, dim: int | None = None, dtype: torch.dtype = torch.float32):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        self.dim = dim
        self.dtype = dtype
        self.queue = torch.empty(0, dim or 0, dtype=dtype)
        self.keys = torch.empty(0, dtype=torch.long)
        self.pushed = 0  # total vectors ever inserted

    def __len__(self):
        return self.queue.shape[0]

    def push(self, batch: torch.Tensor, keys=None, check_norm: bool = True) -> "MemoryBank":
        batch = torch.as_tensor(batch).detach().to(self.dtype).clone()
        if batch.ndim == 1:
            batch = batch[None]
        if batch.shape[0] == 0:
            return self
        keys = torch.full((batch.shape[0],), -1, dtype=torch.long) if keys is None else torch.as_tensor(keys, dtype=torch.long)
        if keys.shape != (batch.shape[0],):
            raise ValueError("one key per pushed vector")
        if self.dim is None:
            self.dim = batch.shape[1]
            self.queue = self.queue.reshape(0, self.dim)
        if batch.shape[1] != self.dim:
            raise ValueError(f"expected {self.dim}-dim vectors, got {batch.shape[1]}")
        if check_norm:
            norms = batch.norm(dim=1)
            if not torch.allclose(norms, torch.ones_like(norms), atol=1e-6, rtol=0):
                raise ValueError("memory bank accepts unit-norm vectors only")
        self.queue = torch.cat([self.queue, batch])[-self.capacity :]
        self.keys = torch.cat([self.keys, keys])[-self.capacity :]
        self.pushed += batch.shape[0]
        return self

    def snapshot(self) -> torch.Tensor:
        return self.queue.clone()

    def state_dict(self) -> dict:
        return {"capacity": self.capacity, "vectors": self.queue.clone(), "keys": self.keys.clone(), "pushed": self.pushed}

    @classmethod
    def from_state(cls, state: dict) -> "MemoryBank":
        vectors = torch.as_tensor(state["vectors"])
        bank = cls(int(state["capacity"]), vectors.shape[1] if vectors.numel() else None, vectors.dtype)
        if vectors.numel():
            bank.queue = vectors.clone()
        keys = state.get("keys")
        bank.keys = torch.full((len(bank),), -1, dtype=torch.long) if keys is None else torch.as_tensor(keys).long().clone()
        bank.pushed = int(state["pushed"])
        return bank


def bank_push(bank: MemoryBank, batch, keys=None) -> MemoryBank:
    return bank.push(batch, keys)


@dataclass
class PixelContrastBatch:
    anchors: torch.Tensor  # M x C
    positives: torch.Tensor  # M x C
    negatives: torch.Tensor  # M x J x C
    negative_mask: torch.Tensor | None = None  # M x J, True where the negative is real
    temperature: float = DEFAULT_TEMPERATURE

    def __post_init__(self):
        if self.anchors.shape != self.positives.shape:
            raise ValueError("anchors and positives must correspond one-to-one")
        if self.negatives.ndim == 2:
            # one negative set shared by every anchor
            self.negatives = self.negatives[None].expand(self.anchors.shape[0], -1, -1)


def _info_nce(query, positive, negatives, mask, tau):
    """-log softmax of the positive logit against (positive + masked negatives), per query."""
    pos = (query * positive).sum(-1, keepdim=True) / tau
    if negatives.shape[1] == 0:
        return torch.zeros_like(pos[:, 0])
    neg = torch.einsum("mc,mjc->mj", query, negatives) / tau
    if mask is not None:
        neg = neg.masked_fill(~mask, float("-inf"))
    logits = torch.cat([pos, neg], dim=1)
    return torch.logsumexp(logits, dim=1) - pos[:, 0]


def pixel_contrast_loss(batch: PixelContrastBatch, normalize: bool = True) -> torch.Tensor:
    """Mean over anchors of the pixel InfoNCE term; anchors without negatives add 0."""
    if batch.temperature <= 0:
        raise ValueError("temperature must be positive")
    if batch.anchors.shape[0] == 0:
        raise ValueError("pixel contrast needs at least one anchor")
    a, p, n = batch.anchors, batch.positives, batch.negatives
    if normalize:
        a, p = F.normalize(a, dim=-1), F.normalize(p, dim=-1)
        n = F.normalize(n, dim=-1) if n.numel() else n
    return _info_nce(a, p, n, batch.negative_mask, batch.temperature).mean()


def instance_embed(model, images) -> torch.Tensor:
    """Unit-norm image embeddings from the shared encoder and projection head."""
    return model.embed(images)


def instance_contrast_loss(
    z_noisy, z_clean, bank: MemoryBank, temperature: float = DEFAULT_TEMPERATURE, query_keys=None
) -> torch.Tensor:
    """Batch-mean InfoNCE: positive is the clean twin, negatives are bank entries only.

    With ``query_keys``, bank entries sharing a query's key are not used as
    that query's negatives (they are older embeddings of the same image).
    """
    if temperature <= 0:
        raise ValueError("temperature must be positive")
    if z_noisy.shape != z_clean.shape:
        raise ValueError("noisy and clean embeddings must be index-aligned")
    mem = bank.queue.to(z_noisy.dtype)
    if len(bank) == 0:
        warnings.warn("memory bank is empty; instance loss carries no signal", DegenerateBankWarning, stacklevel=2)
    negatives = mem[None].expand(z_noisy.shape[0], -1, -1)
    mask = None
    if query_keys is not None:
        q = torch.as_tensor(query_keys, dtype=torch.long)
        mask = (bank.keys[None, :] != q[:, None]) | (bank.keys[None, :] < 0)
    return _info_nce(z_noisy, z_clean, negatives, mask, temperature).mean()


def build_pixel_batch(
    feats_noisy: torch.Tensor,
    feats_clean: torch.Tensor,
    anchor_count: int,
    window: int,
    tau_noise: float,
    temperature: float,
    seed: int,
) -> tuple[PixelContrastBatch, int]:
    """Assemble anchors, positives and mined negatives for a B x C x H x W feature batch.

    Anchors of image ``b`` use the negatives mined from image ``b``. Returns the
    batch and the total number of mined negatives.
    """
    b, c, h, w = feats_noisy.shape
    anchors, positives, negs = [], [], []
    for i in range(b):
        pts = stats.sample_anchors(h, w, anchor_count, window, seed=seed + i)
        idx = torch.as_tensor(pts)
        anchors.append(feats_noisy[i][:, idx[:, 0], idx[:, 1]].T)
        positives.append(feats_clean[i][:, idx[:, 0], idx[:, 1]].T)
        negs.append(stats.mine_negative_regions(feats_noisy[i], pts, window, tau_noise).features())
    j_max = max(n.shape[0] for n in negs)
    m = anchor_count
    negatives = feats_noisy.new_zeros(b * m, j_max, c)
    mask = torch.zeros(b * m, j_max, dtype=torch.bool)
    for i, n in enumerate(negs):
        if n.shape[0]:
            negatives[i * m : (i + 1) * m, : n.shape[0]] = n[None]
            mask[i * m : (i + 1) * m, : n.shape[0]] = True
    batch = PixelContrastBatch(torch.cat(anchors), torch.cat(positives), negatives, mask, temperature)
    return batch, sum(n.shape[0] for n in negs)
