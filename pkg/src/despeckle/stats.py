"""Local moment statistics and mean/std-ratio guided negative mining.

Fully developed speckle has Rayleigh-distributed amplitude, whose
mean-to-standard-deviation ratio is sqrt(pi / (4 - pi)) ~= 1.913. Feature
regions whose ratio falls below ``tau_noise`` are treated as speckle
dominated and supply hard negatives for the pixel contrastive loss.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

RAYLEIGH_SNR = math.sqrt(math.pi / (4.0 - math.pi))
DEFAULT_TAU_NOISE = 1.92
DEFAULT_WINDOW = 5


@dataclass
class FeatureMap:
    data: torch.Tensor
    branch: str = "noisy"

    def __post_init__(self):
        self.data = _as_chw(self.data)
        if self.branch not in ("noisy", "clean"):
            raise ValueError(f"unknown branch {self.branch!r}")


@dataclass
class RegionStats:
    center: tuple[int, int]
    window: int
    mu: torch.Tensor
    var: torch.Tensor
    rho: torch.Tensor

    @property
    def score(self) -> float:
        return float(aggregate_rho(self.rho))


@dataclass
class NegativeRegionSet:
    regions: list[RegionStats] = field(default_factory=list)
    tau_noise: float = DEFAULT_TAU_NOISE
    reduction: str = "window_mean"

    def __len__(self):
        return len(self.regions)

    @property
    def centers(self) -> list[tuple[int, int]]:
        return [r.center for r in self.regions]

    def features(self) -> torch.Tensor:
        """Negative vectors, one per region (J x C); carries gradients of the source map."""
        if not self.regions:
            return torch.empty(0, 0)
        return torch.stack([r.mu for r in self.regions])


def _as_chw(fm) -> torch.Tensor:
    if isinstance(fm, FeatureMap):
        return fm.data
    t = torch.as_tensor(fm)
    if t.ndim == 2:
        t = t[None]
    if t.ndim != 3:
        raise ValueError(f"feature map must be C x H x W, got shape {tuple(t.shape)}")
    return t


def _check_window(window: int):
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be a positive odd integer, got {window}")


def sample_anchors(height: int, width: int, count: int, window: int = DEFAULT_WINDOW, seed: int = 0) -> list[tuple[int, int]]:
    """Distinct anchor positions drawn uniformly from the window-safe interior."""
    _check_window(window)
    if count < 1:
        raise ValueError("count must be at least 1")
    r = window // 2
    ih, iw = height - 2 * r, width - 2 * r
    if ih < 1 or iw < 1:
        raise ValueError(f"{height}x{width} map has no interior for window {window}")
    if count > ih * iw:
        raise ValueError(f"requested {count} anchors but only {ih * iw} interior positions exist")
    flat = np.random.default_rng(seed).choice(ih * iw, size=count, replace=False)
    return [(int(k // iw) + r, int(k % iw) + r) for k in flat]


def window_moments(fm, centers, window: int = DEFAULT_WINDOW) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-channel mean and population variance of s x s windows at ``centers``.

    Returns ``(mu, var)`` each of shape M x C. Two-pass, so the variance is
    exact up to rounding rather than E[x^2] - E[x]^2.
    """
    _check_window(window)
    x = _as_chw(fm)
    _, h, w = x.shape
    r = window // 2
    c = torch.as_tensor(centers, dtype=torch.long).reshape(-1, 2)
    if c.numel() and (
        (c[:, 0] - r).min() < 0 or (c[:, 1] - r).min() < 0 or (c[:, 0] + r).max() >= h or (c[:, 1] + r).max() >= w
    ):
        raise ValueError(f"window {window} crosses the border of a {h}x{w} map")
    off = torch.arange(-r, r + 1)
    ii = (c[:, 0, None, None] + off[None, :, None]).expand(-1, window, window)
    jj = (c[:, 1, None, None] + off[None, None, :]).expand(-1, window, window)
    patches = x[:, ii, jj].flatten(2)  # C x M x s^2
    mu = patches.mean(-1)
    var = ((patches - mu[..., None]) ** 2).mean(-1)
    return mu.T, var.T


def local_moments(fm, center: tuple[int, int], window: int = DEFAULT_WINDOW) -> tuple[torch.Tensor, torch.Tensor]:
    mu, var = window_moments(fm, [center], window)
    return mu[0], var[0]


def snr_ratio(mu, var) -> torch.Tensor:
    """Elementwise mu / sqrt(var).

    Zero-variance channels map to +inf when mu > 0 and NaN (undefined) otherwise.
    """
    mu = torch.as_tensor(mu)
    var = torch.as_tensor(var, dtype=mu.dtype)
    if (var < 0).any():
        raise ValueError("variance must be nonnegative")
    safe = torch.where(var > 0, var, torch.ones_like(var))
    rho = mu / torch.sqrt(safe)
    degenerate = torch.where(mu > 0, torch.full_like(mu, math.inf), torch.full_like(mu, math.nan))
    return torch.where(var > 0, rho, degenerate)


def aggregate_rho(rho: torch.Tensor) -> torch.Tensor:
    """Collapse per-channel ratios to one score (last dim): mean over finite channels."""
    rho = torch.as_tensor(rho)
    finite = torch.isfinite(rho)
    n = finite.sum(-1)
    mean = torch.where(finite, rho, torch.zeros_like(rho)).sum(-1) / n.clamp(min=1)
    any_inf = (rho == math.inf).any(-1)
    fallback = torch.where(any_inf, torch.full_like(mean, math.inf), torch.full_like(mean, math.nan))
    return torch.where(n > 0, mean, fallback)


def mine_negative_regions(fm_noisy, anchors, window: int = DEFAULT_WINDOW, tau_noise: float = DEFAULT_TAU_NOISE) -> NegativeRegionSet:
    """Keep the candidate regions whose aggregated ratio is below ``tau_noise``.

    Selection is decided on detached statistics; the kept ``mu`` vectors stay
    attached to ``fm_noisy`` so they can act as differentiable negatives.
    """
    if not tau_noise > 0:
        raise ValueError("tau_noise must be positive")
    x = _as_chw(fm_noisy)
    out = NegativeRegionSet(tau_noise=tau_noise)
    if len(anchors) == 0:
        return out
    mu, var = window_moments(x, anchors, window)
    rho = snr_ratio(mu.detach(), var.detach())
    score = aggregate_rho(rho)
    for k, (center, keep) in enumerate(zip(anchors, (score < tau_noise).tolist())):
        if keep:
            out.regions.append(RegionStats(tuple(int(v) for v in center), window, mu[k], var[k], rho[k]))
    return out


def rho_map(fm, window: int = DEFAULT_WINDOW) -> torch.Tensor:
    """Aggregated ratio at every interior position; border positions are NaN.

    Output is H x W.
    """
    _check_window(window)
    x = _as_chw(fm)
    c, h, w = x.shape
    r = window // 2
    out = torch.full((h, w), math.nan, dtype=x.dtype)
    if h < window or w < window:
        return out
    patches = torch.nn.functional.unfold(x[None], window)[0].reshape(c, window * window, -1)
    mu = patches.mean(1)
    var = ((patches - mu[:, None]) ** 2).mean(1)
    score = aggregate_rho(snr_ratio(mu, var).T)
    out[r : h - r, r : w - r] = score.reshape(h - 2 * r, w - 2 * r)
    return out


def below_threshold(rmap: torch.Tensor, tau_noise: float = DEFAULT_TAU_NOISE) -> list[tuple[int, int, float]]:
    """Positions (i, j, rho) of an H x W ratio map strictly below ``tau_noise``."""
    idx = torch.nonzero(rmap < tau_noise)
    return [(int(i), int(j), float(rmap[i, j])) for i, j in idx]


def write_flat_array(arr, path) -> None:
    """Raw little-endian float64 payload after a one-line text header ``dtype C H W``."""
    a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
    if a.ndim == 2:
        a = a[None]
    c, h, w = a.shape
    with open(path, "wb") as fh:
        fh.write(f"float64 {c} {h} {w}\n".encode())
        fh.write(a.tobytes())


def read_flat_array(path) -> np.ndarray:
    with open(path, "rb") as fh:
        dtype, c, h, w = fh.readline().decode().split()
        if dtype != "float64":
            raise ValueError(f"unsupported dtype {dtype}")
        data = np.frombuffer(fh.read(), dtype="<f8")
    return data.reshape(int(c), int(h), int(w))
