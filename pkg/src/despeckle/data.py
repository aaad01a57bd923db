"""Image loading, canonical resizing, train/test splitting and speckle synthesis."""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

CANONICAL_SIZE = 224
IMAGE_SUFFIXES = (".png", ".bmp", ".tif", ".tiff")
SPLITS = ("train", "test", "unsplit")


class DatasetError(Exception):
    """Raised for unreadable files or unusable dataset directories."""

    def __init__(self, message: str, path: Path | str | None = None):
        super().__init__(message if path is None else f"{message}: {path}")
        self.path = None if path is None else Path(path)


@dataclass
class ImageSample:
    id: str
    pixels: np.ndarray
    split: str = "unsplit"
    source: str = "synthetic"
    path: str | None = None
    checksum: str | None = None

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=np.float64)
        if self.pixels.ndim != 2:
            raise ValueError(f"expected a single-channel H x W image, got shape {self.pixels.shape}")
        if not np.all(np.isfinite(self.pixels)):
            raise ValueError(f"non-finite pixels in sample {self.id!r}")
        if self.split not in SPLITS:
            raise ValueError(f"unknown split {self.split!r}")

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape


@dataclass(frozen=True)
class NoiseConfig:
    sigma: float
    seed: int = 0
    clip: bool = True

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")


@dataclass
class DatasetManifest:
    entries: list[ImageSample]
    split_ratio: float | None = None
    root: str | None = None
    source: str = "synthetic"

    @property
    def counts(self) -> dict[str, int]:
        train = sum(e.split == "train" for e in self.entries)
        test = sum(e.split == "test" for e in self.entries)
        return {"train": train, "test": test, "total": len(self.entries)}

    def subset(self, split: str) -> list[ImageSample]:
        return [e for e in self.entries if e.split == split]

    def by_id(self) -> dict[str, ImageSample]:
        return {e.id: e for e in self.entries}


def _decode(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode in ("I;16", "I;16B", "I;16L"):
                arr = np.asarray(im, dtype=np.float64) / 65535.0
            elif im.mode == "I":
                arr = np.asarray(im, dtype=np.float64)
                arr = arr / 65535.0 if arr.max() > 255 else arr / 255.0
            elif im.mode == "F":
                arr = np.asarray(im, dtype=np.float64)
            elif im.mode in ("L", "P", "1"):
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
            else:
                # multi-channel sources collapse to luminance
                arr = np.asarray(im.convert("L"), dtype=np.float64) / 255.0
    except (OSError, ValueError, Image.DecompressionBombError) as exc:
        raise DatasetError(f"cannot decode image ({exc})", path) from exc
    return np.clip(arr, 0.0, 1.0)


def read_image(path: str | Path) -> np.ndarray:
    """Decode one raster to a float64 [0, 1] array."""
    path = Path(path)
    if not path.is_file():
        raise DatasetError("image not found", path)
    return _decode(path)


def _file_checksum(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def load_dataset(root_path: str | Path, source_name: str) -> DatasetManifest:
    """Decode every raster under ``root_path`` into an unsplit manifest.

    Files are visited in sorted relative-path order; the sample id is the
    relative path without its suffix.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise DatasetError("dataset root is not a directory", root)
    paths = sorted(p for p in root.rglob("*") if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)
    if not paths:
        raise DatasetError("no images found", root)
    entries = []
    for p in paths:
        rel = p.relative_to(root)
        entries.append(
            ImageSample(
                id=rel.with_suffix("").as_posix(),
                pixels=_decode(p),
                source=source_name,
                path=rel.as_posix(),
                checksum=_file_checksum(p),
            )
        )
    return DatasetManifest(entries=entries, root=str(root), source=source_name)


def resize_to_canonical(sample: ImageSample, size: int = CANONICAL_SIZE) -> ImageSample:
    """Bilinear resize (half-pixel centers) to ``size`` x ``size``, clamped to [0, 1]."""
    h, w = sample.shape
    if h < 1 or w < 1:
        raise ValueError("image must have at least one pixel")
    if (h, w) == (size, size):
        return replace(sample, pixels=np.clip(sample.pixels, 0.0, 1.0))
    x = torch.from_numpy(sample.pixels)[None, None]
    antialias = h > size or w > size
    y = F.interpolate(x, size=(size, size), mode="bilinear", align_corners=False, antialias=antialias)
    return replace(sample, pixels=np.clip(y[0, 0].numpy(), 0.0, 1.0))


def split_dataset(manifest: DatasetManifest, ratio: float = 0.7, seed: int = 0) -> DatasetManifest:
    n = len(manifest.entries)
    if n == 0:
        raise DatasetError("cannot split an empty dataset")
    if not 0 < ratio < 1:
        raise ValueError(f"split ratio must lie in (0, 1), got {ratio}")
    order = np.random.default_rng(seed).permutation(n)
    # guard against 0.7 * N landing a hair below an integer
    n_train = int(math.floor(ratio * n + 1e-9))
    train_idx = set(order[:n_train].tolist())
    entries = [
        replace(e, split="train" if i in train_idx else "test") for i, e in enumerate(manifest.entries)
    ]
    return DatasetManifest(entries=entries, split_ratio=ratio, root=manifest.root, source=manifest.source)


def derive_seed(*parts) -> int:
    """Stable 63-bit seed from arbitrary parts (order-independent across datasets)."""
    digest = hashlib.sha256(":".join(str(p) for p in parts).encode()).digest()
    return int.from_bytes(digest[:8], "little") >> 1


def speckle_field(shape: tuple[int, int], sigma: float, seed: int) -> np.ndarray:
    return sigma * np.random.default_rng(seed).standard_normal(shape)


def add_speckle(sample: ImageSample, cfg: NoiseConfig, per_image_seed: bool = True) -> ImageSample:
    """Multiplicative speckle: ``clean * (1 + eps)`` with ``eps ~ N(0, sigma^2)`` per pixel.

    With ``per_image_seed`` the generator is seeded from ``(cfg.seed, sample.id)``
    so the noisy copy does not depend on dataset order.
    """
    if cfg.sigma == 0:
        return replace(sample, pixels=sample.pixels.copy())
    seed = derive_seed(cfg.seed, sample.id) if per_image_seed else cfg.seed
    noisy = sample.pixels * (1.0 + speckle_field(sample.shape, cfg.sigma, seed))
    if cfg.clip:
        noisy = np.clip(noisy, 0.0, 1.0)
    return replace(sample, pixels=noisy)


def make_phantom(size: int, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-smooth stand-in for an ultrasound frame: tissue gradient plus ellipses."""
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    angle = rng.uniform(0, 2 * np.pi)
    img = 0.35 + 0.25 * (np.cos(angle) * xx + np.sin(angle) * yy)
    for _ in range(rng.integers(2, 5)):
        cy, cx = rng.uniform(0.2, 0.8, size=2)
        ry, rx = rng.uniform(0.08, 0.3, size=2)
        theta = rng.uniform(0, np.pi)
        dy, dx = yy - cy, xx - cx
        u = (dx * np.cos(theta) + dy * np.sin(theta)) / rx
        v = (-dx * np.sin(theta) + dy * np.cos(theta)) / ry
        inside = u**2 + v**2 <= 1.0
        img = np.where(inside, rng.uniform(0.05, 0.95), img)
    return np.clip(img, 0.0, 1.0)


def synthetic_dataset(n: int, size: int = CANONICAL_SIZE, seed: int = 0, source: str = "synthetic") -> DatasetManifest:
    rng = np.random.default_rng(seed)
    entries = [ImageSample(id=f"phantom_{i:04d}", pixels=make_phantom(size, rng), source=source) for i in range(n)]
    return DatasetManifest(entries=entries, source=source)


def to_uint8(pixels: np.ndarray) -> np.ndarray:
    return np.round(np.clip(pixels, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(pixels: np.ndarray, path: str | Path) -> str:
    """Write an 8-bit PNG and return the sha256 of the written bytes."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(pixels), mode="L").save(path, format="PNG")
    return _file_checksum(path)


MANIFEST_FIELDS = ("id", "path", "split", "checksum")


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS)
        writer.writeheader()
        for e in manifest.entries:
            writer.writerow({"id": e.id, "path": e.path or "", "split": e.split, "checksum": e.checksum or ""})


def read_manifest_records(path: str | Path) -> list[dict[str, str]]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))


def load_split(root_path: str | Path, manifest_path: str | Path, source_name: str, size: int = CANONICAL_SIZE) -> DatasetManifest:
    """Reload images listed in a manifest file, restoring their split tags."""
    root = Path(root_path)
    entries = []
    for rec in read_manifest_records(manifest_path):
        p = root / rec["path"]
        if not p.is_file():
            raise DatasetError("manifest entry missing on disk", p)
        sample = ImageSample(id=rec["id"], pixels=_decode(p), split=rec["split"], source=source_name, path=rec["path"])
        entries.append(resize_to_canonical(sample, size))
    if not entries:
        raise DatasetError("manifest lists no images", manifest_path)
    return DatasetManifest(entries=entries, root=str(root), source=source_name)
