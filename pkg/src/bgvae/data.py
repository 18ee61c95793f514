"""Image ingestion, PNG I/O, training crops, and toy-dataset generation."""

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .exceptions import IngestionError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg", ".bmp")


def load_image(path) -> torch.Tensor:
    """Read an 8-bit image as a (3, H, W) float tensor in [0, 1].

    Grayscale inputs are promoted to RGB; images with an alpha channel are
    rejected.
    """
    path = Path(path)
    try:
        img = Image.open(path)
        img.load()
    except Exception as exc:
        raise IngestionError(f"cannot read image {path}: {exc}") from exc
    if img.mode in ("RGBA", "LA", "PA") or (
        img.mode == "P" and "transparency" in img.info
    ):
        raise IngestionError(f"{path}: alpha channels are not supported")
    if img.mode not in ("RGB", "L", "P"):
        raise IngestionError(f"{path}: unsupported mode {img.mode!r} (8-bit only)")
    arr = np.asarray(img.convert("RGB"), dtype=np.float32) / 255.0
    return torch.from_numpy(arr).permute(2, 0, 1).contiguous()


def save_image(x: torch.Tensor, path) -> None:
    """Write a (3, H, W) or (1, 3, H, W) tensor in [0, 1] as an 8-bit PNG."""
    if x.dim() == 4:
        x = x[0]
    arr = (x.clamp(0, 1) * 255.0).round().to(torch.uint8)
    Image.fromarray(arr.permute(1, 2, 0).numpy(), mode="RGB").save(path)


def _cache_path(cache_dir: Path, path: Path) -> Path:
    stat = path.stat()
    key = hashlib.sha1(f"{path.resolve()}:{stat.st_mtime_ns}:{stat.st_size}".encode())
    return cache_dir / f"{key.hexdigest()}.npy"


class ImageFolder:
    """All images under a directory, decoded once and kept in memory.

    If the BGVAE_CACHE environment variable points at a directory, decoded
    arrays are also memoized there as .npy files across runs.
    """

    def __init__(self, root):
        self.root = Path(root)
        self.paths = sorted(
            p for p in self.root.iterdir() if p.suffix.lower() in IMAGE_EXTENSIONS
        )
        if not self.paths:
            raise IngestionError(f"no images found under {self.root}")
        cache = os.environ.get("BGVAE_CACHE")
        self._cache_dir = Path(cache) if cache else None
        if self._cache_dir:
            self._cache_dir.mkdir(parents=True, exist_ok=True)
        self._images = [self._load(p) for p in self.paths]

    def _load(self, path: Path) -> np.ndarray:
        if self._cache_dir:
            cpath = _cache_path(self._cache_dir, path)
            if cpath.exists():
                return np.load(cpath)
        arr = load_image(path).numpy()
        if self._cache_dir:
            np.save(_cache_path(self._cache_dir, path), arr)
        return arr

    def __len__(self) -> int:
        return len(self.paths)

    def __getitem__(self, i: int) -> torch.Tensor:
        return torch.from_numpy(self._images[i])

    def sample_batch(
        self, rng: np.random.Generator, batch_size: int, crop: int, hflip: bool = True
    ) -> torch.Tensor:
        """Random crops with horizontal flips, stacked into (B, 3, crop, crop)."""
        out = np.empty((batch_size, 3, crop, crop), dtype=np.float32)
        for b in range(batch_size):
            img = self._images[rng.integers(len(self._images))]
            _, h, w = img.shape
            if h < crop or w < crop:
                pad_h, pad_w = max(0, crop - h), max(0, crop - w)
                img = np.pad(img, ((0, 0), (0, pad_h), (0, pad_w)), mode="edge")
                _, h, w = img.shape
            top = rng.integers(h - crop + 1)
            left = rng.integers(w - crop + 1)
            patch = img[:, top : top + crop, left : left + crop]
            if hflip and rng.random() < 0.5:
                patch = patch[:, :, ::-1]
            out[b] = patch
        return torch.from_numpy(out)


def make_toy_dataset(out_dir, count: int = 100, size: int = 96, seed: int = 0) -> list:
    """Write small synthetic PNGs with compressible structure (for toy runs).

    Each image mixes a smooth color gradient, a few solid rectangles, and mild
    noise; returns the written paths.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32) / size
    paths = []
    for i in range(count):
        g = np.stack(
            [
                rng.random() * xx + rng.random() * yy,
                rng.random() * (1 - xx) + rng.random() * yy,
                rng.random() * xx * yy + rng.random(),
            ]
        )
        for _ in range(rng.integers(2, 6)):
            x0, y0 = rng.integers(0, size - 8, size=2)
            dx, dy = rng.integers(6, max(8, size // 2), size=2)
            g[:, y0 : y0 + dy, x0 : x0 + dx] = rng.random(3)[:, None, None]
        g = g + rng.normal(0.0, 0.02, size=g.shape).astype(np.float32)
        arr = (np.clip(g, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
        path = out_dir / f"toy_{i:04d}.png"
        Image.fromarray(arr).save(path)
        paths.append(path)
    return paths
