"""PNG image I/O, the dataset directory convention, and synthetic clean scenes."""
from __future__ import annotations

import warnings
from pathlib import Path

import numpy as np
from PIL import Image

IMAGE_EXTS = (".png",)


def to_bytes(img: np.ndarray) -> np.ndarray:
    """(3, H, W) floats -> (H, W, 3) uint8: clamp to [0, 1], then floor(v * 255 + 0.5)."""
    a = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    return np.floor(a * 255.0 + 0.5).astype(np.uint8).transpose(1, 2, 0)


def from_bytes(buf: np.ndarray) -> np.ndarray:
    return (np.asarray(buf, dtype=np.float32) / np.float32(255.0)).transpose(2, 0, 1)


def load_image(path: str | Path) -> np.ndarray:
    """8-bit RGB PNG -> (3, H, W) float32 in [0, 1]."""
    with Image.open(path) as im:
        if im.mode not in ("RGB", "L", "P", "RGBA"):
            raise ValueError(f"{path}: unsupported image mode {im.mode} (need 8-bit RGB)")
        if im.mode == "RGBA":
            raise ValueError(f"{path}: alpha channel not supported")
        buf = np.asarray(im.convert("RGB"))
    return from_bytes(buf)


def save_image(path: str | Path, img: np.ndarray) -> None:
    arr = np.asarray(img)
    if arr.ndim == 4 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ValueError(f"expected (3, H, W), got {arr.shape}")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_bytes(arr), mode="RGB").save(path)


def dataset_scan(root: str | Path) -> list[tuple[Path, Path | None]]:
    """Pairs (noisy, clean or None) from ``root/noisy`` and ``root/clean``, sorted by name."""
    root = Path(root)
    noisy_dir, clean_dir = root / "noisy", root / "clean"
    noisy = _index(noisy_dir)
    if not noisy:
        raise ValueError(f"no noisy images under {noisy_dir}")
    clean = _index(clean_dir) if clean_dir.is_dir() else {}
    for stem in sorted(set(clean) - set(noisy)):
        warnings.warn(f"clean image {clean[stem].name} has no noisy partner", stacklevel=2)
    return [(noisy[s], clean.get(s)) for s in sorted(noisy)]


def _index(d: Path) -> dict[str, Path]:
    if not d.is_dir():
        return {}
    out: dict[str, Path] = {}
    for p in sorted(d.iterdir()):
        if p.suffix.lower() not in IMAGE_EXTS:
            continue
        if p.stem in out:
            raise ValueError(f"duplicate basename {p.stem!r} in {d}")
        out[p.stem] = p
    return out


def load_dataset(root: str | Path) -> tuple[np.ndarray, np.ndarray | None, list[str]]:
    """Stacked noisy images, stacked clean images (or None unless every pair has one), names."""
    pairs = dataset_scan(root)
    noisy = np.stack([load_image(n) for n, _ in pairs])
    clean = None
    if all(c is not None for _, c in pairs):
        clean = np.stack([load_image(c) for _, c in pairs])
        if clean.shape != noisy.shape:
            raise ValueError("clean and noisy images differ in size")
    return noisy, clean, [n.stem for n, _ in pairs]


def synth_scenes(n: int, size: int, seed: int = 0) -> np.ndarray:
    """Piecewise-smooth RGB scenes in [0.05, 0.95]: shaded background plus random shapes.

    Image i depends only on (seed, i).
    """
    yy, xx = np.mgrid[0:size, 0:size] / max(size - 1, 1)
    out = np.empty((n, 3, size, size))
    for i in range(n):
        rng = np.random.default_rng([seed, i])
        c0, c1 = rng.uniform(0.1, 0.9, (2, 3))
        ang = rng.uniform(0, 2 * np.pi)
        t = (np.cos(ang) * xx + np.sin(ang) * yy + 1) / 2
        img = c0[:, None, None] * (1 - t) + c1[:, None, None] * t
        for _ in range(rng.integers(3, 9)):
            col = rng.uniform(0.05, 0.95, 3)
            cy, cx = rng.uniform(0, 1, 2)
            ry, rx = rng.uniform(0.08, 0.35, 2)
            if rng.random() < 0.5:
                inside = (np.abs(yy - cy) < ry) & (np.abs(xx - cx) < rx)
            else:
                inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
            shade = 1 + rng.uniform(-0.15, 0.15) * (yy - cy) / ry
            img = np.where(inside, col[:, None, None] * shade, img)
        out[i] = np.clip(img, 0.05, 0.95)
    return out.astype(np.float32)
