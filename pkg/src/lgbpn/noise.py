"""Spatial noise correlation: estimation, masking, and a synthetic generator."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from . import lgbp

MIN_PAIRS = 10_000

KERNELS = {
    "delta": np.array([[1.0]]),
    "box3": np.ones((3, 3)),
    # 3x3 binomial approximation of a Gaussian
    "gauss3": np.outer([1.0, 2.0, 1.0], [1.0, 2.0, 1.0]),
}


def _as_array(t) -> np.ndarray:
    return np.asarray(getattr(t, "data", t))


@dataclass
class CorrelationMap:
    radius: int
    rho: np.ndarray  # (2R+1, 2R+1), index [R + dy, R + dx]
    sample_count: np.ndarray  # pairs per offset, same layout

    def at(self, dy: int, dx: int) -> float:
        return float(self.rho[self.radius + dy, self.radius + dx])

    def offsets(self):
        R = self.radius
        for dy in range(-R, R + 1):
            for dx in range(-R, R + 1):
                yield dy, dx


@dataclass
class CorrMask:
    radius: int
    bits: np.ndarray  # uint8, 0 = excluded
    threshold: float

    def bit(self, dy: int, dx: int) -> int:
        R = self.radius
        if abs(dy) > R or abs(dx) > R:
            return 1
        return int(self.bits[R + dy, R + dx])

    def crop(self, radius: int) -> np.ndarray:
        if radius > self.radius:
            raise ValueError(f"mask radius {self.radius} smaller than requested {radius}")
        c = self.radius
        return self.bits[c - radius:c + radius + 1, c - radius:c + radius + 1].copy()

    @classmethod
    def center_only(cls, radius: int) -> "CorrMask":
        bits = np.ones((2 * radius + 1,) * 2, dtype=np.uint8)
        bits[radius, radius] = 0
        return cls(radius, bits, 1.0)


@dataclass
class NoiseSynthSpec:
    sigma: float
    kernel: np.ndarray = field(default_factory=lambda: KERNELS["gauss3"].copy())
    gain: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.sum() <= 0:
            raise ValueError("noise kernel must sum to a positive value")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")
        if self.gain < 0:
            raise ValueError("gain must be non-negative")

    @classmethod
    def named(cls, name: str, sigma: float, gain: float = 0.0, seed: int = 0) -> "NoiseSynthSpec":
        if name not in KERNELS:
            raise ValueError(f"unknown kernel {name!r}; choose from {sorted(KERNELS)}")
        return cls(sigma, KERNELS[name].copy(), gain, seed)


def extract_noise(noisy, clean) -> np.ndarray:
    n, c = _as_array(noisy), _as_array(clean)
    if n.shape != c.shape:
        raise ValueError(f"noisy {n.shape} and clean {c.shape} differ in shape")
    return n - c


def _channel_planes(noise_maps: Iterable, per_channel: bool):
    """Yield (channel index, 2-D plane) for every image plane."""
    for m in noise_maps:
        a = _as_array(m).astype(np.float64, copy=False)
        if a.ndim == 2:
            a = a[None, None]
        elif a.ndim == 3:
            a = a[None]
        for b in range(a.shape[0]):
            for c in range(a.shape[1]):
                yield (c if per_channel else 0), a[b, c]


def estimate_correlation(noise_maps: Iterable, radius: int, min_pairs: int = MIN_PAIRS,
                         per_channel: bool = False) -> CorrelationMap | list[CorrelationMap]:
    """Pearson correlation of noise at p with noise at p + offset, for every offset.

    Pairs with either pixel outside the image are dropped. Statistics are
    pooled over images and (unless ``per_channel``) color channels; each
    pair takes both values from the same channel.
    """
    if radius < 0:
        raise ValueError("radius must be non-negative")
    size = 2 * radius + 1
    acc: dict[int, np.ndarray] = {}
    for ch, plane in _channel_planes(noise_maps, per_channel):
        # per offset: n, sa, sb, saa, sbb, sab
        s = acc.setdefault(ch, np.zeros((6, size, size)))
        H, W = plane.shape
        for dy in range(-radius, radius + 1):
            ya0, ya1 = max(0, -dy), min(H, H - dy)
            if ya1 <= ya0:
                continue
            for dx in range(-radius, radius + 1):
                xa0, xa1 = max(0, -dx), min(W, W - dx)
                if xa1 <= xa0:
                    continue
                a = plane[ya0:ya1, xa0:xa1]
                b = plane[ya0 + dy:ya1 + dy, xa0 + dx:xa1 + dx]
                i, j = dy + radius, dx + radius
                s[0, i, j] += a.size
                s[1, i, j] += a.sum()
                s[2, i, j] += b.sum()
                s[3, i, j] += np.vdot(a, a)
                s[4, i, j] += np.vdot(b, b)
                s[5, i, j] += np.vdot(a, b)
    if not acc:
        raise ValueError("no noise maps given")
    maps = [_finish(radius, acc[ch], min_pairs) for ch in sorted(acc)]
    return maps if per_channel else maps[0]


def _finish(radius: int, s: np.ndarray, min_pairs: int) -> CorrelationMap:
    n = s[0]
    if n.min() < min_pairs:
        raise ValueError(f"insufficient samples: {int(n.min())} pairs at some offset (< {min_pairs})")
    ma, mb = s[1] / n, s[2] / n
    cov = s[5] / n - ma * mb
    va = s[3] / n - ma * ma
    vb = s[4] / n - mb * mb
    if va.min() <= 0 or vb.min() <= 0:
        raise ValueError("noise has zero variance; correlation undefined")
    rho = cov / np.sqrt(va * vb)
    rho = np.clip(rho, -1.0, 1.0)
    rho[radius, radius] = 1.0
    return CorrelationMap(radius, rho, n.astype(np.int64))


def build_corr_mask(cmap: CorrelationMap, threshold: float) -> CorrMask:
    """Exclude every offset whose |rho| reaches ``threshold`` (and the center).

    An exclusion at d also excludes -d so the mask stays point symmetric.
    """
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie in (0, 1)")
    excl = np.abs(cmap.rho) >= threshold
    excl = excl | excl[::-1, ::-1]
    R = cmap.radius
    excl[R, R] = True
    return CorrMask(R, (~excl).astype(np.uint8), threshold)


def normalized_kernel(kernel: np.ndarray) -> np.ndarray:
    """Scale to unit energy, so filtered unit white noise keeps unit variance."""
    k = np.asarray(kernel, dtype=np.float64)
    return k / np.sqrt((k * k).sum())


def kernel_autocorrelation(kernel: np.ndarray, radius: int) -> np.ndarray:
    """Correlation of white noise filtered by ``kernel``: (k * k)(d) / (k * k)(0)."""
    k = np.asarray(kernel, dtype=np.float64)
    kh, kw = k.shape
    out = np.zeros((2 * radius + 1, 2 * radius + 1))
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            tot = 0.0
            for i in range(kh):
                for j in range(kw):
                    ii, jj = i + dy, j + dx
                    if 0 <= ii < kh and 0 <= jj < kw:
                        tot += k[i, j] * k[ii, jj]
            out[dy + radius, dx + radius] = tot
    return out / out[radius, radius]


def correlated_field(shape: tuple[int, ...], kernel: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Unit-variance stationary noise: white Gaussian filtered by the unit-energy kernel."""
    k = normalized_kernel(kernel)
    kh, kw = k.shape
    *lead, H, W = shape
    w = rng.standard_normal((*lead, H + kh - 1, W + kw - 1))
    out = np.zeros((*lead, H, W))
    for i in range(kh):
        for j in range(kw):
            if k[i, j] != 0.0:
                # flipped kernel index: true convolution
                out += k[kh - 1 - i, kw - 1 - j] * w[..., i:i + H, j:j + W]
    return out


def synth_correlated_noise(clean, spec: NoiseSynthSpec) -> np.ndarray:
    """noisy = clean + (k * w) (sigma + gain * clean), one derived RNG stream per image.

    Values are not clamped; clamping happens only when writing image files.
    """
    c = _as_array(clean).astype(np.float64)
    if c.ndim == 3:
        c = c[None]
    noisy = np.empty_like(c)
    for b in range(c.shape[0]):
        rng = np.random.default_rng([spec.seed, b])
        field_ = correlated_field(c[b].shape, spec.kernel, rng)
        noisy[b] = c[b] + field_ * (spec.sigma + spec.gain * c[b])
    return noisy


def pseudo_clean(noisy, size: int = 11) -> np.ndarray:
    """Median-smoothed proxy for the clean image (heuristic, for data without references)."""
    from scipy.ndimage import median_filter

    a = _as_array(noisy)
    footprint = (1,) * (a.ndim - 2) + (size, size)
    return median_filter(a, size=footprint, mode="reflect")


def correlation_report(cmap: CorrelationMap, mask: CorrMask | None = None) -> str:
    lines = ["dy\tdx\trho\tbit\tpairs"]
    for dy, dx in cmap.offsets():
        bit = mask.bit(dy, dx) if mask is not None else ""
        n = int(cmap.sample_count[cmap.radius + dy, cmap.radius + dx])
        lines.append(f"{dy}\t{dx}\t{cmap.at(dy, dx):.6f}\t{bit}\t{n}")
    return "\n".join(lines) + "\n"


def mask_grid(mask: CorrMask) -> str:
    return "\n".join("".join("1" if b else "0" for b in row) for row in mask.bits) + "\n"


def save_correlation(path: str | Path, cmap: CorrelationMap) -> None:
    lgbp.save_container(path, {
        "rho": cmap.rho.astype(np.float32),
        "sample_count": cmap.sample_count.astype(np.float32),
    }, f"kind=correlation\nradius={cmap.radius}\n")
    Path(str(path) + ".txt").write_text(correlation_report(cmap))


def load_correlation(path: str | Path) -> CorrelationMap:
    tensors, text = lgbp.load_container(path)
    meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    if meta.get("kind") != "correlation":
        raise lgbp.FormatError(f"{path} does not hold a correlation map")
    return CorrelationMap(int(meta["radius"]), tensors["rho"].astype(np.float64),
                          tensors["sample_count"].astype(np.int64))


def save_mask(path: str | Path, mask: CorrMask, cmap: CorrelationMap | None = None) -> None:
    lgbp.save_container(path, {"bits": mask.bits.astype(np.float32)},
                        f"kind=corrmask\nradius={mask.radius}\nthreshold={mask.threshold!r}\n")
    report = correlation_report(cmap, mask) if cmap is not None else mask_grid(mask)
    Path(str(path) + ".txt").write_text(report)


def load_mask(path: str | Path) -> CorrMask:
    tensors, text = lgbp.load_container(path)
    meta = dict(line.split("=", 1) for line in text.splitlines() if "=" in line)
    if meta.get("kind") != "corrmask":
        raise lgbp.FormatError(f"{path} does not hold a correlation mask")
    return CorrMask(int(meta["radius"]), tensors["bits"].astype(np.uint8), float(meta["threshold"]))
