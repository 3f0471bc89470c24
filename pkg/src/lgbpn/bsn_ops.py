"""Blind-spot operators: masked dense-sampled kernels, kernel shift, and PD."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .noise import CorrMask
from .tensor import Tap, pd_down, pd_up  # noqa: F401  (re-exported)


@dataclass(frozen=True)
class DownstreamLattice:
    """Spatial mixing that follows a masked convolution.

    ``layers`` lists (dilation, count) pairs of 3x3 layers that run on the
    stride-``stride`` PD grid; one step of such a layer moves
    ``stride * dilation`` pixels at full resolution.
    """
    stride: int = 1
    layers: tuple[tuple[int, int], ...] = ()

    def __post_init__(self):
        if self.stride < 1:
            raise ValueError("pd stride must be >= 1")
        for d, n in self.layers:
            if d < 1 or n < 0:
                raise ValueError(f"bad downstream layer ({d}, {n})")

    def reach_1d(self) -> set[int]:
        """Per-axis displacements sum_i s * d_i * k_i, k_i in {-1, 0, 1}."""
        reach = {0}
        for d, n in self.layers:
            step = self.stride * d
            for _ in range(n):
                reach = {r + k * step for r in reach for k in (-1, 0, 1)}
        return reach


def lattice_safety_mask(footprint: int, sample_dilation: int, downstream: DownstreamLattice) -> np.ndarray:
    """Bits (footprint x footprint): 0 where a tap would route the center pixel back to itself.

    A tap at offset d feeds output p from input p + d + r for every r the
    downstream layers can reach; the center re-enters exactly when -d is
    reachable. The reach set is symmetric and separable per axis. The
    center offset itself is left to the correlation mask.
    """
    if footprint % 2 == 0:
        raise ValueError("footprint must be odd")
    r = footprint // 2
    reach = downstream.reach_1d()
    axis_ok = np.array([(-o) not in reach for o in range(-r, r + 1)])
    bits = (axis_ok[:, None] | axis_ok[None, :]).astype(np.uint8)
    bits[r, r] = 1
    return bits


@dataclass(frozen=True)
class DspmcKernelSpec:
    footprint: int
    sample_dilation: int
    corr_bits: np.ndarray = field(compare=False)
    safety_bits: np.ndarray = field(compare=False)
    shift_ratio: float = 0.0

    @property
    def radius(self) -> int:
        return self.footprint // 2

    def lattice(self) -> list[tuple[int, int]]:
        """Offsets on the sample lattice inside the footprint, row-major."""
        d = self.sample_dilation
        n = self.radius // d
        return [(d * i, d * j) for i in range(-n, n + 1) for j in range(-n, n + 1)]

    def _bits(self, dy: int, dx: int) -> tuple[int, int]:
        r = self.radius
        return int(self.corr_bits[r + dy, r + dx]), int(self.safety_bits[r + dy, r + dx])

    def is_effective(self, dy: int, dx: int) -> bool:
        c, s = self._bits(dy, dx)
        return bool(c and s)

    def taps(self) -> list[Tap]:
        ratio = self.shift_ratio
        return [Tap(dy, dx, self.is_effective(dy, dx), ratio * dy, ratio * dx) for dy, dx in self.lattice()]

    def effective_offsets(self) -> list[tuple[int, int]]:
        return [(dy, dx) for dy, dx in self.lattice() if self.is_effective(dy, dx)]

    def mask_vector(self) -> np.ndarray:
        return np.array([self.is_effective(dy, dx) for dy, dx in self.lattice()], dtype=np.float32)

    def grid(self) -> str:
        r = self.radius
        on_lattice = set(self.lattice())
        rows = []
        for dy in range(-r, r + 1):
            row = []
            for dx in range(-r, r + 1):
                if (dy, dx) not in on_lattice:
                    row.append(".")
                    continue
                c, s = self._bits(dy, dx)
                row.append("x" if not c else "s" if not s else "o")
            rows.append("".join(row))
        return "\n".join(rows)

    def to_text(self) -> str:
        return (f"footprint={self.footprint}\ndilation={self.sample_dilation}\n"
                f"ratio={self.shift_ratio!r}\n{self.grid()}\n")

    @classmethod
    def from_text(cls, text: str) -> "DspmcKernelSpec":
        lines = [ln for ln in text.strip().splitlines() if ln.strip()]
        meta = dict(ln.split("=", 1) for ln in lines[:3])
        k = int(meta["footprint"])
        grid = lines[3:3 + k]
        if len(grid) != k or any(len(row) != k for row in grid):
            raise ValueError("malformed kernel grid")
        corr = np.array([[0 if ch == "x" else 1 for ch in row] for row in grid], dtype=np.uint8)
        safe = np.array([[0 if ch == "s" else 1 for ch in row] for row in grid], dtype=np.uint8)
        return cls(k, int(meta["dilation"]), corr, safe, float(meta["ratio"]))


def make_dspmc_spec(footprint: int, sample_dilation: int, corr_mask: CorrMask,
                    downstream: DownstreamLattice | None = None) -> DspmcKernelSpec:
    """Correlation-masked, lattice-safe kernel on a ``sample_dilation`` grid."""
    if footprint % 2 == 0 or footprint < 1:
        raise ValueError("footprint must be a positive odd number")
    if sample_dilation < 1:
        raise ValueError("sample dilation must be >= 1")
    r = footprint // 2
    corr = corr_mask.crop(r)
    corr[r, r] = 0
    corr = corr & corr[::-1, ::-1]
    safety = lattice_safety_mask(footprint, sample_dilation, downstream or DownstreamLattice())
    spec = DspmcKernelSpec(footprint, sample_dilation, corr, safety, 0.0)
    if not spec.effective_offsets():
        raise ValueError(f"{footprint}x{footprint} kernel (dilation {sample_dilation}) has no effective taps")
    return spec


def apply_kernel_shift(spec: DspmcKernelSpec, ratio: float) -> DspmcKernelSpec:
    """Pull every tap toward the center: offset p_k becomes (1 + ratio) p_k."""
    if not -1.0 < ratio <= 0.0:
        raise ValueError("shift ratio must lie in (-1, 0]")
    return replace(spec, shift_ratio=float(ratio))
