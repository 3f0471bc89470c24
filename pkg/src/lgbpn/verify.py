"""Gradient probes that check the blind-spot property, receptive-field geometry and leakage.

All probes push a one-hot seed (summed over output channels at one pixel)
back to the input. Batch items never interact, so one backward pass probes
one position in every image of the batch.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import dtb as D
from . import network as N
from . import tensor as T
from .bsn_ops import DownstreamLattice, DspmcKernelSpec
from .noise import CorrMask
from .tensor import Tensor, Tap

MARGIN = 21
STRUCTURAL_TOL = 1e-6
GRADCHECK_TOL = 1e-5
LEAKAGE_TOL = 1e-3
WINDOW = 10   # radius of the off-center yardstick: the largest DSPMC footprint


@dataclass
class ProbeReport:
    positions: list[tuple[int, int]]
    center: np.ndarray              # (n_inputs, n_positions) max over input channels of |dy(p)/dx(p)|
    off_center_median: np.ndarray   # same layout, median over the nonzero off-center support
    tolerance: float
    detach_stats: bool
    branches: str
    leak_ratio: np.ndarray = field(default=None)

    @property
    def max_center(self) -> float:
        return float(self.center.max()) if self.center.size else 0.0

    @property
    def passed(self) -> bool:
        return self.max_center <= self.tolerance

    def summary(self) -> str:
        return (f"branches={self.branches} detach_stats={self.detach_stats} probes={self.center.size} "
                f"max|center|={self.max_center:.3e} median|off-center|={float(np.median(self.off_center_median)):.3e} "
                f"tol={self.tolerance:g} {'PASS' if self.passed else 'FAIL'}")


def frozen(model: N.Model, dtype=None) -> N.Model:
    """Same model with constant parameters, so probes only differentiate the input."""
    dt = dtype or next(iter(model.params.values())).dtype
    params = {k: Tensor(v.data.astype(dt)) for k, v in model.params.items()}
    return N.Model(model.config, params, model.local_spec, model.global_spec, model.corr_mask, model.mode)


def interior_positions(H: int, W: int, n: int, rng: np.random.Generator, margin: int = MARGIN) -> list[tuple[int, int]]:
    if H - 2 * margin <= 0 or W - 2 * margin <= 0:
        raise ValueError(f"{H}x{W} has no position {margin} pixels from every border")
    ys = rng.integers(margin, H - margin, n)
    xs = rng.integers(margin, W - margin, n)
    return [(int(y), int(x)) for y, x in zip(ys, xs)]


def input_gradients(model: N.Model, x: np.ndarray, positions: list[tuple[int, int]],
                    detach_stats: bool = False) -> np.ndarray:
    """(n_positions, B, C_in, H, W): d sum_c y_c(b, p) / d x(b, ., .) for every probe p."""
    fm = frozen(model)
    xin = Tensor(np.asarray(x, dtype=next(iter(fm.params.values())).dtype), requires_grad=True)
    out = N.forward(fm, xin, detach_stats=detach_stats)
    grads = []
    for (py, px) in positions:
        seed = np.zeros(out.shape, dtype=out.dtype)
        seed[:, :, py, px] = 1
        xin.grad = None
        T.backward_from(out, seed)
        grads.append(np.zeros_like(xin.data) if xin.grad is None else xin.grad.copy())
    return np.stack(grads)


def _center_and_median(gmag: np.ndarray, p: tuple[int, int], window: int = WINDOW) -> tuple[float, float]:
    """gmag: (H, W) magnitude map of one probe.

    The off-center median is taken over the nonzero entries of the
    (2 window + 1)^2 neighbourhood. The full support of the global branch
    spans more than 160 px, so a median over all of it would drift with the
    image size as more faint far-field paths enter.
    """
    c = float(gmag[p])
    y0, x0 = max(p[0] - window, 0), max(p[1] - window, 0)
    off = gmag[y0:p[0] + window + 1, x0:p[1] + window + 1].copy()
    off[p[0] - y0, p[1] - x0] = 0
    nz = off[off > 0]
    return c, float(np.median(nz)) if nz.size else 0.0


def blindspot_grad(model: N.Model, x: np.ndarray, positions: list[tuple[int, int]],
                   detach_stats: bool = False, tolerance: float = STRUCTURAL_TOL,
                   margin: int = MARGIN) -> ProbeReport:
    """Center-gradient magnitude at each probe, for every image in ``x``."""
    if model.mode != "train":
        raise ValueError("blindness is only claimed in train mode")
    H, W = x.shape[-2:]
    for py, px in positions:
        if not (margin <= py < H - margin and margin <= px < W - margin):
            raise ValueError(f"position {(py, px)} is closer than {margin} px to a border")
    g = np.abs(input_gradients(model, x, positions, detach_stats)).max(axis=2)  # (P, B, H, W)
    P, B = g.shape[:2]
    center = np.zeros((B, P))
    med = np.zeros((B, P))
    for i, p in enumerate(positions):
        for b in range(B):
            center[b, i], med[b, i] = _center_and_median(g[i, b], p)
    ratio = np.divide(center, med, out=np.full_like(center, np.nan), where=med > 0)
    return ProbeReport(list(positions), center, med, tolerance, detach_stats, model.config.branches, ratio)


def receptive_field_map(model: N.Model, x: np.ndarray, p: tuple[int, int],
                        detach_stats: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """(normalized map in [0, 1], raw map) of |d y(p) / d x(q)|, summed over the batch, max over channels."""
    g = np.abs(input_gradients(model, x, [p], detach_stats)[0])
    raw = g.max(axis=1).sum(axis=0)
    top = raw.max()
    return (raw / top if top > 0 else raw), raw


def heat_png(path, norm_map: np.ndarray, mark: tuple[int, int] | None = None) -> None:
    """Black-red-yellow-white heat map, optional cyan marker at the probe."""
    from .data import save_image
    v = np.clip(norm_map, 0, 1) ** 0.5
    img = np.stack([np.clip(3 * v, 0, 1), np.clip(3 * v - 1, 0, 1), np.clip(3 * v - 2, 0, 1)])
    if mark is not None:
        img[:, mark[0], mark[1]] = (0.0, 1.0, 1.0)
    save_image(path, img)


def support(raw: np.ndarray, threshold: float = 1e-8) -> set[tuple[int, int]]:
    ys, xs = np.nonzero(raw > threshold)
    return set(zip(ys.tolist(), xs.tolist()))


def _reach_2d(lat: DownstreamLattice) -> set[tuple[int, int]]:
    r = lat.reach_1d()
    return {(a, b) for a in r for b in r}


def predicted_support(spec: DspmcKernelSpec, downstream: DownstreamLattice, p: tuple[int, int],
                      H: int, W: int) -> set[tuple[int, int]]:
    """Input pixels a branch can read for output p: effective taps plus downstream lattice moves.

    Assumes the reach stays inside the image and H, W divide by the stride
    (so no padding folds positions back).
    """
    out = set()
    for dy, dx in spec.effective_offsets():
        for ry, rx in _reach_2d(downstream):
            q = (p[0] + dy + ry, p[1] + dx + rx)
            if 0 <= q[0] < H and 0 <= q[1] < W:
                out.add(q)
    return out


def branch_model(model: N.Model, branches: str) -> N.Model:
    """Sub-model that keeps one branch, sharing parameters; fusion input width shrinks accordingly."""
    if branches == model.config.branches:
        return model
    cfg = replace(model.config, branches=branches)
    C = model.config.width
    params = dict(model.params)
    w = params["fuse.0.w"].data
    params["fuse.0.w"] = Tensor(w[:, :C] if branches == "local" else w[:, C:], requires_grad=True)
    keep = {k: v for k, v in params.items()
            if not (branches == "local" and k.startswith("global.")) and not (branches == "global" and k.startswith("local."))}
    return N.Model(cfg, keep, model.local_spec if cfg.uses_local else None,
                   model.global_spec if cfg.uses_global else None, model.corr_mask, model.mode)


def leakage_scaling(model: N.Model, sizes: list[tuple[int, int]], n_inputs: int = 2, seed: int = 0,
                    probes: int = 3) -> tuple[list[dict], float]:
    """Center-gradient leakage (attention statistics live) versus image area.

    Each size gets ``n_inputs`` uniform random images; probes sit near the
    middle. Leakage is |center| with live statistics divided by the median
    off-center magnitude of the detached (convolution-path) gradient near the
    probe, median over probes. Returns the table and the least-squares log-log slope of
    leakage against area (nan when a leakage value is 0: the log is undefined).
    """
    if len(sizes) < 2:
        raise ValueError("need at least two sizes")
    if model.mode != "train":
        raise ValueError("leakage is measured in train mode")
    rows = []
    for H, W in sizes:
        rng = np.random.default_rng([seed, H, W])
        x = rng.random((n_inputs, model.config.in_channels, H, W))
        pos = [(H // 2 + int(o), W // 2 + int(q)) for o, q in rng.integers(-2, 3, (probes, 2))]
        live = blindspot_grad(model, x, pos, detach_stats=False, tolerance=math.inf, margin=0)
        det = blindspot_grad(model, x, pos, detach_stats=True, tolerance=math.inf, margin=0)
        med = det.off_center_median
        ratio = np.divide(live.center, med, out=np.full_like(live.center, np.nan), where=med > 0)
        rows.append({"H": H, "W": W, "area": H * W, "center": float(np.median(live.center)),
                     "off_center": float(np.median(med)), "leakage": float(np.nanmedian(ratio))})
    lk = np.array([r["leakage"] for r in rows])
    if np.all(lk > 0) and np.all(np.isfinite(lk)):
        area = np.array([r["area"] for r in rows], dtype=np.float64)
        slope = float(np.polyfit(np.log(area), np.log(lk), 1)[0])
    else:
        slope = float("nan")
    return rows, slope


def leakage_table(rows: list[dict], slope: float) -> str:
    lines = ["H\tW\tarea\tmedian_center\tmedian_off_center\tleakage"]
    lines += [f"{r['H']}\t{r['W']}\t{r['area']}\t{r['center']:.3e}\t{r['off_center']:.3e}\t{r['leakage']:.3e}"
              for r in rows]
    lines.append(f"slope\t{slope:.3f}" if math.isfinite(slope) else "slope\tundefined (zero leakage)")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- fault injection


def with_center_tap(model: N.Model, value: float | None = None) -> N.Model:
    """Negative control: the local DSPMC center tap is switched on (so blindness must break).

    The center weights get ``value`` or, by default, a copy of the nearest
    effective tap's weights so the fault has a realistic magnitude.
    """
    spec = model.local_spec
    if spec is None:
        raise ValueError("model has no local branch")
    r = spec.radius
    corr = spec.corr_bits.copy()
    corr[r, r] = 1
    bad = DspmcKernelSpec(spec.footprint, spec.sample_dilation, corr, spec.safety_bits, spec.shift_ratio)
    params = {k: Tensor(v.data.copy(), requires_grad=True) for k, v in model.params.items()}
    lat = spec.lattice()
    ci = lat.index((0, 0))
    w = params["local.dspmc.w"].data
    if value is None:
        eff = spec.effective_offsets()
        near = min(eff, key=lambda o: (abs(o[0]) + abs(o[1]), o))
        w[:, :, ci] = w[:, :, lat.index(near)]
    else:
        w[:, :, ci] = value
    return N.Model(model.config, params, bad, model.global_spec, model.corr_mask, model.mode)


def _softmax_bad_backward(a: Tensor, axis: int = -1) -> Tensor:
    # drops the -s * sum(g * s) term of the true Jacobian
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)
    return T.from_op(s, (a,), lambda g: (g * s,), "softmax_corrupted")


# ---------------------------------------------------------------- gradcheck suite


def _proj(rng, shape):
    return rng.standard_normal(shape)


def _scalar(out: Tensor, w: np.ndarray) -> Tensor:
    return T.dot_const(out, w)


def tiny_config() -> N.NetworkConfig:
    return N.NetworkConfig(width=4, local_layers=1, dtb_count=1, expansion=1)


def tiny_mask() -> CorrMask:
    m = CorrMask.center_only(10)
    m.bits[9:12, 9:12] = 0
    return m


def gradcheck_suite(seed: int = 0, max_entries: int = 12) -> dict[str, float]:
    """Max relative finite-difference error per operation family (float64).

    Keys ending in ``_linear`` are purely linear graphs, differenced with a
    large step so truncation error vanishes. ``negative_control`` uses a
    softmax with a corrupted backward rule and must come out large.
    """
    rng = np.random.default_rng(seed)
    res: dict[str, float] = {}
    gc = T.grad_check

    def check(name, fn, point, **kw):
        kw.setdefault("max_entries", max_entries)
        kw.setdefault("seed", seed)
        res[name] = gc(fn, point, **kw)

    x = rng.standard_normal((2, 3, 7, 7))
    w9 = rng.standard_normal((4, 3, 9))
    taps_masked = [Tap(dy, dx, (dy, dx) != (0, 0)) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    taps_dil = T.grid_taps(3, 2)
    taps_frac = [Tap(t.dy * 2, t.dx * 2, t.mask, -0.6 * t.dy * 2, -0.6 * t.dx * 2) for t in taps_masked]
    P = _proj(rng, (2, 4, 7, 7))
    for name, taps in (("conv2d_masked", taps_masked), ("conv2d_dilated", taps_dil),
                       ("conv2d_fractional", taps_frac)):
        check(name, lambda v, taps=taps: _scalar(T.conv2d(v[0], v[1], taps), P), [x, w9])
    res["conv2d_linear"] = gc(lambda v: _scalar(T.conv2d(v[0], Tensor(w9), taps_frac), P), [x], h=1.0,
                              max_entries=max_entries, seed=seed)

    wd = rng.standard_normal((3, 1, 3, 3))
    Pd = _proj(rng, (2, 3, 7, 7))
    check("depthwise", lambda v: _scalar(T.depthwise_conv2d(v[0], v[1], 3, 2), Pd), [x, wd])

    xpd = rng.standard_normal((1, 2, 7, 9))
    Pp = _proj(rng, (9, 2, 3, 3))
    res["pd_linear"] = gc(lambda v: T.dot_const(T.pd_down(v[0], 3), Pp), [xpd], h=1.0,
                          max_entries=max_entries, seed=seed)
    Pu = _proj(rng, (1, 2, 6, 8))
    res["pd_up_linear"] = gc(lambda v: T.dot_const(T.pd_up(v[0], 3, (6, 8)), Pu),
                             [rng.standard_normal((9, 2, 2, 3))], h=1.0, max_entries=max_entries, seed=seed)
    check("pd", lambda v: T.dot_const(T.relu(T.pd_down(v[0], 3)), Pp), [xpd])

    xl = rng.standard_normal((2, 5, 3, 3))
    Pl = _proj(rng, xl.shape)
    check("layer_norm", lambda v: _scalar(T.layer_norm(v[0], v[1], v[2]), Pl),
          [xl, rng.standard_normal(5), rng.standard_normal(5)])

    xs = rng.standard_normal((2, 3, 4))
    Ps = _proj(rng, xs.shape)
    check("softmax", lambda v: T.dot_const(T.softmax(v[0], -1), Ps), [xs])
    res["negative_control"] = gc(lambda v: T.dot_const(_softmax_bad_backward(v[0], -1), Ps), [xs],
                                 max_entries=max_entries, seed=seed)

    xm = rng.standard_normal((2, 3, 4))
    ym = rng.standard_normal((2, 4, 5))
    Pm = _proj(rng, (2, 3, 5))
    check("matmul", lambda v: T.dot_const(T.matmul(v[0], v[1]), Pm), [xm, ym])

    xe = rng.standard_normal((2, 3, 4, 4))
    Pe = _proj(rng, xe.shape)
    check("gelu", lambda v: _scalar(T.gelu(v[0]), Pe), [xe])
    check("relu_mul_add", lambda v: _scalar(T.add(T.mul(T.relu(v[0]), v[1]), v[0]), Pe), [xe, xe[::-1].copy()])
    check("l1_mean", lambda v: T.l1_mean(v[0], v[1]), [xe, xe + rng.uniform(0.1, 1.0, xe.shape)
                                                         * rng.choice([-1, 1], xe.shape)])

    C = 4
    p = D.DtbParams.init(C, 2, 1, rng, dtype=np.float64)
    X = rng.standard_normal((2, C, 4, 4))
    Px = _proj(rng, X.shape)
    names = list(D.DtbParams.TENSORS)

    def with_params(v, fn):
        q = D.DtbParams.from_tensors(dict(zip(names, v[1:])), C, 2, 1)
        return _scalar(fn(v[0], q), Px)

    point = [X] + [getattr(p, n).data for n in names]
    check("attention", lambda v: with_params(v, lambda a, q: D.channel_attention(a, q)), point)
    check("gated_ffn", lambda v: with_params(v, D.gated_ffn), point)
    check("dtb", lambda v: with_params(v, lambda a, q: D.dtb_forward(a, q)), point)

    cfg = tiny_config()
    model = N.build(cfg, tiny_mask(), seed=seed, dtype=np.float64)
    pnames = list(model.params)
    xn = rng.random((1, 3, 20, 20))
    Pn = _proj(rng, xn.shape)

    def net(v):
        m = N.Model(cfg, dict(zip(pnames, v[1:])), model.local_spec, model.global_spec, model.corr_mask)
        return _scalar(N.forward(m, v[0]), Pn)

    # ReLUs make the full network piecewise smooth; a step that straddles a kink is retried smaller
    check("network", net, [xn] + [model.params[k].data for k in pnames], max_entries=4, refine=2)
    return res


def gradcheck_report(res: dict[str, float]) -> str:
    lines = []
    for k, v in res.items():
        if k == "negative_control":
            ok = v > 1e-2
        elif k.endswith("_linear"):
            ok = v <= 1e-10
        else:
            ok = v < GRADCHECK_TOL
        lines.append(f"{k}\t{v:.3e}\t{'PASS' if ok else 'FAIL'}")
    return "\n".join(lines) + "\n"
