"""Two-branch blind-patch network.

local branch   9x9 masked conv -> PD -> dilated 3x3 convs
global branch  21x21 masked conv (dilated lattice) -> PD -> DTB stack
fusion         concat -> 1x1 -> 1x1 -> 1x1 -> inverse PD
"""
from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, fields
from typing import Literal

import numpy as np

from . import tensor as T
from .bsn_ops import DownstreamLattice, DspmcKernelSpec, apply_kernel_shift, make_dspmc_spec
from .dtb import DtbParams, dtb_forward
from .noise import CorrMask
from .tensor import Tensor, grid_taps, pd_down, pd_up

Mode = Literal["train", "test"]


@dataclass
class NetworkConfig:
    in_channels: int = 3
    out_channels: int = 3
    width: int = 32
    branches: str = "both"  # both | local | global
    local_footprint: int = 9
    local_dilation: int = 1
    local_layers: int = 3
    local_body_dilation: int = 2
    activation: str = "relu"  # relu | gelu
    global_footprint: int = 21
    global_dilation: int = 2
    dtb_count: int = 4
    dtb_dilation: int = 2
    expansion: int = 2
    pd_train: int = 5
    pd_test: int = 2
    shift_ratio: float = -0.6

    def validate(self) -> None:
        if self.branches not in ("both", "local", "global"):
            raise ValueError(f"branches must be both, local or global, not {self.branches!r}")
        if self.activation not in ("relu", "gelu"):
            raise ValueError(f"unknown activation {self.activation!r}")
        for name in ("local_footprint", "global_footprint"):
            if getattr(self, name) % 2 == 0:
                raise ValueError(f"{name} must be odd")
        for name in ("in_channels", "out_channels", "width", "local_dilation", "local_body_dilation",
                     "global_dilation", "dtb_dilation", "expansion", "pd_train", "pd_test"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.local_layers < 0 or self.dtb_count < 0:
            raise ValueError("layer counts must be non-negative")
        if not -1.0 < self.shift_ratio <= 0.0:
            raise ValueError("shift_ratio must lie in (-1, 0]")

    @property
    def uses_local(self) -> bool:
        return self.branches in ("both", "local")

    @property
    def uses_global(self) -> bool:
        return self.branches in ("both", "global")

    def local_downstream(self) -> DownstreamLattice:
        return DownstreamLattice(self.pd_train, ((self.local_body_dilation, self.local_layers),))

    def global_downstream(self) -> DownstreamLattice:
        # each DTB mixes positions twice: the V projection and the FFN depthwise conv
        return DownstreamLattice(self.pd_train, ((self.dtb_dilation, 2 * self.dtb_count),))

    def required_mask_radius(self) -> int:
        r = 0
        if self.uses_local:
            r = max(r, self.local_footprint // 2)
        if self.uses_global:
            r = max(r, self.global_footprint // 2)
        return r

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown network keys: {sorted(unknown)}")
        return cls(**d)


class Model:
    """Named parameters, the two kernel specs and the current mode."""

    def __init__(self, config: NetworkConfig, params: dict[str, Tensor],
                 local_spec: DspmcKernelSpec | None, global_spec: DspmcKernelSpec | None,
                 corr_mask: CorrMask, mode: Mode = "train"):
        self.config = config
        self.params = params
        self.local_spec = local_spec
        self.global_spec = global_spec
        self.corr_mask = corr_mask
        self.mode: Mode = mode
        self.dtbs = [DtbParams.from_tensors(
            {n: params[f"global.dtb.{i}.{n}"] for n in DtbParams.TENSORS},
            config.width, config.expansion, config.dtb_dilation) for i in range(config.dtb_count)
        ] if config.uses_global else []

    @property
    def pd_stride(self) -> int:
        return self.config.pd_train if self.mode == "train" else self.config.pd_test

    def active_spec(self, spec: DspmcKernelSpec) -> DspmcKernelSpec:
        if self.mode == "test":
            return apply_kernel_shift(spec, self.config.shift_ratio)
        return spec

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, p in self.params.items():
            h.update(name.encode())
            h.update(np.ascontiguousarray(p.data).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "Model":
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True) for k, v in self.params.items()}
        return Model(self.config, params, self.local_spec, self.global_spec, self.corr_mask, self.mode)

    def copy(self) -> "Model":
        return self.astype(next(iter(self.params.values())).dtype)


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    a = 1.0 / math.sqrt(max(fan_in, 1))
    return rng.uniform(-a, a, size=shape)


def build(config: NetworkConfig, corr_mask: CorrMask, seed: int = 0, dtype=np.float32) -> Model:
    """Construct specs (with lattice safety) and seeded parameters."""
    config.validate()
    need = config.required_mask_radius()
    if corr_mask.radius < need:
        raise ValueError(f"correlation mask radius {corr_mask.radius} < required {need}")
    rng = np.random.default_rng(seed)
    C, Cin = config.width, config.in_channels
    raw: dict[str, np.ndarray] = {}
    local_spec = global_spec = None

    if config.uses_local:
        local_spec = make_dspmc_spec(config.local_footprint, config.local_dilation, corr_mask,
                                     config.local_downstream())
        _dspmc_params(raw, "local.dspmc", local_spec, Cin, C, rng)
        for i in range(config.local_layers):
            fan = C * 9
            raw[f"local.body.{i}.w"] = _uniform(rng, (C, C, 9), fan)
            raw[f"local.body.{i}.b"] = _uniform(rng, (C,), fan)

    if config.uses_global:
        global_spec = make_dspmc_spec(config.global_footprint, config.global_dilation, corr_mask,
                                      config.global_downstream())
        _dspmc_params(raw, "global.dspmc", global_spec, Cin, C, rng)
        for i in range(config.dtb_count):
            p = DtbParams.init(C, config.expansion, config.dtb_dilation, rng, dtype=np.float64)
            for name, t in p.named_tensors(f"global.dtb.{i}.").items():
                raw[name] = t.data

    fin = C * (2 if config.branches == "both" else 1)
    hid = 2 * C
    raw["fuse.0.w"] = _uniform(rng, (hid, fin), fin)
    raw["fuse.0.b"] = _uniform(rng, (hid,), fin)
    raw["fuse.1.w"] = _uniform(rng, (hid, hid), hid)
    raw["fuse.1.b"] = _uniform(rng, (hid,), hid)
    raw["fuse.out.w"] = _uniform(rng, (config.out_channels, hid), hid)
    raw["fuse.out.b"] = _uniform(rng, (config.out_channels,), hid)

    params = {k: Tensor(v.astype(dtype), requires_grad=True) for k, v in raw.items()}
    return Model(config, params, local_spec, global_spec, corr_mask)


def _dspmc_params(raw, prefix, spec: DspmcKernelSpec, cin: int, cout: int, rng) -> None:
    mask = spec.mask_vector()
    fan = cin * int(mask.sum())
    w = _uniform(rng, (cout, cin, len(mask)), fan) * mask
    raw[f"{prefix}.w"] = w
    raw[f"{prefix}.b"] = _uniform(rng, (cout,), fan)


def set_mode(model: Model, mode: Mode) -> Model:
    """Switch PD stride and kernel shift; parameters are untouched."""
    if mode not in ("train", "test"):
        raise ValueError(f"mode must be train or test, not {mode!r}")
    model.mode = mode
    return model


def param_count(model: Model) -> int:
    return int(sum(p.data.size for p in model.params.values()))


def _act(x: Tensor, kind: str) -> Tensor:
    return T.relu(x) if kind == "relu" else T.gelu(x)


def dspmc(x: Tensor, model: Model, prefix: str, spec: DspmcKernelSpec) -> Tensor:
    active = model.active_spec(spec)
    p = model.params
    return T.conv2d(x, p[f"{prefix}.w"], active.taps(), bias=p[f"{prefix}.b"], footprint=spec.footprint)


def local_branch(x: Tensor, model: Model, s: int) -> Tensor:
    cfg, p = model.config, model.params
    f = _act(dspmc(x, model, "local.dspmc", model.local_spec), cfg.activation)
    f = pd_down(f, s)
    taps = grid_taps(3, cfg.local_body_dilation)
    for i in range(cfg.local_layers):
        f = _act(T.conv2d(f, p[f"local.body.{i}.w"], taps, bias=p[f"local.body.{i}.b"]), cfg.activation)
    return f


def global_branch(x: Tensor, model: Model, s: int, detach_stats: bool = False) -> Tensor:
    g = dspmc(x, model, "global.dspmc", model.global_spec)
    g = pd_down(g, s)
    for blk in model.dtbs:
        g = dtb_forward(g, blk, detach_stats)
    return g


def forward(model: Model, noisy: Tensor, detach_stats: bool = False) -> Tensor:
    """Direct clean-image prediction, same size as the input."""
    if noisy.data.ndim != 4 or noisy.shape[1] != model.config.in_channels:
        raise ValueError(f"expected (B, {model.config.in_channels}, H, W), got {noisy.shape}")
    cfg, p = model.config, model.params
    H, W = noisy.shape[2:]
    s = model.pd_stride
    feats = []
    if cfg.uses_local:
        feats.append(local_branch(noisy, model, s))
    if cfg.uses_global:
        feats.append(global_branch(noisy, model, s, detach_stats))
    h = feats[0] if len(feats) == 1 else T.concat_channels(feats)
    h = T.relu(T.pointwise_conv(h, p["fuse.0.w"], p["fuse.0.b"]))
    h = T.relu(T.pointwise_conv(h, p["fuse.1.w"], p["fuse.1.b"]))
    h = T.pointwise_conv(h, p["fuse.out.w"], p["fuse.out.b"])
    return pd_up(h, s, (H, W))


def denoise(model: Model, noisy: np.ndarray, batch: int = 4) -> np.ndarray:
    """Tape-free forward over a stack of images in the model's current mode."""
    outs = []
    dt = next(iter(model.params.values())).dtype
    frozen = Model(model.config, {k: Tensor(v.data) for k, v in model.params.items()},
                   model.local_spec, model.global_spec, model.corr_mask, model.mode)
    for i in range(0, noisy.shape[0], batch):
        outs.append(forward(frozen, Tensor(noisy[i:i + batch].astype(dt))).data)
    return np.concatenate(outs, axis=0)


def flop_estimate(model: Model, H: int, W: int) -> float:
    """Rough multiply-accumulate count of one forward pass on an H x W image."""
    cfg = model.config
    px = H * W
    C = cfg.width
    macs = 0.0
    if cfg.uses_local:
        macs += px * C * cfg.in_channels * len(model.local_spec.effective_offsets())
        macs += px * cfg.local_layers * C * C * 9
    if cfg.uses_global:
        macs += px * C * cfg.in_channels * len(model.global_spec.effective_offsets())
        E = cfg.expansion * C
        per_px = 3 * C * C + 27 * C + 2 * E * C + 18 * E + E * C
        # K Q^T and A V over all sub-images together touch every position once each
        macs += cfg.dtb_count * px * (per_px + 2 * C * C)
    fin = C * (2 if cfg.branches == "both" else 1)
    macs += px * (fin * 2 * C + 4 * C * C + 2 * C * cfg.out_channels)
    return 2.0 * macs
