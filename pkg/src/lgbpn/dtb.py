"""Dilated Transformer block: channel attention plus a gated feed-forward layer.

Spatial mixing happens only inside dilated 3x3 depthwise convolutions, so a
block moves information along the ``dilation`` lattice and nowhere else.
The attention map is C x C and aggregates over all positions.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class DtbParams:
    channels: int
    expansion: int
    dilation: int
    ln1_w: Tensor
    ln1_b: Tensor
    qkv_w: Tensor       # (3C, C) 1x1
    qkv_b: Tensor
    qkv_dw: Tensor      # (3C, 1, 3, 3) dilated depthwise
    qkv_dw_b: Tensor
    ln2_w: Tensor
    ln2_b: Tensor
    ffn_w: Tensor       # (2eC, C) 1x1, first half feeds the GELU gate
    ffn_b: Tensor
    ffn_dw: Tensor      # (2eC, 1, 3, 3)
    ffn_dw_b: Tensor
    out_w: Tensor       # (C, eC) 1x1 projection back
    out_b: Tensor

    TENSORS = ("ln1_w", "ln1_b", "qkv_w", "qkv_b", "qkv_dw", "qkv_dw_b", "ln2_w", "ln2_b",
               "ffn_w", "ffn_b", "ffn_dw", "ffn_dw_b", "out_w", "out_b")

    def named_tensors(self, prefix: str = "") -> dict[str, Tensor]:
        return {prefix + n: getattr(self, n) for n in self.TENSORS}

    @classmethod
    def shapes(cls, channels: int, expansion: int) -> dict[str, tuple[int, ...]]:
        C, E = channels, expansion * channels
        return {
            "ln1_w": (C,), "ln1_b": (C,),
            "qkv_w": (3 * C, C), "qkv_b": (3 * C,),
            "qkv_dw": (3 * C, 1, 3, 3), "qkv_dw_b": (3 * C,),
            "ln2_w": (C,), "ln2_b": (C,),
            "ffn_w": (2 * E, C), "ffn_b": (2 * E,),
            "ffn_dw": (2 * E, 1, 3, 3), "ffn_dw_b": (2 * E,),
            "out_w": (C, E), "out_b": (C,),
        }

    @classmethod
    def init(cls, channels: int, expansion: int, dilation: int, rng: np.random.Generator,
             dtype=np.float32) -> "DtbParams":
        """Uniform(-a, a), a = 1/sqrt(fan_in); LayerNorm starts at identity."""
        shapes = cls.shapes(channels, expansion)
        fan_in = {"qkv_w": channels, "qkv_b": channels, "qkv_dw": 9, "qkv_dw_b": 9,
                  "ffn_w": channels, "ffn_b": channels, "ffn_dw": 9, "ffn_dw_b": 9,
                  "out_w": expansion * channels, "out_b": expansion * channels}
        vals = {}
        for name in cls.TENSORS:
            shape = shapes[name]
            if name in ("ln1_w", "ln2_w"):
                arr = np.ones(shape)
            elif name in ("ln1_b", "ln2_b"):
                arr = np.zeros(shape)
            else:
                a = 1.0 / math.sqrt(fan_in[name])
                arr = rng.uniform(-a, a, size=shape)
            vals[name] = Tensor(arr.astype(dtype), requires_grad=True)
        return cls(channels, expansion, dilation, **vals)

    @classmethod
    def from_tensors(cls, tensors: dict[str, Tensor], channels: int, expansion: int,
                     dilation: int) -> "DtbParams":
        return cls(channels, expansion, dilation, **{n: tensors[n] for n in cls.TENSORS})


def attention_core(q: Tensor, k: Tensor, v: Tensor, residual: Tensor, detach_stats: bool = False,
                   attention_override: np.ndarray | None = None) -> Tensor:
    """reshape(A V) + residual with A = softmax(K Q^T / sqrt(h w)) over the last axis.

    ``detach_stats`` treats A as a constant for the backward pass.
    ``attention_override`` (C x C) replaces A outright; a diagnostic hook.
    """
    B, C, h, w = q.shape
    n = h * w
    qf = T.reshape(q, (B, C, n))
    kf = T.reshape(k, (B, C, n))
    vf = T.reshape(v, (B, C, n))
    if attention_override is not None:
        A = Tensor(np.broadcast_to(attention_override, (B, C, C)).astype(q.dtype))
    else:
        logits = T.scale(T.matmul(kf, T.transpose_last(qf)), 1.0 / math.sqrt(n))
        A = T.softmax(logits, axis=-1)
        if detach_stats:
            A = T.detach(A)
    out = T.reshape(T.matmul(A, vf), (B, C, h, w))
    return T.add(out, residual)


def attention_map(X: Tensor, p: DtbParams) -> np.ndarray:
    """The C x C softmax map the attention sub-layer would use (no tape)."""
    q, k, _ = _qkv(Tensor(X.data), p)
    B, C, h, w = q.shape
    qf, kf = q.data.reshape(B, C, -1), k.data.reshape(B, C, -1)
    logits = kf @ np.swapaxes(qf, -1, -2) / math.sqrt(h * w)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _qkv(X: Tensor, p: DtbParams) -> list[Tensor]:
    xn = T.layer_norm(X, p.ln1_w, p.ln1_b)
    proj = T.pointwise_conv(xn, p.qkv_w, p.qkv_b)
    proj = T.depthwise_conv2d(proj, p.qkv_dw, 3, p.dilation, p.qkv_dw_b)
    C = p.channels
    return T.split_channels(proj, [C, C, C])


def channel_attention(X: Tensor, p: DtbParams, detach_stats: bool = False,
                      attention_override: np.ndarray | None = None) -> Tensor:
    _check(X, p)
    q, k, v = _qkv(X, p)
    return attention_core(q, k, v, X, detach_stats, attention_override)


def gated_ffn(X: Tensor, p: DtbParams) -> Tensor:
    """GELU(G1) * G2 projected back to C channels, plus the input."""
    _check(X, p)
    xn = T.layer_norm(X, p.ln2_w, p.ln2_b)
    h = T.pointwise_conv(xn, p.ffn_w, p.ffn_b)
    h = T.depthwise_conv2d(h, p.ffn_dw, 3, p.dilation, p.ffn_dw_b)
    E = p.expansion * p.channels
    g1, g2 = T.split_channels(h, [E, E])
    gated = T.mul(T.gelu(g1), g2)
    return T.add(T.pointwise_conv(gated, p.out_w, p.out_b), X)


def dtb_forward(X: Tensor, p: DtbParams, detach_stats: bool = False) -> Tensor:
    return gated_ffn(channel_attention(X, p, detach_stats), p)


def _check(X: Tensor, p: DtbParams) -> None:
    if X.data.ndim != 4 or X.shape[1] != p.channels:
        raise ValueError(f"DTB expects (B, {p.channels}, h, w), got {X.shape}")
