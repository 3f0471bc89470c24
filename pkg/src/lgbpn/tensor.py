"""Dense tensors with a reverse-mode tape.

Only the operations the denoiser needs are provided. Every op builds its
output eagerly with numpy and attaches a closure that pushes the upstream
gradient back to its parents; :func:`backward` replays those closures in
reverse topological order.
"""
from __future__ import annotations

import math
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import _kernels

DEFAULT_DTYPE = np.float32
LN_EPS = 1e-6


class NonFiniteError(FloatingPointError):
    """Raised when a NaN or Inf shows up where finite values are required."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def astype(self, dtype) -> "Tensor":
        return Tensor(self.data.astype(dtype), requires_grad=self.requires_grad)

    def __repr__(self) -> str:
        flag = ", requires_grad" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag}, op={self.op!r})"

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return mul(self, other)

    def __neg__(self) -> "Tensor":
        return scale(self, -1.0)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return add(self, scale(other, -1.0))


def from_op(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    """Wrap a forward result and register its backward rule.

    ``backward_fn(grad)`` must return one gradient (or None) per parent.
    Custom ops outside this module use this too.
    """
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs, _parents=tuple(parents) if needs else (), op=op)
    if needs:
        parents = out._parents

        # closing over ``out`` itself would make every graph a reference cycle
        def _backward(g: np.ndarray) -> None:
            grads = backward_fn(g)
            for p, pg in zip(parents, grads):
                if pg is None or not p.requires_grad:
                    continue
                _accumulate(p, pg)
        out._backward = _backward
    return out


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        raise ValueError(f"gradient shape {g.shape} does not match tensor {t.data.shape}")
    # gradients are never updated in place, so a fresh array can be shared
    if g.dtype != t.data.dtype:
        g = g.astype(t.data.dtype)
    t.grad = g if t.grad is None else t.grad + g


def _check_same(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shape mismatch {a.shape} vs {b.shape}")


def _check_finite(arr: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"{what}: non-finite values")


def topo_order(root: Tensor) -> list[Tensor]:
    """Producers-before-consumers ordering of the graph feeding ``root``."""
    order: list[Tensor] = []
    seen: set[int] = set()
    on_path: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            on_path.discard(id(node))
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        on_path.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if not p.requires_grad:
                continue
            if id(p) in on_path:
                raise RuntimeError("cycle in tape")
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor, check_finite: bool = True) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every requires_grad leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if check_finite:
        _check_finite(loss.data, "loss")
    if not loss.requires_grad:
        return
    order = topo_order(loss)
    # interior nodes keep gradients only for the duration of the sweep
    loss_seed = np.ones_like(loss.data)
    for node in order:
        if node._backward is not None:
            node.grad = None
    _accumulate(loss, loss_seed)
    for node in reversed(order):
        if node._backward is None:
            continue
        g = node.grad
        if g is None:
            continue
        node._backward(g)
        node.grad = None
    if check_finite:
        for node in order:
            if node._backward is None and node.grad is not None:
                _check_finite(node.grad, "gradient")


def backward_from(out: Tensor, seed: np.ndarray) -> None:
    """Vector-Jacobian product: push ``seed`` (shaped like ``out``) to the leaves."""
    if seed.shape != out.shape:
        raise ValueError("seed shape mismatch")
    order = topo_order(out)
    for node in order:
        if node._backward is not None:
            node.grad = None
    _accumulate(out, seed.astype(out.dtype))
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        g = node.grad
        node._backward(g)
        node.grad = None


# ---------------------------------------------------------------- elementwise


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "add")
    return from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return from_op(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return from_op(a.data * c, (a,), lambda g: (g * c,), "scale")


def relu(a: Tensor) -> Tensor:
    pos = a.data > 0
    return from_op(np.where(pos, a.data, 0).astype(a.dtype), (a,), lambda g: (g * pos,), "relu")


_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_K = 0.044715


def gelu(a: Tensor) -> Tensor:
    """GELU, tanh approximation."""
    x = a.data
    c = x.dtype.type(_GELU_C)
    k = x.dtype.type(_GELU_K)
    t = x * x
    t *= k
    t += 1
    t *= x
    t *= c
    np.tanh(t, out=t)
    out = t + 1
    out *= x
    out *= 0.5

    def bw(g):
        # d/dx = 0.5 (1 + t) + 0.5 x (1 - t^2) c (1 + 3 k x^2)
        inner = x * x
        inner *= 3 * k
        inner += 1
        inner *= c
        inner *= x
        inner *= 1 - t * t
        inner += 1 + t
        inner *= 0.5
        inner *= g
        return (inner,)
    return from_op(out, (a,), bw, "gelu")


def l1_mean(a: Tensor, b: Tensor) -> Tensor:
    """mean |a - b| as a 0-d tensor; subgradient 0 at ties."""
    _check_same(a, b, "l1_mean")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(np.abs(diff).mean(dtype=np.float64), dtype=a.dtype)

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return from_op(out, (a, b), bw, "l1_mean")


def sum_all(a: Tensor) -> Tensor:
    out = np.asarray(a.data.sum(dtype=np.float64), dtype=a.dtype)
    return from_op(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy(),), "sum")


def dot_const(a: Tensor, w: np.ndarray) -> Tensor:
    """sum(a * w) for a constant array ``w``; handy scalar probe."""
    if w.shape != a.shape:
        raise ValueError("dot_const: shape mismatch")
    out = np.asarray(np.sum(a.data * w, dtype=np.float64), dtype=a.dtype)
    wd = w.astype(a.dtype)
    return from_op(out, (a,), lambda g: (g * wd,), "dot_const")


def detach(a: Tensor) -> Tensor:
    return Tensor(a.data)


# ---------------------------------------------------------------- shapes


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    src = a.shape
    return from_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose_last(a: Tensor) -> Tensor:
    return from_op(np.swapaxes(a.data, -1, -2), (a,), lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def concat_channels(parts: Sequence[Tensor]) -> Tensor:
    sizes = [p.shape[1] for p in parts]
    bounds = np.cumsum([0] + sizes)
    out = np.concatenate([p.data for p in parts], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return from_op(out, tuple(parts), bw, "concat")


def split_channels(a: Tensor, sizes: Sequence[int]) -> list[Tensor]:
    """Slice axis 1 into consecutive chunks."""
    if sum(sizes) != a.shape[1]:
        raise ValueError(f"split sizes {list(sizes)} do not cover {a.shape[1]} channels")
    bounds = np.cumsum([0] + list(sizes))
    outs = []
    for i in range(len(sizes)):
        lo, hi = int(bounds[i]), int(bounds[i + 1])

        def bw(g, lo=lo, hi=hi):
            full = np.zeros_like(a.data)
            full[:, lo:hi] = g
            return (full,)

        outs.append(from_op(a.data[:, lo:hi], (a,), bw, "split"))
    return outs


# ---------------------------------------------------------------- linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Batched matrix product over the last two axes."""
    if a.data.ndim != b.data.ndim or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g):
        return g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g

    return from_op(ad @ bd, (a, b), bw, "matmul")


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    x = a.data
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"softmax: bad axis {axis} for rank {x.ndim}")
    e = np.exp(x - x.max(axis=axis, keepdims=True))
    y = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return from_op(y, (a,), bw, "softmax")


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LN_EPS) -> Tensor:
    """Normalize over the channel axis (axis 1) at each position, then per-channel affine."""
    xd = x.data
    mu = xd.mean(axis=1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + xd.dtype.type(eps))
    xhat = xc * inv
    cshape = (1, -1) + (1,) * (xd.ndim - 2)
    red = (0,) + tuple(range(2, xd.ndim))
    wd = weight.data.reshape(cshape) if weight is not None else None
    out = xhat * wd if wd is not None else xhat
    if bias is not None:
        out = out + bias.data.reshape(cshape)
    parents = [x] + [p for p in (weight, bias) if p is not None]

    def bw(g):
        gw = g * wd if wd is not None else g
        n = xd.shape[1]
        gx = inv / n * (n * gw - gw.sum(axis=1, keepdims=True)
                        - xhat * (gw * xhat).sum(axis=1, keepdims=True))
        grads = [gx]
        if weight is not None:
            grads.append((g * xhat).sum(axis=red).reshape(weight.shape))
        if bias is not None:
            grads.append(g.sum(axis=red).reshape(bias.shape))
        return grads

    return from_op(out.astype(xd.dtype, copy=False), parents, bw, "layer_norm")


# ---------------------------------------------------------------- convolutions


class Tap(NamedTuple):
    """One kernel sample: integer lattice offset, mask bit, fractional shift."""
    dy: int
    dx: int
    mask: bool = True
    sy: float = 0.0
    sx: float = 0.0

    @property
    def position(self) -> tuple[float, float]:
        return (self.dy + self.sy, self.dx + self.sx)


def _bilinear_support(py: float, px: float) -> list[tuple[int, int, float]]:
    y0, x0 = math.floor(py), math.floor(px)
    fy, fx = py - y0, px - x0
    pts = []
    for oy, wy in ((y0, 1.0 - fy), (y0 + 1, fy)):
        for ox, wx in ((x0, 1.0 - fx), (x0 + 1, fx)):
            w = wy * wx
            if w != 0.0:
                pts.append((oy, ox, w))
    return pts


def sampling_matrix(taps: Sequence[Tap]) -> tuple[list[tuple[int, int]], np.ndarray]:
    """Integer offsets touched by the unmasked taps, and the tap->offset bilinear weights."""
    index: dict[tuple[int, int], int] = {}
    entries = []
    for k, t in enumerate(taps):
        if not t.mask:
            continue
        for oy, ox, w in _bilinear_support(*t.position):
            j = index.setdefault((oy, ox), len(index))
            entries.append((k, j, w))
    S = np.zeros((len(taps), len(index)))
    for k, j, w in entries:
        S[k, j] += w
    return list(index), S


def _gather(xp: np.ndarray, offsets, pad: int, H: int, W: int, stride: int) -> np.ndarray:
    """im2col rows ordered (offset, channel), columns (batch, y, x)."""
    B, C = xp.shape[:2]
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    cols = np.empty((len(offsets), C, B, Ho, Wo), dtype=xp.dtype)
    for j, (oy, ox) in enumerate(offsets):
        y0, x0 = pad + oy, pad + ox
        cols[j] = xp[:, :, y0:y0 + H:stride, x0:x0 + W:stride].transpose(1, 0, 2, 3)
    return cols.reshape(len(offsets) * C, B * Ho * Wo)


def conv2d(x: Tensor, weight: Tensor, taps: Sequence[Tap], stride: int = 1,
           bias: Tensor | None = None, footprint: int | None = None) -> Tensor:
    """Sparse-tap convolution y(p) = sum_k m_k w_k x(p + p_k + dp_k) (+ bias).

    ``weight`` has shape (C_out, C_in, n_taps). Fractional tap positions are
    sampled bilinearly; everything outside the image reads as zero. Output
    keeps the input size when ``stride`` is 1.
    """
    if x.data.ndim != 4:
        raise ValueError("conv2d expects (B, C, H, W) input")
    B, C, H, W = x.shape
    Co, Ci, K = weight.shape
    if Ci != C:
        raise ValueError(f"conv2d: weight expects {Ci} input channels, got {C}")
    if K != len(taps):
        raise ValueError(f"conv2d: {K} weight taps but {len(taps)} tap descriptors")
    if stride < 1:
        raise ValueError("stride must be >= 1")
    _check_finite(x.data, "conv2d input")
    offsets, S = sampling_matrix(taps)
    if footprint is not None:
        r = footprint // 2
        for t in taps:
            if abs(t.dy) > r or abs(t.dx) > r:
                raise ValueError(f"tap {t} lies outside footprint {footprint}")
        for oy, ox in offsets:
            if abs(oy) > r or abs(ox) > r:
                raise ValueError(f"sampled offset {(oy, ox)} lies outside footprint {footprint}")
    dt = x.dtype
    Ho, Wo = (H - 1) // stride + 1, (W - 1) // stride + 1
    mask = np.array([t.mask for t in taps], dtype=dt)
    if not offsets:
        out = np.zeros((B, Co, Ho, Wo), dtype=dt)
        if bias is not None:
            out += bias.data.reshape(1, -1, 1, 1)

        def bw_empty(g):
            grads = [np.zeros_like(x.data), np.zeros_like(weight.data)]
            if bias is not None:
                grads.append(g.sum(axis=(0, 2, 3)))
            return grads

        parents = (x, weight) + ((bias,) if bias is not None else ())
        return from_op(out, parents, bw_empty, "conv2d")

    S = S.astype(dt)
    n_off = len(offsets)
    pad = max(max(abs(oy), abs(ox)) for oy, ox in offsets)
    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _gather(xp, offsets, pad, H, W, stride)
    # (C_out, n_off, C_in) so rows line up with the im2col ordering
    w_eff = np.einsum("oik,kj->oji", weight.data * mask, S).reshape(Co, n_off * C)
    out = (w_eff @ cols).reshape(Co, B, Ho, Wo).transpose(1, 0, 2, 3)
    out = np.ascontiguousarray(out)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(Co, B * Ho * Wo)
        gw_eff = (g2 @ cols.T).reshape(Co, n_off, C)
        gw = np.einsum("oji,kj->oik", gw_eff, S) * mask
        gcols = (w_eff.T @ g2).reshape(n_off, C, B, Ho, Wo)
        gxp = np.zeros_like(xp)
        for j, (oy, ox) in enumerate(offsets):
            y0, x0 = pad + oy, pad + ox
            gxp[:, :, y0:y0 + H:stride, x0:x0 + W:stride] += gcols[j].transpose(1, 0, 2, 3)
        gx = gxp[:, :, pad:pad + H, pad:pad + W] if pad else gxp
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return from_op(out, parents, bw, "conv2d")


def grid_taps(k: int, dilation: int = 1) -> list[Tap]:
    """All taps of a dense k x k kernel with the given dilation, row-major."""
    r = k // 2
    return [Tap(dilation * i, dilation * j) for i in range(-r, r + 1) for j in range(-r, r + 1)]


def pointwise_conv(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """1x1 convolution; ``weight`` is (C_out, C_in)."""
    B, C, H, W = x.shape
    Co, Ci = weight.shape
    if Ci != C:
        raise ValueError(f"pointwise_conv: weight expects {Ci} channels, got {C}")
    xf = x.data.reshape(B, C, H * W)
    wd = weight.data
    out = np.matmul(wd, xf).reshape(B, Co, H, W)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        g2 = g.reshape(B, Co, H * W)
        gx = np.matmul(wd.T, g2).reshape(B, C, H, W)
        gw = np.matmul(g2, xf.transpose(0, 2, 1)).sum(axis=0)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return from_op(out, parents, bw, "pointwise_conv")


def depthwise_conv2d(x: Tensor, weight: Tensor, k: int, dilation: int = 1,
                     bias: Tensor | None = None) -> Tensor:
    """Per-channel k x k convolution with zero 'same' padding; weight is (C, 1, k, k)."""
    if k % 2 == 0:
        raise ValueError("depthwise kernel size must be odd")
    if dilation < 1:
        raise ValueError("dilation must be >= 1")
    B, C, H, W = x.shape
    if weight.shape != (C, 1, k, k):
        raise ValueError(f"depthwise weight must be {(C, 1, k, k)}, got {weight.shape}")
    xd = x.data
    wd = weight.data
    out = _kernels.depthwise_forward(xd, wd, dilation)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def bw(g):
        g = np.ascontiguousarray(g)
        # adjoint of a zero-padded 'same' correlation is the flipped-kernel correlation
        gx = _kernels.depthwise_forward(g, np.ascontiguousarray(wd[:, :, ::-1, ::-1]), dilation)
        gw = _kernels.depthwise_weight_grad(xd, g, k, dilation).astype(wd.dtype)
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (x, weight) + ((bias,) if bias is not None else ())
    return from_op(out, parents, bw, "depthwise_conv2d")


# ---------------------------------------------------------------- pixel-shuffle downsampling


def _reflect_pad_hw(arr: np.ndarray, ph: int, pw: int) -> np.ndarray:
    if ph == 0 and pw == 0:
        return arr
    return np.pad(arr, ((0, 0), (0, 0), (0, ph), (0, pw)), mode="reflect")


def _reflect_fold_hw(g: np.ndarray, H: int, W: int) -> np.ndarray:
    """Adjoint of bottom/right reflect padding."""
    out = g[:, :, :H, :].copy()
    for i in range(g.shape[2] - H):
        out[:, :, H - 2 - i, :] += g[:, :, H + i, :]
    res = out[:, :, :, :W].copy()
    for i in range(out.shape[3] - W):
        res[:, :, :, W - 2 - i] += out[:, :, :, W + i]
    return res


def pd_down(x: Tensor, s: int) -> Tensor:
    """(B, C, H, W) -> (B*s*s, C, H/s, W/s); sub-image b*s*s + py*s + px holds phase (py, px).

    Sizes not divisible by ``s`` are reflect-padded at the bottom/right first.
    """
    if s < 1:
        raise ValueError("pd stride must be >= 1")
    if s == 1:
        return x
    B, C, H, W = x.shape
    ph, pw = (-H) % s, (-W) % s
    if ph >= H or pw >= W:
        raise ValueError(f"image {H}x{W} too small for pd stride {s}")
    xp = _reflect_pad_hw(x.data, ph, pw)
    Hp, Wp = H + ph, W + pw
    h, w = Hp // s, Wp // s
    out = xp.reshape(B, C, h, s, w, s).transpose(0, 3, 5, 1, 2, 4).reshape(B * s * s, C, h, w)

    def bw(g):
        gp = g.reshape(B, s, s, C, h, w).transpose(0, 3, 4, 1, 5, 2).reshape(B, C, Hp, Wp)
        return (_reflect_fold_hw(gp, H, W) if (ph or pw) else gp,)

    return from_op(np.ascontiguousarray(out), (x,), bw, "pd_down")


def pd_up(x: Tensor, s: int, size: tuple[int, int] | None = None) -> Tensor:
    """Inverse of :func:`pd_down`, cropping to ``size`` when padding was added."""
    if s < 1:
        raise ValueError("pd stride must be >= 1")
    Bs, C, h, w = x.shape
    if Bs % (s * s):
        raise ValueError(f"batch {Bs} not divisible by {s * s}")
    if s == 1:
        return x
    B = Bs // (s * s)
    Hp, Wp = h * s, w * s
    H, W = size if size is not None else (Hp, Wp)
    if H > Hp or W > Wp:
        raise ValueError("crop size larger than reassembled image")
    full = x.data.reshape(B, s, s, C, h, w).transpose(0, 3, 4, 1, 5, 2).reshape(B, C, Hp, Wp)
    out = np.ascontiguousarray(full[:, :, :H, :W])

    def bw(g):
        gp = np.zeros((B, C, Hp, Wp), dtype=g.dtype)
        gp[:, :, :H, :W] = g
        return (gp.reshape(B, C, h, s, w, s).transpose(0, 3, 5, 1, 2, 4).reshape(Bs, C, h, w),)

    return from_op(out, (x,), bw, "pd_up")


# ---------------------------------------------------------------- gradient checking


def grad_check(fn: Callable[[list[Tensor]], Tensor], point: Sequence[np.ndarray], h: float = 1e-5,
               eps: float = 1e-4, max_entries: int | None = None, seed: int = 0, refine: int = 0) -> float:
    """Max relative error between backward() and central differences.

    ``fn`` maps a list of leaf tensors to a scalar tensor. Inputs are
    promoted to float64. With ``max_entries`` only that many randomly chosen
    coordinates per input are differenced. See grad_check_detail for ``refine``.
    """
    return grad_check_detail(fn, point, h, eps, max_entries, seed, refine)[0]


def grad_check_detail(fn: Callable[[list[Tensor]], Tensor], point: Sequence[np.ndarray], h: float = 1e-5,
                      eps: float = 1e-4, max_entries: int | None = None, seed: int = 0,
                      refine: int = 0) -> tuple[float, int, int]:
    """(worst relative error, entries compared, entries that needed a smaller step).

    With ``refine`` > 0 an entry whose error exceeds 1e-6 is differenced
    again with steps h/10, h/100, ... and keeps the smallest error. This is
    for piecewise-smooth graphs (ReLU), where a step can straddle a kink; a
    wrong backward rule stays wrong at every step size.
    """
    xs = [np.array(p, dtype=np.float64) for p in point]
    leaves = [Tensor(x.copy(), requires_grad=True) for x in xs]
    loss = fn(leaves)
    backward(loss)
    rng = np.random.default_rng(seed)
    worst = 0.0
    compared = refined = 0

    def central(i, idx, step):
        args_p = [Tensor(v) for v in xs]
        args_m = [Tensor(v) for v in xs]
        xp = xs[i].copy(); xp[idx] += step
        xm = xs[i].copy(); xm[idx] -= step
        args_p[i] = Tensor(xp)
        args_m[i] = Tensor(xm)
        return (float(fn(args_p).data) - float(fn(args_m).data)) / (2 * step)

    for i, x in enumerate(xs):
        analytic = leaves[i].grad if leaves[i].grad is not None else np.zeros_like(x)
        flat_idx = np.arange(x.size)
        if max_entries is not None and x.size > max_entries:
            flat_idx = rng.choice(x.size, size=max_entries, replace=False)
        for fi in flat_idx:
            idx = np.unravel_index(fi, x.shape)
            an = float(analytic[idx])
            step = h
            fd = central(i, idx, step)
            err = abs(an - fd) / max(abs(an), abs(fd), eps)
            for _ in range(refine):
                if err <= 1e-6:
                    break
                refined += 1
                step /= 10
                fd = central(i, idx, step)
                err = min(err, abs(an - fd) / max(abs(an), abs(fd), eps))
            worst = max(worst, err)
            compared += 1
    return worst, compared, refined
