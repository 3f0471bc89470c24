"""Self-supervised training, image metrics and checkpoints."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy.ndimage import correlate1d

from . import lgbp
from . import network as N
from . import tensor as T
from .bsn_ops import DspmcKernelSpec
from .noise import CorrMask
from .tensor import NonFiniteError, Tensor

PSNR_CAP = 100.0


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-4
    epochs: int = 20
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patch_size: int = 64
    seed: int = 0
    supervised: bool = False
    lr_halving: bool = False   # halve once at half of the epochs
    grad_clip: float = 0.0     # global-norm clip; 0 disables
    log_every: int = 25
    ckpt_every: int = 0        # steps; 0 means only at the end

    def validate(self) -> None:
        if self.batch_size < 1 or self.epochs < 0 or self.patch_size < 1:
            raise ValueError("batch_size, patch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0 or self.eps <= 0 or not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("invalid optimizer hyperparameters")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise KeyError(f"unknown train keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class TrainState:
    model: N.Model
    config: TrainConfig
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    history: list[dict] = field(default_factory=list)
    settings: list[str] = field(default_factory=list)  # extra key=value lines (mask.*, data.*)

    @property
    def seed(self) -> int:
        return self.config.seed

    def lr_at(self, step: int, steps_per_epoch: int) -> float:
        if self.config.lr_halving and step >= (self.config.epochs * steps_per_epoch) // 2:
            return self.config.lr / 2
        return self.config.lr


def new_state(model: N.Model, config: TrainConfig) -> TrainState:
    config.validate()
    m = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    v = {k: np.zeros_like(p.data) for k, p in model.params.items()}
    return TrainState(model, config, m, v)


def adam_update(state: TrainState, lr: float) -> None:
    """One Adam step on every parameter with a gradient; ``state.step`` must already count it."""
    c = state.config
    t = state.step
    bc1 = 1.0 - c.beta1 ** t
    bc2 = 1.0 - c.beta2 ** t
    for name, p in state.model.params.items():
        g = p.grad
        if g is None:
            continue
        dt = p.data.dtype.type
        m, v = state.m[name], state.v[name]
        m *= dt(c.beta1)
        m += dt(1 - c.beta1) * g
        v *= dt(c.beta2)
        v += dt(1 - c.beta2) * (g * g)
        denom = np.sqrt(v / dt(bc2))
        denom += dt(c.eps)
        p.data -= dt(lr / bc1) * m / denom


def _clip(params, max_norm: float) -> float:
    grads = [p.grad for p in params if p.grad is not None]
    norm = math.sqrt(sum(float(np.vdot(g, g)) for g in grads))
    if max_norm > 0 and norm > max_norm:
        s = max_norm / norm
        for p in params:
            if p.grad is not None:
                p.grad = p.grad * p.grad.dtype.type(s)
    return norm


def train_step(state: TrainState, batch: np.ndarray, target: np.ndarray | None = None,
               lr: float | None = None) -> float:
    """Forward in train mode, L1 against the noisy batch (or ``target``), backward, Adam.

    Raises NonFiniteError (parameters untouched) if the loss or a gradient is not finite.
    """
    model = state.model
    if model.mode != "train":
        raise ValueError("train_step needs a model in train mode")
    dt = next(iter(model.params.values())).dtype
    x = Tensor(np.asarray(batch, dtype=dt))
    y = Tensor(np.asarray(batch if target is None else target, dtype=dt))
    model.zero_grad()
    out = N.forward(model, x)
    loss = T.l1_mean(out, y)
    try:
        T.backward(loss)
    except NonFiniteError as e:
        model.zero_grad()
        raise NonFiniteError(f"step {state.step}: {e} (loss={float(loss.data)!r})") from e
    if state.config.grad_clip > 0:
        _clip(model.parameters(), state.config.grad_clip)
    state.step += 1
    adam_update(state, state.config.lr if lr is None else lr)
    model.zero_grad()
    return float(loss.data)


# ---------------------------------------------------------------- metrics


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(max^2 / MSE) over all elements, capped at 100 dB."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(max_val * max_val / mse))


def _gray(a: np.ndarray) -> np.ndarray:
    # (..., C, H, W) with C in {1, 3} or a bare (H, W) plane
    if a.ndim == 2:
        return a
    return a.mean(axis=-3)


def _gauss_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x * x) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    r = len(g) // 2
    out = correlate1d(img, g, axis=-1, mode="constant")
    out = correlate1d(out, g, axis=-2, mode="constant")
    return out[..., r:-r, r:-r]


def ssim(a, b, k1: float = 0.01, k2: float = 0.03, L: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5) on the channel-mean image, valid region only.

    For a batch (B, C, H, W) the per-image scores are averaged.
    """
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    ga, gb = _gray(a), _gray(b)
    if ga.shape[-1] < 11 or ga.shape[-2] < 11:
        raise ValueError("images smaller than the 11x11 SSIM window")
    g = _gauss_window()
    c1, c2 = (k1 * L) ** 2, (k2 * L) ** 2
    mu_a, mu_b = _filter_valid(ga, g), _filter_valid(gb, g)
    saa = _filter_valid(ga * ga, g) - mu_a * mu_a
    sbb = _filter_valid(gb * gb, g) - mu_b * mu_b
    sab = _filter_valid(ga * gb, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    if smap.ndim > 2:
        return float(smap.reshape(-1, *smap.shape[-2:]).mean(axis=(1, 2)).mean())
    return float(smap.mean())


def evaluate(model: N.Model, noisy: np.ndarray, clean: np.ndarray, mode: N.Mode = "test",
             batch: int = 4) -> tuple[float, float]:
    """Mean per-image PSNR and SSIM of the model's output in ``mode``; the model's mode is restored."""
    prev = model.mode
    N.set_mode(model, mode)
    try:
        out = np.clip(N.denoise(model, noisy, batch), 0.0, 1.0)
    finally:
        N.set_mode(model, prev)
    ps = [psnr(o, c) for o, c in zip(out, clean)]
    ss = [ssim(o, c) for o, c in zip(out, clean)]
    return float(np.mean(ps)), float(np.mean(ss))


# ---------------------------------------------------------------- loop


def _crop(img: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
    H, W = img.shape[-2:]
    if H < size or W < size:
        raise ValueError(f"image {H}x{W} smaller than patch size {size}")
    y = int(rng.integers(0, H - size + 1))
    x = int(rng.integers(0, W - size + 1))
    return img[..., y:y + size, x:x + size]


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Shuffled index batches for one epoch; a short final batch is kept."""
    order = np.random.default_rng([seed, epoch]).permutation(n)
    return [order[i:i + batch_size] for i in range(0, n, batch_size)]


def make_batch(images: np.ndarray, idx: np.ndarray, size: int, seed: int, step: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 1 << 20, step])
    return np.stack([_crop(images[i], size, rng) for i in idx])


def train_loop(state: TrainState, noisy: np.ndarray, clean: np.ndarray | None = None,
               val: tuple[np.ndarray, np.ndarray] | None = None, out_dir: str | Path | None = None,
               max_steps: int | None = None, log=print) -> TrainState:
    """Run (or resume) the epoch loop up to ``config.epochs``.

    ``clean`` is only used as the target with ``supervised``; ``val`` is a
    held-out (noisy, clean) pair scored in test mode at each log interval.
    Batch order and crops are pure functions of (seed, epoch, step), which is
    what makes resuming bit-exact.
    """
    cfg = state.config
    n = len(noisy)
    if n == 0:
        raise ValueError("empty dataset")
    if cfg.supervised and clean is None:
        raise ValueError("supervised training needs clean targets")
    per_epoch = math.ceil(n / cfg.batch_size)
    total = per_epoch * cfg.epochs
    if max_steps is not None:
        total = min(total, max_steps)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = out / "metrics.tsv"
        if not logf.exists():
            logf.write_text("step\tloss\tpsnr\tssim\tseconds\n")
    N.set_mode(state.model, "train")
    t0 = time.perf_counter()
    recent: list[float] = []
    while state.step < total:
        epoch, k = divmod(state.step, per_epoch)
        idx = epoch_batches(n, cfg.batch_size, cfg.seed, epoch)[k]
        batch = make_batch(noisy, idx, cfg.patch_size, cfg.seed, state.step)
        target = make_batch(clean, idx, cfg.patch_size, cfg.seed, state.step) if cfg.supervised else None
        loss = train_step(state, batch, target, lr=state.lr_at(state.step, per_epoch))
        recent.append(loss)
        last = state.step == total
        if state.step % cfg.log_every == 0 or last:
            p = s = float("nan")
            if val is not None:
                p, s = evaluate(state.model, val[0], val[1])
            rec = {"step": state.step, "loss": float(np.mean(recent)), "psnr": p, "ssim": s,
                   "seconds": time.perf_counter() - t0}
            recent = []
            state.history.append(rec)
            line = f"{rec['step']}\t{rec['loss']:.6f}\t{p:.4f}\t{s:.4f}\t{rec['seconds']:.1f}"
            if out is not None:
                with open(out / "metrics.tsv", "a") as f:
                    f.write(line + "\n")
            if log is not None:
                log(line)
        if out is not None and (last or (cfg.ckpt_every and state.step % cfg.ckpt_every == 0)):
            save_checkpoint(out / ("final.lgbp" if last else f"step{state.step:06d}.lgbp"), state)
    return state


# ---------------------------------------------------------------- checkpoints


def full_config(state: TrainState):
    """The effective key=value configuration of a run (network, training, mask, data)."""
    from . import config as C
    cfg = C.Config(net=state.model.config, train=state.config)
    return C.parse_lines(state.settings, cfg)


def checkpoint_text(state: TrainState) -> str:
    model = state.model
    lines = ["[config]", full_config(state).to_text().rstrip("\n"),
             "[state]", f"step={state.step}", f"mode={model.mode}",
             f"mask.threshold={model.corr_mask.threshold!r}"]
    for name, spec in (("local_spec", model.local_spec), ("global_spec", model.global_spec)):
        if spec is not None:
            lines += [f"[{name}]", spec.to_text().rstrip("\n")]
    lines.append("[history]")
    lines += [f"{r['step']}\t{r['loss']!r}\t{r['psnr']!r}\t{r['ssim']!r}\t{r['seconds']!r}" for r in state.history]
    return "\n".join(lines) + "\n"


def _sections(text: str) -> dict[str, list[str]]:
    out: dict[str, list[str]] = {}
    cur = None
    for line in text.splitlines():
        if line.startswith("[") and line.endswith("]"):
            cur = line[1:-1]
            out[cur] = []
        elif cur is not None and line.strip():
            out[cur].append(line)
    return out


def save_checkpoint(path: str | Path, state: TrainState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for k, p in state.model.params.items():
        tensors[k] = p.data
    for k in state.model.params:
        tensors[f"adam.m/{k}"] = state.m[k]
        tensors[f"adam.v/{k}"] = state.v[k]
    tensors["mask.bits"] = state.model.corr_mask.bits.astype(np.float32)
    lgbp.save_container(path, tensors, checkpoint_text(state))


def load_checkpoint(path: str | Path) -> TrainState:
    tensors, text = lgbp.load_container(path)
    from . import config as C
    sec = _sections(text)
    cfg = C.parse_lines(sec.get("config", []))
    net, train = cfg.net, cfg.train
    meta = dict(line.split("=", 1) for line in sec.get("state", []))
    threshold = float(meta.get("mask.threshold", cfg.mask.threshold))
    bits = tensors.pop("mask.bits").astype(np.uint8)
    mask = CorrMask(bits.shape[0] // 2, bits, threshold)
    model = N.build(net, mask, seed=0)
    for name, spec in (("local_spec", model.local_spec), ("global_spec", model.global_spec)):
        if spec is None or name not in sec:
            continue
        stored = DspmcKernelSpec.from_text("\n".join(sec[name]))
        if stored.grid() != spec.grid():
            raise lgbp.FormatError(f"{name} in {path} does not match the rebuilt kernel")
    m, v = {}, {}
    for k, p in model.params.items():
        if k not in tensors:
            raise lgbp.FormatError(f"checkpoint lacks parameter {k}")
        if tensors[k].shape != p.data.shape:
            raise lgbp.FormatError(f"parameter {k}: shape {tensors[k].shape} != {p.data.shape}")
        p.data = tensors[k].astype(p.data.dtype)
        m[k] = tensors.get(f"adam.m/{k}", np.zeros_like(p.data)).astype(p.data.dtype)
        v[k] = tensors.get(f"adam.v/{k}", np.zeros_like(p.data)).astype(p.data.dtype)
    history = []
    for line in sec.get("history", []):
        s, lo, ps, ss, sec_ = line.split("\t")
        history.append({"step": int(s), "loss": float(lo), "psnr": float(ps), "ssim": float(ss),
                        "seconds": float(sec_)})
    settings = [f"{k}={C.format_value(v)}" for k, v in cfg.items() if k.split(".")[0] in ("mask", "data")]
    state = TrainState(model, train, m, v, int(meta.get("step", 0)), history, settings)
    N.set_mode(model, meta.get("mode", "train"))
    return state
