"""Command-line entry point: ``lgbpn <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 runtime failure (including a
verification that does not pass).
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import config as C
from . import data, noise, verify
from . import network as N
from . import trainer as TR


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _pos(text: str) -> tuple[int, int]:
    try:
        y, x = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected Y,X, got {text!r}") from None
    return y, x


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lgbpn", description="Blind-patch denoising of spatially correlated noise.")
    sub = p.add_subparsers(dest="cmd", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic noisy/clean dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--n", type=int, default=200)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--sigma", type=float, default=25 / 255, help="noise std in [0, 1] intensity units")
    s.add_argument("--kernel", choices=sorted(noise.KERNELS), default="gauss3")
    s.add_argument("--gain", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("analyze", help="estimate per-offset noise correlation")
    s.add_argument("--noisy", required=True)
    s.add_argument("--clean", help="clean images matched by file name (omit for the median heuristic)")
    s.add_argument("--radius", type=int, default=10)
    s.add_argument("--out", required=True)

    s = sub.add_parser("mask", help="threshold a correlation map into a mask")
    s.add_argument("--corr", required=True)
    s.add_argument("--threshold", type=float, default=0.05)
    s.add_argument("--out", required=True)

    s = sub.add_parser("train", help="self-supervised training")
    s.add_argument("--config")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--supervised", action="store_true")
    s.add_argument("--resume", help="checkpoint to continue from")
    s.add_argument("--max-steps", type=int)

    s = sub.add_parser("denoise", help="run a checkpoint in test mode")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--in", dest="inp", required=True, help="PNG file or directory of PNGs")
    s.add_argument("--out", required=True)
    s.add_argument("--pd-test", type=int)
    s.add_argument("--shift-ratio", type=float)

    s = sub.add_parser("verify", help="blind-spot, gradient, leakage and receptive-field checks")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mode", choices=("blindspot", "gradcheck", "leakage", "rf"), required=True)
    s.add_argument("--detach-stats", action="store_true")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("rfmap", help="receptive-field heat map of one output pixel")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--pos", type=_pos, required=True)
    s.add_argument("--size", type=int, default=80)
    s.add_argument("--branch", choices=("both", "local", "global"), default="both")
    s.add_argument("--seed", type=int, default=0)

    s = sub.add_parser("metrics", help="PSNR and SSIM between two PNGs")
    s.add_argument("--a", required=True)
    s.add_argument("--b", required=True)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    except SystemExit as e:  # --help
        return 0 if not e.code else 1
    try:
        return COMMANDS[args.cmd](args)
    except (ValueError, KeyError, OSError, TR.NonFiniteError) as e:
        print(f"lgbpn {args.cmd}: {e}", file=sys.stderr)
        return 2


# ---------------------------------------------------------------- commands


def cmd_synth(a) -> int:
    if not 0 <= a.sigma <= 1:
        raise ValueError("--sigma is in [0, 1] intensity units (25/255 = 0.098)")
    clean = data.synth_scenes(a.n, a.size, seed=a.seed)
    spec = noise.NoiseSynthSpec.named(a.kernel, a.sigma, a.gain, seed=a.seed)
    noisy = noise.synth_correlated_noise(clean, spec)
    out = Path(a.out)
    for i in range(a.n):
        data.save_image(out / "clean" / f"{i:05d}.png", clean[i])
        data.save_image(out / "noisy" / f"{i:05d}.png", noisy[i])
    print(f"wrote {a.n} pairs of {a.size}x{a.size} to {out}")
    return 0


def _noise_maps(noisy_dir, clean_dir, pseudo: bool):
    n_idx = data._index(Path(noisy_dir))
    if not n_idx:
        raise ValueError(f"no noisy images under {noisy_dir}")
    maps = []
    c_idx = data._index(Path(clean_dir)) if clean_dir else {}
    for stem, path in sorted(n_idx.items()):
        img = data.load_image(path)
        if stem in c_idx:
            maps.append(noise.extract_noise(img, data.load_image(c_idx[stem])))
        elif pseudo:
            maps.append(img - noise.pseudo_clean(img[None])[0])
    if not maps:
        raise ValueError("no noisy/clean pairs matched by file name")
    return maps


def cmd_analyze(a) -> int:
    maps = _noise_maps(a.noisy, a.clean, pseudo=a.clean is None)
    cmap = noise.estimate_correlation(maps, a.radius)
    noise.save_correlation(a.out, cmap)
    R = cmap.radius
    print(f"{len(maps)} noise maps, min pairs/offset {int(cmap.sample_count.min())}")
    for dy, dx in ((0, 1), (1, 0), (1, 1), (0, 2), (2, 0)):
        if max(abs(dy), abs(dx)) <= R:
            print(f"rho({dy},{dx}) = {cmap.at(dy, dx):+.4f}")
    print(f"wrote {a.out} and {a.out}.txt")
    return 0


def cmd_mask(a) -> int:
    cmap = noise.load_correlation(a.corr)
    mask = noise.build_corr_mask(cmap, a.threshold)
    noise.save_mask(a.out, mask, cmap)
    Path(str(a.out) + ".grid").write_text(noise.mask_grid(mask))
    sys.stdout.write(noise.mask_grid(mask))
    print(f"excluded offsets: {int((mask.bits == 0).sum())}; wrote {a.out}, {a.out}.txt, {a.out}.grid")
    return 0


def _resolve_mask(cfg: C.Config, noisy: np.ndarray, clean: np.ndarray | None) -> noise.CorrMask:
    if cfg.mask.path:
        return noise.load_mask(cfg.mask.path)
    if clean is not None:
        maps = noise.extract_noise(noisy, clean)
    elif cfg.mask.pseudo_clean:
        maps = noisy - noise.pseudo_clean(noisy)
    else:
        raise ValueError("no mask.path, no clean images, and mask.pseudo_clean is off")
    cmap = noise.estimate_correlation([maps], cfg.mask.radius)
    return noise.build_corr_mask(cmap, cfg.mask.threshold)


def cmd_train(a) -> int:
    if a.resume:
        state = TR.load_checkpoint(a.resume)
        cfg = TR.full_config(state)
    else:
        cfg = C.load(a.config) if a.config else C.Config()
        if a.seed is not None:
            cfg.train.seed = a.seed
        if a.supervised:
            cfg.train.supervised = True
    noisy, clean, names = data.load_dataset(a.data)
    val = None
    k = cfg.data.val_count
    if clean is not None and k > 0 and len(noisy) > k:
        val = (noisy[-k:], clean[-k:])
        noisy, clean = noisy[:-k], clean[:-k]
    if not a.resume:
        mask = _resolve_mask(cfg, noisy, clean)
        model = N.build(cfg.net, mask, seed=cfg.train.seed)
        state = TR.new_state(model, cfg.train)
        state.settings = [f"{key}={C.format_value(v)}" for key, v in cfg.items()
                          if key.split(".")[0] in ("mask", "data")]
    print(f"{len(noisy)} training images, {N.param_count(state.model)} parameters, "
          f"{len(state.model.local_spec.effective_offsets()) if state.model.local_spec else 0} local taps, "
          f"{len(state.model.global_spec.effective_offsets()) if state.model.global_spec else 0} global taps")
    print("step\tloss\tpsnr\tssim\tseconds")
    TR.train_loop(state, noisy, clean, val=val, out_dir=a.out, max_steps=a.max_steps)
    print(f"checkpoint: {Path(a.out) / 'final.lgbp'}")
    return 0


def _test_model(ckpt: str, pd_test: int | None = None, ratio: float | None = None) -> N.Model:
    state = TR.load_checkpoint(ckpt)
    model = state.model
    if pd_test is not None:
        model.config.pd_test = pd_test
    if ratio is not None:
        model.config.shift_ratio = ratio
    model.config.validate()
    return N.set_mode(model, "test")


def cmd_denoise(a) -> int:
    model = _test_model(a.ckpt, a.pd_test, a.shift_ratio)
    src = Path(a.inp)
    if src.is_dir():
        files = sorted(p for p in src.iterdir() if p.suffix.lower() == ".png")
        if not files:
            raise ValueError(f"no PNG files in {src}")
        outs = [Path(a.out) / f.name for f in files]
    else:
        files, outs = [src], [Path(a.out)]
    for f, o in zip(files, outs):
        img = data.load_image(f)
        data.save_image(o, N.denoise(model, img[None])[0])
        print(f"{f} -> {o}")
    return 0


def cmd_verify(a) -> int:
    state = TR.load_checkpoint(a.ckpt)
    model = N.set_mode(state.model, "train")
    rng = np.random.default_rng(a.seed)
    if a.mode == "gradcheck":
        res = verify.gradcheck_suite(a.seed)
        rep = verify.gradcheck_report(res)
        sys.stdout.write(rep)
        return 0 if "FAIL" not in rep else 2
    if a.mode == "blindspot":
        x = rng.random((5, model.config.in_channels, 64, 64))
        pos = verify.interior_positions(64, 64, 20, rng)
        ok = True
        for branches in (["local"] if model.config.uses_local else []) + [model.config.branches]:
            sub = verify.branch_model(model, branches)
            detach = a.detach_stats if branches != "local" else False
            r = verify.blindspot_grad(sub, x, pos, detach_stats=detach)
            print(r.summary())
            ok &= r.passed
        return 0 if ok else 2
    if a.mode == "leakage":
        rows, slope = verify.leakage_scaling(model, [(32, 32), (64, 64), (128, 128)], seed=a.seed)
        sys.stdout.write(verify.leakage_table(rows, slope))
        return 0
    # rf
    x = rng.random((2, model.config.in_channels, 80, 80))
    p = (40, 40)
    sizes = {}
    for branches in ("local", "global"):
        if branches == "local" and not model.config.uses_local:
            continue
        if branches == "global" and not model.config.uses_global:
            continue
        _, raw = verify.receptive_field_map(verify.branch_model(model, branches), x, p, detach_stats=True)
        sizes[branches] = verify.support(raw)
        print(f"{branches} support: {len(sizes[branches])} pixels, center value {raw[p]:.3e}")
    if "local" in sizes:
        pred = verify.predicted_support(model.local_spec, model.config.local_downstream(), p, 80, 80)
        same = pred == sizes["local"]
        print(f"local support equals enumerated lattice ({len(pred)} pixels): {same}")
        if not same:
            return 2
    return 0


def cmd_rfmap(a) -> int:
    state = TR.load_checkpoint(a.ckpt)
    model = verify.branch_model(N.set_mode(state.model, "train"), a.branch)
    rng = np.random.default_rng(a.seed)
    x = rng.random((2, model.config.in_channels, a.size, a.size))
    y, xx = a.pos
    if not (0 <= y < a.size and 0 <= xx < a.size):
        raise ValueError(f"--pos {y},{xx} outside a {a.size}x{a.size} input")
    norm, raw = verify.receptive_field_map(model, x, a.pos, detach_stats=True)
    verify.heat_png(a.out, norm)
    print(f"support {len(verify.support(raw))} pixels, center {raw[a.pos]:.3e}; wrote {a.out}")
    return 0


def cmd_metrics(a) -> int:
    x, y = data.load_image(a.a), data.load_image(a.b)
    print(f"PSNR {TR.psnr(x, y):.2f} dB, SSIM {TR.ssim(x, y):.4f}")
    return 0


COMMANDS = {
    "synth": cmd_synth, "analyze": cmd_analyze, "mask": cmd_mask, "train": cmd_train,
    "denoise": cmd_denoise, "verify": cmd_verify, "rfmap": cmd_rfmap, "metrics": cmd_metrics,
}


if __name__ == "__main__":
    sys.exit(main())
