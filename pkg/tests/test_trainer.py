import math

import numpy as np
import pytest

from lgbpn import network as N
from lgbpn import noise
from lgbpn import trainer as TR
from lgbpn.tensor import NonFiniteError


@pytest.fixture(scope="module")
def mask():
    rho = noise.kernel_autocorrelation(noise.KERNELS["gauss3"], 10)
    return noise.build_corr_mask(noise.CorrelationMap(10, rho, np.full(rho.shape, 10**6)), 0.05)


def tiny(mask, seed=0, **kw):
    cfg = N.NetworkConfig(width=4, local_layers=1, dtb_count=1, expansion=1)
    return N.build(cfg, mask, seed=seed)


def data(n=6, size=40, seed=0):
    return np.random.default_rng(seed).random((n, 3, size, size)).astype(np.float32)


def test_adam_matches_hand_formula(mask):
    model = tiny(mask)
    st = TR.new_state(model, TR.TrainConfig(lr=0.01))
    name = "fuse.out.b"
    p = model.params[name]
    w0 = p.data.astype(np.float64).copy()
    g1, g2 = np.array([0.5, -1.0, 2.0]), np.array([-0.25, 0.1, 3.0])
    m = v = np.zeros(3)
    w = w0.copy()
    for t, g in enumerate((g1, g2), start=1):
        for q in model.params.values():
            q.grad = None
        p.grad = g.astype(p.data.dtype)
        st.step = t
        TR.adam_update(st, 0.01)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w = w - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert np.allclose(p.data, w, atol=1e-6)


def test_masked_taps_stay_zero(mask):
    model = tiny(mask)
    st = TR.new_state(model, TR.TrainConfig(batch_size=2, patch_size=40, lr=1e-2))
    x = data(2)
    for _ in range(3):
        TR.train_step(st, x)
    for prefix, spec in (("local", model.local_spec), ("global", model.global_spec)):
        w = model.params[f"{prefix}.dspmc.w"].data
        assert np.all(w[:, :, spec.mask_vector() == 0] == 0)


def test_train_step_needs_train_mode_and_reduces_loss(mask):
    model = tiny(mask)
    st = TR.new_state(model, TR.TrainConfig(lr=1e-2))
    x = data(2)
    N.set_mode(model, "test")
    with pytest.raises(ValueError):
        TR.train_step(st, x)
    N.set_mode(model, "train")
    losses = [TR.train_step(st, x) for _ in range(15)]
    assert losses[-1] < losses[0]


def test_non_finite_loss_raises_without_update(mask):
    model = tiny(mask)
    st = TR.new_state(model, TR.TrainConfig())
    before = model.checksum()
    x = data(1)
    x[0, 0, 5, 5] = np.nan
    with pytest.raises(NonFiniteError):
        TR.train_step(st, x)
    assert model.checksum() == before and st.step == 0


def test_psnr_cases():
    a = np.zeros((3, 8, 8))
    assert TR.psnr(a, a) == 100.0
    assert TR.psnr(a, a + 0.1) == pytest.approx(20.0)
    b = a.copy()
    b[0, 0, 0] = 1e-9
    assert TR.psnr(a, b) == 100.0
    with pytest.raises(ValueError):
        TR.psnr(a, a[..., :4])


def test_ssim_cases():
    rng = np.random.default_rng(0)
    x = rng.random((3, 32, 32))
    assert TR.ssim(x, x) == pytest.approx(1.0)
    assert TR.ssim(x, x + rng.normal(0, 0.2, x.shape)) < 0.9
    # constant images: the variance terms vanish and only the luminance term with C1 remains
    c = np.full((1, 16, 16), 0.5)
    assert TR.ssim(c, np.full_like(c, 0.5)) == pytest.approx(1.0)
    assert TR.ssim(c, np.zeros_like(c)) == pytest.approx(1e-4 / (0.25 + 1e-4))
    with pytest.raises(ValueError):
        TR.ssim(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


def test_ssim_symmetric_and_batched():
    rng = np.random.default_rng(1)
    a, b = rng.random((2, 3, 24, 24)), rng.random((2, 3, 24, 24))
    assert TR.ssim(a, b) == pytest.approx(TR.ssim(b, a))
    assert TR.ssim(a, b) == pytest.approx(np.mean([TR.ssim(a[i], b[i]) for i in range(2)]))


def test_epoch_batches_cover_once():
    bs = TR.epoch_batches(10, 4, seed=3, epoch=1)
    assert [len(b) for b in bs] == [4, 4, 2]
    assert sorted(np.concatenate(bs).tolist()) == list(range(10))
    assert not np.array_equal(np.concatenate(bs), np.concatenate(TR.epoch_batches(10, 4, 3, 2)))


def test_same_seed_same_weights(mask):
    x = data(4)
    sums = []
    for _ in range(2):
        st = TR.new_state(tiny(mask), TR.TrainConfig(batch_size=2, patch_size=32, epochs=1))
        TR.train_loop(st, x, log=None)
        sums.append(st.model.checksum())
    assert sums[0] == sums[1]


def test_resume_is_bit_exact(mask, tmp_path):
    x = data(4)
    cfg = dict(batch_size=2, patch_size=32, epochs=2, ckpt_every=2)
    full = TR.new_state(tiny(mask), TR.TrainConfig(**cfg))
    TR.train_loop(full, x, log=None)
    part = TR.new_state(tiny(mask), TR.TrainConfig(**cfg))
    TR.train_loop(part, x, out_dir=tmp_path, max_steps=2, log=None)
    resumed = TR.load_checkpoint(tmp_path / "final.lgbp")
    assert resumed.step == 2
    TR.train_loop(resumed, x, log=None)
    assert resumed.step == full.step == 4
    assert resumed.model.checksum() == full.model.checksum()


def test_checkpoint_roundtrip_and_metrics_file(mask, tmp_path):
    x = data(4)
    st = TR.new_state(tiny(mask), TR.TrainConfig(batch_size=2, patch_size=32, epochs=1, log_every=1))
    st.settings = ["mask.threshold=0.05"]
    TR.train_loop(st, x, val=(x[:1], x[:1]), out_dir=tmp_path, log=None)
    back = TR.load_checkpoint(tmp_path / "final.lgbp")
    assert back.model.checksum() == st.model.checksum()
    assert back.history == st.history and len(back.history) == 2
    rows = (tmp_path / "metrics.tsv").read_text().splitlines()
    assert rows[0] == "step\tloss\tpsnr\tssim\tseconds" and len(rows) == 3
    assert all(np.array_equal(back.m[k], st.m[k]) for k in st.m)


def test_supervised_needs_clean(mask):
    st = TR.new_state(tiny(mask), TR.TrainConfig(supervised=True))
    with pytest.raises(ValueError):
        TR.train_loop(st, data(2), log=None)


def test_lr_halving():
    cfg = TR.TrainConfig(lr=1.0, epochs=4, lr_halving=True)
    st = TR.TrainState(None, cfg, {}, {})
    assert st.lr_at(0, 10) == 1.0 and st.lr_at(20, 10) == 0.5


def test_config_validation():
    for bad in (dict(lr=0), dict(batch_size=0), dict(beta1=1.0), dict(grad_clip=-1)):
        with pytest.raises(ValueError):
            TR.TrainConfig(**bad).validate()
    with pytest.raises(KeyError):
        TR.TrainConfig.from_dict({"lrr": 1})


def test_evaluate_restores_mode(mask):
    m = tiny(mask)
    x = data(2, 40)
    p, s = TR.evaluate(m, x, x)
    assert m.mode == "train" and math.isfinite(p) and -1 <= s <= 1
