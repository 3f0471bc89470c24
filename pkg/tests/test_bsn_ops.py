import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lgbpn import bsn_ops as B
from lgbpn import noise
from lgbpn import tensor as T
from lgbpn.tensor import Tensor


def center_mask(R=10):
    return noise.CorrMask.center_only(R)


def gauss_mask():
    rho = noise.kernel_autocorrelation(noise.KERNELS["gauss3"], 10)
    return noise.build_corr_mask(noise.CorrelationMap(10, rho, np.full(rho.shape, 10**6)), 0.05)


def brute_reach(s, layers):
    """Enumerate every sum of s*d*k over the layer stack (2-D, independent of reach_1d)."""
    pts = {(0, 0)}
    for d, n in layers:
        for _ in range(n):
            pts = {(y + s * d * ky, x + s * d * kx) for y, x in pts for ky in (-1, 0, 1) for kx in (-1, 0, 1)}
    return pts


def test_classic_center_masked_3x3():
    spec = B.make_dspmc_spec(3, 1, center_mask(1))
    assert len(spec.effective_offsets()) == 8


def test_9x9_plus_mask_before_safety():
    m = center_mask(4)
    for d in ((0, 1), (0, -1), (1, 0), (-1, 0)):
        m.bits[4 + d[0], 4 + d[1]] = 0
    spec = B.make_dspmc_spec(9, 1, m, B.DownstreamLattice(5, ((2, 3),)))
    assert len(spec.effective_offsets()) == 76


def test_21x21_dilated_global_spec():
    spec = B.make_dspmc_spec(21, 2, gauss_mask(), B.DownstreamLattice(5, ((2, 8),)))
    eff = set(spec.effective_offsets())
    reach = brute_reach(5, ((2, 8),))
    expected = {(dy, dx) for dy in range(-10, 11, 2) for dx in range(-10, 11, 2)}
    expected -= {(dy, dx) for dy, dx in expected if not gauss_mask().bit(dy, dx)}
    expected -= {(dy, dx) for dy, dx in expected if (-dy, -dx) in reach}
    assert eff == expected
    pruned = {(dy, dx) for dy in range(-10, 11, 2) for dx in range(-10, 11, 2)
              if gauss_mask().bit(dy, dx) and (dy, dx) not in eff}
    assert pruned == {(0, 10), (0, -10), (10, 0), (-10, 0), (10, 10), (10, -10), (-10, 10), (-10, -10)}
    assert len(eff) == 108


def test_safety_mask_examples():
    assert B.lattice_safety_mask(9, 1, B.DownstreamLattice(5, ((2, 1),))).all()
    bits = B.lattice_safety_mask(9, 1, B.DownstreamLattice(1, ((2, 2),)))
    for dy in range(-4, 5):
        for dx in range(-4, 5):
            even = dy % 2 == 0 and dx % 2 == 0 and (dy, dx) != (0, 0)
            assert bits[4 + dy, 4 + dx] == (0 if even else 1)
    assert B.lattice_safety_mask(9, 1, B.DownstreamLattice()).all()


@settings(max_examples=40, deadline=None)
@given(s=st.integers(1, 5), d=st.integers(1, 3), n=st.integers(0, 3), k=st.sampled_from([3, 5, 9, 11]))
def test_safety_mask_matches_brute_force(s, d, n, k):
    lat = B.DownstreamLattice(s, ((d, n),))
    bits = B.lattice_safety_mask(k, 1, lat)
    reach = brute_reach(s, ((d, n),))
    r = k // 2
    for dy in range(-r, r + 1):
        for dx in range(-r, r + 1):
            if (dy, dx) == (0, 0):
                continue
            assert bits[r + dy, r + dx] == (0 if (-dy, -dx) in reach else 1)


def test_spec_errors():
    with pytest.raises(ValueError):
        B.make_dspmc_spec(4, 1, center_mask())
    all_off = noise.CorrMask(1, np.zeros((3, 3), np.uint8), 0.5)
    with pytest.raises(ValueError, match="no effective taps"):
        B.make_dspmc_spec(3, 1, all_off)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10**6), k=st.sampled_from([3, 5, 9, 21]), d=st.integers(1, 3))
def test_spec_invariants(seed, k, d):
    rng = np.random.default_rng(seed)
    rho = rng.uniform(-0.3, 0.3, (21, 21))
    rho[10, 10] = 1
    mask = noise.build_corr_mask(noise.CorrelationMap(10, rho, np.full((21, 21), 10**6)), 0.2)
    try:
        spec = B.make_dspmc_spec(k, d, mask, B.DownstreamLattice(5, ((2, 2),)))
    except ValueError:
        return
    eff = set(spec.effective_offsets())
    assert (0, 0) not in eff
    assert eff == {(-a, -b) for a, b in eff}
    assert all(t.position == (t.dy, t.dx) for t in spec.taps())


def test_kernel_shift():
    spec = B.make_dspmc_spec(9, 1, center_mask())
    assert B.apply_kernel_shift(spec, 0.0).taps() == spec.taps()
    half = B.apply_kernel_shift(spec, -0.5)
    tap = [t for t in half.taps() if (t.dy, t.dx) == (4, 4)][0]
    assert tap.position == (2.0, 2.0)
    assert half.mask_vector().tolist() == spec.mask_vector().tolist()
    pos = {t.position for t in half.taps() if t.mask}
    assert pos == {(-a, -b) for a, b in pos}
    for bad in (-1.0, 0.1, -1.5):
        with pytest.raises(ValueError):
            B.apply_kernel_shift(spec, bad)


def test_kernel_shift_ratio_zero_bit_identical_output():
    spec = B.make_dspmc_spec(9, 1, gauss_mask())
    rng = np.random.default_rng(0)
    x = Tensor(rng.random((1, 3, 16, 16)).astype(np.float32))
    w = Tensor((rng.standard_normal((4, 3, 81)) * spec.mask_vector()).astype(np.float32))
    a = T.conv2d(x, w, spec.taps(), footprint=9).data
    b = T.conv2d(x, w, B.apply_kernel_shift(spec, 0.0).taps(), footprint=9).data
    assert np.array_equal(a, b)


def test_effective_taps_denser_than_center_masked_3x3():
    m = gauss_mask()
    local = B.make_dspmc_spec(9, 1, m, B.DownstreamLattice(5, ((2, 3),)))
    glob = B.make_dspmc_spec(21, 2, m, B.DownstreamLattice(5, ((2, 8),)))
    classic = B.make_dspmc_spec(3, 1, center_mask(1))
    assert len(local.effective_offsets()) > len(classic.effective_offsets())
    assert len(glob.effective_offsets()) > len(classic.effective_offsets())


def test_grid_text_roundtrip():
    spec = B.make_dspmc_spec(21, 2, gauss_mask(), B.DownstreamLattice(5, ((2, 8),)))
    g = spec.grid().splitlines()
    assert len(g) == 21 and all(len(r) == 21 for r in g)
    assert g[10][10] == "x" and g[10][20] == "s" and g[0][0] == "s" and g[1][0] == "."
    back = B.DspmcKernelSpec.from_text(spec.to_text())
    assert back.grid() == spec.grid() and back.effective_offsets() == spec.effective_offsets()


def test_downstream_validation():
    with pytest.raises(ValueError):
        B.DownstreamLattice(0)
    with pytest.raises(ValueError):
        B.DownstreamLattice(2, ((0, 1),))
