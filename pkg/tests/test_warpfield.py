"""Warp offset MLP and density-weighted regularizer tests."""

import numpy as np
import pytest

from dynfield import conditioning as cond
from dynfield import diffmath as dm
from dynfield import warpfield as wf
from dynfield.diffmath import DTensor, Tape
from dynfield.geometry import ImageCoord
from dynfield.gradsuites import check_all_params


@pytest.fixture(autouse=True)
def _test_profile():
    dm.set_profile("test")
    yield
    dm.set_profile("test")


def small_warp(rng=None):
    cfg = wf.WarpConfig(hidden=24, condition_dim=5, feature_dim=7)
    return wf.WarpModule(cfg, rng=rng or np.random.default_rng(0))


def rand_inputs(rng, n=6):
    p = DTensor(rng.uniform(-0.8, 0.8, size=(n, 3)))
    a = DTensor(rng.standard_normal(5))
    f = DTensor(rng.standard_normal((n, 7)))
    return p, a, f


# ---------------------------------------------------------------- offsets


def test_initial_offsets_exactly_zero():
    rng = np.random.default_rng(1)
    warp = small_warp(rng)
    p, a, f = rand_inputs(rng, 50)
    out = warp(p, a, f)
    assert out.shape == (50, 2)
    assert np.all(out.data == 0.0)
    off = wf.predict_offset(warp, [0.1, 0.2, 0.3], a, DTensor(np.zeros(7)))
    assert (off.du, off.dv) == (0.0, 0.0)


def test_offset_gradients_wrt_params_condition_feature():
    rng = np.random.default_rng(2)
    warp = small_warp(rng)
    warp.p["l2.w"].assign_(0.01 * rng.standard_normal(warp.p["l2.w"].shape))
    p, a, f = rand_inputs(rng)

    errs = check_all_params(lambda: warp(p, a, f), warp.p)
    assert max(errs.values()) <= 1e-4, errs

    a0, f0 = a.data.copy(), f.data.copy()
    assert dm.grad_check(lambda t: warp(p, t, DTensor(f0)), DTensor(a0)) <= 1e-4
    assert dm.grad_check(lambda t: warp(p, DTensor(a0), t), DTensor(f0)) <= 1e-4


def test_warp_coord_addition():
    assert wf.warp_coord(ImageCoord(10.0, 20.0), wf.Offset(0.0, 0.0)) == ImageCoord(10.0, 20.0)
    assert wf.warp_coord(ImageCoord(10.0, 20.0), wf.Offset(3.0, -4.0)) == ImageCoord(13.0, 16.0)


def test_warped_sampling_backpropagates_into_warp_params():
    rng = np.random.default_rng(3)
    warp = small_warp(rng)
    fmap = cond.FeatureMap(DTensor(rng.standard_normal((9, 9, 7))), frame_id=0)
    p, a, _ = rand_inputs(rng, 5)
    u0 = DTensor(rng.uniform(2, 6, size=5))
    v0 = DTensor(rng.uniform(2, 6, size=5))

    with Tape() as tape:
        f_init = cond.sample_features(fmap, u0, v0, "nearest")
        offsets = warp(p, a, f_init)
        du = dm.reshape(dm.slice_axis(offsets, 1, 0, 1), (5,))
        dv = dm.reshape(dm.slice_axis(offsets, 1, 1, 2), (5,))
        f_warped = cond.sample_features(fmap, dm.add(u0, du), dm.add(v0, dv), "bilinear")
        loss = dm.sum_(dm.mul(f_warped, f_warped))
    grads = tape.backward(loss)
    g = grads[warp.p["l2.w"].node_id].data
    assert np.abs(g).max() > 1e-6


# ---------------------------------------------------------------- regularizer


def reg_value(offsets_arr, alphas, n_refs=1):
    parts = [DTensor(np.asarray(o, dtype=np.float64)) for o in offsets_arr]
    assert len(parts) == n_refs
    return float(wf.offset_regularizer(parts, np.asarray(alphas)).data)


def test_regularizer_zero_offsets():
    val = reg_value([np.zeros((4, 2))], np.zeros(4))
    assert 0.0 <= val <= np.sqrt(wf.REG_EPS) + 1e-15


def test_regularizer_three_four_five():
    val = reg_value([np.array([[3.0, 4.0]])], np.array([0.0]))
    assert val == pytest.approx(5.0, abs=1e-9)


def test_regularizer_opaque_point_free():
    val = reg_value([np.array([[3.0, 4.0]])], np.array([1.0]))
    assert val == 0.0


def test_regularizer_scales_linearly_in_k():
    rng = np.random.default_rng(4)
    offs = rng.uniform(-2, 2, size=(8, 2)) + np.sign(rng.standard_normal((8, 2)))
    alphas = rng.uniform(0, 1, size=8)
    base = reg_value([offs], alphas)
    for k in (2.0, 3.5, 10.0):
        scaled = reg_value([offs * k], alphas)
        assert abs(scaled - k * base) < 1e-9


def test_regularizer_nonnegative_and_zero_conditions():
    rng = np.random.default_rng(5)
    for _ in range(20):
        offs = rng.uniform(-3, 3, size=(6, 2))
        alphas = rng.uniform(0, 1, size=6)
        assert reg_value([offs], alphas) >= 0.0
    # every alpha = 1 -> exactly zero regardless of offsets
    assert reg_value([rng.uniform(-3, 3, size=(6, 2))], np.ones(6)) == 0.0
    # zero offsets -> only the sqrt(eps) floor survives
    assert reg_value([np.zeros((6, 2))], rng.uniform(0, 1, size=6)) <= np.sqrt(wf.REG_EPS)


def test_regularizer_averages_over_points_and_references():
    # two refs, two points, alpha 0: mean of the four magnitudes
    o1 = np.array([[3.0, 4.0], [0.0, 0.0]])
    o2 = np.array([[6.0, 8.0], [0.0, 0.0]])
    val = reg_value([o1, o2], np.zeros(2), n_refs=2)
    expected = (5.0 + 10.0 + 2 * np.sqrt(wf.REG_EPS)) / 4.0
    assert val == pytest.approx(expected, abs=1e-9)


def test_regularizer_mismatch_rejected():
    with pytest.raises(dm.ShapeError):
        wf.offset_regularizer([DTensor(np.zeros((3, 2)))], np.zeros(4))
    with pytest.raises(dm.ShapeError):
        wf.offset_regularizer([], np.zeros(4))


def test_regularizer_gradient_matches_fd():
    rng = np.random.default_rng(6)
    offs = rng.uniform(-2, 2, size=(5, 2)) + 0.5
    alphas = rng.uniform(0, 0.9, size=5)
    err = dm.grad_check(lambda t: wf.offset_regularizer([t], alphas), DTensor(offs))
    assert err < 1e-6


def test_strong_regularizer_collapses_offsets():
    """Descending on the regularizer alone drives offsets toward zero."""
    rng = np.random.default_rng(7)
    warp = small_warp(rng)
    warp.p["l2.w"].assign_(0.3 * rng.standard_normal(warp.p["l2.w"].shape))
    warp.p["l2.b"].assign_(np.array([1.5, -2.0]))
    p, a, f = rand_inputs(rng, 16)
    alphas = np.zeros(16)

    start = np.abs(warp(p, a, f).data).mean()
    assert start > 0.5
    for i in range(600):
        with Tape() as tape:
            offsets = warp(p, a, f)
            loss = wf.offset_regularizer([offsets], alphas)  # weight 1.0
        tape.backward(loss)
        lr = 1.0 * 0.995 ** i
        for t in warp.p.values():
            t.assign_(t.data - lr * t.grad)
    final = np.abs(warp(p, a, f).data).mean()
    assert final < 0.1, f"mean offset magnitude {final} after collapse run"
