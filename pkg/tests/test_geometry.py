import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfdetr import tensor as T
from mfdetr.errors import DegenerateBox, UnknownFormat
from mfdetr.geometry import (Box, PointSampleConfig, box_convert, box_iou, box_iou_matrix, footprint,
                             paste_mask, read_map, roi_align, roi_grid, sample_points, uncertainty,
                             uniform_points)

from oracles import bilinear_oracle, paste_oracle, roi_align_oracle


# -- boxes -----------------------------------------------------------------------

def test_box_iou_cases():
    assert box_iou((0, 0, 2, 2), (0, 0, 2, 2)) == 1.0
    assert box_iou((0, 0, 1, 1), (2, 2, 3, 3)) == 0.0
    assert box_iou((0, 0, 1, 1), (0.5, 0, 1.5, 1)) == pytest.approx(1 / 3, abs=1e-15)


def test_box_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.sort(rng.uniform(0, 10, size=(5, 2, 2)), axis=1).transpose(0, 2, 1).reshape(5, 4)[:, [0, 2, 1, 3]]
    b = np.sort(rng.uniform(0, 10, size=(4, 2, 2)), axis=1).transpose(0, 2, 1).reshape(4, 4)[:, [0, 2, 1, 3]]
    m = box_iou_matrix(a, b)
    for i in range(5):
        for j in range(4):
            assert m[i, j] == pytest.approx(box_iou(a[i], b[j]), abs=1e-14)


def test_box_convert_full_image():
    assert box_convert((0.5, 0.5, 1, 1), "cxcywh_norm", "xyxy_px", 64, 64) == Box(0, 0, 64, 64)


def test_box_convert_unknown():
    with pytest.raises(UnknownFormat):
        box_convert((0, 0, 1, 1), "xywh", "xyxy_px", 10, 10)


def test_box_convert_zero_size_then_degenerate():
    b = box_convert((0.3, 0.3, 0.0, 0.0), "cxcywh_norm", "xyxy_px", 32, 32)
    assert b.is_degenerate()
    with pytest.raises(DegenerateBox):
        roi_align(T.zeros((1, 8, 8)), b.scaled(0.25), 2, 2)


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.floats(0, 1), st.integers(1, 300), st.integers(1, 300))
def test_box_convert_round_trip(cx, cy, w, h, H, W):
    px = box_convert((cx, cy, w, h), "cxcywh_norm", "xyxy_px", H, W)
    back = box_convert(px, "xyxy_px", "cxcywh_norm", H, W).as_array()
    assert np.abs(back - [cx, cy, w, h]).max() <= 1e-12


def test_box_normalize_and_clamp():
    b = Box(5, 7, -2, 3).normalized().clamped(6, 4)
    assert b == Box(0, 3, 4, 6)


# -- roi_align ----------------------------------------------------------------

def test_roi_align_constant():
    out = roi_align(T.tensor(np.full((2, 6, 5), 1.75)), (0.3, 1.1, 4.2, 5.9), 3, 4).data
    np.testing.assert_allclose(out, 1.75, atol=1e-15)


def test_roi_align_full_map_identity():
    f = np.random.default_rng(0).normal(size=(3, 6, 5))
    out = roi_align(T.tensor(f), (0, 0, 5, 6), 6, 5).data
    np.testing.assert_array_equal(out, f.reshape(3, -1).T)


def test_roi_align_equals_grid_composition():
    rng = np.random.default_rng(1)
    f = rng.normal(size=(2, 9, 7))
    box = Box(1.3, 0.7, 5.9, 8.1)
    got = roi_align(T.tensor(f), box, 5, 3).data
    expect = T.bilinear_sample(T.tensor(f), T.clamp_to_centres(roi_grid(box, 5, 3), 9, 7)).data
    np.testing.assert_array_equal(got, expect)


@pytest.mark.parametrize("seed", range(20))
def test_roi_align_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    f = rng.normal(size=(2, 9, 7))
    box = tuple(rng.uniform(-1, 10, size=4))
    if Box.of(box).normalized().clamped(9, 7).is_degenerate():
        box = (0.5, 0.5, 6.0, 8.0)
    oh, ow = (int(v) for v in rng.integers(1, 6, size=2))
    got = roi_align(T.tensor(f), box, oh, ow).data
    assert np.abs(got - roi_align_oracle(f, box, oh, ow)).max() <= 1e-12


def test_roi_align_degenerate():
    with pytest.raises(DegenerateBox):
        roi_align(T.zeros((1, 4, 4)), (2, 2, 2, 3), 2, 2)


# -- paste ---------------------------------------------------------------------

def test_paste_identity():
    roi = np.random.default_rng(2).uniform(size=(6, 8))
    out = paste_mask(T.tensor(roi), (0, 0, 8, 6), 6, 8).data
    np.testing.assert_array_equal(out, roi)


def test_paste_constant_inside_zero_outside():
    out = paste_mask(T.tensor(np.full((4, 4), 0.7)), (2.3, 1.6, 9.2, 7.0), 12, 14).data
    inside = np.zeros((12, 14), bool)
    inside[1:7, 2:10] = True
    np.testing.assert_allclose(out[inside], 0.7, atol=1e-15)
    assert np.all(out[~inside] == 0.0)
    assert footprint((2.3, 1.6, 9.2, 7.0), 12, 14) == (2, 1, 10, 7)


@pytest.mark.parametrize("seed", range(20))
def test_paste_matches_oracle(seed):
    rng = np.random.default_rng(seed)
    roi = rng.uniform(size=tuple(int(v) for v in rng.integers(2, 7, size=2)))
    H, W = 16, 13
    box = (rng.uniform(-2, 6), rng.uniform(-2, 8), rng.uniform(7, 15), rng.uniform(9, 18))
    got = paste_mask(T.tensor(roi), box, H, W).data
    assert np.abs(got - paste_oracle(roi, box, H, W)).max() <= 1e-12


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10_000))
def test_paste_preserves_order(seed):
    rng = np.random.default_rng(seed)
    b = rng.uniform(size=(5, 5))
    a = b + rng.uniform(0, 0.3, size=(5, 5))
    box = (rng.uniform(0, 5), rng.uniform(0, 5), rng.uniform(8, 20), rng.uniform(8, 20))
    pa, pb = paste_mask(T.tensor(a), box, 20, 20).data, paste_mask(T.tensor(b), box, 20, 20).data
    assert np.all(pa >= pb)


@pytest.mark.parametrize("seed", range(5))
def test_full_image_paste_equals_interpolate(seed):
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=(1, 5, 7))
    H, W = 20, 28
    up = T.interpolate_bilinear(T.tensor(x), H, W).data[0]
    pasted = paste_mask(T.tensor(x[0]), (0, 0, W, H), H, W).data
    assert np.abs(up - pasted).max() <= 1e-12


# -- point sampling ---------------------------------------------------------------

def test_point_config_validation():
    with pytest.raises(ValueError):
        PointSampleConfig(oversample=1.0)
    with pytest.raises(ValueError):
        PointSampleConfig(importance_ratio=1.5)
    with pytest.raises(ValueError):
        PointSampleConfig(n_points=0)
    cfg = PointSampleConfig(n_points=10, importance_ratio=0.75)
    assert cfg.n_important == 7 and cfg.n_draws == 30


def test_sample_points_beta_zero_is_uniform():
    cfg = PointSampleConfig(n_points=50, importance_ratio=0.0, seed=9)
    a = sample_points(np.zeros((8, 6)), cfg)
    b = sample_points(np.random.default_rng(0).uniform(size=(8, 6)), cfg)
    np.testing.assert_array_equal(a, b)
    np.testing.assert_array_equal(a, uniform_points(50, 8, 6, 9))


def test_sample_points_deterministic_and_count():
    cfg = PointSampleConfig(n_points=37, seed=4)
    m = np.random.default_rng(1).uniform(size=(10, 12))
    a, b = sample_points(m, cfg), sample_points(m, cfg)
    assert a.shape == (37, 2)
    np.testing.assert_array_equal(a, b)
    assert np.all((a >= 0) & (a <= [12, 10]))


def test_sample_points_band_selection():
    h, w = 32, 32
    m = np.zeros((h, w))
    m[:, 16:] = 1.0
    m[:, 14:18] = 0.5  # uncertain band
    cfg = PointSampleConfig(n_points=5, oversample=12.0, importance_ratio=1.0, seed=3)
    draws = np.random.default_rng([3, 0]).uniform(size=(cfg.n_draws, 2)) * [w, h]
    u = uncertainty(read_map(m, draws))
    assert np.isclose(u, 0.0).sum() >= 5
    pts = sample_points(m, cfg)
    assert np.all(np.isclose(uncertainty(read_map(m, pts)), 0.0))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 40))
def test_sample_points_beta_one_is_argmax_optimal(seed, n):
    m = np.random.default_rng(seed).uniform(size=(7, 9))
    cfg = PointSampleConfig(n_points=n, oversample=2.5, importance_ratio=1.0, seed=seed)
    draws = np.random.default_rng([seed, 0]).uniform(size=(cfg.n_draws, 2)) * [9, 7]
    u_draws = np.sort(uncertainty(read_map(m, draws)))[::-1]
    pts = sample_points(m, cfg)
    u_pts = np.sort(uncertainty(read_map(m, pts)))[::-1]
    np.testing.assert_array_equal(u_pts, u_draws[:n])
    # every chosen point is one of the draws
    assert all(np.any(np.all(draws == p, axis=1)) for p in pts)
