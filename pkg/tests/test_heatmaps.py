"""Heatmap codec: target encoding, filtering, sub-pixel decoding."""

import math

import numpy as np
import pytest

from kitpose import heatmaps as hm


def filter_oracle(img, kern):
    """Direct-summation cross-correlation with zero padding."""
    kh, kw = kern.shape
    ph, pw = kh // 2, kw // 2
    padded = np.pad(img, ((ph, ph), (pw, pw)))
    out = np.zeros_like(img, dtype=np.float64)
    for i in range(img.shape[0]):
        for j in range(img.shape[1]):
            out[i, j] = np.sum(padded[i:i + kh, j:j + kw] * kern)
    return out


# --------------------------------------------------------------------------
# Kernel table
# --------------------------------------------------------------------------

def test_three_by_three_stencil_exact():
    spec = hm.laplacian_kernel(3)
    assert spec.scale == 1.0
    assert np.array_equal(spec.weights,
                          [[0, -1, 0], [-1, 4, -1], [0, -1, 0]])


def test_five_and_seven_stencils_exact():
    spec5 = hm.laplacian_kernel(5)
    assert spec5.scale == 0.25
    assert np.array_equal(
        spec5.weights,
        [[0, 0, -1, 0, 0], [0, -1, -2, -1, 0], [-1, -2, 16, -2, -1],
         [0, -1, -2, -1, 0], [0, 0, -1, 0, 0]])
    spec7 = hm.laplacian_kernel(7)
    assert spec7.scale == pytest.approx(1.0 / 6.0)
    assert np.array_equal(
        spec7.weights,
        [[0, 0, -1, -1, -1, 0, 0], [0, -1, -3, -3, -3, -1, 0],
         [-1, -3, 0, 7, 0, -3, -1], [-1, -3, 7, 24, 7, -3, -1],
         [-1, -3, 0, 7, 0, -3, -1], [0, -1, -3, -3, -3, -1, 0],
         [0, 0, -1, -1, -1, 0, 0]])


def test_all_stencils_zero_sum():
    for size in (3, 5, 7):
        assert abs(hm.laplacian_kernel(size).scaled.sum()) <= 1e-12


def test_custom_kernel_must_sum_to_zero():
    with pytest.raises(ValueError):
        hm.LaplacianKernelSpec(size=3, weights=np.ones((3, 3)), scale=1.0)


# --------------------------------------------------------------------------
# Laplacian filter
# --------------------------------------------------------------------------

def test_laplacian_kills_constant_interior():
    for size in (3, 5, 7):
        spec = hm.laplacian_kernel(size)
        out = hm.laplacian_filter(np.full((1, 16, 16), 3.7), spec)
        half = size // 2
        interior = out[0, half:-half, half:-half]
        assert np.max(np.abs(interior)) <= 1e-12


def test_laplacian_impulse_response():
    spec = hm.laplacian_kernel(3)
    img = np.zeros((1, 9, 9))
    img[0, 4, 4] = 1.0
    out = hm.laplacian_filter(img, spec)
    assert np.array_equal(out[0, 3:6, 3:6], spec.weights)


@pytest.mark.parametrize("size", [3, 5, 7])
def test_laplacian_matches_direct_convolution(size):
    rng = np.random.default_rng(size)
    img = rng.uniform(-1, 1, (2, 12, 12))
    spec = hm.laplacian_kernel(size)
    out = hm.laplacian_filter(img, spec)
    for c in range(2):
        expected = spec.scale * filter_oracle(img[c], spec.weights)
        assert np.max(np.abs(out[c] - expected)) <= 1e-12


# --------------------------------------------------------------------------
# Gaussian blur
# --------------------------------------------------------------------------

def test_blur_preserves_flat_interior():
    out = hm.gaussian_blur(np.ones((1, 32, 32)), kernel_size=13, sigma=4.0)
    interior = out[0, 6:-6, 6:-6]
    assert np.allclose(interior, 1.0, atol=1e-12)


def test_blur_impulse_is_symmetric_normalized_gaussian():
    img = np.zeros((1, 31, 31))
    img[0, 15, 15] = 1.0
    out = hm.gaussian_blur(img, 13, 4.0)[0]
    assert abs(out.sum() - 1.0) <= 1e-9
    assert np.allclose(out, out[::-1, :], atol=1e-15)
    assert np.allclose(out, out[:, ::-1], atol=1e-15)
    assert np.allclose(out, out.T, atol=1e-15)


def test_blur_conserves_mass_of_interior_bump():
    tgt = hm.encode_targets([(32.0, 30.0, 2)], 64, 64, sigma=2.0)
    total_before = tgt.base.sum()
    total_after = hm.gaussian_blur(tgt.base, 13, 4.0).sum()
    assert abs(total_before - total_after) <= 1e-9


def test_blur_linearity():
    rng = np.random.default_rng(7)
    x = rng.uniform(0, 1, (1, 20, 20))
    y = rng.uniform(0, 1, (1, 20, 20))
    a, b = 1.7, -0.4
    lhs = hm.gaussian_blur(a * x + b * y, 13, 4.0)
    rhs = a * hm.gaussian_blur(x, 13, 4.0) + b * hm.gaussian_blur(y, 13, 4.0)
    assert np.max(np.abs(lhs - rhs)) <= 1e-9


def test_blur_rejects_even_kernel():
    with pytest.raises(ValueError):
        hm.gaussian_blur(np.ones((1, 8, 8)), kernel_size=12, sigma=4.0)


# --------------------------------------------------------------------------
# Target encoding
# --------------------------------------------------------------------------

def test_encode_integer_keypoint_closed_form():
    tgt = hm.encode_targets([(12.0, 20.0, 2)], 64, 64, sigma=2.0)
    assert tgt.base[0, 20, 12] == 1.0
    assert tgt.base[0, 20, 13] == pytest.approx(math.exp(-1.0 / 8.0), abs=1e-12)


def test_encode_invisible_channel_all_zero():
    tgt = hm.encode_targets([(12.0, 20.0, 0)], 64, 64, sigma=2.0)
    assert not tgt.base[0].any()
    assert not tgt.sharp[0].any()
    assert not tgt.smooth[0].any()


def test_encode_out_of_bounds_visible_keypoint_errors():
    with pytest.raises(ValueError):
        hm.encode_targets([(70.0, 20.0, 2)], 64, 64, sigma=2.0)


def test_encode_sharp_center_matches_convolution_oracle():
    sigma = 2.0
    tgt = hm.encode_targets([(30.0, 30.0, 2)], 64, 64, sigma=sigma)
    g1 = math.exp(-1.0 / (2 * sigma * sigma))
    assert tgt.sharp[0, 30, 30] == pytest.approx(4.0 - 4.0 * g1, abs=1e-12)
    spec = hm.laplacian_kernel(3)
    expected = spec.scale * filter_oracle(tgt.base[0], spec.weights)
    assert np.max(np.abs(tgt.sharp[0] - expected)) <= 1e-12


# --------------------------------------------------------------------------
# Decoding
# --------------------------------------------------------------------------

@pytest.mark.parametrize("mode", ["argmax_quarter_offset", "distribution_aware"])
def test_integer_roundtrip_exact(mode):
    tgt = hm.encode_targets([(12.0, 20.0, 2)], 64, 64, sigma=2.0)
    (x, y, score) = hm.decode_keypoints(tgt.base, mode=mode)[0]
    assert (x, y) == (12.0, 20.0)
    assert score == 1.0


def test_subpixel_distribution_aware():
    tgt = hm.encode_targets([(12.4, 20.0, 2)], 64, 64, sigma=2.0)
    (x, y, _) = hm.decode_keypoints(tgt.base, mode="distribution_aware")[0]
    assert abs(x - 12.4) <= 0.25
    assert abs(y - 20.0) <= 0.25


def test_tie_break_row_major():
    chan = np.zeros((1, 8, 8))
    chan[0, 2, 5] = 1.0
    chan[0, 6, 1] = 1.0
    (x, y, _) = hm.decode_keypoints(chan, mode="argmax_quarter_offset")[0]
    assert (y, x) == (2.0, 5.25) or (y, x) == (2.0, 4.75) or (y, x) == (2.0, 5.0)
    assert y == 2.0  # row-major winner


def test_all_zero_channel_flagged_invalid():
    out = hm.decode_keypoints(np.zeros((1, 8, 8)))
    assert np.array_equal(out[0], [0.0, 0.0, 0.0])


def test_roundtrip_error_bounds():
    rng = np.random.default_rng(42)
    errors = []
    for _ in range(100):
        x = rng.uniform(3.0, 61.0)
        y = rng.uniform(3.0, 61.0)
        tgt = hm.encode_targets([(x, y, 2)], 64, 64, sigma=2.0)
        (dx, dy, _) = hm.decode_keypoints(tgt.base, mode="distribution_aware")[0]
        errors.append(math.hypot(dx - x, dy - y))
    errors = np.asarray(errors)
    assert errors.max() <= 0.5
    assert errors.mean() <= 0.25
