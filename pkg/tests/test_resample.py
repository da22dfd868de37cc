import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hvar import tensor as T
from hvar.resample import (DegradationClass, DegradationConfig, Image, degrade, gaussian_blur,
                           interpolate, resize_matrix)


def _bilinear_scalar(values, n_out):
    """Per-pixel evaluation of half-pixel-centre linear interpolation with edge clamping."""
    n_in = len(values)
    out = []
    for j in range(n_out):
        x = (j + 0.5) * n_in / n_out - 0.5
        x = min(max(x, 0.0), n_in - 1)
        i0 = int(np.floor(x))
        i1 = min(i0 + 1, n_in - 1)
        t = x - i0
        out.append(values[i0] * (1 - t) + values[i1] * t)
    return np.array(out)


def test_identity_size_is_bit_identical_copy(rng):
    x = rng.random((3, 5, 7))
    y = interpolate(x, 5, 7)
    np.testing.assert_array_equal(x, y)
    assert y is not x


def test_area_downsample_row():
    row = np.array([[1.0, 2.0, 3.0, 4.0]])
    np.testing.assert_allclose(interpolate(row, 1, 2, "area"), [[1.5, 3.5]])


def test_bilinear_upsample_matches_scalar_formula():
    # oracle values for [1, 3] -> 4: sample points -0.25, 0.25, 0.75, 1.25 clamped to [0, 1]
    oracle = _bilinear_scalar([1.0, 3.0], 4)
    np.testing.assert_allclose(oracle, [1.0, 1.5, 2.5, 3.0])
    out = interpolate(np.array([[1.0, 3.0]]), 1, 4, "bilinear")
    np.testing.assert_allclose(out[0], oracle, atol=1e-15)


def test_nearest_picks_containing_pixel():
    row = np.array([[10.0, 20.0, 30.0]])
    np.testing.assert_array_equal(interpolate(row, 1, 6, "nearest")[0], [10, 10, 20, 20, 30, 30])


def test_default_modes():
    np.testing.assert_array_equal(interpolate(np.array([[1.0, 2.0, 3.0, 4.0]]), 1, 2),
                                  [[1.5, 3.5]])
    np.testing.assert_allclose(interpolate(np.array([[1.0, 3.0]]), 1, 4)[0], [1.0, 1.5, 2.5, 3.0])


@settings(max_examples=40, deadline=None)
@given(n_in=st.integers(1, 20), n_out=st.integers(1, 20),
       mode=st.sampled_from(["bilinear", "area", "nearest"]))
def test_resize_rows_are_partitions_of_unity(n_in, n_out, mode):
    m = resize_matrix(n_in, n_out, mode)
    assert m.shape == (n_out, n_in)
    assert np.all(m >= 0)
    np.testing.assert_allclose(m.sum(axis=1), 1.0, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(h=st.integers(1, 12), w=st.integers(1, 12), th=st.integers(1, 12), tw=st.integers(1, 12),
       value=st.floats(-5, 5))
def test_constant_round_trip_is_identity(h, w, th, tw, value):
    x = np.full((2, h, w), value)
    y = interpolate(interpolate(x, th, tw), h, w, "bilinear")
    np.testing.assert_allclose(y, x, atol=1e-9)


@settings(max_examples=30, deadline=None)
@given(factor=st.integers(1, 4), h=st.integers(1, 6), w=st.integers(1, 6), seed=st.integers(0, 10**6))
def test_area_preserves_mean(factor, h, w, seed):
    x = np.random.default_rng(seed).random((3, h * factor, w * factor))
    y = interpolate(x, h, w, "area")
    assert abs(y.mean() - x.mean()) < 1e-9


def test_tensor_input_stays_on_tape(rng):
    t = T.Tensor(rng.random((1, 2, 4, 4)), requires_grad=True)
    out = interpolate(t, 2, 2)
    assert isinstance(out, T.Tensor)
    T.tsum(out).backward()
    np.testing.assert_allclose(t.grad, 0.25)


def test_image_clamps_and_validates():
    img = Image(np.array([[[-0.5, 1.5]]] * 3))
    assert img.pixels.min() == 0.0 and img.pixels.max() == 1.0
    with pytest.raises(ValueError):
        Image(np.zeros((1, 4, 4)))


def test_degrade_bilinear_branch(rng):
    hr = Image(rng.random((3, 16, 16)))
    cfg = DegradationConfig(bilinear_only_prob=1.0)
    lr, cls = degrade(hr, cfg, seed=3)
    assert cls == DegradationClass.NON_DEGRADED
    np.testing.assert_array_equal(lr.pixels, interpolate(hr, 4, 4, "bilinear").pixels)


def test_degrade_degenerate_pipeline_is_area(rng):
    hr = Image(rng.random((3, 16, 16)))
    cfg = DegradationConfig(blur_sigma=(0.0, 0.0), noise_sigma=(0.0, 0.0), bilinear_only_prob=0.0)
    lr, cls = degrade(hr, cfg, seed=5)
    assert cls == DegradationClass.DEGRADED
    np.testing.assert_array_equal(lr.pixels, interpolate(hr, 4, 4, "area").pixels)


def test_degrade_is_deterministic_and_seed_dependent(rng):
    hr = Image(rng.random((3, 16, 16)))
    cfg = DegradationConfig(bilinear_only_prob=0.0)
    a, _ = degrade(hr, cfg, seed=11)
    b, _ = degrade(hr, cfg, seed=11)
    c, _ = degrade(hr, cfg, seed=12)
    np.testing.assert_array_equal(a.pixels, b.pixels)
    assert not np.array_equal(a.pixels, c.pixels)


def test_degrade_rejects_indivisible_size():
    with pytest.raises(ValueError):
        degrade(Image(np.zeros((3, 10, 10))), DegradationConfig())


def test_degradation_config_validation():
    with pytest.raises(ValueError):
        DegradationConfig(factor=0)
    with pytest.raises(ValueError):
        DegradationConfig(bilinear_only_prob=1.5)
    with pytest.raises(ValueError):
        DegradationConfig(blur_sigma=(2.0, 1.0))
    assert len(DegradationClass) == 3


def test_gaussian_blur_preserves_constants():
    x = np.full((3, 8, 8), 0.7)
    np.testing.assert_allclose(gaussian_blur(x, 1.3), x, atol=1e-12)
    np.testing.assert_array_equal(gaussian_blur(x, 0.0), x)
