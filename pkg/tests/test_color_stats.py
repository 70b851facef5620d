import colorsys

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fidelity_lab.color_stats import (
    compute_stats,
    delta_sat,
    hsv_to_rgb,
    mean_saturation,
    rgb_to_hsv,
)
from fidelity_lab.dataset_builder import scale_saturation

unit = st.floats(0.0, 1.0)


def test_rgb_to_hsv_examples():
    assert rgb_to_hsv(1, 0, 0) == (0.0, 1.0, 1.0)
    assert rgb_to_hsv(0.5, 0.5, 0.5) == (0.0, 0.0, 0.5)
    h, s, v = rgb_to_hsv(0.2, 0.4, 0.6)
    assert h == pytest.approx(210.0)
    assert s == pytest.approx(0.6667, abs=1e-4)
    assert v == pytest.approx(0.6)


def test_rgb_to_hsv_rejects_out_of_range():
    with pytest.raises(ValueError):
        rgb_to_hsv(1.2, 0, 0)


@settings(max_examples=200, deadline=None)
@given(unit, unit, unit)
def test_matches_colorsys(r, g, b):
    h, s, v = rgb_to_hsv(r, g, b)
    ch, cs, cv = colorsys.rgb_to_hsv(r, g, b)
    assert s == pytest.approx(cs, abs=1e-12)
    assert v == pytest.approx(cv, abs=1e-12)
    if s > 1e-9:
        assert min(abs(h - 360 * ch), 360 - abs(h - 360 * ch)) < 1e-6


@settings(max_examples=200, deadline=None)
@given(st.floats(0.0, 359.999), st.floats(1e-3, 1.0), st.floats(1e-3, 1.0))
def test_hsv_round_trip(h, s, v):
    r, g, b = hsv_to_rgb(h, s, v)
    h2, s2, v2 = rgb_to_hsv(r, g, b)
    np.testing.assert_allclose(hsv_to_rgb(h2, s2, v2), (r, g, b), atol=1e-9)
    assert s2 == pytest.approx(s, abs=1e-9)
    assert v2 == pytest.approx(v, abs=1e-9)
    assert min(abs(h2 - h), 360 - abs(h2 - h)) < 1e-6


def test_compute_stats_examples():
    gray = np.full((4, 5, 3), 0.4)
    st_ = compute_stats(gray)
    assert st_.mean_saturation == 0.0 and st_.rms_contrast == 0.0
    assert st_.saturation_histogram.sum() == 20

    half = np.zeros((2, 2, 3))
    half[0, :, 0] = 1.0
    half[1, :, 2] = 1.0
    assert compute_stats(half).mean_saturation == 1.0

    two = np.array([[[1.0, 0.0, 0.0]], [[0.5, 0.5, 0.5]]])
    assert compute_stats(two).mean_saturation == pytest.approx(0.5)


def test_rms_contrast_is_population_std_of_luma():
    rng = np.random.default_rng(0)
    img = rng.random((6, 7, 3))
    luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    assert compute_stats(img).rms_contrast == pytest.approx(float(np.sqrt(np.mean((luma - luma.mean()) ** 2))))


def test_compute_stats_validates():
    with pytest.raises(ValueError):
        compute_stats(np.full((2, 2, 3), 1.5))
    with pytest.raises(ValueError):
        compute_stats(np.zeros((2, 2)))


def test_mean_saturation_permutation_invariant():
    rng = np.random.default_rng(3)
    img = rng.random((8, 8, 3))
    flat = img.reshape(-1, 3)[rng.permutation(64)].reshape(8, 8, 3)
    assert mean_saturation(flat) == pytest.approx(mean_saturation(img), abs=1e-15)


def test_saturation_gain_increases_mean_saturation():
    rng = np.random.default_rng(4)
    img = 0.3 + 0.4 * rng.random((8, 8, 3))
    prev = mean_saturation(img)
    for g in (1.1, 1.3, 1.6):
        cur = mean_saturation(scale_saturation(img, g))
        assert cur > prev
        prev = cur


def test_delta_sat_examples():
    a = np.array([[[1.0, 0.67, 0.67]]])  # s = 0.33
    assert delta_sat([a]) == pytest.approx(0.0, abs=1e-12)
    b = np.array([[[1.0, 0.52, 0.52]]])  # s = 0.48
    assert delta_sat([b]) == pytest.approx(0.15, abs=1e-12)
    c = np.array([[[1.0, 0.6, 0.6]]])  # s = 0.40
    assert delta_sat([c]) == pytest.approx(0.07, abs=1e-12)
    # pooled over pixels of all images
    assert delta_sat([a, c]) == pytest.approx(abs((0.33 + 0.40) / 2 - 0.33), abs=1e-12)


def test_delta_sat_zero_iff_reference():
    img = np.array([[[1.0, 0.5, 0.5]]])
    assert delta_sat([img], 0.5) == 0.0
    assert delta_sat([img], 0.4) > 0.0


def test_delta_sat_empty():
    with pytest.raises(ValueError):
        delta_sat([])
