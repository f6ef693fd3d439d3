import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvface.imagecore import (
    EmptyImageError,
    GrayImage,
    ImageReadError,
    NoiseSpec,
    UnsupportedFormatError,
    add_gaussian_noise,
    box_sum,
    integral_image,
    load_image,
    mean_filter,
    save_pgm,
)
from oracles import box_sum_loops, integral_loops, mean_filter_loops

unit_images = arrays(
    np.float64,
    st.tuples(st.integers(1, 12), st.integers(1, 12)),
    elements=st.floats(0.0, 1.0, allow_nan=False),
)


def test_gray_image_clips_and_freezes():
    img = GrayImage(np.array([[-0.5, 0.25], [1.5, 1.0]]))
    np.testing.assert_array_equal(img.data, [[0.0, 0.25], [1.0, 1.0]])
    assert not img.data.flags.writeable
    assert (img.width, img.height) == (2, 2)


@pytest.mark.parametrize("bad", [np.zeros((0, 3)), np.zeros(4), np.array([[np.nan]])])
def test_gray_image_rejects_bad_arrays(bad):
    with pytest.raises(ValueError):
        GrayImage(bad)


def test_integral_image_small_cases():
    assert integral_image(GrayImage(np.ones((2, 2)))).at(1, 1) == 4.0
    assert integral_image(GrayImage(np.array([[0.5]]))).at(0, 0) == 0.5


def test_integral_image_3x3_ones():
    ii = integral_image(GrayImage(np.ones((3, 3))))
    assert ii.at(2, 2) == 9.0
    assert ii.at(0, 0) == 1.0
    assert ii.at(1, 2) == 6.0


def test_box_sum_hand_cases():
    ii = integral_image(GrayImage(np.ones((3, 3))))
    assert box_sum(ii, 1, 1, 2, 2) == 4.0
    a = np.arange(16.0).reshape(4, 4) / 16.0
    ii = integral_image(GrayImage(a))
    assert box_sum(ii, 2, 1, 2, 1) == pytest.approx(a[1, 2], abs=1e-15)


def test_box_sum_out_of_bounds():
    ii = integral_image(GrayImage(np.ones((3, 3))))
    with pytest.raises(IndexError):
        box_sum(ii, 0, 0, 3, 1)
    with pytest.raises(IndexError):
        box_sum(ii, 2, 0, 1, 1)


def test_integral_and_box_sum_match_loops_on_random_images():
    rng = np.random.default_rng(1)
    for _ in range(100):
        h, w = rng.integers(1, 10, size=2)
        a = rng.random((h, w))
        ii = integral_image(GrayImage(a))
        np.testing.assert_allclose(ii.table, integral_loops(a), rtol=0, atol=1e-12)
        x0, x1 = sorted(rng.integers(0, w, size=2))
        y0, y1 = sorted(rng.integers(0, h, size=2))
        assert box_sum(ii, x0, y0, x1, y1) == pytest.approx(box_sum_loops(a, x0, y0, x1, y1), abs=1e-12)


@settings(max_examples=50, deadline=None)
@given(unit_images)
def test_box_sum_of_whole_image_is_total(a):
    ii = integral_image(GrayImage(a))
    h, w = a.shape
    assert box_sum(ii, 0, 0, w - 1, h - 1) == pytest.approx(a.sum(), abs=1e-9)


def test_noise_zero_variance_is_identity():
    img = GrayImage(np.random.default_rng(0).random((8, 8)))
    out = add_gaussian_noise(img, NoiseSpec(0.0, seed=5))
    assert out == img
    np.testing.assert_array_equal(out.data, img.data)


def test_noise_statistics_on_mid_gray():
    img = GrayImage(np.full((256, 256), 0.5))
    out = add_gaussian_noise(img, NoiseSpec(0.01, seed=3))
    d = out.data - img.data
    assert abs(d.mean()) < 0.002
    assert abs(d.var() - 0.01) < 0.15 * 0.01


def test_noise_is_seeded_and_clamped():
    img = GrayImage(np.full((32, 32), 0.95))
    a = add_gaussian_noise(img, NoiseSpec(0.05, seed=9))
    b = add_gaussian_noise(img, NoiseSpec(0.05, seed=9))
    c = add_gaussian_noise(img, NoiseSpec(0.05, seed=10))
    assert a == b and a != c
    assert a.data.max() <= 1.0 and a.data.min() >= 0.0


def test_noise_spec_validation():
    with pytest.raises(ValueError):
        NoiseSpec(-0.1)
    with pytest.raises(ValueError):
        NoiseSpec(0.1, seed=-1)


def test_mean_filter_hand_cases():
    const = GrayImage(np.full((5, 5), 0.3))
    np.testing.assert_allclose(mean_filter(const, 3).data, 0.3, atol=1e-15)
    spike = np.zeros((5, 5))
    spike[2, 2] = 1.0
    out = mean_filter(GrayImage(spike), 3).data
    expected = np.zeros((5, 5))
    expected[1:4, 1:4] = 1.0 / 9.0
    np.testing.assert_allclose(out, expected, rtol=0, atol=1e-15)
    img = GrayImage(np.random.default_rng(2).random((6, 7)))
    assert mean_filter(img, 1) == img


@pytest.mark.parametrize("k", [0, 2, -3, 4])
def test_mean_filter_rejects_even_or_nonpositive(k):
    with pytest.raises(ValueError):
        mean_filter(GrayImage(np.zeros((4, 4))), k)


def test_mean_filter_matches_loops_on_random_images():
    rng = np.random.default_rng(4)
    for _ in range(100):
        h, w = rng.integers(1, 9, size=2)
        k = int(rng.choice([1, 3, 5]))
        a = rng.random((h, w))
        np.testing.assert_allclose(mean_filter(GrayImage(a), k).data, mean_filter_loops(a, k), rtol=0, atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(unit_images)
def test_mean_filter_stays_in_input_range(a):
    out = mean_filter(GrayImage(a), 3).data
    assert out.min() >= a.min() and out.max() <= a.max()


def test_mean_filter_reduces_noise_mse():
    rng = np.random.default_rng(0)
    clean = GrayImage(np.full((64, 64), 0.5))
    noisy = add_gaussian_noise(clean, NoiseSpec(0.01, seed=int(rng.integers(1 << 32))))
    before = np.mean((noisy.data - clean.data) ** 2)
    after = np.mean((mean_filter(noisy, 3).data - clean.data) ** 2)
    assert after < before


def test_pgm_roundtrip(tmp_path):
    a = np.arange(12, dtype=np.uint8).reshape(3, 4) * 20
    path = tmp_path / "x.pgm"
    save_pgm(GrayImage(a / 255.0), path)
    assert path.read_bytes().startswith(b"P5\n4 3\n255\n")
    np.testing.assert_array_equal(np.rint(load_image(path).data * 255), a)


@pytest.mark.parametrize("byte,value", [(255, 1.0), (0, 0.0)])
def test_single_pixel_pgm(tmp_path, byte, value):
    path = tmp_path / "p.pgm"
    path.write_bytes(b"P5\n1 1\n255\n" + bytes([byte]))
    img = load_image(path)
    assert img.shape == (1, 1) and img.data[0, 0] == value


def test_pgm_with_comment(tmp_path):
    path = tmp_path / "c.pgm"
    path.write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([0, 255]))
    np.testing.assert_array_equal(load_image(path).data, [[0.0, 1.0]])


def test_png_gray_and_rgb(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[0, 255]], dtype=np.uint8), mode="L").save(tmp_path / "g.png")
    np.testing.assert_array_equal(load_image(tmp_path / "g.png").data, [[0.0, 1.0]])
    rgb = np.zeros((1, 1, 3), dtype=np.uint8)
    rgb[0, 0] = (255, 0, 0)
    Image.fromarray(rgb, mode="RGB").save(tmp_path / "c.png")
    assert load_image(tmp_path / "c.png").data[0, 0] == pytest.approx(0.299, abs=1e-12)


def test_load_errors(tmp_path):
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "missing.pgm")
    (tmp_path / "a.txt").write_bytes(b"hello")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "a.txt")
    (tmp_path / "p2.pgm").write_bytes(b"P2\n1 1\n255\n0\n")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "p2.pgm")
    (tmp_path / "wide.pgm").write_bytes(b"P5\n1 1\n65535\n\x00\x00")
    with pytest.raises(UnsupportedFormatError):
        load_image(tmp_path / "wide.pgm")
    (tmp_path / "empty.pgm").write_bytes(b"P5\n0 3\n255\n")
    with pytest.raises(EmptyImageError):
        load_image(tmp_path / "empty.pgm")
    (tmp_path / "short.pgm").write_bytes(b"P5\n4 4\n255\n\x00")
    with pytest.raises(ImageReadError):
        load_image(tmp_path / "short.pgm")
