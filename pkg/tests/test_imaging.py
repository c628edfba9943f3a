import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from chitnet.imaging import (ImageValidationError, crop_patches, invert, list_pairs, load_dataset,
                             load_gray, make_dual_input, save_gray, validate_gray)

unit_images = arrays(np.float64, st.tuples(st.integers(1, 12), st.integers(1, 12)),
                     elements=st.floats(0.0, 1.0, allow_nan=False))


def _write(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)
    return path


class TestLoadGray:
    def test_8bit_bounds(self, tmp_path):
        arr = np.array([[0, 255], [255, 0]], dtype=np.uint8)
        img = load_gray(_write(tmp_path / "a.png", arr))
        assert img[0, 1] == 1.0 and img[0, 0] == 0.0
        assert img.dtype == np.float64

    def test_white_rgb(self, tmp_path):
        arr = np.full((2, 2, 3), 255, dtype=np.uint8)
        np.testing.assert_array_equal(load_gray(_write(tmp_path / "w.png", arr)), np.ones((2, 2)))

    def test_luminance_weights(self, tmp_path):
        arr = np.zeros((1, 3, 3), dtype=np.uint8)
        arr[0, 0, 0] = arr[0, 1, 1] = arr[0, 2, 2] = 255
        img = load_gray(_write(tmp_path / "rgb.png", arr))
        np.testing.assert_allclose(img[0], [0.299, 0.587, 0.114], atol=1e-12)

    def test_16bit(self, tmp_path):
        arr = np.array([[0, 65535]], dtype=np.uint16)
        img = load_gray(_write(tmp_path / "d.png", arr))
        np.testing.assert_allclose(img, [[0.0, 1.0]])

    @pytest.mark.parametrize("suffix", [".bmp", ".jpg"])
    def test_other_formats(self, tmp_path, suffix):
        arr = np.full((4, 4), 128, dtype=np.uint8)
        img = load_gray(_write(tmp_path / f"x{suffix}", arr))
        np.testing.assert_allclose(img, 128 / 255, atol=2 / 255)

    def test_unreadable(self, tmp_path):
        bad = tmp_path / "bad.png"
        bad.write_bytes(b"not an image")
        with pytest.raises(OSError):
            load_gray(bad)
        with pytest.raises(OSError):
            load_gray(tmp_path / "missing.png")

    def test_validate(self):
        with pytest.raises(ImageValidationError):
            validate_gray(np.zeros((0, 4)))
        with pytest.raises(ImageValidationError):
            validate_gray(np.zeros((4, 4)), min_size=8)
        with pytest.raises(ImageValidationError):
            validate_gray(np.full((8, 8), 1.5))
        validate_gray(np.zeros((8, 8)), min_size=8)


@settings(max_examples=50, deadline=None)
@given(unit_images)
def test_png_round_trip_within_quantisation(tmp_path_factory, img):
    path = tmp_path_factory.mktemp("rt") / "img.png"
    save_gray(img, path)
    back = load_gray(path)
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 1 / 255


class TestInvert:
    def test_examples(self):
        assert invert(np.array([[0.3]]))[0, 0] == pytest.approx(0.7, abs=1e-15)
        np.testing.assert_array_equal(invert(np.zeros((3, 3))), np.ones((3, 3)))

    @given(arrays(np.float64, (6, 6), elements=st.integers(0, 2**53).map(lambda k: k / 2**53)))
    def test_involution_exact_on_dyadic_grid(self, img):
        np.testing.assert_array_equal(invert(invert(img)), img)

    def test_involution_on_8bit_values_within_one_ulp(self):
        img = np.arange(256, dtype=np.float64).reshape(16, 16) / 255.0
        assert np.max(np.abs(invert(invert(img)) - img)) <= np.finfo(np.float64).eps / 2


class TestDualInput:
    def test_constant_half(self):
        d = make_dual_input(np.full((4, 4), 0.5))
        np.testing.assert_array_equal(d, np.full((2, 4, 4), 0.5))

    def test_zeros(self):
        d = make_dual_input(np.zeros((3, 5)))
        np.testing.assert_array_equal(d[0], 0.0)
        np.testing.assert_array_equal(d[1], 1.0)

    @given(unit_images)
    def test_channels_complementary(self, img):
        d = make_dual_input(img)
        assert d.shape == (2, *img.shape)
        assert np.max(np.abs(d[1] - (1.0 - d[0]))) == 0.0
        np.testing.assert_allclose(d[0] + d[1], 1.0, atol=1e-15)


class TestCropPatches:
    def test_single_valid_offset(self, rng):
        ir, vis = rng.random((120, 120)), rng.random((120, 120))
        (p,) = crop_patches(ir, vis, 120, 1, seed=3)
        assert p.offset == (0, 0)
        np.testing.assert_array_equal(p.ir_raw, ir)

    def test_deterministic(self, rng):
        ir, vis = rng.random((50, 60)), rng.random((50, 60))
        a = [p.offset for p in crop_patches(ir, vis, 16, 20, seed=9)]
        b = [p.offset for p in crop_patches(ir, vis, 16, 20, seed=9)]
        c = [p.offset for p in crop_patches(ir, vis, 16, 20, seed=10)]
        assert a == b and a != c

    def test_offsets_and_alignment_exhaustive(self, rng):
        ir, vis = rng.random((240, 240)), rng.random((240, 240))
        pairs = crop_patches(ir, vis, 120, 1000, seed=7, source_id="s")
        assert len(pairs) == 1000
        for p in pairs:
            r, c = p.offset
            assert 0 <= r <= 120 and 0 <= c <= 120
            np.testing.assert_array_equal(p.ir_raw, ir[r:r + 120, c:c + 120])
            np.testing.assert_array_equal(p.vis_raw, vis[r:r + 120, c:c + 120])
            np.testing.assert_array_equal(p.ir_patch[0], p.ir_raw)
            np.testing.assert_array_equal(p.vis_patch[1], 1.0 - p.vis_raw)
            assert p.source_id == "s"
        # with replacement over 121*121 offsets: both extremes reachable
        assert len({p.offset for p in pairs}) > 900

    def test_too_small(self, rng):
        with pytest.raises(ImageValidationError):
            crop_patches(rng.random((100, 200)), rng.random((100, 200)), 120, 1, 0)
        with pytest.raises(ImageValidationError):
            crop_patches(rng.random((130, 130)), rng.random((130, 130)), 120, 0, 0)


class TestDatasetLayout:
    def test_matched(self, tmp_path, rng):
        for sub in ("ir", "vis"):
            for name in ("a.png", "b.png"):
                save_gray(rng.random((9, 9)), tmp_path / sub / name)
        assert [n for n, _, _ in list_pairs(tmp_path)] == ["a.png", "b.png"]
        assert len(load_dataset(tmp_path)) == 2

    def test_unmatched_is_error(self, tmp_path, rng):
        save_gray(rng.random((9, 9)), tmp_path / "ir" / "a.png")
        save_gray(rng.random((9, 9)), tmp_path / "vis" / "b.png")
        with pytest.raises(ImageValidationError, match="unmatched"):
            list_pairs(tmp_path)
