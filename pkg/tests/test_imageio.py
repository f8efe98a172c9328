"""PNG reading/writing: fixed value mapping and exact 8-bit round trips."""

import numpy as np
import pytest
from PIL import Image

from mtair.errors import ShapeError
from mtair.imageio import read_image, to_uint8, write_image


class TestReadImage:
    def test_rgb_scaling_and_shape(self, rng, tmp_path):
        arr = (rng.random((6, 9, 3)) * 255).astype(np.uint8)
        path = tmp_path / "img.png"
        Image.fromarray(arr).save(path)
        t = read_image(path)
        assert t.shape == (1, 6, 9, 3)
        assert t.dtype == np.float32
        np.testing.assert_array_equal(t.data[0], arr.astype(np.float32) / 255.0)

    def test_grayscale_promoted_to_rgb(self, rng, tmp_path):
        arr = (rng.random((5, 4)) * 255).astype(np.uint8)
        path = tmp_path / "gray.png"
        Image.fromarray(arr).save(path)
        t = read_image(path)
        assert t.shape == (1, 5, 4, 3)
        # all three channels carry the same values
        np.testing.assert_array_equal(t.data[..., 0], t.data[..., 1])
        np.testing.assert_array_equal(t.data[..., 0], t.data[..., 2])

    def test_sixteen_bit_png_scaled(self, tmp_path):
        arr = np.array([[0, 32768], [65535, 1000]], dtype=np.uint16)
        path = tmp_path / "deep.png"
        Image.fromarray(arr).save(path)
        t = read_image(path)
        assert t.shape == (1, 2, 2, 3)
        expect = (arr.astype(np.float64) / 65535.0).astype(np.float32)
        np.testing.assert_array_equal(t.data[..., 0], expect[None])

    def test_missing_file_raises_oserror(self, tmp_path):
        with pytest.raises(OSError):
            read_image(tmp_path / "absent.png")

    def test_non_image_raises_oserror(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"this is not a png")
        with pytest.raises(OSError):
            read_image(path)


class TestWriteImage:
    def test_eight_bit_round_trip_is_exact(self, rng, tmp_path):
        arr = (rng.random((7, 5, 3)) * 255).astype(np.uint8)
        src = tmp_path / "src.png"
        dst = tmp_path / "dst.png"
        Image.fromarray(arr).save(src)
        write_image(dst, read_image(src))
        with Image.open(dst) as im:
            np.testing.assert_array_equal(np.asarray(im), arr)

    def test_values_clipped_and_rounded(self, tmp_path):
        img = np.array(
            [[[-0.2, 0.0, 0.5], [1.0, 1.7, 0.998]]], dtype=np.float32
        )[None]
        dst = tmp_path / "c.png"
        write_image(dst, img)
        with Image.open(dst) as im:
            got = np.asarray(im)
        np.testing.assert_array_equal(got[0], [[0, 0, 128], [255, 255, 254]])

    def test_single_channel_written_as_grayscale(self, rng, tmp_path):
        img = rng.random((1, 4, 6, 1)).astype(np.float32)
        dst = tmp_path / "g.png"
        write_image(dst, img)
        with Image.open(dst) as back:
            assert back.mode == "L"
            assert back.size == (6, 4)

    def test_unwritable_path_raises_oserror(self, rng):
        with pytest.raises(OSError):
            write_image("/no/such/dir/x.png", rng.random((1, 2, 2, 3)))


class TestToUint8:
    def test_batch_must_be_one(self, rng):
        with pytest.raises(ShapeError):
            to_uint8(rng.random((2, 4, 4, 3)))

    def test_channel_count_checked(self, rng):
        with pytest.raises(ShapeError):
            to_uint8(rng.random((4, 4, 2)))

    def test_quantization_ties_to_even(self):
        # values landing exactly on n + 0.5 of the 255 scale round to even
        vals = np.array([[[0.0, 1.0 / 510.0, 3.0 / 510.0]]], dtype=np.float64)
        out = to_uint8(vals)
        assert out.dtype == np.uint8
        np.testing.assert_array_equal(out, [[[0, 0, 2]]])
