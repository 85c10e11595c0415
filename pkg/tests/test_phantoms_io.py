"""Phantom generation and file-format round trips."""

import json

import numpy as np
import pytest

from voldiff.errors import CorruptFileError, InvalidParameterError, MissingMetadataError
from voldiff.field import DensityVolume, TransferFunction
from voldiff.fileio import (
    load_image_rgba,
    load_tf,
    load_volume,
    save_image,
    save_tf,
    save_volume,
)
from voldiff.phantoms import make_phantom
from voldiff.renderer import ImageRGBA


class TestPhantoms:
    def test_sphere_center_is_dense(self):
        vol = make_phantom("sphere", 17)
        assert vol.values[8, 8, 8] == pytest.approx(1.0)
        assert vol.values[0, 0, 0] == 0.0

    def test_deterministic_in_seed(self):
        a = make_phantom("blobs", 12, seed=7)
        b = make_phantom("blobs", 12, seed=7)
        np.testing.assert_array_equal(a.values, b.values)
        c = make_phantom("blobs", 12, seed=8)
        assert np.any(c.values != a.values)

    def test_values_in_unit_range(self):
        for kind in ("sphere", "shells", "blobs", "asymmetric"):
            vol = make_phantom(kind, 12, seed=1)
            assert vol.values.min() >= 0.0 and vol.values.max() <= 1.0

    def test_asymmetric_differs_from_blobs(self):
        a = make_phantom("blobs", 12, seed=3)
        b = make_phantom("asymmetric", 12, seed=3)
        assert np.any(a.values != b.values)

    def test_unknown_kind(self):
        with pytest.raises(InvalidParameterError):
            make_phantom("torus", 8)


class TestVolumeIo:
    def test_round_trip_bit_identical(self, tmp_path, rng):
        values = rng.uniform(0, 1, (5, 6, 7)).astype(np.float32).astype(np.float64)
        vol = DensityVolume(values, [-1, -2, -3], [1, 2, 3])
        raw = save_volume(vol, tmp_path / "vol")
        back = load_volume(raw)
        np.testing.assert_array_equal(back.values, vol.values)
        np.testing.assert_array_equal(back.box_min, vol.box_min)
        first = raw.read_bytes()
        save_volume(back, tmp_path / "vol2")
        assert (tmp_path / "vol2.raw").read_bytes() == first

    def test_x_fastest_layout(self, tmp_path):
        values = np.arange(2 * 3 * 4, dtype=np.float64).reshape(2, 3, 4)
        save_volume(DensityVolume(values / 24.0), tmp_path / "v")
        blob = np.frombuffer((tmp_path / "v.raw").read_bytes(), dtype="<f4")
        # byte order: x varies fastest
        assert blob[0] == np.float32(values[0, 0, 0] / 24.0)
        assert blob[1] == np.float32(values[1, 0, 0] / 24.0)

    def test_size_mismatch_is_corrupt(self, tmp_path):
        vol = DensityVolume(np.zeros((4, 4, 4)))
        raw = save_volume(vol, tmp_path / "v")
        raw.write_bytes(raw.read_bytes()[:-4])
        with pytest.raises(CorruptFileError):
            load_volume(raw)

    def test_missing_sidecar(self, tmp_path):
        (tmp_path / "v.raw").write_bytes(b"\x00" * 16)
        with pytest.raises(MissingMetadataError):
            load_volume(tmp_path / "v.raw")

    def test_value_range_normalization(self, tmp_path):
        vol = DensityVolume(np.full((2, 2, 2), 2047.5) / 4095.0)
        save_volume(vol, tmp_path / "v")
        meta = json.loads((tmp_path / "v.json").read_text())
        # rescale the stored data to raw scanner counts and declare the range
        counts = (np.full((2, 2, 2), 2047.5)).astype("<f4")
        (tmp_path / "v.raw").write_bytes(counts.ravel(order="F").tobytes())
        meta["value_range"] = [0, 4095]
        (tmp_path / "v.json").write_text(json.dumps(meta))
        back = load_volume(tmp_path / "v")
        np.testing.assert_allclose(back.values, 2047.5 / 4095.0)


class TestImageIo:
    def test_transparent_over_white_is_all_255(self, tmp_path):
        img = ImageRGBA.zeros(3, 2)
        p = save_image(img, tmp_path / "img.ppm")
        data = p.read_bytes()
        header_end = data.index(b"255\n") + 4
        assert data[header_end:] == b"\xff" * (3 * 2 * 3)

    def test_one_pixel_red(self, tmp_path):
        img = ImageRGBA(np.array([[[1.0, 0.0, 0.0, 1.0]]]))
        p = save_image(img, tmp_path / "px.ppm")
        assert p.read_bytes().endswith(b"\xff\x00\x00")

    def test_raw_rgba_round_trip(self, tmp_path, rng):
        data = rng.uniform(0, 1, (4, 5, 4)).astype(np.float32).astype(np.float64)
        img = ImageRGBA(data)
        p = save_image(img, tmp_path / "img.rgba")
        back = load_image_rgba(p, width=5, height=4)
        np.testing.assert_array_equal(back.data, img.data)
        p2 = save_image(back, tmp_path / "img2.rgba")
        assert p.read_bytes() == p2.read_bytes()

    def test_quantization_error_bounded(self, tmp_path, rng):
        data = np.zeros((6, 6, 4))
        data[..., :3] = rng.uniform(0, 1, (6, 6, 3))
        data[..., 3] = 1.0  # opaque so rgb passes through over white
        img = ImageRGBA(data)
        p = save_image(img, tmp_path / "q.ppm")
        raw = p.read_bytes()
        pix = np.frombuffer(raw[raw.index(b"255\n") + 4:], dtype=np.uint8)
        got = pix.reshape(6, 6, 3) / 255.0
        assert np.max(np.abs(got - data[..., :3])) <= 0.5 / 255.0 + 1e-9


class TestTfIo:
    def test_round_trip(self, tmp_path, rng):
        tf = TransferFunction(rng.uniform(0, 2, (5, 4)))
        p = save_tf(tf, tmp_path / "tf.json")
        back = load_tf(p)
        np.testing.assert_array_equal(back.texels, tf.texels)

    def test_missing_file(self, tmp_path):
        with pytest.raises(MissingMetadataError):
            load_tf(tmp_path / "nope.json")
