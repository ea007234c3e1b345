import struct

import numpy as np
import pytest

from errors import ParseError
from formats import (CHECKPOINT_MAGIC, read_camera, read_checkpoint, read_pfm, read_ply, read_png,
                     write_camera, write_checkpoint, write_pfm, write_ply, write_png)

from conftest import make_cam


class TestPFM:
    def test_roundtrip_is_bit_exact(self, tmp_path, rng):
        depth = rng.uniform(0, 10, size=(5, 7)).astype(np.float32)
        write_pfm(tmp_path / "d.pfm", depth)
        np.testing.assert_array_equal(read_pfm(tmp_path / "d.pfm"), depth)

    def test_big_endian_payload(self, tmp_path):
        depth = np.arange(6, dtype=np.float32).reshape(2, 3)
        (tmp_path / "be.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + np.flipud(depth).astype(">f4").tobytes())
        np.testing.assert_array_equal(read_pfm(tmp_path / "be.pfm"), depth)

    def test_colour_pfm_rejected(self, tmp_path):
        (tmp_path / "c.pfm").write_bytes(b"PF\n1 1\n-1.0\n" + bytes(12))
        with pytest.raises(ParseError) as e:
            read_pfm(tmp_path / "c.pfm")
        assert e.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        (tmp_path / "t.pfm").write_bytes(b"Pf\n2 2\n-1.0\n" + bytes(10))
        with pytest.raises(ParseError) as e:
            read_pfm(tmp_path / "t.pfm")
        assert e.value.offset == len(b"Pf\n2 2\n-1.0\n")

    def test_malformed_dimensions(self, tmp_path):
        (tmp_path / "m.pfm").write_bytes(b"Pf\ntwo 2\n-1.0\n")
        with pytest.raises(ParseError):
            read_pfm(tmp_path / "m.pfm")


class TestPNG:
    def test_8bit_values_roundtrip(self, tmp_path, rng):
        image = rng.integers(0, 256, size=(4, 6, 3)) / 255.0
        write_png(tmp_path / "i.png", image)
        np.testing.assert_array_equal(read_png(tmp_path / "i.png"), image)

    def test_garbage_rejected(self, tmp_path):
        (tmp_path / "bad.png").write_bytes(b"not a png")
        with pytest.raises(ParseError):
            read_png(tmp_path / "bad.png")


class TestCameraText:
    def test_roundtrip(self, tmp_path):
        cam = make_cam(center=(0.3, -0.2, -3.7), size=16)
        write_camera(tmp_path / "c.txt", cam, 2.5, 0.125)
        record = read_camera(tmp_path / "c.txt", 16, 16)
        np.testing.assert_array_equal(record.camera.R, cam.R)
        np.testing.assert_array_equal(record.camera.t, cam.t)
        np.testing.assert_array_equal(record.camera.K, cam.K)
        assert (record.d_min, record.d_interval) == (2.5, 0.125)

    def test_short_decimals_are_snapped_to_a_rotation(self, tmp_path):
        c, s = round(np.cos(0.3), 6), round(np.sin(0.3), 6)
        text = (f"extrinsic\n{c} 0 {s} 0\n0 1 0 0\n{-s} 0 {c} 4\n0 0 0 1\n\n"
                "intrinsic\n16 0 7.5\n0 16 7.5\n0 0 1\n\n1 0.1\n")
        (tmp_path / "c.txt").write_text(text)
        R = read_camera(tmp_path / "c.txt", 16, 16).camera.R
        np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)

    def test_missing_header(self, tmp_path):
        (tmp_path / "c.txt").write_text("intrinsic\n")
        with pytest.raises(ParseError):
            read_camera(tmp_path / "c.txt", 16, 16)

    def test_non_numeric_row_reports_offset(self, tmp_path):
        text = "extrinsic\n1 0 0 0\n0 1 0 x\n0 0 1 0\n0 0 0 1\n"
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(ParseError) as e:
            read_camera(tmp_path / "c.txt", 16, 16)
        assert e.value.offset == text.index("0 1 0 x")

    def test_reflection_rejected(self, tmp_path):
        text = ("extrinsic\n1 0 0 0\n0 1 0 0\n0 0 -1 0\n0 0 0 1\n\n"
                "intrinsic\n16 0 7.5\n0 16 7.5\n0 0 1\n\n1 0.1\n")
        (tmp_path / "c.txt").write_text(text)
        with pytest.raises(ParseError):
            read_camera(tmp_path / "c.txt", 16, 16)


class TestPLY:
    def test_roundtrip(self, tmp_path, rng):
        points = rng.normal(size=(10, 3)).astype(np.float32)
        colors = rng.integers(0, 256, size=(10, 3)) / 255.0
        write_ply(tmp_path / "p.ply", points, colors)
        p, c = read_ply(tmp_path / "p.ply")
        np.testing.assert_array_equal(p, points)
        np.testing.assert_allclose(c, colors, atol=1e-12)

    def test_truncated_file(self, tmp_path, rng):
        write_ply(tmp_path / "p.ply", rng.normal(size=(10, 3)), np.zeros((10, 3)))
        data = (tmp_path / "p.ply").read_bytes()
        (tmp_path / "p.ply").write_bytes(data[:-20])
        with pytest.raises(ParseError):
            read_ply(tmp_path / "p.ply")


class TestCheckpoint:
    def test_roundtrip_preserves_order_and_values(self, tmp_path, rng):
        arrays = {"b.weight": rng.normal(size=(2, 3)).astype(np.float32),
                  "a.bias": rng.normal(size=(4,)).astype(np.float32),
                  "scalar": np.array(1.5, dtype=np.float32)}
        write_checkpoint(tmp_path / "c.bin", arrays)
        loaded = read_checkpoint(tmp_path / "c.bin")
        assert list(loaded) == list(arrays)
        for name, array in arrays.items():
            np.testing.assert_array_equal(loaded[name], array)

    def test_bad_magic(self, tmp_path):
        (tmp_path / "c.bin").write_bytes(b"NOTCKP")
        with pytest.raises(ParseError) as e:
            read_checkpoint(tmp_path / "c.bin")
        assert e.value.offset == 0

    def test_truncated_payload(self, tmp_path):
        name = b"w"
        data = CHECKPOINT_MAGIC + struct.pack("<I", 1) + name + struct.pack("<II", 1, 4) + bytes(8)
        (tmp_path / "c.bin").write_bytes(data)
        with pytest.raises(ParseError) as e:
            read_checkpoint(tmp_path / "c.bin")
        assert "payload" in e.value.message
