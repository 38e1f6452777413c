"""PPM/PGM round trips, byte-offset error reporting, palette, weights file."""

import numpy as np
import pytest

from groupseg.errors import ConfigError, ImageFormatError
from groupseg.imageio import (colorize_labels, label_color, read_pgm16, read_ppm,
                              write_pgm16, write_ppm)
from groupseg.tensor import Rng, Tensor
from groupseg.weights import load_weights, read_weights, save_weights


class TestPPM:
    def test_roundtrip(self, tmp_path):
        img = Rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
        p = tmp_path / "a.ppm"
        write_ppm(str(p), img)
        assert np.array_equal(read_ppm(str(p)), img)

    def test_comments_and_whitespace(self, tmp_path):
        p = tmp_path / "c.ppm"
        raster = bytes(range(12))
        p.write_bytes(b"P6 # magic\n# a comment line\n 2 2 # dims\n255\n" + raster)
        img = read_ppm(str(p))
        assert img.shape == (2, 2, 3)
        assert img.tobytes() == raster

    def test_bad_magic_offset_zero(self, tmp_path):
        p = tmp_path / "bad.ppm"
        p.write_bytes(b"P5\n2 2\n255\n" + bytes(12))
        with pytest.raises(ImageFormatError) as e:
            read_ppm(str(p))
        assert e.value.offset == 0

    def test_truncated_raster_offset(self, tmp_path):
        p = tmp_path / "t.ppm"
        p.write_bytes(b"P6\n2 2\n255\n" + bytes(5))
        with pytest.raises(ImageFormatError) as e:
            read_ppm(str(p))
        assert e.value.offset == len(b"P6\n2 2\n255\n") + 5

    def test_bad_dims_token(self, tmp_path):
        p = tmp_path / "d.ppm"
        p.write_bytes(b"P6\nxx 2\n255\n")
        with pytest.raises(ImageFormatError) as e:
            read_ppm(str(p))
        assert e.value.offset == 3


class TestPGM16:
    def test_roundtrip(self, tmp_path):
        labels = Rng(1).integers(0, 65536, (6, 4)).astype(np.uint16)
        p = tmp_path / "l.pgm"
        write_pgm16(str(p), labels)
        assert np.array_equal(read_pgm16(str(p)), labels)

    def test_big_endian_on_disk(self, tmp_path):
        p = tmp_path / "be.pgm"
        write_pgm16(str(p), np.array([[0x0102]], dtype=np.uint16))
        raw = p.read_bytes()
        assert raw.endswith(b"\x01\x02")

    def test_rejects_maxval_255(self, tmp_path):
        p = tmp_path / "m.pgm"
        p.write_bytes(b"P5\n1 1\n255\n\x00")
        with pytest.raises(ImageFormatError):
            read_pgm16(str(p))


class TestPAM2:
    def test_roundtrip(self, tmp_path):
        from groupseg.imageio import read_pam2_16, write_pam2_16
        rng = Rng(9)
        a = rng.integers(0, 65536, (4, 6)).astype(np.uint16)
        b = rng.integers(0, 65536, (4, 6)).astype(np.uint16)
        p = tmp_path / "pan.pam"
        write_pam2_16(str(p), a, b)
        a2, b2 = read_pam2_16(str(p))
        assert np.array_equal(a, a2) and np.array_equal(b, b2)

    def test_panoptic_map_helper(self, tmp_path):
        from groupseg.heads import save_panoptic_map
        from groupseg.imageio import read_pam2_16
        p = tmp_path / "pan.pam"
        save_panoptic_map(str(p), np.arange(16), np.arange(16)[::-1], 4, 4)
        cls, inst = read_pam2_16(str(p))
        assert np.array_equal(cls, np.arange(16).reshape(4, 4))
        assert np.array_equal(inst, np.arange(16)[::-1].reshape(4, 4))


class TestSegmentMapIO:
    def test_roundtrip_with_sidecar(self, tmp_path):
        import json
        from groupseg.assignment import SegmentMap, load_segment_map, save_segment_map
        labels = Rng(10).integers(0, 9, (8, 8))
        seg = SegmentMap(labels, 9, 3)
        p = tmp_path / "seg.pgm"
        save_segment_map(str(p), seg)
        meta = json.loads((tmp_path / "seg.pgm.json").read_text())
        assert meta == {"stage": 3, "n_segments": 9, "geometry": [8, 8]}
        back = load_segment_map(str(p))
        assert np.array_equal(back.labels, labels)
        assert back.stage == 3 and back.n_segments == 9


class TestPalette:
    def test_golden_ratio_hue_walk(self):
        import colorsys
        for l in (1, 2, 9):
            hue = (l * 0.6180339887) % 1.0
            r, g, b = colorsys.hsv_to_rgb(hue, 0.65, 0.95)
            assert label_color(l) == (round(r * 255), round(g * 255), round(b * 255))

    def test_zero_gray_in_background_contexts(self):
        assert label_color(0, zero_gray=True) == (128, 128, 128)
        assert label_color(0, zero_gray=False) != (128, 128, 128)

    def test_colorize_shape(self):
        img = colorize_labels(np.array([[0, 1], [2, 3]]))
        assert img.shape == (2, 2, 3) and img.dtype == np.uint8


class TestWeights:
    def test_roundtrip_bit_exact(self, tmp_path):
        rng = Rng(2)
        named = [("a.w", Tensor(rng.normal((3, 4)))),
                 ("b.scalar", Tensor(np.asarray(1.5))),
                 ("c.vec", Tensor(rng.normal((7,))))]
        path = tmp_path / "w.nsvt"
        save_weights(str(path), named)
        stored = read_weights(str(path))
        for name, t in named:
            assert np.array_equal(stored[name], t.data)
        fresh = [(n, Tensor(np.zeros_like(t.data))) for n, t in named]
        load_weights(str(path), fresh)
        for (_, a), (_, b) in zip(named, fresh):
            assert np.array_equal(a.data, b.data)

    def test_magic_and_manifest(self, tmp_path):
        import json
        path = tmp_path / "w.nsvt"
        save_weights(str(path), [("x", Tensor(np.ones((2, 2))))])
        assert path.read_bytes()[:4] == b"NSVT"
        manifest = json.loads((tmp_path / "w.nsvt.json").read_text())
        assert manifest == {"x": [2, 2]}

    def test_shape_mismatch_rejected(self, tmp_path):
        path = tmp_path / "w.nsvt"
        save_weights(str(path), [("x", Tensor(np.ones((2, 2))))])
        with pytest.raises(ConfigError):
            load_weights(str(path), [("x", Tensor(np.ones((2, 3))))])

    def test_missing_and_unexpected_rejected(self, tmp_path):
        path = tmp_path / "w.nsvt"
        save_weights(str(path), [("x", Tensor(np.ones(2)))])
        with pytest.raises(ConfigError):
            load_weights(str(path), [("y", Tensor(np.ones(2)))])
        with pytest.raises(ConfigError):
            load_weights(str(path), [])
