import numpy as np
import pytest

from fluorokit.errors import FormatError, InvalidInputError
from fluorokit.phantom import (
    Box,
    Cylinder,
    Phantom,
    Sphere,
    Tube,
    make_lumbar_phantom,
    rasterize_phantom,
)
from fluorokit.volume import (
    Volume,
    label_bbox_center_mm,
    label_centroid_mm,
    label_ids,
    label_mask,
    load_volume,
    save_volume,
    threshold_bone,
)


class TestVolumeIO:
    def test_smallest_case(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.int16), (1, 1, 1), (0, 0, 0))
        header = save_volume(v, tmp_path / "tiny.vjson")
        raw = header.with_suffix(".raw")
        assert raw.stat().st_size == 16
        assert "[2, 2, 2]" in header.read_text()

    def test_roundtrip_bit_identical(self, tmp_path, rng):
        data = rng.integers(-1024, 3071, size=(64, 64, 64)).astype(np.int16)
        v = Volume(data, (0.7, 0.8, 0.9), (-3.0, 2.0, 1.5))
        save_volume(v, tmp_path / "v.vjson")
        w = load_volume(tmp_path / "v.vjson")
        assert np.array_equal(v.data, w.data)
        assert v.spacing_mm == w.spacing_mm
        assert v.origin_mm == w.origin_mm
        # Saving again produces byte-identical files.
        save_volume(w, tmp_path / "w.vjson")
        assert (tmp_path / "v.raw").read_bytes() == (tmp_path / "w.raw").read_bytes()
        assert (tmp_path / "v.vjson").read_bytes() == (tmp_path / "w.vjson").read_bytes()

    def test_roundtrip_uint8(self, tmp_path, rng):
        data = rng.integers(0, 6, size=(5, 7, 9)).astype(np.uint8)
        v = Volume(data, (1, 1, 1), (0, 0, 0))
        save_volume(v, tmp_path / "labels.vjson")
        assert np.array_equal(load_volume(tmp_path / "labels.vjson").data, data)

    def test_raw_length_mismatch(self, tmp_path):
        v = Volume(np.zeros((4, 4, 4), np.int16), (1, 1, 1), (0, 0, 0))
        save_volume(v, tmp_path / "v.vjson")
        (tmp_path / "v.raw").write_bytes(b"\x00" * 100)
        with pytest.raises(FormatError) as e:
            load_volume(tmp_path / "v.vjson")
        assert e.value.field == "raw length"
        assert "raw length" in str(e.value)

    def test_unknown_dtype(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.int16), (1, 1, 1), (0, 0, 0))
        h = save_volume(v, tmp_path / "v.vjson")
        h.write_text(h.read_text().replace("int16", "complex64"))
        with pytest.raises(FormatError) as e:
            load_volume(h)
        assert e.value.field == "dtype"

    def test_bad_spacing(self, tmp_path):
        v = Volume(np.zeros((2, 2, 2), np.int16), (1, 1, 1), (0, 0, 0))
        h = save_volume(v, tmp_path / "v.vjson")
        h.write_text(h.read_text().replace('"spacing_mm": [1.0, 1.0, 1.0]', '"spacing_mm": [0.0, 1.0, 1.0]'))
        with pytest.raises(FormatError) as e:
            load_volume(h)
        assert e.value.field == "spacing_mm"

    def test_invalid_construction(self):
        with pytest.raises(InvalidInputError):
            Volume(np.zeros((2, 2), np.int16), (1, 1, 1), (0, 0, 0))
        with pytest.raises(InvalidInputError):
            Volume(np.zeros((2, 2, 2), np.int16), (1, -1, 1), (0, 0, 0))
        with pytest.raises(InvalidInputError):
            Volume(np.zeros((2, 2, 2), np.float64), (1, 1, 1), (0, 0, 0))


class TestThresholdBone:
    def test_soft_tissue_clamped(self):
        v = Volume(np.full((2, 2, 2), -500, np.int16), (1, 1, 1), (0, 0, 0))
        assert np.all(threshold_bone(v, 0.0).data == 0.0)

    def test_boundary_value(self):
        v = Volume(np.zeros((2, 2, 2), np.int16), (1, 1, 1), (0, 0, 0))
        assert np.all(threshold_bone(v, 0.0).data == 0.0)

    def test_passthrough_above(self):
        v = Volume(np.full((2, 2, 2), 300, np.int16), (1, 1, 1), (0, 0, 0))
        assert np.all(threshold_bone(v, 0.0).data == 300.0)

    def test_idempotent_at_zero(self, rng):
        data = rng.integers(-1024, 3071, size=(8, 8, 8)).astype(np.int16)
        v = Volume(data, (1, 1, 1), (0, 0, 0))
        once = threshold_bone(v, 0.0)
        twice = threshold_bone(once, 0.0)
        assert np.array_equal(once.data, twice.data)

    def test_monotone_in_threshold(self, rng):
        data = rng.integers(-1024, 3071, size=(8, 8, 8)).astype(np.int16)
        v = Volume(data, (1, 1, 1), (0, 0, 0))
        lo = threshold_bone(v, 0.0)
        hi = threshold_bone(v, 250.0)
        assert np.all(hi.data <= lo.data)

    def test_rejects_labels(self):
        v = Volume(np.zeros((2, 2, 2), np.uint8), (1, 1, 1), (0, 0, 0))
        with pytest.raises(InvalidInputError):
            threshold_bone(v)


class TestRasterize:
    def test_sphere_volume_matches_analytic(self):
        ph = Phantom((Sphere((0, 0, 0), 10.0, 800.0, 1),))
        hu, labels = rasterize_phantom(ph, (64, 64, 64), (1, 1, 1))
        count = int(np.count_nonzero(labels.data))
        analytic = 4.0 / 3.0 * np.pi * 10.0**3
        assert abs(count - analytic) / analytic < 0.02
        assert np.all(hu.data[labels.data == 1] == 800)

    def test_empty_phantom(self):
        hu, labels = rasterize_phantom(Phantom(()), (8, 8, 8), (1, 1, 1))
        assert np.all(hu.data == 0)
        assert np.all(labels.data == 0)

    def test_overlap_last_wins(self):
        ph = Phantom(
            (
                Box((0, 0, 0), (10, 10, 10), 500.0, 1),
                Box((2, 0, 0), (10, 10, 10), 900.0, 2),
            )
        )
        hu, labels = rasterize_phantom(ph, (32, 32, 32), (1, 1, 1), origin=(-16, -16, -16))
        x = np.arange(32) - 16.0
        both = (np.abs(x) <= 5) & (np.abs(x - 2) <= 5)
        row_labels = labels.data[:, 16, 16]
        row_hu = hu.data[:, 16, 16]
        assert np.all(row_labels[both] == 2)
        assert np.all(row_hu[both] == 900)
        only_first = (np.abs(x) <= 5) & ~both
        assert np.all(row_labels[only_first] == 1)

    def test_deterministic(self):
        ph = make_lumbar_phantom()
        a = rasterize_phantom(ph, (72, 56, 192), (1, 1, 1))
        b = rasterize_phantom(ph, (72, 56, 192), (1, 1, 1))
        assert np.array_equal(a[0].data, b[0].data)
        assert np.array_equal(a[1].data, b[1].data)

    def test_tube_has_hole(self):
        ph = Phantom((Tube((0, 0, 0), 10.0, 6.0, 8.0, 700.0, 1),))
        _, labels = rasterize_phantom(ph, (32, 32, 32), (1, 1, 1))
        center = labels.data[15:17, 15:17, 15:17]
        assert np.all(center == 0)
        assert labels.data[labels.data == 1].size > 0

    def test_cylinder_extent_validation(self):
        with pytest.raises(InvalidInputError):
            Phantom((Cylinder((0, 0, 0), -1.0, 2.0, 3.0, 100.0, 1),))
        with pytest.raises(InvalidInputError):
            Phantom((Sphere((0, 0, 0), 1.0, 9000.0, 1),))


class TestLabels:
    def test_label_mask_counts(self, rng):
        data = rng.integers(0, 4, size=(16, 16, 16)).astype(np.uint8)
        labels = Volume(data, (1, 1, 1), (0, 0, 0))
        for lid in range(4):
            mask = label_mask(labels, lid)
            # Oracle: brute-force scan.
            assert int(mask.data.sum()) == int(sum(1 for v in data.ravel() if v == lid))

    def test_absent_label_all_zero(self):
        labels = Volume(np.zeros((4, 4, 4), np.uint8), (1, 1, 1), (0, 0, 0))
        assert np.all(label_mask(labels, 9).data == 0)

    def test_full_cover(self):
        labels = Volume(np.full((4, 4, 4), 3, np.uint8), (1, 1, 1), (0, 0, 0))
        assert np.all(label_mask(labels, 3).data == 1)

    def test_label_ids(self):
        data = np.zeros((4, 4, 4), np.uint8)
        data[0, 0, 0] = 2
        data[1, 1, 1] = 5
        assert label_ids(Volume(data, (1, 1, 1), (0, 0, 0))) == [2, 5]

    def test_bbox_center_vs_centroid(self):
        # An L-shaped label: bbox center differs from the centroid.
        data = np.zeros((20, 20, 4), np.uint8)
        data[0:16, 0:4, :] = 1
        data[0:4, 4:16, :] = 1
        labels = Volume(data, (1, 1, 1), (-5.0, -5.0, 0.0))
        bbox = label_bbox_center_mm(labels, 1)
        centroid = label_centroid_mm(labels, 1)
        assert np.allclose(bbox, [-5.0 + 7.5, -5.0 + 7.5, 1.5])
        assert np.linalg.norm(bbox - centroid) > 1.0
