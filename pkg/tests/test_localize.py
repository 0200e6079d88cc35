import numpy as np
import pytest

from fluorokit.drr import render_drr, render_mask
from fluorokit.errors import CropTooSmallError
from fluorokit.geometry import (
    Pose,
    pose_to_camera,
    project,
    triangulate_origin,
)
from fluorokit.localize import (
    BoundingBox,
    boxes_from_mask,
    crop_mask,
    crop_vertebra,
    localize_all,
    resample_window,
    tight_box,
)
from fluorokit.phantom import make_lumbar_phantom, rasterize_phantom
from fluorokit.volume import label_bbox_center_mm, threshold_bone


@pytest.fixture(scope="module")
def lumbar_scene():
    ph = make_lumbar_phantom()
    hu, labels = rasterize_phantom(ph, (72, 72, 200), (1.0, 1.0, 1.0))
    return threshold_bone(hu), labels


class TestBoxes:
    def test_margin_rule(self):
        mask = np.zeros((448, 448), np.uint8)
        mask[120:180, 100:200] = 1  # u in [100,199], v in [120,179]
        tight = tight_box(mask)
        assert (tight.u_min, tight.v_min, tight.width, tight.height) == (100, 120, 100, 60)
        box = boxes_from_mask(mask)
        assert box.width == 110  # long side grew by 10% = 10 px
        assert box.height == 70
        assert box.u_min == 95 and box.v_min == 115

    def test_empty_mask(self):
        assert boxes_from_mask(np.zeros((32, 32), np.uint8)) is None

    def test_full_frame_clamped(self):
        mask = np.ones((64, 64), np.uint8)
        box = boxes_from_mask(mask)
        assert (box.u_min, box.v_min) == (0, 0)
        assert box.width == 64 and box.height == 64


class TestCropVertebra:
    def _camera(self, size=224):
        pose = Pose(0.0, 0.0, det_width_px=size, det_height_px=size, view_class="AP")
        return pose_to_camera(pose, (0.0, 0.0, 0.0))

    def test_identity_crop(self, rng):
        img = rng.uniform(0, 1000, (224, 224)).astype(np.float32)
        cam = self._camera()
        win = crop_vertebra(img, cam, BoundingBox(0, 0, 224, 224))
        assert np.allclose(win.image, img, atol=1e-4)
        assert np.allclose(win.camera.p, cam.p)

    def test_box_center_maps_to_112(self, rng):
        cam = self._camera(448)
        img = np.zeros((448, 448), np.float32)
        box = BoundingBox(100, 140, 80, 60)
        win = crop_vertebra(img, cam, box)
        # A world point projecting exactly at the box center lands at 112,112.
        mapped = win.transform.apply(box.center)
        assert np.allclose(mapped, [112.0, 112.0], atol=1e-9)

    def test_commutation_for_emitted_crop(self, rng):
        cam = self._camera(448)
        img = np.zeros((448, 448), np.float32)
        win = crop_vertebra(img, cam, BoundingBox(150, 130, 90, 120))
        pts = rng.uniform(-20, 20, (20, 3))
        direct = project(win.camera, pts)
        oracle = win.transform.apply(project(cam, pts))
        assert np.max(np.abs(direct - oracle)) < 1e-9

    def test_resampling_coordinate_oracle(self, rng):
        # Locate single bright pixels in the crop by centroid; positions must
        # match the adjusted-camera/crop-transform mapping within 0.51 px.
        cam = self._camera(448)
        box = BoundingBox(110, 90, 150, 110)
        for _ in range(30):
            ui = int(rng.integers(box.u_min + 25, box.u_min + box.width - 25))
            vi = int(rng.integers(box.v_min + 25, box.v_min + box.height - 25))
            img = np.zeros((448, 448), np.float32)
            img[vi, ui] = 1000.0
            win = crop_vertebra(img, cam, box)
            total = win.image.sum()
            assert total > 0
            yy, xx = np.mgrid[0:224, 0:224]
            cu = (win.image * xx).sum() / total
            cv = (win.image * yy).sum() / total
            expected = win.transform.apply((ui, vi))
            assert np.hypot(cu - expected[0], cv - expected[1]) <= 0.51

    def test_too_small(self):
        cam = self._camera()
        with pytest.raises(CropTooSmallError):
            crop_vertebra(np.zeros((224, 224), np.float32), cam, BoundingBox(5, 5, 4, 4))


class TestLocalizeAll:
    def test_five_vertebrae_visible(self, lumbar_scene):
        att, labels = lumbar_scene
        # Wider pixel pitch so the whole stack fits the frame in one view.
        pose = Pose(0.0, 0.0, pixel_pitch_mm=0.9, view_class="AP")
        cam = pose_to_camera(pose, (0.0, 0.0, 0.0))
        img = render_drr(att, cam, 448, 448)
        crops = localize_all(img, cam, labels)
        assert len(crops) == 5
        assert sorted(c.label for c in crops) == [1, 2, 3, 4, 5]
        for c in crops:
            assert c.transform.scale == pytest.approx(224.0 / c.square_side)

    def test_partially_visible_excluded(self, lumbar_scene):
        att, labels = lumbar_scene
        # Aim at the top vertebra with a small detector: lower levels clip.
        pose = Pose(0.0, 0.0, det_width_px=448, det_height_px=160, view_class="AP")
        cam = pose_to_camera(pose, (0.0, 0.0, 72.0))
        img = render_drr(att, cam, 448, 160)
        crops = localize_all(img, cam, labels)
        assert 0 < len(crops) < 5
        assert all(c.label in (1, 2) for c in crops)

    def test_determinism(self, lumbar_scene):
        att, labels = lumbar_scene
        cam = pose_to_camera(Pose(20.0, 0.0, view_class="OBLIQUE"), (0.0, 0.0, 0.0))
        img = render_drr(att, cam, 448, 448)
        a = localize_all(img, cam, labels, label_list=[3])
        b = localize_all(img, cam, labels, label_list=[3])
        assert np.array_equal(a[0].image, b[0].image)
        assert np.array_equal(a[0].camera.p, b[0].camera.p)

    def test_crop_centers_triangulate_into_label_bbox(self, lumbar_scene):
        att, labels = lumbar_scene
        label = 3
        cams, centers = [], []
        for orbit, tilt in ((0, 0), (90, 0), (20, 0), (30, 10)):
            cam = pose_to_camera(Pose(orbit, tilt, view_class="MISC"), (0.0, 0.0, 0.0))
            img = render_drr(att, cam, 448, 448)
            crops = localize_all(img, cam, labels, label_list=[label])
            assert len(crops) == 1
            cams.append(crops[0].camera)
            centers.append((112.0, 112.0))
        est = triangulate_origin(cams, centers)
        center = label_bbox_center_mm(labels, label)
        # Must fall inside the label's 3D bounding box (33 mm half-extent).
        assert np.all(np.abs(est - center) < np.array([33.0, 33.0, 15.0]))


class TestCropMask:
    def test_mask_crop_binaryish(self, lumbar_scene):
        att, labels = lumbar_scene
        cam = pose_to_camera(Pose(0.0, 0.0, view_class="AP"), (0.0, 0.0, 0.0))
        img = render_drr(att, cam, 448, 448)
        crops = localize_all(img, cam, labels, label_list=[2])
        mask = render_mask(labels, 2, cam, 448, 448)
        mc = crop_mask(crops[0], mask)
        assert mc.min() >= 0.0 and mc.max() <= 1.0
        assert (mc > 0).sum() > 100


class TestResampleWindow:
    def test_out_of_range_reads_zero(self):
        img = np.ones((10, 10), np.float32)
        out = resample_window(img, -300.0, -300.0, 1.0, out_size=8)
        assert np.all(out == 0)
