import numpy as np
import pytest

from fluorokit.calibration import FiducialSet
from fluorokit.drr import render_drr
from fluorokit.geometry import Pose, compose_camera, pose_to_camera
from fluorokit.phantom import make_bead_layout, make_bead_phantom, rasterize_phantom
from fluorokit.volume import threshold_bone

CAL_IMAGE_PX = 320
CAL_PITCH_MM = 0.9
CAL_RADII_PX = (2.0, 9.0)
CAL_ELLIPSOID_MM = (62.0, 58.0, 78.0)
CAL_SPACING_MM = 0.8
CAL_STEP_MM = 0.6
CAL_BEAD_SMOOTHING_MM = 2.2
CAL_DEPTH_SPAN_MM = 105.0


def make_calibration_scene(rng):
    """Random 14-bead synthetic scene: image, true camera, fiducial set.

    Beads are rasterized with a soft edge so that the renderer's sampling
    step resolves them without aliasing; the bead layout guarantees
    in-frame, well-separated projections with enough depth spread to
    condition the solve (as a deliberately placed physical phantom would).
    """
    pose = Pose(
        orbit_deg=rng.uniform(-180.0, 180.0),
        tilt_deg=rng.uniform(-20.0, 20.0),
        det_width_px=CAL_IMAGE_PX,
        det_height_px=CAL_IMAGE_PX,
        pixel_pitch_mm=CAL_PITCH_MM,
        view_class="MISC",
    )
    cam = pose_to_camera(pose, (0.0, 0.0, 0.0))
    pts, classes = make_bead_layout(
        rng,
        cameras=[cam],
        ellipsoid_mm=CAL_ELLIPSOID_MM,
        image_bounds_px=(CAL_IMAGE_PX, CAL_IMAGE_PX, 14.0),
        min_depth_span_mm=CAL_DEPTH_SPAN_MM,
    )
    phantom = make_bead_phantom(pts, classes, smoothing=CAL_BEAD_SMOOTHING_MM)
    extent = np.array(CAL_ELLIPSOID_MM) + 4.5
    dims = tuple(int(np.ceil(2 * e / CAL_SPACING_MM)) for e in extent)
    hu, _ = rasterize_phantom(phantom, dims, (CAL_SPACING_MM,) * 3)
    att = threshold_bone(hu)
    img = render_drr(att, cam, CAL_IMAGE_PX, CAL_IMAGE_PX, step_mm=CAL_STEP_MM).normalized
    return img, cam, FiducialSet(pts, tuple(classes)), pts


def random_rotation(rng):
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_intrinsics(rng, skew=True):
    fx = rng.uniform(500.0, 2500.0)
    fy = rng.uniform(500.0, 2500.0)
    s = rng.uniform(-5.0, 5.0) if skew else 0.0
    cx = rng.uniform(100.0, 400.0)
    cy = rng.uniform(100.0, 400.0)
    return np.array([[fx, s, cx], [0.0, fy, cy], [0.0, 0.0, 1.0]])


def random_camera_triple(rng, skew=True):
    k = random_intrinsics(rng, skew=skew)
    r = random_rotation(rng)
    x_o = rng.uniform(-1000.0, 1000.0, size=3)
    return k, r, x_o


def random_camera(rng, skew=True):
    return compose_camera(*random_camera_triple(rng, skew=skew))


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
