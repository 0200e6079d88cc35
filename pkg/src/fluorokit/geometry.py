"""Projective camera model: composition, decomposition, projection, crop
adjustment, multi-view triangulation, and the 28-pose sampling protocol.

COORDINATE CONVENTIONS
======================
World frame (right-handed, units mm):
  - +x: patient left
  - +y: patient anterior (front)
  - +z: patient superior (head)

Image frame (units px):
  - origin at the top-left pixel center, +u right, +v down
  - the principal point of a w x h detector sits at (w/2, h/2)

Camera matrix:
  P = K [R | -R X_o]   (3x4, maps homogeneous world mm to homogeneous px)
where K is upper-triangular with positive diagonal and K[2][2] = 1 when the
matrix is scale-normalized, R maps world directions into the camera frame
(rows = camera axes), and X_o is the focal point in world mm.

C-arm angles:
  orbit rotates the source in the transverse (x-y) plane away from the
  anterior axis, tilt elevates it toward superior. The source direction is
  (sin(orbit) cos(tilt), cos(orbit) cos(tilt), sin(tilt)).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import (
    DegenerateCameraError,
    DegenerateGeometryError,
    InsufficientViewsError,
    InvalidInputError,
    PointAtInfinityError,
)

ANTERIOR_AXIS = np.array([0.0, 1.0, 0.0])
SUPERIOR_AXIS = np.array([0.0, 0.0, 1.0])

VIEW_CLASSES = ("AP", "LATERAL", "OBLIQUE", "MISC")

# Fixed stand-in table for the miscellaneous off-plane poses: combinations of
# orbit in {+-30, +-60} deg and tilt in {+-10, +-20} deg, plus two
# superior/inferior-tilted AP variants. Deterministic by construction.
MISC_POSE_TABLE = (
    (30.0, 10.0),
    (30.0, -10.0),
    (-30.0, 10.0),
    (-30.0, -10.0),
    (60.0, 20.0),
    (60.0, -20.0),
    (-60.0, 20.0),
    (-60.0, -20.0),
    (30.0, 20.0),
    (-30.0, -20.0),
    (0.0, 25.0),
    (0.0, -25.0),
)


def _as_matrix(a, shape, name: str) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.shape != shape:
        raise InvalidInputError(f"{name} must have shape {shape}, got {m.shape}")
    if not np.all(np.isfinite(m)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return m


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class CameraMatrix:
    """3x4 projective camera matrix with an invertible left 3x3 block."""

    p: np.ndarray
    normalized: bool = False

    def __post_init__(self):
        p = _as_matrix(self.p, (3, 4), "P")
        s = np.linalg.svd(p, compute_uv=False)
        if s[-1] <= 1e-12 * s[0]:
            raise DegenerateCameraError("P must have rank 3")
        sm = np.linalg.svd(p[:, :3], compute_uv=False)
        if sm[-1] <= 1e-12 * sm[0]:
            raise DegenerateCameraError("left 3x3 block of P must be invertible")
        object.__setattr__(self, "p", _frozen(p))

    def to_json_dict(self, with_decomposition: bool = True) -> dict:
        d = {"P": self.p.tolist()}
        if with_decomposition:
            dec = decompose_camera(self)
            d["K"] = dec.k.tolist()
            d["R"] = dec.r.tolist()
            d["X_o"] = dec.x_o.tolist()
        return d

    @classmethod
    def from_json_dict(cls, d: dict) -> "CameraMatrix":
        if "P" not in d:
            raise InvalidInputError("camera JSON must contain a 'P' entry")
        p = np.asarray(d["P"], dtype=np.float64).reshape(3, 4)
        return cls(p, normalized=False)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "CameraMatrix":
        return cls.from_json_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class CameraDecomposition:
    """Intrinsics K (px), rotation R, and focal point X_o (world mm)."""

    k: np.ndarray
    r: np.ndarray
    x_o: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "k", _frozen(_as_matrix(self.k, (3, 3), "K")))
        object.__setattr__(self, "r", _frozen(_as_matrix(self.r, (3, 3), "R")))
        object.__setattr__(self, "x_o", _frozen(_as_matrix(self.x_o, (3,), "X_o")))


@dataclass(frozen=True)
class CropTransform:
    """Image-plane shift (t_x, t_y) plus resample scale, as a 3x3 matrix Q.

    With scale = 1, q is the pure translation [[1,0,-t_x],[0,1,-t_y],[0,0,1]];
    a resample to a smaller patch folds in diag(scale, scale, 1).
    """

    t_x: float
    t_y: float
    scale: float = 1.0
    q: np.ndarray = field(init=False)

    def __post_init__(self):
        if not np.isfinite([self.t_x, self.t_y, self.scale]).all():
            raise InvalidInputError("crop transform parameters must be finite")
        if self.scale <= 0:
            raise InvalidInputError("crop scale must be positive")
        s, tx, ty = self.scale, self.t_x, self.t_y
        q = np.array([[s, 0.0, -s * tx], [0.0, s, -s * ty], [0.0, 0.0, 1.0]])
        object.__setattr__(self, "q", _frozen(q))

    def apply(self, uv) -> np.ndarray:
        """Map full-image pixel coordinates into crop coordinates."""
        uv = np.asarray(uv, dtype=np.float64)
        return (uv - np.array([self.t_x, self.t_y])) * self.scale


@dataclass(frozen=True)
class Pose:
    """C-arm style pose: orbit/tilt on a sphere around a target point."""

    orbit_deg: float
    tilt_deg: float
    focal_len_mm: float = 1000.0
    source_to_center_mm: float = 500.0
    det_width_px: int = 448
    det_height_px: int = 448
    pixel_pitch_mm: float = 0.66
    view_class: str = "MISC"

    def __post_init__(self):
        if self.focal_len_mm <= 0:
            raise InvalidInputError("focal_len_mm must be positive")
        if self.pixel_pitch_mm <= 0:
            raise InvalidInputError("pixel_pitch_mm must be positive")
        if self.source_to_center_mm <= 0:
            raise InvalidInputError("source_to_center_mm must be positive")
        if self.view_class not in VIEW_CLASSES:
            raise InvalidInputError(f"view_class must be one of {VIEW_CLASSES}")

    def source_direction(self) -> np.ndarray:
        """Unit vector from the target center toward the X-ray source."""
        lam = np.radians(self.orbit_deg)
        phi = np.radians(self.tilt_deg)
        return np.array(
            [np.sin(lam) * np.cos(phi), np.cos(lam) * np.cos(phi), np.sin(phi)]
        )

    def intrinsics(self) -> np.ndarray:
        f = self.focal_len_mm / self.pixel_pitch_mm
        return np.array(
            [
                [f, 0.0, self.det_width_px / 2.0],
                [0.0, f, self.det_height_px / 2.0],
                [0.0, 0.0, 1.0],
            ]
        )


def pose_to_camera(pose: Pose, center) -> CameraMatrix:
    """Build the camera matrix of a pose aimed at ``center`` (world mm).

    The optical axis runs from the source through the center; image "up"
    (-v) aligns with the superior axis whenever the axis is not vertical.
    """
    center = _as_matrix(center, (3,), "center")
    x_o = center + pose.source_to_center_mm * pose.source_direction()
    z_c = center - x_o
    z_c = z_c / np.linalg.norm(z_c)
    up = SUPERIOR_AXIS if abs(z_c @ SUPERIOR_AXIS) < 1.0 - 1e-9 else ANTERIOR_AXIS
    x_c = np.cross(z_c, up)
    x_c = x_c / np.linalg.norm(x_c)
    y_c = np.cross(z_c, x_c)
    r = np.stack([x_c, y_c, z_c])
    return compose_camera(pose.intrinsics(), r, x_o)


def compose_camera(k, r, x_o) -> CameraMatrix:
    """Compose P = K [R | -R X_o], scale-normalized so K[2][2] = 1."""
    k = _as_matrix(k, (3, 3), "K")
    r = _as_matrix(r, (3, 3), "R")
    x_o = _as_matrix(x_o, (3,), "X_o")
    scale = np.max(np.abs(k))
    if np.any(np.abs(k[np.tril_indices(3, -1)]) > 1e-9 * scale):
        raise InvalidInputError("K must be upper-triangular")
    if np.any(np.diag(k) <= 0):
        raise InvalidInputError("K must have a positive diagonal")
    if abs(np.linalg.det(k)) < 1e-12 * scale**3:
        raise InvalidInputError("K must be invertible")
    if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6 or np.linalg.det(r) < 0:
        raise InvalidInputError("R must be a rotation (orthonormal, det +1)")
    p = np.hstack([k @ r, (k @ r @ -x_o)[:, None]]) / k[2, 2]
    return CameraMatrix(p, normalized=True)


def decompose_camera(cam: CameraMatrix | np.ndarray) -> CameraDecomposition:
    """Recover (K, R, X_o) from P.

    X_o = -M^-1 m; the QR factorization of M^-1 yields R^T and K^-1. Signs
    are fixed so that K has a positive diagonal, K[2][2] = 1, and
    det(R) = +1 (flipping the overall P scale when necessary).
    """
    p = cam.p if isinstance(cam, CameraMatrix) else _as_matrix(cam, (3, 4), "P")
    m = p[:, :3]
    det = np.linalg.det(m)
    if abs(det) < 1e-12 * max(np.max(np.abs(m)), 1e-300) ** 3:
        raise DegenerateCameraError("left 3x3 block of P is singular")
    x_o = -np.linalg.solve(m, p[:, 3])
    q, rtri = np.linalg.qr(np.linalg.inv(m))
    k = np.linalg.inv(rtri)
    r = q.T
    signs = np.sign(np.diag(k))
    signs[signs == 0] = 1.0
    d = np.diag(signs)
    k = k @ d
    r = d @ r
    k = np.triu(k) / k[2, 2]  # clear round-off below the diagonal
    if np.linalg.det(r) < 0:
        r = -r
    return CameraDecomposition(k=k, r=r, x_o=x_o)


def normalize_camera(cam: CameraMatrix) -> CameraMatrix:
    """Rescale P so its decomposed K has K[2][2] = 1 and det(R) = +1."""
    if cam.normalized:
        return cam
    d = decompose_camera(cam)
    return compose_camera(d.k, d.r, d.x_o)


def project(cam: CameraMatrix | np.ndarray, x) -> np.ndarray:
    """Project world point(s) (..., 3) in mm to pixel point(s) (..., 2).

    Raises PointAtInfinityError when a homogeneous w vanishes (relative to
    the magnitude of the terms that produced it, to catch cancellation).
    """
    p = cam.p if isinstance(cam, CameraMatrix) else _as_matrix(cam, (3, 4), "P")
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.atleast_2d(x)
    if pts.shape[-1] != 3:
        raise InvalidInputError("points must have shape (..., 3)")
    h = pts @ p[:, :3].T + p[:, 3]
    w = h[..., 2]
    w_scale = np.abs(pts) @ np.abs(p[2, :3]) + abs(p[2, 3])
    if np.any(np.abs(w) <= 1e-12 * np.maximum(w_scale, 1.0)):
        raise PointAtInfinityError("point projects to w = 0 (principal plane)")
    uv = h[..., :2] / w[..., None]
    return uv[0] if single else uv.reshape(x.shape[:-1] + (2,))


def adjust_for_crop(cam: CameraMatrix, crop: CropTransform) -> CameraMatrix:
    """Return P_hat = Q P for a crop/resample of the image plane."""
    return CameraMatrix(crop.q @ cam.p, normalized=cam.normalized)


def triangulate_origin(cams, centers) -> np.ndarray:
    """Least-squares intersection of the rays through the given image points.

    Builds the stacked system with rows (u p3 - p1, v p3 - p2) per view and
    returns the dehomogenized minimizer of ||A X|| over ||X|| = 1.
    """
    if len(cams) < 2:
        raise InsufficientViewsError("triangulation needs at least 2 views")
    if len(cams) != len(centers):
        raise InvalidInputError("cams and centers must have equal length")
    rows = []
    for cam, c in zip(cams, centers):
        p = cam.p if isinstance(cam, CameraMatrix) else _as_matrix(cam, (3, 4), "P")
        u, v = float(c[0]), float(c[1])
        rows.append(u * p[2] - p[0])
        rows.append(v * p[2] - p[1])
    a = np.array(rows)
    # Row scaling equalizes each view's weight without changing exact solutions.
    norms = np.linalg.norm(a, axis=1)
    if np.any(norms == 0):
        raise DegenerateGeometryError("zero row in triangulation system")
    a = a / norms[:, None]
    _, s, vh = np.linalg.svd(a)
    if np.sum(s > 1e-9 * s[0]) < 3:
        raise DegenerateGeometryError("rank(A) < 3: views do not constrain a point")
    x = vh[-1]
    if abs(x[3]) < 1e-10:
        raise DegenerateGeometryError("triangulated point lies at infinity")
    return x[:3] / x[3]


def transform_camera(cam: CameraMatrix, r, t) -> CameraMatrix:
    """Camera observing the scene after world points move by X' = R X + t."""
    r = _as_matrix(r, (3, 3), "R")
    t = _as_matrix(t, (3,), "t")
    g = np.eye(4)
    g[:3, :3] = r.T
    g[:3, 3] = -r.T @ t
    return CameraMatrix(cam.p @ g, normalized=cam.normalized)


def sample_pose_protocol(center, sphere_diameter_mm: float = 1000.0, **pose_kwargs) -> list[Pose]:
    """Sample the 28-pose protocol on a sphere around ``center``.

    6 AP (three per side at -15/0/+15 deg in the sagittal plane), 6 lateral
    (same in the coronal plane), 4 oblique (+-20 deg in the transverse plane
    on both sides), and 12 fixed miscellaneous off-plane poses. All focal
    points lie on the sphere; all optical axes pass through the center.
    """
    if sphere_diameter_mm <= 0:
        raise InvalidInputError("sphere_diameter_mm must be positive")
    radius = sphere_diameter_mm / 2.0
    kw = dict(source_to_center_mm=radius)
    kw.update(pose_kwargs)
    poses = []
    for side in (0.0, 180.0):
        for dev in (-15.0, 0.0, 15.0):
            poses.append(Pose(side, dev, view_class="AP", **kw))
    for side in (90.0, -90.0):
        for dev in (-15.0, 0.0, 15.0):
            poses.append(Pose(side, dev, view_class="LATERAL", **kw))
    for orbit in (20.0, -20.0, 160.0, -160.0):
        poses.append(Pose(orbit, 0.0, view_class="OBLIQUE", **kw))
    for orbit, tilt in MISC_POSE_TABLE:
        poses.append(Pose(orbit, tilt, view_class="MISC", **kw))
    return poses


def poses_by_class(poses) -> dict[str, list[int]]:
    """Index pose list positions by view class."""
    out: dict[str, list[int]] = {c: [] for c in VIEW_CLASSES}
    for i, pose in enumerate(poses):
        out[pose.view_class].append(i)
    return out


__all__ = [
    "ANTERIOR_AXIS",
    "SUPERIOR_AXIS",
    "VIEW_CLASSES",
    "MISC_POSE_TABLE",
    "CameraMatrix",
    "CameraDecomposition",
    "CropTransform",
    "Pose",
    "pose_to_camera",
    "compose_camera",
    "decompose_camera",
    "normalize_camera",
    "project",
    "adjust_for_crop",
    "triangulate_origin",
    "transform_camera",
    "sample_pose_protocol",
    "poses_by_class",
]
