"""Semi-automatic fiducial calibration.

Pipeline: detect circular bead projections (threshold + circular Hough
accumulation), search all reference-bead correspondences exhaustively by
reprojection error, solve the camera by DLT, rectify the correspondence for
every bead against the preliminary camera, and inpaint the bead discs.

All image coordinates follow the top-left pixel-center convention of
:mod:`fluorokit.geometry`.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import (
    DegenerateConfigurationError,
    InsufficientPointsError,
    InvalidInputError,
    NoSolutionError,
)
from .geometry import CameraMatrix, decompose_camera, normalize_camera, project

REF = "REF"
STD = "STD"


@dataclass(frozen=True)
class FiducialSet:
    """3D bead coordinates with their reference/standard class."""

    points3d_mm: np.ndarray  # (n, 3)
    classes: tuple[str, ...]

    def __post_init__(self):
        pts = np.asarray(self.points3d_mm, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise InvalidInputError("points3d_mm must have shape (n, 3)")
        classes = tuple(self.classes)
        if len(classes) != len(pts):
            raise InvalidInputError("classes must match points3d_mm length")
        if any(c not in (REF, STD) for c in classes):
            raise InvalidInputError("classes must be 'REF' or 'STD'")
        pts = np.ascontiguousarray(pts)
        pts.flags.writeable = False
        object.__setattr__(self, "points3d_mm", pts)
        object.__setattr__(self, "classes", classes)

    @property
    def reference_points(self) -> np.ndarray:
        return self.points3d_mm[[c == REF for c in self.classes]]

    def save(self, path: str | Path) -> None:
        d = {"points3d_mm": self.points3d_mm.tolist(), "class": list(self.classes)}
        Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "FiducialSet":
        d = json.loads(Path(path).read_text())
        if "points3d_mm" not in d or "class" not in d:
            raise InvalidInputError("fiducial JSON needs 'points3d_mm' and 'class'")
        return cls(np.asarray(d["points3d_mm"], dtype=np.float64), tuple(d["class"]))


@dataclass(frozen=True)
class Detection:
    center: tuple[float, float]  # (u, v) px
    radius_px: float
    score: float


@dataclass(frozen=True)
class CalibrationResult:
    camera: CameraMatrix
    residuals_px: np.ndarray
    matches: tuple[tuple[int, int], ...]  # (3d index, 2d index) pairs
    pixel_pitch_mm: float | None = None

    def __post_init__(self):
        res = np.asarray(self.residuals_px, dtype=np.float64)
        res = np.ascontiguousarray(res)
        res.flags.writeable = False
        object.__setattr__(self, "residuals_px", res)
        object.__setattr__(self, "matches", tuple(tuple(m) for m in self.matches))
        if len(self.matches) != len(res):
            raise InvalidInputError("one residual per matched fiducial required")

    @property
    def mean_px(self) -> float:
        return float(self.residuals_px.mean())

    @property
    def median_px(self) -> float:
        return float(np.median(self.residuals_px))

    @property
    def mean_mm(self) -> float | None:
        return None if self.pixel_pitch_mm is None else self.mean_px * self.pixel_pitch_mm

    @property
    def median_mm(self) -> float | None:
        return None if self.pixel_pitch_mm is None else self.median_px * self.pixel_pitch_mm

    def to_json_dict(self) -> dict:
        dec = decompose_camera(self.camera)
        return {
            "P": self.camera.p.tolist(),
            "K": dec.k.tolist(),
            "R": dec.r.tolist(),
            "X_o": dec.x_o.tolist(),
            "matches": [list(m) for m in self.matches],
            "residuals_px": self.residuals_px.tolist(),
            "mean_px": self.mean_px,
            "median_px": self.median_px,
            "mean_mm": self.mean_mm,
            "median_mm": self.median_mm,
            "pixel_pitch_mm": self.pixel_pitch_mm,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True) + "\n")


# --------------------------------------------------------------------------
# Detection
# --------------------------------------------------------------------------

def detect_fiducials(
    img: np.ndarray,
    expected_radii_px: tuple[float, float] = (2.5, 12.0),
    threshold_frac: float = 0.5,
    min_support: float = 0.35,
    n_angles: int = 64,
    merge_px: float = 2.0,
) -> list[Detection]:
    """Detect circular blobs of either polarity by threshold + circular Hough.

    Pixels deviating from the image median by more than ``threshold_frac``
    of the maximum deviation form the blob set; their boundary pixels vote
    for circle centers over the radius range. Peaks are scored by the
    supported fraction of circumference, merged within ``merge_px``, and
    refined to sub-pixel centers by a deviation-weighted centroid.
    """
    a = np.asarray(img, dtype=np.float64)
    if a.ndim != 2:
        raise InvalidInputError("detect_fiducials expects a 2D grayscale image")
    r_lo, r_hi = float(expected_radii_px[0]), float(expected_radii_px[1])
    if not 0 < r_lo < r_hi:
        raise InvalidInputError("expected_radii_px must be an increasing positive pair")
    feature = np.abs(a - np.median(a))
    fmax = feature.max()
    if fmax <= 0:
        return []
    blob = feature > threshold_frac * fmax
    if not blob.any():
        return []
    eroded = ndimage.binary_erosion(blob, structure=np.ones((3, 3)), border_value=0)
    edges = blob & ~eroded
    ey, ex = np.nonzero(edges)
    if ex.size == 0:
        return []

    h, w = a.shape
    radii = np.arange(r_lo, r_hi + 1e-9, 0.5)
    theta = np.linspace(0.0, 2.0 * np.pi, n_angles, endpoint=False)
    cos_t, sin_t = np.cos(theta), np.sin(theta)
    acc = np.zeros((len(radii), h, w), dtype=np.int32)
    for ri, r in enumerate(radii):
        cx = np.rint(ex[:, None] + r * cos_t[None, :]).astype(np.int64).ravel()
        cy = np.rint(ey[:, None] + r * sin_t[None, :]).astype(np.int64).ravel()
        ok = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        flat = np.bincount(cy[ok] * w + cx[ok], minlength=h * w)
        acc[ri] = flat.reshape(h, w)

    # Support score: 3x3-summed votes, normalized so that a fully supported
    # circle scores about 1 (each boundary pixel lands ~ 3 n_angles / (2 pi r)
    # votes in the window, and a full circle has ~ 2 pi r boundary pixels).
    local = ndimage.uniform_filter(acc.astype(np.float64), size=(1, 3, 3), mode="constant") * 9.0
    support = local / (3.0 * n_angles)
    best_r = support.argmax(axis=0)
    best = support.max(axis=0)

    detections: list[Detection] = []
    suppressed = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    while True:
        masked = np.where(suppressed, -np.inf, best)
        peak = np.unravel_index(np.argmax(masked), masked.shape)
        score = masked[peak]
        if not np.isfinite(score) or score < min_support:
            break
        py, px = int(peak[0]), int(peak[1])
        r = float(radii[best_r[py, px]])
        cu, cv = _refine_center(feature, float(px), float(py), r)
        detections.append(Detection(center=(cu, cv), radius_px=r, score=float(score)))
        # Suppress the whole blob: separate beads never overlap, while ring
        # artifacts at mismatched radii concentrate inside the detected disc.
        nms = max(merge_px, r + 2.0)
        suppressed |= (xx - px) ** 2 + (yy - py) ** 2 <= nms**2
    detections.sort(key=lambda d: -d.score)
    # Merge duplicates: anything within merge_px of a stronger detection, or
    # refined into a stronger detection's blob (ring artifacts of mismatched
    # radii land there), collapses into it.
    merged: list[Detection] = []
    for d in detections:
        if all(
            math.dist(d.center, m.center) > max(merge_px, m.radius_px + 2.0)
            for m in merged
        ):
            merged.append(d)
    return merged


def _refine_center(feature: np.ndarray, cu: float, cv: float, r: float) -> tuple[float, float]:
    """Sub-pixel center: iterated centroid of the blob's intensity dome.

    Weights are the feature soft-thresholded at 30% of the local peak, so
    their support lies strictly inside the window and the estimate does not
    depend on the window placement; two to three iterations recenters away
    any initial-peak quantization.
    """
    h, w = feature.shape
    win = int(np.ceil(r + 4.0))
    for _ in range(3):
        x0, x1 = max(int(cu) - win, 0), min(int(cu) + win + 1, w)
        y0, y1 = max(int(cv) - win, 0), min(int(cv) + win + 1, h)
        sub = feature[y0:y1, x0:x1]
        if sub.size == 0:
            break
        yy, xx = np.mgrid[y0:y1, x0:x1]
        disc = (xx - cu) ** 2 + (yy - cv) ** 2 <= (r + 3.0) ** 2
        dome = np.where(disc, sub, 0.0)
        peak = dome.max()
        if peak <= 0:
            break
        wgt = np.maximum(dome - 0.3 * peak, 0.0)
        total = wgt.sum()
        if total <= 0:
            break
        cu = float((wgt * xx).sum() / total)
        cv = float((wgt * yy).sum() / total)
    return cu, cv


def split_by_radius_midpoint(
    detections, expected_ref_px: float, expected_std_px: float
) -> tuple[list, list]:
    """Classify detections as reference/standard at the radius midpoint."""
    mid = (expected_ref_px + expected_std_px) / 2.0
    ref = [d for d in detections if d.radius_px >= mid]
    std = [d for d in detections if d.radius_px < mid]
    return ref, std


# --------------------------------------------------------------------------
# DLT
# --------------------------------------------------------------------------

def _similarity_normalization(pts: np.ndarray, target_rms: float) -> tuple[np.ndarray, np.ndarray]:
    """Hartley normalization: centroid to 0, RMS distance to target."""
    centroid = pts.mean(axis=0)
    centered = pts - centroid
    rms = np.sqrt(np.mean(np.sum(centered**2, axis=1)))
    scale = target_rms / rms if rms > 0 else 1.0
    d = pts.shape[1]
    t = np.eye(d + 1)
    t[:d, :d] *= scale
    t[:d, d] = -scale * centroid
    return t, centered * scale


def _check_not_coplanar(points3d: np.ndarray) -> None:
    centered = points3d - points3d.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    if s[-1] <= 1e-9 * s[0]:
        raise DegenerateConfigurationError("3D points are coplanar or degenerate")


def _dlt_rows(x3n: np.ndarray, x2n: np.ndarray) -> np.ndarray:
    n = len(x3n)
    xh = np.hstack([x3n, np.ones((n, 1))])
    a = np.zeros((2 * n, 12))
    a[0::2, 0:4] = xh
    a[0::2, 8:12] = -x2n[:, 0:1] * xh
    a[1::2, 4:8] = xh
    a[1::2, 8:12] = -x2n[:, 1:2] * xh
    return a


def solve_dlt(points2d, points3d) -> CameraMatrix:
    """Direct linear transform on similarity-normalized correspondences."""
    x2 = np.asarray(points2d, dtype=np.float64)
    x3 = np.asarray(points3d, dtype=np.float64)
    if x2.ndim != 2 or x2.shape[1] != 2 or x3.shape != (len(x2), 3):
        raise InvalidInputError("need matching (n,2) image and (n,3) world points")
    if len(x2) < 6:
        raise InsufficientPointsError(f"DLT needs >= 6 correspondences, got {len(x2)}")
    _check_not_coplanar(x3)
    t2, x2n = _similarity_normalization(x2, math.sqrt(2.0))
    t3, x3n = _similarity_normalization(x3, math.sqrt(3.0))
    a = _dlt_rows(x3n, x2n)
    _, _, vh = np.linalg.svd(a)
    p_n = vh[-1].reshape(3, 4)
    p = np.linalg.solve(t2, p_n @ t3)
    return CameraMatrix(p / np.linalg.norm(p))


def resolve_correspondence(ref3d, ref2d) -> tuple[tuple[int, ...], CameraMatrix]:
    """Exhaustive correspondence search over the reference beads.

    Solves a DLT for every bijective assignment and keeps the one with the
    smallest mean reprojection error (deterministic lexicographic tie-break).
    Returns (assignment, preliminary camera) where assignment[i] is the 2D
    index matched to 3D point i.
    """
    x3 = np.asarray(ref3d, dtype=np.float64)
    x2 = np.asarray(ref2d, dtype=np.float64)
    if x3.ndim != 2 or x3.shape[1] != 3 or x2.ndim != 2 or x2.shape[1] != 2:
        raise InvalidInputError("ref3d must be (k,3) and ref2d (k,2)")
    k = len(x3)
    if len(x2) != k:
        raise InvalidInputError("reference bead counts must match on both sides")
    if not 6 <= k <= 8:
        raise InvalidInputError("correspondence search expects 6-8 reference beads")
    _check_not_coplanar(x3)

    # Normalization is permutation-invariant, so normalize once and rank all
    # assignments in the normalized frame (same ordering as in pixels).
    _, x2n = _similarity_normalization(x2, math.sqrt(2.0))
    _, x3n = _similarity_normalization(x3, math.sqrt(3.0))
    xh = np.hstack([x3n, np.ones((k, 1))])

    perms = np.array(list(itertools.permutations(range(k))), dtype=np.int64)
    u = x2n[perms, 0]  # (P, k)
    v = x2n[perms, 1]
    n_perm = len(perms)
    a = np.zeros((n_perm, 2 * k, 12), dtype=np.float32)
    a[:, 0::2, 0:4] = xh[None]
    a[:, 1::2, 4:8] = xh[None]
    a[:, 0::2, 8:12] = -u[..., None] * xh[None]
    a[:, 1::2, 8:12] = -v[..., None] * xh[None]
    # Null vector via the normal equations: single precision is plenty for
    # ranking assignments (the winner is re-solved in full precision below).
    ata = np.einsum("pij,pik->pjk", a, a, optimize=True)
    _, vecs = np.linalg.eigh(ata)
    p_all = vecs[:, :, 0].reshape(n_perm, 3, 4).astype(np.float64)

    proj = p_all @ xh.T  # (P, 3, k)
    wch = proj[:, 2, :]
    bad = np.abs(wch) < 1e-12
    with np.errstate(divide="ignore", invalid="ignore"):
        du = proj[:, 0, :] / wch - u
        dv = proj[:, 1, :] / wch - v
        err = np.sqrt(du**2 + dv**2).mean(axis=1)
    err[bad.any(axis=1)] = np.inf
    if not np.isfinite(err).any():
        raise NoSolutionError("every candidate assignment was degenerate")
    winner = perms[int(np.argmin(err))]
    preliminary = solve_dlt(x2[winner], x3)
    return tuple(int(j) for j in winner), preliminary


def rectify_all(
    preliminary: CameraMatrix,
    all3d,
    detected2d,
    gate_px: float = 10.0,
    pixel_pitch_mm: float | None = None,
) -> CalibrationResult:
    """Mutual-nearest matching of projected beads to detections, then the
    final DLT over every matched pair."""
    x3 = np.asarray(all3d, dtype=np.float64)
    x2 = np.asarray(detected2d, dtype=np.float64)
    if len(x2) == 0:
        raise InsufficientPointsError("no detections to rectify against")
    proj = project(preliminary, x3)
    d = np.linalg.norm(proj[:, None, :] - x2[None, :, :], axis=-1)
    nearest_det = d.argmin(axis=1)
    nearest_proj = d.argmin(axis=0)
    matches = [
        (i, int(j))
        for i, j in enumerate(nearest_det)
        if nearest_proj[j] == i and d[i, j] <= gate_px
    ]
    if len(matches) < 6:
        raise InsufficientPointsError(
            f"only {len(matches)} fiducials matched within {gate_px} px"
        )
    mi = [m[0] for m in matches]
    mj = [m[1] for m in matches]
    final = solve_dlt(x2[mj], x3[mi])
    residuals = np.linalg.norm(project(final, x3[mi]) - x2[mj], axis=1)
    return CalibrationResult(
        camera=normalize_camera(final),
        residuals_px=residuals,
        matches=tuple(matches),
        pixel_pitch_mm=pixel_pitch_mm,
    )


def calibrate_image(
    img: np.ndarray,
    fiducials: FiducialSet,
    expected_radii_px: tuple[float, float] = (2.5, 12.0),
    gate_px: float = 10.0,
    pixel_pitch_mm: float | None = None,
) -> CalibrationResult:
    """Full single-image calibration: detect, resolve, rectify.

    The reference/standard split uses the known class counts: with n
    reference beads declared, the n largest-radius detections are taken as
    reference candidates (the UI can override individual classes).
    """
    detections = detect_fiducials(img, expected_radii_px)
    ref3d = fiducials.reference_points
    n_ref = len(ref3d)
    if len(detections) < n_ref:
        raise InsufficientPointsError(
            f"detected {len(detections)} beads, need at least {n_ref} references"
        )
    strongest = detections[: len(fiducials.classes)]
    by_radius = sorted(strongest, key=lambda det: -det.radius_px)
    ref_dets = by_radius[:n_ref]
    ref2d = np.array([det.center for det in ref_dets])
    _, preliminary = resolve_correspondence(ref3d, ref2d)
    all2d = np.array([det.center for det in detections])
    return rectify_all(
        preliminary,
        fiducials.points3d_mm,
        all2d,
        gate_px=gate_px,
        pixel_pitch_mm=pixel_pitch_mm,
    )


# --------------------------------------------------------------------------
# Inpainting
# --------------------------------------------------------------------------

def inpaint_fiducials(img: np.ndarray, detections, radius_scale: float = 1.6) -> np.ndarray:
    """Replace bead discs by a boundary-inward diffusion fill.

    Pixels within radius_scale * radius of each detection center are filled
    by an inward march that averages known 8-neighbors, then smoothed to the
    discrete harmonic solution; all other pixels stay bit-identical.
    """
    a = np.asarray(img)
    if a.ndim != 2:
        raise InvalidInputError("inpaint_fiducials expects a 2D image")
    if radius_scale <= 0:
        raise InvalidInputError("radius_scale must be positive")
    out = a.copy()
    if not detections:
        return out
    h, w = a.shape
    mask = np.zeros((h, w), dtype=bool)
    yy, xx = np.mgrid[0:h, 0:w]
    for det in detections:
        (cu, cv), r = det.center, det.radius_px
        rr = radius_scale * r
        mask |= (xx - cu) ** 2 + (yy - cv) ** 2 <= rr**2
    if not mask.any():
        return out

    labeled, n_comp = ndimage.label(mask, structure=np.ones((3, 3)))
    slices = ndimage.find_objects(labeled)
    for comp, slc in enumerate(slices, start=1):
        # Work on a padded window so the fill sees one ring of true pixels.
        y0 = max(slc[0].start - 1, 0)
        y1 = min(slc[0].stop + 1, h)
        x0 = max(slc[1].start - 1, 0)
        x1 = min(slc[1].stop + 1, w)
        sub_mask = labeled[y0:y1, x0:x1] == comp
        sub = out[y0:y1, x0:x1].astype(np.float64)
        filled = _diffusion_fill(sub, sub_mask)
        if np.issubdtype(out.dtype, np.integer):
            info = np.iinfo(out.dtype)
            filled = np.clip(np.rint(filled), info.min, info.max)
        region = out[y0:y1, x0:x1]
        region[sub_mask] = filled[sub_mask].astype(out.dtype)
    return out


def _diffusion_fill(sub: np.ndarray, fill_mask: np.ndarray, max_iters: int = 400) -> np.ndarray:
    vals = sub.copy()
    known = ~fill_mask
    if not known.any():
        return vals  # nothing to anchor the fill; leave unchanged
    # Inward march: repeatedly fill unknown pixels with >= 1 known neighbor.
    while True:
        unknown = ~known
        if not unknown.any():
            break
        total, count = _shift_sums(vals, known)
        frontier = unknown & (count > 0)
        if not frontier.any():
            break  # isolated unknown region (cannot happen for discs)
        vals[frontier] = total[frontier] / count[frontier]
        known = known | frontier
    # Jacobi smoothing toward the discrete harmonic fill; boundary stays fixed.
    scale = np.max(np.abs(vals)) or 1.0
    all_known = np.ones_like(fill_mask)
    for _ in range(max_iters):
        total, count = _shift_sums(vals, all_known)
        new = total / np.maximum(count, 1)
        delta = np.max(np.abs(new[fill_mask] - vals[fill_mask]))
        vals[fill_mask] = new[fill_mask]
        if delta <= 1e-7 * scale:
            break
    return vals


def _shift_sums(vals: np.ndarray, known: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Sum and count of known 8-neighbors without wrap-around."""
    h, w = vals.shape
    total = np.zeros((h, w), dtype=np.float64)
    count = np.zeros((h, w), dtype=np.float64)
    kv = np.where(known, vals, 0.0)
    kf = known.astype(np.float64)
    for dy in (-1, 0, 1):
        for dx in (-1, 0, 1):
            if dy == 0 and dx == 0:
                continue
            ys = slice(max(dy, 0), h + min(dy, 0))
            yd = slice(max(-dy, 0), h + min(-dy, 0))
            xs = slice(max(dx, 0), w + min(dx, 0))
            xd = slice(max(-dx, 0), w + min(-dx, 0))
            total[yd, xd] += kv[ys, xs]
            count[yd, xd] += kf[ys, xs]
    return total, count
