"""Silhouette carving on the 128^3 reconstruction cube.

The cube is centered on the triangulated object center (corner = center -
half the cube side); every voxel center back-projects into each adjusted
view with nearest-neighbor sampling. HULL mode keeps voxels seen by every
view; MEAN_THRESH keeps voxels whose mean normalized intensity clears a
threshold. Projections outside the 224^2 frame sample 0.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from numba import njit, prange

from .errors import InsufficientViewsError, InvalidInputError
from .drr import render_drr
from .geometry import CameraMatrix, triangulate_origin
from .localize import CROP_SIZE, CropWindow, crop_mask, localize_all
from .volume import Volume, label_bbox_center_mm

HULL = "hull"
MEAN_THRESH = "mean_thresh"

DEFAULT_GRID_DIMS = 128
DEFAULT_VOXEL_MM = 0.625  # 80 mm cube: a vertebra occupies a few percent

ORIGIN_TRIANGULATED = "TRIANGULATED"
ORIGIN_GROUND_TRUTH = "GROUND_TRUTH"


@dataclass(frozen=True)
class OccupancyGrid:
    """Binary cube with a physical corner origin and isotropic voxels."""

    data: np.ndarray  # (n, n, n) uint8
    voxel_size_mm: float
    origin_mm: tuple[float, float, float]  # cube corner (not a voxel center)
    provenance: str = ORIGIN_TRIANGULATED

    def __post_init__(self):
        d = np.asarray(self.data)
        if d.ndim != 3:
            raise InvalidInputError("occupancy data must be 3D")
        if d.dtype != np.uint8:
            d = (d > 0).astype(np.uint8)
        if self.voxel_size_mm <= 0:
            raise InvalidInputError("voxel_size_mm must be positive")
        d = np.ascontiguousarray(d)
        d.flags.writeable = False
        object.__setattr__(self, "data", d)
        object.__setattr__(self, "origin_mm", tuple(float(o) for o in self.origin_mm))

    @property
    def occupied_fraction(self) -> float:
        return float(np.count_nonzero(self.data)) / self.data.size

    def voxel_centers(self) -> np.ndarray:
        """(N, 3) world mm coordinates of all voxel centers, x fastest."""
        n = self.data.shape
        ax = [self.origin_mm[a] + (np.arange(n[a]) + 0.5) * self.voxel_size_mm for a in range(3)]
        gx, gy, gz = np.meshgrid(ax[0], ax[1], ax[2], indexing="ij")
        return np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)

    def to_volume(self) -> Volume:
        """Convert to the volume-io representation (origin at voxel center)."""
        vs = self.voxel_size_mm
        center_origin = tuple(o + 0.5 * vs for o in self.origin_mm)
        return Volume(self.data, (vs, vs, vs), center_origin)

    @classmethod
    def from_volume(cls, v: Volume, provenance: str = ORIGIN_TRIANGULATED) -> "OccupancyGrid":
        s = v.spacing_mm
        if not (np.isclose(s[0], s[1]) and np.isclose(s[0], s[2])):
            raise InvalidInputError("occupancy grids need isotropic voxels")
        corner = tuple(o - 0.5 * s[0] for o in v.origin_mm)
        return cls(v.data, float(s[0]), corner, provenance)


def make_grid_geometry(
    center_mm, dims: int = DEFAULT_GRID_DIMS, voxel_size_mm: float = DEFAULT_VOXEL_MM
) -> tuple[tuple[float, float, float], int]:
    """Cube corner for a grid centered on the estimated object center."""
    c = np.asarray(center_mm, dtype=np.float64)
    corner = c - dims / 2.0 * voxel_size_mm
    return tuple(float(x) for x in corner), dims


def estimate_origin(crops: list[CropWindow]) -> np.ndarray:
    """Object-center estimate: rays through every crop center (112, 112)."""
    if len(crops) < 2:
        raise InsufficientViewsError("origin estimation needs at least 2 crops")
    cams = [c.camera for c in crops]
    centers = [(CROP_SIZE / 2.0, CROP_SIZE / 2.0)] * len(crops)
    return triangulate_origin(cams, centers)


def _normalize_view_image(img: np.ndarray) -> np.ndarray:
    a = np.asarray(img)
    if a.shape != (CROP_SIZE, CROP_SIZE):
        raise InvalidInputError(f"carve views must be {CROP_SIZE}x{CROP_SIZE}")
    if a.dtype == np.uint8:
        return a.astype(np.float32) / 255.0
    if a.dtype == np.uint16:
        return a.astype(np.float32) / 65535.0
    return a.astype(np.float32)


@njit(cache=True, parallel=True)
def _carve_kernel(corner, vs, dims, pmats, imgs, hull, tau, min_views, out):
    n_views = pmats.shape[0]
    size = imgs.shape[1]
    n3 = dims * dims * dims
    for idx in prange(n3):
        iz = idx % dims
        iy = (idx // dims) % dims
        ix = idx // (dims * dims)
        x = corner[0] + (ix + 0.5) * vs
        y = corner[1] + (iy + 0.5) * vs
        z = corner[2] + (iz + 0.5) * vs
        total = 0.0
        inside_count = 0
        occupied = True
        for v in range(n_views):
            p = pmats[v]
            w = p[2, 0] * x + p[2, 1] * y + p[2, 2] * z + p[2, 3]
            s = 0.0
            if w > 1e-12:
                u = (p[0, 0] * x + p[0, 1] * y + p[0, 2] * z + p[0, 3]) / w
                vv = (p[1, 0] * x + p[1, 1] * y + p[1, 2] * z + p[1, 3]) / w
                ui = int(np.floor(u + 0.5))
                vi = int(np.floor(vv + 0.5))
                if 0 <= ui < size and 0 <= vi < size:
                    s = imgs[v, vi, ui]
                    inside_count += 1
            if hull:
                if s <= 0.0:
                    occupied = False
                    break
            else:
                total += s
        if hull:
            out[idx] = 1 if occupied else 0
        else:
            mean = total / n_views
            out[idx] = 1 if (inside_count >= min_views and mean >= tau) else 0


def carve(
    views: list[tuple[np.ndarray, CameraMatrix]],
    center_mm,
    mode: str = HULL,
    tau: float = 0.15,
    min_views: int | None = None,
    dims: int = DEFAULT_GRID_DIMS,
    voxel_size_mm: float = DEFAULT_VOXEL_MM,
    provenance: str = ORIGIN_TRIANGULATED,
) -> OccupancyGrid:
    """Back-project every voxel center into every view (nearest neighbor)."""
    if len(views) < 2:
        raise InsufficientViewsError("carving needs at least 2 views")
    if mode not in (HULL, MEAN_THRESH):
        raise InvalidInputError(f"unknown carve mode {mode!r}")
    center = np.asarray(center_mm, dtype=np.float64)
    if not np.all(np.isfinite(center)):
        raise InvalidInputError("center must be finite")
    corner, dims = make_grid_geometry(center, dims, voxel_size_mm)

    imgs = np.stack([_normalize_view_image(img) for img, _ in views])
    pmats = np.stack(
        [
            cam.p if isinstance(cam, CameraMatrix) else np.asarray(cam, dtype=np.float64)
            for _, cam in views
        ]
    )
    out = np.zeros(dims * dims * dims, dtype=np.uint8)
    _carve_kernel(
        np.asarray(corner, dtype=np.float64),
        float(voxel_size_mm),
        dims,
        pmats,
        np.ascontiguousarray(imgs),
        mode == HULL,
        float(tau),
        len(views) if min_views is None else int(min_views),
        out,
    )
    return OccupancyGrid(
        data=out.reshape(dims, dims, dims),
        voxel_size_mm=voxel_size_mm,
        origin_mm=corner,
        provenance=provenance,
    )


@dataclass(frozen=True)
class ReconstructionResult:
    grid: OccupancyGrid
    center_mm: np.ndarray
    crops: list[CropWindow]
    timings_ms: dict

    @property
    def localization_ms(self) -> float:
        return self.timings_ms.get("localize_ms", 0.0)

    @property
    def reconstruction_ms(self) -> float:
        return self.timings_ms.get("reconstruct_ms", 0.0)


def reconstruct_from_views(
    view_items: list[dict],
    label: int,
    mode: str = HULL,
    origin_mode: str = ORIGIN_TRIANGULATED,
    gt_center_mm=None,
    tau: float = 0.15,
    min_views: int | None = None,
    dims: int = DEFAULT_GRID_DIMS,
    voxel_size_mm: float = DEFAULT_VOXEL_MM,
) -> ReconstructionResult:
    """Reconstruct from pre-rendered views.

    Each item is {"image": full DRR array or None, "mask": full silhouette
    array, "camera": CameraMatrix}. Localization boxes come from the masks;
    HULL carving consumes mask crops, MEAN_THRESH the image crops.
    """
    from .localize import boxes_from_mask, crop_vertebra, tight_box

    t0 = time.perf_counter()
    crops: list[CropWindow] = []
    carve_views: list[tuple[np.ndarray, CameraMatrix]] = []
    for item in view_items:
        mask = np.asarray(item["mask"])
        h, w = mask.shape
        tb = tight_box(mask)
        if tb is None:
            continue
        if tb.u_min == 0 or tb.v_min == 0 or tb.u_min + tb.width >= w or tb.v_min + tb.height >= h:
            continue
        box = boxes_from_mask(mask)
        source = item.get("image") if mode == MEAN_THRESH else mask
        if source is None:
            raise InvalidInputError("MEAN_THRESH carving needs DRR images")
        window = crop_vertebra(np.asarray(source), item["camera"], box, label=label)
        crops.append(window)
        if mode == HULL:
            # Binarize at half coverage: keeps the resampled silhouette
            # boundary unbiased instead of dilated by bilinear softness.
            carve_views.append(((crop_mask(window, mask) >= 0.5).astype(np.uint8), window.camera))
        else:
            carve_views.append((window.image, window.camera))
    t_localize = (time.perf_counter() - t0) * 1000.0

    if len(crops) < 2:
        raise InsufficientViewsError(
            f"only {len(crops)} views kept the label fully visible; need >= 2"
        )

    t0 = time.perf_counter()
    if origin_mode == ORIGIN_GROUND_TRUTH:
        if gt_center_mm is None:
            raise InvalidInputError("ground-truth origin requested without gt_center_mm")
        center = np.asarray(gt_center_mm, dtype=np.float64)
    else:
        center = estimate_origin(crops)
    grid = carve(
        carve_views,
        center,
        mode=mode,
        tau=tau,
        min_views=min_views,
        dims=dims,
        voxel_size_mm=voxel_size_mm,
        provenance=origin_mode,
    )
    t_recon = (time.perf_counter() - t0) * 1000.0
    return ReconstructionResult(
        grid=grid,
        center_mm=center,
        crops=crops,
        timings_ms={"localize_ms": t_localize, "reconstruct_ms": t_recon},
    )


def reconstruct_scene(
    attenuation: Volume,
    labels: Volume,
    label: int,
    cams: list[CameraMatrix],
    mode: str = HULL,
    origin_mode: str = ORIGIN_TRIANGULATED,
    render_px: int = 448,
    step_mm: float | None = None,
    with_images: bool = False,
    **carve_kwargs,
) -> ReconstructionResult:
    """Render per-view silhouettes (and DRRs when needed), then reconstruct."""
    from .drr import render_mask

    items = []
    for cam in cams:
        mask = render_mask(labels, label, cam, render_px, render_px, step_mm)
        image = None
        if with_images or mode == MEAN_THRESH:
            image = render_drr(attenuation, cam, render_px, render_px, step_mm).normalized
        items.append({"image": image, "mask": mask, "camera": cam})
    gt_center = label_bbox_center_mm(labels, label)
    return reconstruct_from_views(
        items,
        label,
        mode=mode,
        origin_mode=origin_mode,
        gt_center_mm=gt_center,
        **carve_kwargs,
    )


def rasterize_gt_grid(labels: Volume, label: int, like: OccupancyGrid) -> OccupancyGrid:
    """Ground-truth occupancy of a label sampled on a prediction's lattice."""
    pts = like.voxel_centers()
    idx = np.rint((pts - np.asarray(labels.origin_mm)) / np.asarray(labels.spacing_mm))
    idx = idx.astype(np.int64)
    dims = np.array(labels.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    occ = np.zeros(len(pts), dtype=np.uint8)
    occ[ok] = (labels.data[idx[ok, 0], idx[ok, 1], idx[ok, 2]] == label).astype(np.uint8)
    n = like.data.shape[0]
    return OccupancyGrid(
        data=occ.reshape(n, n, n),
        voxel_size_mm=like.voxel_size_mm,
        origin_mm=like.origin_mm,
        provenance=ORIGIN_GROUND_TRUTH,
    )
