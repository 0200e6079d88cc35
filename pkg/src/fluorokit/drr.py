"""Ray-integral DRR renderer.

Each pixel accumulates attenuation along the ray from the focal point
through that pixel's detector position: raw(p) = sum A(sample) * step_mm
over samples inside the volume, with trilinear interpolation and zero
contribution outside. Raw units are mm * HU; the display image rescales
raw to 16-bit by the per-image maximum.

Rendering is data-parallel over pixels (numba, threads share the read-only
volume); results are independent of the thread count.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

# The bundled TBB on this image is too old for numba; omp avoids the warning.
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

from numba import njit, prange

from .errors import InvalidInputError, UnsupportedConfigurationError
from .geometry import CameraMatrix, project
from .volume import Volume, label_mask


@dataclass(frozen=True)
class DrrImage:
    width: int
    height: int
    raw: np.ndarray  # (height, width) float32, line integrals in mm*HU
    pixel_pitch_mm: float | None = None

    def __post_init__(self):
        raw = np.asarray(self.raw, dtype=np.float32)
        if raw.shape != (self.height, self.width):
            raise InvalidInputError("raw shape must be (height, width)")
        if raw.size and float(raw.min()) < 0:
            raise InvalidInputError("raw DRR values must be non-negative")
        raw = np.ascontiguousarray(raw)
        raw.flags.writeable = False
        object.__setattr__(self, "raw", raw)

    @property
    def normalized(self) -> np.ndarray:
        """16-bit display image: raw scaled so the max maps to 65535."""
        m = float(self.raw.max()) if self.raw.size else 0.0
        if m <= 0:
            return np.zeros_like(self.raw, dtype=np.uint16)
        return np.round(self.raw.astype(np.float64) / m * 65535.0).astype(np.uint16)


_SKIP_BLOCK = 8  # coarse occupancy block edge, in voxels


@njit(cache=True, parallel=True)
def _march_kernel(vol, coarse, origin, spacing, src, dirs, step, binary, out):
    nx, ny, nz = vol.shape
    h, w = out.shape
    ex = (nx - 1) * spacing[0]
    ey = (ny - 1) * spacing[1]
    ez = (nz - 1) * spacing[2]
    block = _SKIP_BLOCK
    for py in prange(h):
        for px in range(w):
            dx = dirs[py, px, 0]
            dy = dirs[py, px, 1]
            dz = dirs[py, px, 2]
            ox = src[0] - origin[0]
            oy = src[1] - origin[1]
            oz = src[2] - origin[2]
            # Slab intersection with the interpolation support box.
            t0 = 0.0
            t1 = 1e300
            ok = True
            for axis in range(3):
                if axis == 0:
                    d, o, e = dx, ox, ex
                elif axis == 1:
                    d, o, e = dy, oy, ey
                else:
                    d, o, e = dz, oz, ez
                if abs(d) < 1e-12:
                    if o < 0.0 or o > e:
                        ok = False
                        break
                else:
                    ta = (0.0 - o) / d
                    tb = (e - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t0:
                        t0 = ta
                    if tb < t1:
                        t1 = tb
            acc = 0.0
            if ok and t1 > t0:
                n_steps = int(np.ceil((t1 - t0) / step))
                i = 0
                while i < n_steps:
                    t = t0 + (i + 0.5) * step
                    if t > t1:
                        break
                    gx = (ox + t * dx) / spacing[0]
                    gy = (oy + t * dy) / spacing[1]
                    gz = (oz + t * dz) / spacing[2]
                    if gx < 0.0 or gx > nx - 1 or gy < 0.0 or gy > ny - 1 or gz < 0.0 or gz > nz - 1:
                        i += 1
                        continue
                    # Empty-space skip: blocks whose (voxel-dilated) content is
                    # all zero contribute nothing, so jump to the block exit.
                    # The sample lattice t0 + (i + 0.5) step is preserved, so
                    # results are bit-identical to exhaustive marching.
                    bx = int(gx) // block
                    by = int(gy) // block
                    bz = int(gz) // block
                    if coarse[bx, by, bz] == 0:
                        t_exit = t1
                        if abs(dx) > 1e-12:
                            bound = (bx + 1) * block if dx > 0 else bx * block
                            tx = (bound * spacing[0] - ox) / dx
                            if tx < t_exit:
                                t_exit = tx
                        if abs(dy) > 1e-12:
                            bound = (by + 1) * block if dy > 0 else by * block
                            ty = (bound * spacing[1] - oy) / dy
                            if ty < t_exit:
                                t_exit = ty
                        if abs(dz) > 1e-12:
                            bound = (bz + 1) * block if dz > 0 else bz * block
                            tz = (bound * spacing[2] - oz) / dz
                            if tz < t_exit:
                                t_exit = tz
                        j = int(np.ceil((t_exit - t0) / step - 0.5))
                        i = j if j > i else i + 1
                        continue
                    if binary:
                        # Silhouette: the ray crosses an occupied voxel cube
                        # (nearest-neighbor membership keeps edges unbiased,
                        # where trilinear support would dilate by a voxel).
                        jx = int(gx + 0.5)
                        jy = int(gy + 0.5)
                        jz = int(gz + 0.5)
                        if vol[jx, jy, jz] > 0.0:
                            acc = 1.0
                            break
                        i += 1
                        continue
                    ix = int(gx)
                    iy = int(gy)
                    iz = int(gz)
                    if ix > nx - 2:
                        ix = nx - 2
                    if iy > ny - 2:
                        iy = ny - 2
                    if iz > nz - 2:
                        iz = nz - 2
                    fx = gx - ix
                    fy = gy - iy
                    fz = gz - iz
                    c00 = vol[ix, iy, iz] * (1 - fx) + vol[ix + 1, iy, iz] * fx
                    c10 = vol[ix, iy + 1, iz] * (1 - fx) + vol[ix + 1, iy + 1, iz] * fx
                    c01 = vol[ix, iy, iz + 1] * (1 - fx) + vol[ix + 1, iy, iz + 1] * fx
                    c11 = vol[ix, iy + 1, iz + 1] * (1 - fx) + vol[ix + 1, iy + 1, iz + 1] * fx
                    c0 = c00 * (1 - fy) + c10 * fy
                    c1 = c01 * (1 - fy) + c11 * fy
                    val = c0 * (1 - fz) + c1 * fz
                    if val > 0.0:
                        acc += val * step
                    i += 1
            out[py, px] = acc


def _ray_directions(cam: CameraMatrix, width: int, height: int) -> tuple[np.ndarray, np.ndarray]:
    """Focal point and unit world direction for every pixel center."""
    p = cam.p
    m = p[:, :3]
    src = -np.linalg.solve(m, p[:, 3])
    minv = np.linalg.inv(m)
    u, v = np.meshgrid(np.arange(width, dtype=np.float64), np.arange(height, dtype=np.float64))
    dirs = (
        minv[:, 0][None, None, :] * u[..., None]
        + minv[:, 1][None, None, :] * v[..., None]
        + minv[:, 2][None, None, :]
    )
    # A positive-depth point X = X_o + t d must land at positive w; flip
    #directions if the matrix scale is negative.
    w_of_dir = dirs @ p[2, :3]
    sign = np.sign(w_of_dir)
    dirs = dirs * sign[..., None]
    dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
    return src, np.ascontiguousarray(dirs)


def _check_camera_outside(v: Volume, src: np.ndarray) -> None:
    lo, hi = v.bounds_mm()
    if np.all(src >= lo) and np.all(src <= hi):
        raise UnsupportedConfigurationError("camera focal point lies inside the volume")


def _coarse_occupancy(vol: np.ndarray) -> np.ndarray:
    """Per-block any-nonzero map, dilated one block so every sample whose
    trilinear/nearest support could be nonzero lies in a marked block."""
    from scipy import ndimage

    b = _SKIP_BLOCK
    nx, ny, nz = vol.shape
    cx, cy, cz = -(-nx // b), -(-ny // b), -(-nz // b)
    padded = np.zeros((cx * b, cy * b, cz * b), dtype=bool)
    padded[:nx, :ny, :nz] = vol != 0
    blocks = padded.reshape(cx, b, cy, b, cz, b).any(axis=(1, 3, 5))
    return ndimage.binary_dilation(blocks, structure=np.ones((3, 3, 3), bool)).astype(np.uint8)


def _march(v: Volume, cam: CameraMatrix, width: int, height: int, step_mm, binary: bool) -> np.ndarray:
    if width < 1 or height < 1:
        raise InvalidInputError("image size must be positive")
    if step_mm is None:
        step_mm = 0.5 * min(v.spacing_mm)
    if step_mm <= 0:
        raise InvalidInputError("step_mm must be positive")
    src, dirs = _ray_directions(cam, width, height)
    _check_camera_outside(v, src)
    vol = np.ascontiguousarray(v.data.astype(np.float32, copy=False))
    out = np.zeros((height, width), dtype=np.float32)
    _march_kernel(
        vol,
        _coarse_occupancy(vol),
        np.asarray(v.origin_mm, dtype=np.float64),
        np.asarray(v.spacing_mm, dtype=np.float64),
        src.astype(np.float64),
        dirs,
        float(step_mm),
        binary,
        out,
    )
    return out


def render_drr(
    v: Volume,
    cam: CameraMatrix,
    width: int = 448,
    height: int = 448,
    step_mm: float | None = None,
    pixel_pitch_mm: float | None = None,
) -> DrrImage:
    """Render the attenuation volume into a line-integral image."""
    if v.dtype_name == "uint8":
        raise InvalidInputError("render_drr expects an attenuation volume, not labels")
    raw = _march(v, cam, width, height, step_mm, binary=False)
    return DrrImage(width=width, height=height, raw=raw, pixel_pitch_mm=pixel_pitch_mm)


def render_mask(
    labels: Volume,
    label_id: int,
    cam: CameraMatrix,
    width: int = 448,
    height: int = 448,
    step_mm: float | None = None,
) -> np.ndarray:
    """Silhouette of one label: pixel = 1 iff its ray meets that label."""
    mask_vol = label_mask(labels, label_id)
    raw = _march(
        Volume(mask_vol.data.astype(np.float32), mask_vol.spacing_mm, mask_vol.origin_mm),
        cam,
        width,
        height,
        step_mm,
        binary=True,
    )
    return (raw > 0).astype(np.uint8)


@dataclass(frozen=True)
class PairedRender:
    image: DrrImage
    masks: dict  # label id -> (h, w) uint8 silhouette
    beads2d: np.ndarray  # (n, 2) analytic bead projections, px


def render_paired(
    v: Volume,
    labels: Volume | None,
    cam: CameraMatrix,
    width: int = 448,
    height: int = 448,
    step_mm: float | None = None,
    bead_points=None,
    label_list=None,
    pixel_pitch_mm: float | None = None,
) -> PairedRender:
    """One view rendered as DRR + per-label silhouettes + bead projections."""
    img = render_drr(v, cam, width, height, step_mm, pixel_pitch_mm)
    masks = {}
    if labels is not None:
        from .volume import label_ids

        ids = label_list if label_list is not None else label_ids(labels)
        for lid in ids:
            masks[int(lid)] = render_mask(labels, int(lid), cam, width, height, step_mm)
    if bead_points is None:
        beads2d = np.zeros((0, 2))
    else:
        beads2d = project(cam, np.asarray(bead_points, dtype=np.float64))
    return PairedRender(image=img, masks=masks, beads2d=beads2d)
