"""Synthetic phantoms: geometric primitives rasterized into HU/label volumes.

Primitives carry an HU value and a label id; voxel centers inside a primitive
receive its HU, and overlaps resolve to the last primitive in the list. All
shapes are axis-aligned in world mm (labels follow the volume convention:
0 background, 1-5 = L1-L5).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError
from .volume import Volume

HU_MIN, HU_MAX = -1024.0, 3071.0


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    hu: float
    label: int

    def bounds(self):
        c, r = np.asarray(self.center, dtype=np.float64), self.radius
        return c - r, c + r

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius**2

    def _validate_extents(self):
        return self.radius > 0


@dataclass(frozen=True)
class SoftSphere:
    """Sphere with an analytic linear coverage ramp of width ``smoothing``.

    Renders with band-limited edges: at coarse ray steps a hard sphere edge
    aliases, while the ramp integrates smoothly. Label membership still uses
    the nominal radius.
    """

    center: tuple[float, float, float]
    radius: float
    hu: float
    label: int
    smoothing: float = 1.0

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        r = self.radius + self.smoothing / 2.0
        return c - r, c + r

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        return np.einsum("ij,ij->i", d, d) <= self.radius**2

    def coverage(self, pts: np.ndarray) -> np.ndarray:
        d = np.sqrt(np.einsum("ij,ij->i", pts - np.asarray(self.center), pts - np.asarray(self.center)))
        return np.clip((self.radius + self.smoothing / 2.0 - d) / self.smoothing, 0.0, 1.0)

    def _validate_extents(self):
        return self.radius > 0 and self.smoothing > 0


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full edge lengths
    hu: float
    label: int

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.size, dtype=np.float64) / 2.0
        return c - h, c + h

    def contains(self, pts: np.ndarray) -> np.ndarray:
        lo, hi = self.bounds()
        return np.all((pts >= lo) & (pts <= hi), axis=1)

    def _validate_extents(self):
        return all(s > 0 for s in self.size)


@dataclass(frozen=True)
class ChamferedBox:
    """Box with its four z-parallel edges cut at 45 degrees (octagon prism).

    ``chamfer`` is the leg length of each corner cut in the x-y section.
    """

    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full edge lengths
    chamfer: float
    hu: float
    label: int

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.asarray(self.size, dtype=np.float64) / 2.0
        return c - h, c + h

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = np.abs(pts - np.asarray(self.center))
        a, b, hz = self.size[0] / 2.0, self.size[1] / 2.0, self.size[2] / 2.0
        box = (d[:, 0] <= a) & (d[:, 1] <= b) & (d[:, 2] <= hz)
        return box & (d[:, 0] + d[:, 1] <= a + b - self.chamfer)

    def _validate_extents(self):
        return (
            all(s > 0 for s in self.size)
            and 0 < self.chamfer < min(self.size[0], self.size[1])
        )


@dataclass(frozen=True)
class Cylinder:
    """Elliptic cylinder with its axis along world z."""

    center: tuple[float, float, float]
    radius_x: float
    radius_y: float
    half_height: float
    hu: float
    label: int

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.array([self.radius_x, self.radius_y, self.half_height])
        return c - h, c + h

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        in_z = np.abs(d[:, 2]) <= self.half_height
        return in_z & ((d[:, 0] / self.radius_x) ** 2 + (d[:, 1] / self.radius_y) ** 2 <= 1.0)

    def _validate_extents(self):
        return self.radius_x > 0 and self.radius_y > 0 and self.half_height > 0


@dataclass(frozen=True)
class Tube:
    """Hollow circular cylinder (annulus cross-section), axis along z."""

    center: tuple[float, float, float]
    outer_radius: float
    inner_radius: float
    half_height: float
    hu: float
    label: int

    def bounds(self):
        c = np.asarray(self.center, dtype=np.float64)
        h = np.array([self.outer_radius, self.outer_radius, self.half_height])
        return c - h, c + h

    def contains(self, pts: np.ndarray) -> np.ndarray:
        d = pts - np.asarray(self.center)
        rr = d[:, 0] ** 2 + d[:, 1] ** 2
        in_z = np.abs(d[:, 2]) <= self.half_height
        return in_z & (rr <= self.outer_radius**2) & (rr >= self.inner_radius**2)

    def _validate_extents(self):
        return 0 < self.inner_radius < self.outer_radius and self.half_height > 0


Primitive = Sphere | SoftSphere | Box | ChamferedBox | Cylinder | Tube


@dataclass(frozen=True)
class Phantom:
    primitives: tuple[Primitive, ...]

    def __post_init__(self):
        prims = tuple(self.primitives)
        for p in prims:
            if not p._validate_extents():
                raise InvalidInputError(f"primitive has non-positive extents: {p}")
            if not (HU_MIN <= p.hu <= HU_MAX):
                raise InvalidInputError(f"HU {p.hu} outside [{HU_MIN}, {HU_MAX}]")
            if not (0 <= p.label <= 255):
                raise InvalidInputError("label must fit in uint8")
        object.__setattr__(self, "primitives", prims)

    def labels(self) -> list[int]:
        return sorted({p.label for p in self.primitives if p.label != 0})


def rasterize_phantom(
    ph: Phantom,
    dims: tuple[int, int, int],
    spacing: tuple[float, float, float],
    origin=None,
    background_hu: float = 0.0,
    supersample: int = 1,
) -> tuple[Volume, Volume]:
    """Rasterize to an HU volume and a label volume on the same lattice.

    ``origin`` defaults to centering the voxel lattice on the world origin.
    With the default ``supersample=1``, voxel centers inside a primitive
    receive its HU; larger values estimate per-voxel coverage on an s^3
    subgrid and blend HU accordingly (labels switch at 50% coverage), which
    gives smooth silhouettes for small primitives like beads.
    """
    dims = tuple(int(n) for n in dims)
    spacing = tuple(float(s) for s in spacing)
    if any(n < 1 for n in dims) or any(s <= 0 for s in spacing):
        raise InvalidInputError("dims must be >= 1 and spacing positive")
    if supersample < 1:
        raise InvalidInputError("supersample must be >= 1")
    if origin is None:
        origin = tuple(-(n - 1) / 2.0 * s for n, s in zip(dims, spacing))
    origin = tuple(float(o) for o in origin)

    hu = np.full(dims, np.int16(np.round(background_hu)), dtype=np.int16)
    labels = np.zeros(dims, dtype=np.uint8)
    axes = [origin[a] + spacing[a] * np.arange(dims[a]) for a in range(3)]
    s = supersample
    sub_offsets = [((k + 0.5) / s - 0.5) for k in range(s)]

    for prim in ph.primitives:
        lo, hi = prim.bounds()
        # Evaluate only the voxel window covering the primitive (plus half a
        # voxel when supersampling, so edge coverage is captured).
        pad = 0.5 if (s > 1 or hasattr(prim, "coverage")) else 0.0
        win = []
        empty = False
        for a in range(3):
            i0 = int(np.ceil((lo[a] - origin[a]) / spacing[a] - pad - 1e-9))
            i1 = int(np.floor((hi[a] - origin[a]) / spacing[a] + pad + 1e-9))
            i0, i1 = max(i0, 0), min(i1, dims[a] - 1)
            if i0 > i1:
                empty = True
                break
            win.append((i0, i1))
        if empty:
            continue
        (x0, x1), (y0, y1), (z0, z1) = win
        gx, gy, gz = np.meshgrid(
            axes[0][x0 : x1 + 1], axes[1][y0 : y1 + 1], axes[2][z0 : z1 + 1], indexing="ij"
        )
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        if hasattr(prim, "coverage"):
            coverage = prim.coverage(pts)
        elif s == 1:
            coverage = prim.contains(pts).astype(np.float64)
        else:
            count = np.zeros(len(pts), dtype=np.int32)
            for ox in sub_offsets:
                for oy in sub_offsets:
                    for oz in sub_offsets:
                        shift = np.array([ox * spacing[0], oy * spacing[1], oz * spacing[2]])
                        count += prim.contains(pts + shift)
            coverage = count / float(s**3)
        coverage = coverage.reshape(gx.shape)
        sub = (slice(x0, x1 + 1), slice(y0, y1 + 1), slice(z0, z1 + 1))
        touched = coverage > 0
        blend = coverage[touched] * prim.hu + (1.0 - coverage[touched]) * hu[sub][touched]
        block_hu = hu[sub]
        block_hu[touched] = np.int16(np.round(blend))
        hu[sub] = block_hu
        block_lab = labels[sub]
        block_lab[coverage >= 0.5] = np.uint8(prim.label)
        labels[sub] = block_lab

    return (
        Volume(hu, spacing, origin),
        Volume(labels, spacing, origin),
    )


def vertebra_primitives(
    center,
    label: int,
    scale: float = 0.85,
    hu: float = 700.0,
    body_wx: float = 36.0,
    body_wy: float = 28.0,
    body_wz: float = 26.0,
    body_chamfer: float = 5.0,
    spinous_len: float = 5.0,
    spinous_wx: float = 6.0,
    spinous_wz: float = 12.0,
    transverse_len: float = 14.0,
    transverse_wy: float = 6.0,
    transverse_wz: float = 6.0,
) -> list[Primitive]:
    """Vertebra-like composite: a chamfered body block, a posterior spinous
    stub, and two long lateral transverse bars. Anterior is +y, so the
    spinous stub extends toward -y, making the shape front/back asymmetric.
    Proportions are chosen so a visual hull from the pose protocol behaves
    like the real anatomy: off-plane views trim the chamfers and bar
    shadows that pure AP/lateral view sets cannot resolve."""
    c = np.asarray(center, dtype=np.float64)
    s = scale
    sl, sx, sz = spinous_len * s, spinous_wx * s, spinous_wz * s
    tl, ty, tz = transverse_len * s, transverse_wy * s, transverse_wz * s
    body_ry = body_wy / 2.0 * s
    body_rx = body_wx / 2.0 * s
    return [
        ChamferedBox(tuple(c), (body_wx * s, body_wy * s, body_wz * s), body_chamfer * s, hu, label),
        Box(tuple(c + [0.0, -(body_ry + sl / 2.0 - 1.0), 0.0]), (sx, sl, sz), hu, label),
        Box(tuple(c + [(body_rx + tl / 2.0 - 1.0), -2.0 * s, 0.0]), (tl, ty, tz), hu, label),
        Box(tuple(c + [-(body_rx + tl / 2.0 - 1.0), -2.0 * s, 0.0]), (tl, ty, tz), hu, label),
    ]


def make_lumbar_phantom(n_vertebrae: int = 5, level_pitch_mm: float = 30.0) -> Phantom:
    """Stack of vertebra composites along z, labels 1..n (L1 superior)."""
    if not 1 <= n_vertebrae <= 5:
        raise InvalidInputError("n_vertebrae must be in [1, 5]")
    prims: list[Primitive] = []
    top = (n_vertebrae - 1) / 2.0 * level_pitch_mm
    for i in range(n_vertebrae):
        scale = 0.79 + 0.03 * i  # lower lumbar levels are slightly larger
        z = top - i * level_pitch_mm
        prims.extend(vertebra_primitives((0.0, 0.0, z), label=i + 1, scale=scale))
    return Phantom(tuple(prims))


def make_sphere_phantom(radius: float = 20.0, hu: float = 700.0, label: int = 1) -> Phantom:
    return Phantom((Sphere((0.0, 0.0, 0.0), radius, hu, label),))


BEAD_HU = 3071.0
REFERENCE_BEAD_RADIUS_MM = 2.5
STANDARD_BEAD_RADIUS_MM = 1.5


def make_bead_layout(
    rng,
    n_reference: int = 7,
    n_standard: int = 7,
    ellipsoid_mm=(55.0, 40.0, 70.0),
    min_separation_mm: float = 22.0,
    cameras=(),
    min_separation_px: float = 24.0,
    image_bounds_px: tuple[int, int, float] | None = None,
    min_depth_span_mm: float = 0.0,
) -> tuple[np.ndarray, list[str]]:
    """Random bead positions inside an ellipsoid with guaranteed separation.

    When cameras are given, layouts are also rejection-sampled so that all
    projected bead centers stay ``min_separation_px`` apart in every view
    (mirroring the deliberate spacing of a physical calibration phantom).
    ``image_bounds_px`` = (width, height, margin) additionally requires every
    projection to land inside the frame, and ``min_depth_span_mm`` requires
    the beads to spread along each camera's optical axis (depth diversity is
    what conditions the focal-length/distance separation of a solve).
    """
    from .geometry import decompose_camera, project  # local import to avoid a cycle

    n = n_reference + n_standard
    axes = np.asarray(ellipsoid_mm, dtype=np.float64)
    for _ in range(4000):
        pts: list[np.ndarray] = []
        attempts = 0
        while len(pts) < n and attempts < 2000:
            attempts += 1
            p = rng.uniform(-1.0, 1.0, size=3)
            if p @ p > 1.0:
                continue
            cand = p * axes
            if all(np.linalg.norm(cand - q) >= min_separation_mm for q in pts):
                pts.append(cand)
        if len(pts) < n:
            continue
        arr = np.array(pts)
        ok = True
        for cam in cameras:
            uv = project(cam, arr)
            d = np.linalg.norm(uv[:, None, :] - uv[None, :, :], axis=-1)
            d[np.diag_indices(n)] = np.inf
            if d.min() < min_separation_px:
                ok = False
                break
            if min_depth_span_mm > 0.0:
                axis = decompose_camera(cam).r[2]
                depths = arr @ axis
                if depths.max() - depths.min() < min_depth_span_mm:
                    ok = False
                    break
            if image_bounds_px is not None:
                w, h, margin = image_bounds_px
                if (
                    uv[:, 0].min() < margin
                    or uv[:, 0].max() > w - margin
                    or uv[:, 1].min() < margin
                    or uv[:, 1].max() > h - margin
                ):
                    ok = False
                    break
        if ok:
            classes = ["REF"] * n_reference + ["STD"] * n_standard
            return arr, classes
    raise InvalidInputError("could not place beads with the requested separations")


def make_bead_phantom(points3d: np.ndarray, classes, smoothing: float | None = None) -> Phantom:
    """Bead spheres sized by class; ``smoothing`` switches to soft edges."""
    prims: list[Primitive] = []
    for p, cls in zip(points3d, classes):
        r = REFERENCE_BEAD_RADIUS_MM if cls == "REF" else STANDARD_BEAD_RADIUS_MM
        if smoothing is None:
            prims.append(Sphere(tuple(p), r, BEAD_HU, 0))
        else:
            prims.append(SoftSphere(tuple(p), r, BEAD_HU, 0, smoothing=smoothing))
    return Phantom(tuple(prims))
