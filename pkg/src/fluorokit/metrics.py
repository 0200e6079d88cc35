"""Reconstruction quality metrics: F1, IoU, surface score, ASD, HD95, and
per-surface-point distance maps.

Surfaces are the centers of occupied voxels with at least one empty
6-neighbor (out-of-bounds counts as empty). HD95 takes the maximum of the
two directed 95th percentiles; percentiles interpolate linearly between
order statistics. Distances are in mm.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .errors import EmptySurfaceError, IncompatibleGridsError, InvalidInputError
from .carve import OccupancyGrid


@dataclass(frozen=True)
class MetricsReport:
    f1: float
    iou: float
    surface_score: float
    tau_mm: float
    asd_mm: float
    hd95_mm: float
    counts: dict = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {
            "f1": self.f1,
            "iou": self.iou,
            "surface_score": self.surface_score,
            "tau_mm": self.tau_mm,
            "asd_mm": self.asd_mm,
            "hd95_mm": self.hd95_mm,
            "counts": self.counts,
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json_dict(), indent=1, sort_keys=True) + "\n")


@dataclass(frozen=True)
class DistanceMap:
    """Distance of each predicted surface point to the ground-truth surface."""

    points_mm: np.ndarray  # (n, 3)
    distances_mm: np.ndarray  # (n,)
    clip_mm: float = 9.0

    def __post_init__(self):
        pts = np.ascontiguousarray(np.asarray(self.points_mm, dtype=np.float64))
        d = np.ascontiguousarray(np.asarray(self.distances_mm, dtype=np.float64))
        if pts.ndim != 2 or pts.shape[1] != 3 or len(d) != len(pts):
            raise InvalidInputError("points (n,3) and distances (n,) must align")
        if d.size and d.min() < 0:
            raise InvalidInputError("distances must be non-negative")
        if self.clip_mm <= 0:
            raise InvalidInputError("clip_mm must be positive")
        pts.flags.writeable = False
        d.flags.writeable = False
        object.__setattr__(self, "points_mm", pts)
        object.__setattr__(self, "distances_mm", d)

    @property
    def display_mm(self) -> np.ndarray:
        """Distances clipped to the visualization ceiling."""
        return np.minimum(self.distances_mm, self.clip_mm)

    def to_csv(self, path: str | Path) -> Path:
        lines = ["x_mm,y_mm,z_mm,dist_mm"]
        for p, d in zip(self.points_mm, self.distances_mm):
            lines.append(f"{p[0]:.6g},{p[1]:.6g},{p[2]:.6g},{d:.6g}")
        path = Path(path)
        path.write_text("\n".join(lines) + "\n")
        return path


def _check_same_lattice(a: OccupancyGrid, b: OccupancyGrid) -> None:
    if a.data.shape != b.data.shape:
        raise IncompatibleGridsError(f"dims differ: {a.data.shape} vs {b.data.shape}")
    if not np.isclose(a.voxel_size_mm, b.voxel_size_mm, rtol=0, atol=1e-9):
        raise IncompatibleGridsError("voxel sizes differ")
    if not np.allclose(a.origin_mm, b.origin_mm, rtol=0, atol=1e-6):
        raise IncompatibleGridsError("origins differ")


def voxel_overlap(pred: OccupancyGrid, gt: OccupancyGrid) -> tuple[float, float]:
    """(f1, iou) over the voxel sets; empty-vs-empty counts as perfect."""
    _check_same_lattice(pred, gt)
    p = pred.data > 0
    g = gt.data > 0
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    if tp + fp + fn == 0:
        return 1.0, 1.0
    f1 = 2.0 * tp / (2.0 * tp + fp + fn)
    iou = tp / (tp + fp + fn)
    return f1, iou


def extract_surface(grid: OccupancyGrid) -> np.ndarray:
    """Centers (mm) of occupied voxels with an empty 6-neighbor."""
    occ = grid.data > 0
    if not occ.any():
        raise EmptySurfaceError("grid has no occupied voxels")
    interior = np.ones_like(occ)
    interior[1:, :, :] &= occ[:-1, :, :]
    interior[:-1, :, :] &= occ[1:, :, :]
    interior[:, 1:, :] &= occ[:, :-1, :]
    interior[:, :-1, :] &= occ[:, 1:, :]
    interior[:, :, 1:] &= occ[:, :, :-1]
    interior[:, :, :-1] &= occ[:, :, 1:]
    # Boundary voxels of the array count as surface (out-of-bounds is empty).
    interior[0, :, :] = False
    interior[-1, :, :] = False
    interior[:, 0, :] = False
    interior[:, -1, :] = False
    interior[:, :, 0] = False
    interior[:, :, -1] = False
    surf = occ & ~interior
    idx = np.argwhere(surf).astype(np.float64)
    return np.asarray(grid.origin_mm) + (idx + 0.5) * grid.voxel_size_mm


def surface_distances(a_pts, b_pts) -> tuple[float, float, np.ndarray, np.ndarray]:
    """(asd_mm, hd95_mm, distances a->b, distances b->a)."""
    a = np.asarray(a_pts, dtype=np.float64)
    b = np.asarray(b_pts, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise EmptySurfaceError("surface point sets must be non-empty")
    d_ab = cKDTree(b).query(a, k=1)[0]
    d_ba = cKDTree(a).query(b, k=1)[0]
    asd = 0.5 * (float(d_ab.mean()) + float(d_ba.mean()))
    hd95 = max(float(np.percentile(d_ab, 95)), float(np.percentile(d_ba, 95)))
    return asd, hd95, d_ab, d_ba


def surface_score(pred_pts, gt_pts, tau_mm: float = 1.0) -> float:
    """F-score of surface points within tau of the opposing surface."""
    if tau_mm <= 0:
        raise InvalidInputError("tau_mm must be positive")
    _, _, d_pred, d_gt = surface_distances(pred_pts, gt_pts)
    precision = float(np.mean(d_pred <= tau_mm))
    recall = float(np.mean(d_gt <= tau_mm))
    if precision + recall == 0:
        return 0.0
    return 2.0 * precision * recall / (precision + recall)


def distance_map(pred: OccupancyGrid, gt: OccupancyGrid, clip_mm: float = 9.0) -> DistanceMap:
    """Per-predicted-surface-voxel distance to the ground-truth surface."""
    pred_pts = extract_surface(pred)
    gt_pts = extract_surface(gt)
    d = cKDTree(gt_pts).query(pred_pts, k=1)[0]
    return DistanceMap(points_mm=pred_pts, distances_mm=d, clip_mm=clip_mm)


def distance_display_volume(dmap: DistanceMap, grid: OccupancyGrid) -> np.ndarray:
    """uint8 volume with surface voxels scaled 0..255 over [0, clip]."""
    out = np.zeros(grid.data.shape, dtype=np.uint8)
    idx = np.rint(
        (dmap.points_mm - np.asarray(grid.origin_mm)) / grid.voxel_size_mm - 0.5
    ).astype(np.int64)
    vals = np.rint(dmap.display_mm / dmap.clip_mm * 255.0).astype(np.uint8)
    ok = np.all((idx >= 0) & (idx < np.array(grid.data.shape)), axis=1)
    out[idx[ok, 0], idx[ok, 1], idx[ok, 2]] = vals[ok]
    return out


def evaluate(pred: OccupancyGrid, gt: OccupancyGrid, tau_mm: float = 1.0) -> MetricsReport:
    """Full metric suite between a prediction and its ground truth."""
    f1, iou = voxel_overlap(pred, gt)
    p = pred.data > 0
    g = gt.data > 0
    counts = {
        "tp": int(np.count_nonzero(p & g)),
        "fp": int(np.count_nonzero(p & ~g)),
        "fn": int(np.count_nonzero(~p & g)),
    }
    if not p.any() or not g.any():
        # No surfaces to compare: degenerate but well-defined volume metrics.
        empty_match = not p.any() and not g.any()
        return MetricsReport(
            f1=f1,
            iou=iou,
            surface_score=1.0 if empty_match else 0.0,
            tau_mm=tau_mm,
            asd_mm=0.0 if empty_match else float("inf"),
            hd95_mm=0.0 if empty_match else float("inf"),
            counts=counts,
        )
    pred_pts = extract_surface(pred)
    gt_pts = extract_surface(gt)
    asd, hd95, d_pred, d_gt = surface_distances(pred_pts, gt_pts)
    precision = float(np.mean(d_pred <= tau_mm))
    recall = float(np.mean(d_gt <= tau_mm))
    score = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    counts["pred_surface_points"] = len(pred_pts)
    counts["gt_surface_points"] = len(gt_pts)
    return MetricsReport(
        f1=f1,
        iou=iou,
        surface_score=score,
        tau_mm=tau_mm,
        asd_mm=asd,
        hd95_mm=hd95,
        counts=counts,
    )
