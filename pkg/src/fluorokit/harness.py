"""Experiment harness: dataset generation, view-count and view-combination
ablations, the view-angle sensitivity heatmap, and paired-quality QA.

Every command is deterministic under a fixed seed; outputs carry the seed.
Datasets are content-hashed so experiments fail loudly when files change.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

from .calibration import CalibrationResult
from .carve import (
    HULL,
    ORIGIN_TRIANGULATED,
    ReconstructionResult,
    rasterize_gt_grid,
    reconstruct_from_views,
)
from .drr import render_drr, render_mask
from .errors import EmptySummaryError, FormatError, InvalidInputError
from .geometry import CameraMatrix, Pose, pose_to_camera, poses_by_class, sample_pose_protocol
from .metrics import MetricsReport, evaluate
from .pgm import read_pgm, write_mask_pgm, write_pgm
from .phantom import Phantom, make_lumbar_phantom, rasterize_phantom
from .volume import Volume, label_bbox_center_mm, label_ids, load_volume, save_volume, threshold_bone

CSV_COLUMNS = ["experiment", "plan", "trial", "f1", "iou", "surface", "asd_mm", "hd95_mm", "seed"]

# View-count ablation rows: views -> (AP, LATERAL, OBLIQUE, MISC) counts.
TABLE1_ROWS: dict[int, tuple[int, int, int, int]] = {
    2: (1, 1, 0, 0),
    3: (1, 1, 1, 0),
    4: (1, 1, 1, 1),
    5: (2, 1, 1, 1),
    6: (2, 2, 1, 1),
    7: (2, 2, 2, 1),
    8: (2, 2, 2, 2),
}

# View-combination ablation: name -> (AP, LATERAL, OBLIQUE, MISC) counts.
COMBO_PLANS: list[tuple[str, tuple[int, int, int, int]]] = [
    ("1AP-1LAT-1OB-1MI", (1, 1, 1, 1)),
    ("2AP-2LAT", (2, 2, 0, 0)),
    ("1AP-3LAT", (1, 3, 0, 0)),
    ("3AP-1LAT", (3, 1, 0, 0)),
]

VIEW_CLASS_ORDER = ("AP", "LATERAL", "OBLIQUE", "MISC")


@dataclass(frozen=True)
class ViewPlan:
    """A realized draw of poses for one reconstruction trial."""

    counts: dict
    seed: int
    pose_ids: tuple[int, ...]

    def __post_init__(self):
        total = sum(self.counts.values())
        if not 2 <= total <= 8:
            raise InvalidInputError("view plans use 2..8 views")
        if len(self.pose_ids) != total:
            raise InvalidInputError("realized pose ids must match the counts")


@dataclass(frozen=True)
class HeatmapSpec:
    """One view varied on a grid while the rest of a view plan is fixed."""

    label: int = 1
    varied_class: str = "AP"
    grid_n: int = 21
    max_dev_deg: float = 20.0
    seed: int = 42
    base_counts: tuple[int, int, int, int] = (1, 1, 1, 1)  # AP/LAT/OB/MISC

    def __post_init__(self):
        if self.grid_n != 21 or self.max_dev_deg != 20.0:
            # The protocol pins a 21x21 grid over +-20 degrees.
            raise InvalidInputError("heatmap grid is 21x21 over +-20 degrees")


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _pose_dict(pose: Pose) -> dict:
    return {
        "orbit_deg": pose.orbit_deg,
        "tilt_deg": pose.tilt_deg,
        "focal_len_mm": pose.focal_len_mm,
        "source_to_center_mm": pose.source_to_center_mm,
        "det_width_px": pose.det_width_px,
        "det_height_px": pose.det_height_px,
        "pixel_pitch_mm": pose.pixel_pitch_mm,
        "view_class": pose.view_class,
    }


def gen_dataset(
    out_dir: str | Path,
    phantom: Phantom | None = None,
    volumes: tuple[Volume, Volume] | None = None,
    seed: int = 42,
    sphere_diameter_mm: float = 1000.0,
    spacing_mm: float = 0.5,
    render_px: int = 448,
    step_mm: float | None = None,
) -> dict:
    """Render the 28-pose protocol centered on every labeled vertebra.

    Writes DRR and silhouette PGMs plus a camera JSON per (vertebra, pose),
    the HU/label volumes, and a manifest listing every artifact with its
    content hash. Returns the manifest dict.
    """
    out = Path(out_dir)
    (out / "items").mkdir(parents=True, exist_ok=True)
    if volumes is not None:
        hu, labels = volumes
    else:
        if phantom is None:
            phantom = make_lumbar_phantom()
        if phantom.primitives:
            lo = np.min([p.bounds()[0] for p in phantom.primitives], axis=0) - 3.0
            hi = np.max([p.bounds()[1] for p in phantom.primitives], axis=0) + 3.0
        else:
            lo, hi = np.full(3, -8.0), np.full(3, 8.0)
        dims = tuple(int(np.ceil((h - l) / spacing_mm)) + 1 for l, h in zip(lo, hi))
        hu, labels = rasterize_phantom(phantom, dims, (spacing_mm,) * 3, origin=tuple(lo))
    att = threshold_bone(hu)

    hu_path = save_volume(hu, out / "hu.vjson")
    labels_path = save_volume(labels, out / "labels.vjson")

    ids = label_ids(labels)
    if not ids:
        logger.warning("gen_dataset: no labels present, writing an empty manifest")
    items = []
    poses_meta = None
    for lid in ids:
        center = label_bbox_center_mm(labels, lid)
        poses = sample_pose_protocol(center, sphere_diameter_mm, det_width_px=render_px,
                                     det_height_px=render_px)
        if poses_meta is None:
            poses_meta = [_pose_dict(p) for p in poses]
        for pi, pose in enumerate(poses):
            cam = pose_to_camera(pose, center)
            stem = f"v{lid}_p{pi:02d}_{pose.view_class.lower()}"
            img = render_drr(att, cam, render_px, render_px, step_mm,
                             pixel_pitch_mm=pose.pixel_pitch_mm)
            mask = render_mask(labels, lid, cam, render_px, render_px, step_mm)
            img_path = write_pgm(out / "items" / f"{stem}.pgm", img.normalized)
            mask_path = write_mask_pgm(out / "items" / f"{stem}_mask.pgm", mask)
            cam_path = out / "items" / f"{stem}_cam.json"
            cam.save(cam_path)
            items.append(
                {
                    "id": stem,
                    "label": int(lid),
                    "pose_index": pi,
                    "view_class": pose.view_class,
                    "image": str(img_path.relative_to(out)),
                    "mask": str(mask_path.relative_to(out)),
                    "camera": str(cam_path.relative_to(out)),
                    "sha256": {
                        "image": _sha256(img_path),
                        "mask": _sha256(mask_path),
                        "camera": _sha256(cam_path),
                    },
                }
            )
    manifest = {
        "seed": seed,
        "render_px": render_px,
        "sphere_diameter_mm": sphere_diameter_mm,
        "labels": ids,
        "poses": poses_meta or [],
        "volume": {
            "hu": hu_path.name,
            "labels": labels_path.name,
            "sha256": {
                "hu": _sha256(hu_path),
                "hu_raw": _sha256(hu_path.with_suffix(".raw")),
                "labels": _sha256(labels_path),
                "labels_raw": _sha256(labels_path.with_suffix(".raw")),
            },
        },
        "items": items,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


class Dataset:
    """Loaded dataset with hash-verified artifact access."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        manifest_path = self.root / "manifest.json"
        if not manifest_path.exists():
            raise FormatError(f"no manifest.json under {self.root}", field="manifest")
        self.manifest = json.loads(manifest_path.read_text())
        self._by_label_class: dict[tuple[int, str], list[dict]] = {}
        for item in self.manifest["items"]:
            key = (item["label"], item["view_class"])
            self._by_label_class.setdefault(key, []).append(item)
        self._labels_volume: Volume | None = None

    @property
    def labels(self) -> list[int]:
        return list(self.manifest["labels"])

    def labels_volume(self) -> Volume:
        if self._labels_volume is None:
            name = self.manifest["volume"]["labels"]
            path = self.root / name
            if _sha256(path) != self.manifest["volume"]["sha256"]["labels"]:
                raise FormatError(f"label volume header changed: {path}", field="sha256")
            if _sha256(path.with_suffix(".raw")) != self.manifest["volume"]["sha256"]["labels_raw"]:
                raise FormatError(f"label volume data changed: {path}", field="sha256")
            self._labels_volume = load_volume(path)
        return self._labels_volume

    def items_for(self, label: int, view_class: str) -> list[dict]:
        return self._by_label_class.get((label, view_class), [])

    def load_item(self, item: dict) -> dict:
        """Load and hash-verify one manifest item."""
        loaded = {}
        for kind in ("image", "mask", "camera"):
            path = self.root / item[kind]
            if _sha256(path) != item["sha256"][kind]:
                raise FormatError(
                    f"dataset artifact changed since manifest: {path}", field="sha256"
                )
            if kind == "camera":
                loaded[kind] = CameraMatrix.load(path)
            else:
                loaded[kind] = read_pgm(path)
        return {"image": loaded["image"], "mask": loaded["mask"], "camera": loaded["camera"]}


def draw_plan(dataset: Dataset, label: int, counts, rng) -> list[dict]:
    """Pick `counts` random items per view class (uniform, no replacement).

    Per-class permutations are drawn unconditionally so that plans with the
    same rng state stay paired across different count compositions.
    """
    chosen = []
    for cls, want in zip(VIEW_CLASS_ORDER, counts):
        pool = dataset.items_for(label, cls)
        order = rng.permutation(len(pool))
        if want > len(pool):
            raise InvalidInputError(f"not enough {cls} poses for label {label}")
        chosen.extend(pool[i] for i in order[:want])
    return chosen


def run_trial(
    dataset: Dataset,
    label: int,
    counts,
    rng,
    mode: str = HULL,
    origin_mode: str = ORIGIN_TRIANGULATED,
    tau_mm: float = 1.0,
    **carve_kwargs,
) -> tuple[MetricsReport, ReconstructionResult]:
    items = [dataset.load_item(i) for i in draw_plan(dataset, label, counts, rng)]
    labels = dataset.labels_volume()
    res = reconstruct_from_views(
        items,
        label,
        mode=mode,
        origin_mode=origin_mode,
        gt_center_mm=label_bbox_center_mm(labels, label),
        **carve_kwargs,
    )
    gt = rasterize_gt_grid(labels, label, res.grid)
    return evaluate(res.grid, gt, tau_mm), res


def _write_rows(path: Path, rows: list[dict]) -> None:
    with path.open("w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _write_summary(path: Path, rows: list[dict]) -> None:
    plans: dict[str, list[dict]] = {}
    for r in rows:
        plans.setdefault(r["plan"], []).append(r)
    cols = ["f1", "iou", "surface", "asd_mm", "hd95_mm"]
    with path.open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["experiment", "plan", "trials"]
                        + [f"{c}_{s}" for c in cols for s in ("mean", "sd")])
        for plan, rs in plans.items():
            row = [rs[0]["experiment"], plan, len(rs)]
            for c in cols:
                vals = np.array([r[c] for r in rs], dtype=np.float64)
                row.extend([f"{vals.mean():.6g}", f"{vals.std():.6g}"])
            writer.writerow(row)


def _trial_rows(experiment, plan_name, dataset, counts, trials, seed, **kwargs) -> list[dict]:
    rows = []
    labels = dataset.labels
    for t in range(trials):
        rng = np.random.default_rng([seed, t])
        label = labels[int(rng.integers(len(labels)))]
        rep, _ = run_trial(dataset, label, counts, rng, **kwargs)
        rows.append(
            {
                "experiment": experiment,
                "plan": plan_name,
                "trial": t,
                "f1": round(rep.f1, 6),
                "iou": round(rep.iou, 6),
                "surface": round(rep.surface_score, 6),
                "asd_mm": round(rep.asd_mm, 6),
                "hd95_mm": round(rep.hd95_mm, 6),
                "seed": seed,
            }
        )
    return rows


def ablate_num_views(
    dataset: Dataset | str | Path,
    rows: dict[int, tuple[int, int, int, int]] | None = None,
    trials: int = 20,
    seed: int = 42,
    out_csv: str | Path = "ablate_views.csv",
    **kwargs,
) -> list[dict]:
    """View-count ablation over the standard composition table."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    rows = TABLE1_ROWS if rows is None else rows
    all_rows = []
    for n_views, counts in sorted(rows.items()):
        all_rows.extend(
            _trial_rows("num_views", str(n_views), dataset, counts, trials, seed, **kwargs)
        )
    out_csv = Path(out_csv)
    _write_rows(out_csv, all_rows)
    _write_summary(out_csv.with_name(out_csv.stem + "_summary.csv"), all_rows)
    return all_rows


def ablate_combinations(
    dataset: Dataset | str | Path,
    combos: list[tuple[str, tuple[int, int, int, int]]] | None = None,
    trials: int = 20,
    seed: int = 42,
    out_csv: str | Path = "ablate_combos.csv",
    **kwargs,
) -> list[dict]:
    """View-combination ablation with matched trials across combos."""
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    combos = COMBO_PLANS if combos is None else combos
    all_rows = []
    for name, counts in combos:
        all_rows.extend(_trial_rows("combos", name, dataset, counts, trials, seed, **kwargs))
    out_csv = Path(out_csv)
    _write_rows(out_csv, all_rows)
    _write_summary(out_csv.with_name(out_csv.stem + "_summary.csv"), all_rows)
    return all_rows


def sensitivity_heatmap(
    dataset: Dataset | str | Path,
    spec: HeatmapSpec,
    out_csv: str | Path = "heatmap.csv",
    out_pgm: str | Path | None = None,
    upsample: int = 10,
    **kwargs,
) -> np.ndarray:
    """Vary one view over a 21x21 angular grid; score each node.

    The varied view re-renders at each node; the other three views of the
    1/1/1/1 plan stay fixed (drawn once from the dataset by seed). Returns
    the (21, 21) surface-score array indexed [orbit_step, tilt_step].
    """
    if not isinstance(dataset, Dataset):
        dataset = Dataset(dataset)
    rng = np.random.default_rng([spec.seed, 97])
    label = spec.label
    labels_vol = dataset.labels_volume()
    att = None  # varied view renders only the silhouette in HULL mode

    fixed_counts = dict(zip(VIEW_CLASS_ORDER, spec.base_counts))
    fixed_counts[spec.varied_class] = max(0, fixed_counts[spec.varied_class] - 1)
    counts = tuple(fixed_counts[c] for c in VIEW_CLASS_ORDER)
    fixed_items = [dataset.load_item(i) for i in draw_plan(dataset, label, counts, rng)]

    center = label_bbox_center_mm(labels_vol, label)
    render_px = int(dataset.manifest["render_px"])
    base = Pose(0.0, 0.0, view_class=spec.varied_class,
                det_width_px=render_px, det_height_px=render_px)
    if spec.varied_class == "LATERAL":
        base = Pose(90.0, 0.0, view_class="LATERAL",
                    det_width_px=render_px, det_height_px=render_px)

    devs = np.linspace(-spec.max_dev_deg, spec.max_dev_deg, spec.grid_n)
    scores = np.zeros((spec.grid_n, spec.grid_n))
    rows = []
    for i, d_orbit in enumerate(devs):
        for j, d_tilt in enumerate(devs):
            pose = Pose(
                base.orbit_deg + d_orbit,
                base.tilt_deg + d_tilt,
                view_class=base.view_class,
                det_width_px=render_px,
                det_height_px=render_px,
            )
            cam = pose_to_camera(pose, center)
            mask = render_mask(labels_vol, label, cam, render_px, render_px)
            items = fixed_items + [{"image": None, "mask": mask, "camera": cam}]
            res = reconstruct_from_views(
                items, label, gt_center_mm=center, **kwargs
            )
            gt = rasterize_gt_grid(labels_vol, label, res.grid)
            rep = evaluate(res.grid, gt)
            scores[i, j] = rep.surface_score
            rows.append(
                {
                    "experiment": "heatmap",
                    "plan": f"{d_orbit:+.0f}/{d_tilt:+.0f}",
                    "trial": i * spec.grid_n + j,
                    "f1": round(rep.f1, 6),
                    "iou": round(rep.iou, 6),
                    "surface": round(rep.surface_score, 6),
                    "asd_mm": round(rep.asd_mm, 6),
                    "hd95_mm": round(rep.hd95_mm, 6),
                    "seed": spec.seed,
                }
            )
    _write_rows(Path(out_csv), rows)
    if out_pgm is not None:
        write_pgm(Path(out_pgm), heatmap_image(scores, upsample))
    return scores


def heatmap_image(scores: np.ndarray, upsample: int = 10) -> np.ndarray:
    """Bilinearly upsampled 16-bit display image of a score grid (0..1)."""
    n = scores.shape[0]
    m = (n - 1) * upsample + 1
    xs = np.linspace(0, n - 1, m)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, n - 1)
    f = xs - i0
    rows = scores[i0] * (1 - f)[:, None] + scores[i1] * f[:, None]
    img = rows[:, i0] * (1 - f)[None, :] + rows[:, i1] * f[None, :]
    return np.round(np.clip(img, 0.0, 1.0) * 65535.0).astype(np.uint16)


def paired_qa(reports) -> dict:
    """Pool per-image calibration residuals into px and mm statistics."""
    residuals_px = []
    pitches = set()
    for rep in reports:
        if isinstance(rep, CalibrationResult):
            residuals_px.extend(rep.residuals_px.tolist())
            if rep.pixel_pitch_mm is not None:
                pitches.add(rep.pixel_pitch_mm)
        else:
            residuals_px.extend(rep["residuals_px"])
            if rep.get("pixel_pitch_mm") is not None:
                pitches.add(rep["pixel_pitch_mm"])
    if not residuals_px:
        raise EmptySummaryError("no calibration residuals to aggregate")
    r = np.asarray(residuals_px, dtype=np.float64)
    out = {
        "n_images": len(reports),
        "n_points": len(r),
        "mean_px": float(r.mean()),
        "sd_px": float(r.std()),
        "median_px": float(np.median(r)),
    }
    if len(pitches) == 1:
        pitch = pitches.pop()
        out["pixel_pitch_mm"] = pitch
        out["mean_mm"] = out["mean_px"] * pitch
        out["sd_mm"] = out["sd_px"] * pitch
        out["median_mm"] = out["median_px"] * pitch
    return out
