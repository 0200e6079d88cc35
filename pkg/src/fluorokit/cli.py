"""Command-line interface.

Subcommands mirror the pipeline stages: gen-dataset, render, calibrate,
localize, reconstruct, evaluate, ablate-views, ablate-combos, heatmap,
paired-qa, serve. Global flags: --seed, --out, --threads, --config (JSON
defaults). FRK_DATA_DIR sets the default data root.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

DATA_DIR_ENV = "FRK_DATA_DIR"


def _data_root(args) -> Path:
    root = getattr(args, "data_dir", None) or os.environ.get(DATA_DIR_ENV) or "."
    return Path(root)


def _load_camera(path: str):
    from .geometry import CameraMatrix

    return CameraMatrix.load(path)


def cmd_gen_dataset(args) -> int:
    from .harness import gen_dataset
    from .phantom import make_lumbar_phantom

    phantom = make_lumbar_phantom(args.vertebrae)
    manifest = gen_dataset(
        args.out,
        phantom=phantom,
        seed=args.seed,
        spacing_mm=args.spacing_mm,
        render_px=args.render_px,
        sphere_diameter_mm=args.sphere_diameter_mm,
    )
    print(f"dataset: {len(manifest['items'])} items under {args.out}")
    return 0


def cmd_render(args) -> int:
    from .drr import render_drr
    from .geometry import Pose, pose_to_camera
    from .pgm import write_pgm
    from .volume import load_volume, threshold_bone

    vol = load_volume(args.volume)
    if vol.dtype_name == "int16":
        vol = threshold_bone(vol, args.hu_threshold)
    if args.camera:
        cam = _load_camera(args.camera)
    else:
        pose = Pose(
            args.orbit,
            args.tilt,
            focal_len_mm=args.focal_mm,
            source_to_center_mm=args.distance_mm,
            det_width_px=args.width,
            det_height_px=args.height,
            pixel_pitch_mm=args.pitch_mm,
        )
        center = [float(x) for x in args.center.split(",")]
        cam = pose_to_camera(pose, center)
    img = render_drr(vol, cam, args.width, args.height, args.step_mm,
                     pixel_pitch_mm=args.pitch_mm)
    out = Path(args.out)
    write_pgm(out, img.normalized)
    cam.save(out.with_suffix(".cam.json"))
    print(f"rendered {args.width}x{args.height} -> {out} (raw max {img.raw.max():.1f})")
    return 0


def cmd_calibrate(args) -> int:
    from .calibration import FiducialSet, calibrate_image
    from .pgm import read_pgm

    img = read_pgm(args.image)
    fiducials = FiducialSet.load(args.fiducials)
    radii = tuple(float(x) for x in args.radii_px.split(","))
    result = calibrate_image(img, fiducials, radii, gate_px=args.gate_px,
                             pixel_pitch_mm=args.pitch_mm)
    out = Path(args.out or "calibration.json")
    result.save(out)
    mm = f", {result.mean_mm:.4f} mm" if result.mean_mm is not None else ""
    print(f"calibrated: {len(result.matches)} beads, mean {result.mean_px:.4f} px{mm} -> {out}")
    return 0


def cmd_localize(args) -> int:
    from .localize import localize_all
    from .pgm import read_pgm, write_pgm
    from .volume import load_volume

    img = read_pgm(args.image)
    cam = _load_camera(args.camera)
    labels = load_volume(args.labels)
    label_list = [int(x) for x in args.labels_ids.split(",")] if args.labels_ids else None
    crops = localize_all(img, cam, labels, label_list=label_list)
    out = Path(args.out or "crops.json")
    entries = []
    for c in crops:
        entry = {
            "label": c.label,
            "box": [c.box.u_min, c.box.v_min, c.box.width, c.box.height],
            "square_side": c.square_side,
            "t_x": c.transform.t_x,
            "t_y": c.transform.t_y,
            "scale": c.transform.scale,
            "adjusted_P": c.camera.p.tolist(),
        }
        if args.write_crops:
            crop_path = out.with_name(f"{out.stem}_label{c.label}.pgm")
            write_pgm(crop_path, np.round(c.image).astype(np.uint16))
            entry["crop"] = crop_path.name
        entries.append(entry)
    out.write_text(json.dumps(entries, indent=1, sort_keys=True) + "\n")
    print(f"localized {len(entries)} vertebrae -> {out}")
    return 0


def cmd_reconstruct(args) -> int:
    from .carve import reconstruct_from_views
    from .pgm import read_pgm
    from .volume import save_volume

    views = args.views.split(",")
    cams = args.cams.split(",")
    if len(views) != len(cams):
        print("error: --views and --cams must list the same number of files", file=sys.stderr)
        return 2
    if args.masks:
        masks = args.masks.split(",")
    else:
        masks = [str(Path(v).with_name(Path(v).stem + "_mask.pgm")) for v in views]
    items = []
    for v, m, c in zip(views, masks, cams):
        items.append(
            {
                "image": read_pgm(v),
                "mask": read_pgm(m),
                "camera": _load_camera(c),
            }
        )
    res = reconstruct_from_views(
        items,
        label=args.label,
        mode=args.mode,
        dims=args.grid_dims,
        voxel_size_mm=args.voxel_mm,
        tau=args.tau,
    )
    out = Path(args.out or "grid.vjson")
    save_volume(res.grid.to_volume(), out)
    print(
        f"reconstructed {res.grid.data.shape[0]}^3 grid, occupied {res.grid.occupied_fraction:.4f}, "
        f"localize {res.localization_ms:.1f} ms, reconstruct {res.reconstruction_ms:.1f} ms -> {out}"
    )
    return 0


def cmd_evaluate(args) -> int:
    from .carve import OccupancyGrid, rasterize_gt_grid
    from .metrics import distance_map, evaluate
    from .volume import load_volume

    pred = OccupancyGrid.from_volume(load_volume(args.pred))
    if args.gt:
        gt = OccupancyGrid.from_volume(load_volume(args.gt))
    else:
        labels = load_volume(args.gt_labels)
        gt = rasterize_gt_grid(labels, args.label, pred)
    rep = evaluate(pred, gt, args.tau_mm)
    out = Path(args.out or "metrics.json")
    rep.save(out)
    if args.distance_map:
        distance_map(pred, gt).to_csv(args.distance_map)
    print(
        f"f1={rep.f1:.4f} iou={rep.iou:.4f} surface={rep.surface_score:.4f} "
        f"asd={rep.asd_mm:.3f}mm hd95={rep.hd95_mm:.3f}mm -> {out}"
    )
    return 0


def cmd_ablate_views(args) -> int:
    from .harness import ablate_num_views

    rows = ablate_num_views(args.dataset, trials=args.trials, seed=args.seed,
                            out_csv=args.out or "ablate_views.csv")
    print(f"num-views ablation: {len(rows)} trials -> {args.out or 'ablate_views.csv'}")
    return 0


def cmd_ablate_combos(args) -> int:
    from .harness import ablate_combinations

    rows = ablate_combinations(args.dataset, trials=args.trials, seed=args.seed,
                               out_csv=args.out or "ablate_combos.csv")
    print(f"combination ablation: {len(rows)} trials -> {args.out or 'ablate_combos.csv'}")
    return 0


def cmd_heatmap(args) -> int:
    from .harness import HeatmapSpec, sensitivity_heatmap

    spec = HeatmapSpec(label=args.label, varied_class=args.varied, seed=args.seed)
    out_csv = args.out or "heatmap.csv"
    scores = sensitivity_heatmap(args.dataset, spec, out_csv=out_csv, out_pgm=args.pgm)
    print(f"heatmap {scores.shape[0]}x{scores.shape[1]}: "
          f"min {scores.min():.4f} max {scores.max():.4f} -> {out_csv}")
    return 0


def cmd_paired_qa(args) -> int:
    from .harness import paired_qa

    reports = [json.loads(Path(p).read_text()) for p in args.reports.split(",")]
    summary = paired_qa(reports)
    out = Path(args.out or "paired_qa.json")
    out.write_text(json.dumps(summary, indent=1, sort_keys=True) + "\n")
    print(f"paired QA over {summary['n_images']} images: "
          f"mean {summary['mean_px']:.3f} px -> {out}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(data_dir=_data_root(args), frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port, log_level="info")
    return 0


COMMON_DEFAULTS = {"seed": 42, "out": None, "threads": None, "config": None, "data_dir": None}


def _add_common(parser: argparse.ArgumentParser) -> None:
    """Global flags, acceptable both before and after the subcommand."""
    parser.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="experiment seed")
    parser.add_argument("--out", default=argparse.SUPPRESS, help="output path")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS,
                        help="worker thread count")
    parser.add_argument("--config", default=argparse.SUPPRESS,
                        help="JSON file with option defaults")
    parser.add_argument("--data-dir", default=argparse.SUPPRESS,
                        help=f"data root (default ${DATA_DIR_ENV})")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="frk", description=__doc__)
    _add_common(parser)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-dataset", help="render the 28-pose dataset for a phantom")
    p.add_argument("--vertebrae", type=int, default=5)
    p.add_argument("--spacing-mm", type=float, default=0.5)
    p.add_argument("--render-px", type=int, default=448)
    p.add_argument("--sphere-diameter-mm", type=float, default=1000.0)
    p.set_defaults(fn=cmd_gen_dataset)

    p = sub.add_parser("render", help="render one DRR")
    p.add_argument("--volume", required=True)
    p.add_argument("--camera", default=None, help="camera JSON (overrides pose flags)")
    p.add_argument("--orbit", type=float, default=0.0)
    p.add_argument("--tilt", type=float, default=0.0)
    p.add_argument("--focal-mm", type=float, default=1000.0)
    p.add_argument("--distance-mm", type=float, default=500.0)
    p.add_argument("--pitch-mm", type=float, default=0.66)
    p.add_argument("--center", default="0,0,0")
    p.add_argument("--width", type=int, default=448)
    p.add_argument("--height", type=int, default=448)
    p.add_argument("--step-mm", type=float, default=None)
    p.add_argument("--hu-threshold", type=float, default=0.0)
    p.set_defaults(fn=cmd_render)

    p = sub.add_parser("calibrate", help="calibrate one image from fiducials")
    p.add_argument("--image", required=True)
    p.add_argument("--fiducials", required=True)
    p.add_argument("--pitch-mm", type=float, default=None)
    p.add_argument("--radii-px", default="2.5,12.0")
    p.add_argument("--gate-px", type=float, default=10.0)
    p.set_defaults(fn=cmd_calibrate)

    p = sub.add_parser("localize", help="crop vertebrae from a rendered view")
    p.add_argument("--image", required=True)
    p.add_argument("--camera", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--labels-ids", default=None, help="comma-separated label ids")
    p.add_argument("--write-crops", action="store_true")
    p.set_defaults(fn=cmd_localize)

    p = sub.add_parser("reconstruct", help="carve a grid from calibrated views")
    p.add_argument("--views", required=True, help="comma-separated image PGMs")
    p.add_argument("--cams", required=True, help="comma-separated camera JSONs")
    p.add_argument("--masks", default=None, help="comma-separated mask PGMs")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--mode", choices=["hull", "mean_thresh"], default="hull")
    p.add_argument("--grid-dims", type=int, default=128)
    p.add_argument("--voxel-mm", type=float, default=0.625)
    p.add_argument("--tau", type=float, default=0.15)
    p.set_defaults(fn=cmd_reconstruct)

    p = sub.add_parser("evaluate", help="score a grid against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", default=None, help="ground-truth grid .vjson")
    p.add_argument("--gt-labels", default=None, help="label volume .vjson")
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--tau-mm", type=float, default=1.0)
    p.add_argument("--distance-map", default=None, help="write distance CSV here")
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("ablate-views", help="view-count ablation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_ablate_views)

    p = sub.add_parser("ablate-combos", help="view-combination ablation")
    p.add_argument("--dataset", required=True)
    p.add_argument("--trials", type=int, default=20)
    p.set_defaults(fn=cmd_ablate_combos)

    p = sub.add_parser("heatmap", help="view-angle sensitivity heatmap")
    p.add_argument("--dataset", required=True)
    p.add_argument("--label", type=int, default=1)
    p.add_argument("--varied", choices=["AP", "LATERAL"], default="AP")
    p.add_argument("--pgm", default=None, help="write display heatmap PGM here")
    p.set_defaults(fn=cmd_heatmap)

    p = sub.add_parser("paired-qa", help="aggregate calibration reports")
    p.add_argument("--reports", required=True, help="comma-separated report JSONs")
    p.set_defaults(fn=cmd_paired_qa)

    p = sub.add_parser("serve", help="run the HTTP service")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8423)
    p.add_argument("--frontend", default=None, help="static frontend directory")
    p.set_defaults(fn=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        config = json.loads(Path(args.config).read_text())
        for key, value in config.items():
            dest = key.replace("-", "_")
            if hasattr(args, dest) and parser.get_default(dest) == getattr(args, dest):
                setattr(args, dest, value)
    if args.threads:
        import numba

        numba.set_num_threads(args.threads)
        os.environ["OMP_NUM_THREADS"] = str(args.threads)
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
