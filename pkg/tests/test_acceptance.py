"""Acceptance suite: one test per acceptance criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s`)."""

import json
import multiprocessing
import os
import time
from pathlib import Path

import numpy as np
import pytest
from scipy import ndimage

from fluorokit.calibration import rectify_all, resolve_correspondence
from fluorokit.carve import (
    ORIGIN_GROUND_TRUTH,
    ORIGIN_TRIANGULATED,
    carve,
    rasterize_gt_grid,
    reconstruct_scene,
)
from fluorokit.drr import render_drr, render_mask
from fluorokit.geometry import (
    CameraMatrix,
    CropTransform,
    Pose,
    adjust_for_crop,
    compose_camera,
    decompose_camera,
    pose_to_camera,
    project,
    transform_camera,
    triangulate_origin,
)
from fluorokit.harness import (
    Dataset,
    HeatmapSpec,
    ablate_combinations,
    ablate_num_views,
    gen_dataset,
    run_trial,
    sensitivity_heatmap,
)
from fluorokit.localize import boxes_from_mask, crop_mask, crop_vertebra
from fluorokit.metrics import evaluate, surface_distances, voxel_overlap
from fluorokit.carve import OccupancyGrid
from fluorokit.phantom import (
    Box,
    Phantom,
    Sphere,
    make_lumbar_phantom,
    make_sphere_phantom,
    rasterize_phantom,
    vertebra_primitives,
)
from fluorokit.volume import Volume, threshold_bone

from conftest import (
    CAL_PITCH_MM,
    CAL_RADII_PX,
    make_calibration_scene,
    random_camera,
    random_camera_triple,
    random_rotation,
)


def report(name: str, ok: bool, detail: str) -> None:
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    assert ok, f"{name}: {detail}"


# ----------------------------------------------------------------------
# parallel workers (spawn-safe, module level)
# ----------------------------------------------------------------------

def _calibration_worker(seed: int):
    import numba

    numba.set_num_threads(1)
    rng = np.random.default_rng([20240811, seed])
    img, cam, fid, pts = make_calibration_scene(rng)
    from fluorokit.calibration import calibrate_image

    result = calibrate_image(img, fid, CAL_RADII_PX, pixel_pitch_mm=CAL_PITCH_MM)
    truth = project(cam, pts)
    reproj = float(np.linalg.norm(project(result.camera, pts) - truth, axis=1).mean())
    xo = float(
        np.linalg.norm(decompose_camera(result.camera).x_o - decompose_camera(cam).x_o)
    )
    noisy = truth + rng.uniform(-0.5, 0.5, truth.shape)
    order = rng.permutation(len(fid.reference_points))
    _, pre = resolve_correspondence(fid.reference_points, noisy[: len(order)][order])
    noisy_mean = float(rectify_all(pre, pts, noisy).mean_px)
    return reproj, xo, noisy_mean


def _correspondence_worker(seed: int):
    rng = np.random.default_rng([7117, seed])
    cam = random_camera(rng, skew=False)
    ref3d = rng.uniform(-80.0, 80.0, (7, 3))
    truth2d = project(cam, ref3d)
    perm = rng.permutation(7)
    expected = tuple(int(j) for j in np.argsort(perm))
    a_clean, _ = resolve_correspondence(ref3d, truth2d[perm])
    noisy = truth2d[perm] + rng.uniform(-0.5, 0.5, (7, 2))
    a_noisy, _ = resolve_correspondence(ref3d, noisy)
    return (tuple(a_clean) == expected, tuple(a_noisy) == expected)


def _pool():
    ctx = multiprocessing.get_context("spawn")
    return ctx.Pool(processes=min(4, os.cpu_count() or 1))


# ----------------------------------------------------------------------
# shared fixtures
# ----------------------------------------------------------------------

@pytest.fixture(scope="session")
def seed42_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("accept-ds")
    gen_dataset(out, phantom=make_lumbar_phantom(5), seed=42)
    return Dataset(out)


class TestCalibrationRoundTrip:
    def test_criterion(self):
        t0 = time.perf_counter()
        with _pool() as pool:
            results = pool.map(_calibration_worker, range(100))
        elapsed = time.perf_counter() - t0
        reproj = np.array([r[0] for r in results])
        xo = np.array([r[1] for r in results])
        noisy = np.array([r[2] for r in results])
        ok = (
            reproj.max() < 0.1
            and xo.max() < 1.0
            and np.all((noisy >= 0.1) & (noisy <= 1.5))
            and elapsed < 60.0
        )
        report(
            "calibration round-trip",
            ok,
            f"100 scenes: reproj max {reproj.max():.4f} px (<0.1), X_o max {xo.max():.3f} mm "
            f"(<1), noisy mean in [{noisy.min():.3f}, {noisy.max():.3f}] px "
            f"(within [0.1,1.5]), runtime {elapsed:.1f} s (<60)",
        )


class TestCorrespondenceSearch:
    def test_criterion(self):
        with _pool() as pool:
            results = pool.map(_correspondence_worker, range(100))
        clean = sum(1 for r in results if r[0])
        noisy = sum(1 for r in results if r[1])
        ok = clean == 100 and noisy >= 99
        report(
            "correspondence search",
            ok,
            f"noiseless {clean}/100 (need 100), 0.5 px noise {noisy}/100 (need >= 99)",
        )


class TestDecompositionIdentities:
    def test_criterion(self):
        rng = np.random.default_rng(11)
        worst_rt = 0.0
        worst_scale = 0.0
        for _ in range(1000):
            k, r, x_o = random_camera_triple(rng)
            cam = compose_camera(k, r, x_o)
            d = decompose_camera(cam)
            recomposed = compose_camera(d.k, d.r, d.x_o)
            scale = np.linalg.norm(cam.p) / np.linalg.norm(recomposed.p)
            worst_rt = max(
                worst_rt,
                float(np.max(np.abs(recomposed.p * scale - cam.p)) / np.linalg.norm(cam.p)),
            )
            d2 = decompose_camera(CameraMatrix(7.3 * cam.p))
            worst_scale = max(
                worst_scale,
                float(np.max(np.abs(d2.k - d.k))),
                float(np.max(np.abs(d2.r - d.r))),
                float(np.max(np.abs(d2.x_o - d.x_o)) / max(1.0, np.linalg.norm(d.x_o))),
            )
        ok = worst_rt < 1e-9 and worst_scale < 1e-9
        report(
            "decomposition identities",
            ok,
            f"1000 cameras: compose(decompose) rel err {worst_rt:.2e} (<1e-9), "
            f"7.3x-scale invariance err {worst_scale:.2e} (<1e-9)",
        )


class TestCropCommutation:
    def test_criterion(self):
        rng = np.random.default_rng(12)
        worst = 0.0
        for _ in range(1000):
            cam = random_camera(rng, skew=False)
            crop = CropTransform(
                float(rng.uniform(-200, 200)),
                float(rng.uniform(-200, 200)),
                float(rng.uniform(0.3, 3.0)),
            )
            adj = adjust_for_crop(cam, crop)
            x = rng.uniform(-100, 100, 3)
            direct = project(adj, x)
            oracle = crop.apply(project(cam, x))
            worst = max(worst, float(np.max(np.abs(direct - oracle))))
        ok = worst < 1e-9
        report("crop-shift commutation", ok, f"1000 pairs: max deviation {worst:.2e} px (<1e-9)")


class TestTriangulation:
    def test_criterion(self):
        rng = np.random.default_rng(13)
        k = np.array([[1000.0, 0, 112], [0, 1000.0, 112], [0, 0, 1]])

        def look_at(pos):
            pos = np.asarray(pos, dtype=np.float64)
            z = -pos / np.linalg.norm(pos)
            up = np.array([0.0, 0.0, 1.0])
            if abs(z @ up) > 1 - 1e-9:
                up = np.array([0.0, 1.0, 0.0])
            x = np.cross(z, up)
            x /= np.linalg.norm(x)
            return compose_camera(k, np.stack([x, np.cross(z, x), z]), pos)

        exact_err = 0.0
        lattice_err = 0.0
        for _ in range(20):
            target = rng.uniform(-20, 20, 3)
            cams = [
                look_at(rng.uniform(-1, 1, 3) * [800, 800, 400] + [900, -900, 500] * rng.choice([-1, 1], 3))
                for _ in range(3)
            ]
            centers = [project(c, target) for c in cams]
            exact_err = max(exact_err, float(np.linalg.norm(triangulate_origin(cams, centers) - target)))
            noisy = [c + rng.uniform(-0.5, 0.5, 2) for c in centers]
            est = triangulate_origin(cams, noisy)
            grid = np.arange(-10.0, 10.5, 1.0)
            gx, gy, gz = np.meshgrid(grid, grid, grid, indexing="ij")
            pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3) + target
            cost = np.zeros(len(pts))
            for cam, (u, v) in zip(cams, noisy):
                h = pts @ cam.p[:, :3].T + cam.p[:, 3]
                cost += (u * h[:, 2] - h[:, 0]) ** 2 + (v * h[:, 2] - h[:, 1]) ** 2
            best = pts[np.argmin(cost)]
            lattice_err = max(lattice_err, float(np.max(np.abs(est - best))))
        ok = exact_err <= 1e-6 and lattice_err <= 1.0 + 1e-9
        report(
            "triangulation",
            ok,
            f"consistent rays max err {exact_err:.2e} mm (<=1e-6); "
            f"vs 1 mm lattice oracle under noise: max {lattice_err:.3f} mm (<=1 step)",
        )


class TestDrrPhysics:
    def test_criterion(self, rng):
        # Box path length
        data = np.ones((21, 21, 101), dtype=np.float32)
        v = Volume(data, (1, 1, 1), (-10.0, -10.0, 0.0))
        cam = compose_camera(
            np.array([[1000.0, 0, 112], [0, 1000.0, 112], [0, 0, 1]]), np.eye(3), [0, 0, -1000.0]
        )
        img = render_drr(v, cam, 224, 224, step_mm=0.5)
        box_err = abs(float(img.raw[112, 112]) - 100.0)

        # Linearity
        d2 = rng.uniform(0, 400, (24, 24, 24)).astype(np.float32)
        va = Volume(d2, (1, 1, 1), (-12, -12, -12))
        vb = Volume(d2 * 2.0, (1, 1, 1), (-12, -12, -12))
        cam2 = compose_camera(
            np.array([[1000.0, 0, 48], [0, 1000.0, 48], [0, 0, 1]]), np.eye(3), [0, 0, -1000.0]
        )
        ia = render_drr(va, cam2, 96, 96, step_mm=0.5)
        ib = render_drr(vb, cam2, 96, 96, step_mm=0.5)
        linear_exact = np.array_equal(ib.raw, 2.0 * ia.raw)

        # Rigid equivariance on a smooth field
        n, s = 48, 1.0
        axis = (np.arange(n) - (n - 1) / 2.0) * s
        gx, gy, gz = np.meshgrid(axis, axis, axis, indexing="ij")

        def field(x, y, z):
            r = np.sqrt(x**2 + (y - 2.0) ** 2 + z**2)
            return np.maximum(0.0, 18.0 - r) ** 2

        r = random_rotation(rng)
        t = rng.uniform(-5, 5, 3)
        vol1 = Volume(field(gx, gy, gz).astype(np.float32), (s,) * 3, (axis[0],) * 3)
        pts = np.stack([gx.ravel(), gy.ravel(), gz.ravel()], axis=1)
        local = (pts - t) @ r
        vol2 = Volume(
            field(local[:, 0], local[:, 1], local[:, 2]).reshape(n, n, n).astype(np.float32),
            (s,) * 3,
            (axis[0],) * 3,
        )
        cam3 = compose_camera(
            np.array([[1200.0, 0, 64], [0, 1200.0, 64], [0, 0, 1]]), np.eye(3), [0, 0, -1000.0]
        )
        i1 = render_drr(vol1, cam3, 128, 128, step_mm=0.5)
        i2 = render_drr(vol2, transform_camera(cam3, r, t), 128, 128, step_mm=0.5)
        rms = float(
            np.sqrt(np.mean((i1.raw.astype(np.float64) - i2.raw) ** 2))
            / np.sqrt(np.mean(i1.raw.astype(np.float64) ** 2))
        )
        ok = box_err <= 0.5 and linear_exact and rms < 0.01
        report(
            "DRR physics",
            ok,
            f"box path err {box_err:.3f} mm (<= step 0.5); linearity exact: {linear_exact}; "
            f"rigid equivariance RMS {rms:.4f} (<0.01)",
        )


class TestCarving:
    def test_criterion(self, rng):
        # Containment on 20 random phantoms (1-voxel band)
        struct = ndimage.generate_binary_structure(3, 1)
        violations = 0
        for _ in range(20):
            prims = []
            for _ in range(int(rng.integers(1, 4))):
                c = tuple(rng.uniform(-8, 8, 3))
                if rng.integers(2) == 0:
                    prims.append(Sphere(c, float(rng.uniform(6, 14)), 700.0, 1))
                else:
                    prims.append(Box(c, tuple(rng.uniform(8, 22, 3)), 700.0, 1))
            hu, labels = rasterize_phantom(Phantom(tuple(prims)), (96, 96, 96), (0.5,) * 3)
            att = threshold_bone(hu)
            cams = [
                pose_to_camera(
                    Pose(float(rng.uniform(-180, 180)), float(rng.uniform(-20, 20)),
                         view_class="MISC"),
                    (0.0, 0.0, 0.0),
                )
                for _ in range(int(rng.integers(3, 6)))
            ]
            res = reconstruct_scene(att, labels, 1, cams)
            gt = rasterize_gt_grid(labels, 1, res.grid)
            eroded = ndimage.binary_erosion(gt.data > 0, structure=struct, border_value=0)
            violations += int(np.any(eroded & ~(res.grid.data > 0)))

        # View monotonicity (exact) + sphere F1 + timing
        ph = make_sphere_phantom(radius=20.0)
        hu, labels = rasterize_phantom(ph, (96, 96, 96), (0.5,) * 3)
        att = threshold_bone(hu)
        specs = [(k * 22.5, (-1) ** k * 10.0) for k in range(8)] + [(75.0, 5.0)]
        views = []
        for o, t in specs:
            cam = pose_to_camera(Pose(o, t, view_class="MISC"), (0, 0, 0))
            mask = render_mask(labels, 1, cam, 448, 448)
            box = boxes_from_mask(mask)
            win = crop_vertebra(mask.astype(np.float32), cam, box)
            views.append(((crop_mask(win, mask) >= 0.5).astype(np.uint8), win.camera))
        g8 = carve(views[:8], (0.0, 0.0, 0.0))
        g9 = carve(views, (0.0, 0.0, 0.0))
        monotone = not np.any((g9.data > 0) & ~(g8.data > 0))

        cams8 = [pose_to_camera(Pose(o, t, view_class="MISC"), (0, 0, 0)) for o, t in specs[:8]]
        res = reconstruct_scene(att, labels, 1, cams8)
        f1, _ = voxel_overlap(res.grid, rasterize_gt_grid(labels, 1, res.grid))

        carve(views[:4], (0.0, 0.0, 0.0), dims=16)  # warm the kernel
        t0 = time.perf_counter()
        carve(views[:4], (0.0, 0.0, 0.0))
        carve_s = time.perf_counter() - t0

        ok = violations == 0 and monotone and f1 >= 0.95 and carve_s < 2.0
        report(
            "carving",
            ok,
            f"containment violations {violations}/20 (need 0); monotonicity exact: {monotone}; "
            f"sphere 8-view F1 {f1:.4f} (>=0.95); 4-view 128^3 carve {carve_s:.3f} s (<2)",
        )


class TestMetrics:
    def test_criterion(self, rng):
        a = np.zeros((12, 12, 12), np.uint8)
        b = np.zeros((12, 12, 12), np.uint8)
        a[0:10, 1:11, 1:11] = 1
        b[1:11, 1:11, 1:11] = 1
        ga = OccupancyGrid(a, 1.0, (0, 0, 0))
        gb = OccupancyGrid(b, 1.0, (0, 0, 0))
        f1, iou = voxel_overlap(gb, ga)
        cube_ok = abs(f1 - 0.9) < 1e-12 and abs(iou - 900 / 1100) < 1e-12

        pa = rng.uniform(-5, 5, (200, 3))
        pb = rng.uniform(-5, 5, (200, 3))
        asd, hd95, dab, dba = surface_distances(pa, pb)
        o_ab = np.linalg.norm(pa[:, None] - pb[None], axis=-1).min(axis=1)
        o_ba = np.linalg.norm(pb[:, None] - pa[None], axis=-1).min(axis=1)
        oracle_ok = (
            np.array_equal(dab, o_ab)
            and np.array_equal(dba, o_ba)
            and asd == 0.5 * (o_ab.mean() + o_ba.mean())
            and hd95 == max(np.percentile(o_ab, 95), np.percentile(o_ba, 95))
        )

        data = (rng.random((10, 10, 10)) > 0.5).astype(np.uint8)
        g = OccupancyGrid(data, 1.0, (0, 0, 0))
        rep = evaluate(g, g)
        ident_ok = (
            rep.f1 == 1.0
            and rep.iou == 1.0
            and rep.surface_score == 1.0
            and rep.asd_mm == 0.0
            and rep.hd95_mm == 0.0
        )

        f1_ge_iou = True
        for _ in range(1000):
            x = (rng.random((5, 5, 5)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
            y = (rng.random((5, 5, 5)) > rng.uniform(0.2, 0.9)).astype(np.uint8)
            f, i = voxel_overlap(
                OccupancyGrid(x, 1.0, (0, 0, 0)), OccupancyGrid(y, 1.0, (0, 0, 0))
            )
            if f < i - 1e-12:
                f1_ge_iou = False
                break

        ok = cube_ok and oracle_ok and ident_ok and f1_ge_iou
        report(
            "metrics",
            ok,
            f"shifted cube f1 {f1:.4f}==0.9, iou {iou:.4f}=={900/1100:.4f}; "
            f"O(n^2) oracle exact: {oracle_ok}; identities: {ident_ok}; "
            f"f1>=iou on 1000 pairs: {f1_ge_iou}",
        )


class TestAblationTrends:
    def test_criterion(self, seed42_dataset, tmp_path):
        t0 = time.perf_counter()
        rows = ablate_num_views(
            seed42_dataset,
            rows={2: (1, 1, 0, 0), 4: (1, 1, 1, 1)},
            trials=20,
            seed=42,
            out_csv=tmp_path / "views.csv",
        )
        mean = lambda plan, rs: float(np.mean([r["surface"] for r in rs if r["plan"] == plan]))
        s2, s4 = mean("2", rows), mean("4", rows)

        combo_rows = ablate_combinations(
            seed42_dataset, trials=20, seed=42, out_csv=tmp_path / "combos.csv"
        )
        combo_means = {
            name: mean(name, combo_rows)
            for name in ("1AP-1LAT-1OB-1MI", "2AP-2LAT", "1AP-3LAT", "3AP-1LAT")
        }
        best = max(combo_means, key=combo_means.get)

        diffs = []
        for t in range(20):
            rng1 = np.random.default_rng([42, t])
            rng2 = np.random.default_rng([42, t])
            label = seed42_dataset.labels[int(rng1.integers(len(seed42_dataset.labels)))]
            _ = rng2.integers(len(seed42_dataset.labels))
            rep_tri, _ = run_trial(
                seed42_dataset, label, (1, 1, 1, 1), rng1, origin_mode=ORIGIN_TRIANGULATED
            )
            rep_gt, _ = run_trial(
                seed42_dataset, label, (1, 1, 1, 1), rng2, origin_mode=ORIGIN_GROUND_TRUTH
            )
            diffs.append(rep_gt.surface_score - rep_tri.surface_score)
        gt_minus_tri = float(np.mean(diffs))
        elapsed = time.perf_counter() - t0

        ok = (
            s4 > s2
            and best == "1AP-1LAT-1OB-1MI"
            and combo_means["3AP-1LAT"] > combo_means["1AP-3LAT"]
            and gt_minus_tri >= 0.0
            and elapsed < 600.0
        )
        report(
            "ablation trends",
            ok,
            f"4 views {s4:.4f} > 2 views {s2:.4f}; best combo {best} "
            f"({combo_means}); 3AP-1LAT {combo_means['3AP-1LAT']:.4f} > "
            f"1AP-3LAT {combo_means['1AP-3LAT']:.4f}; GT-TRI {gt_minus_tri:+.4f} (>=0); "
            f"runtime {elapsed:.0f} s (<600)",
        )


class TestSensitivityHeatmap:
    def test_criterion(self, tmp_path):
        t0 = time.perf_counter()
        vert = Phantom(tuple(vertebra_primitives((0.0, 0.0, 0.0), label=1)))
        gen_dataset(tmp_path / "vert", phantom=vert, seed=42)
        scores = sensitivity_heatmap(
            tmp_path / "vert",
            HeatmapSpec(seed=42),
            out_csv=tmp_path / "hm_vert.csv",
            out_pgm=tmp_path / "hm_vert.pgm",
        )
        peak = np.unravel_index(np.argmax(scores), scores.shape)
        peak_ok = max(abs(peak[0] - 10), abs(peak[1] - 10)) <= 1

        # Monotone decay along the 8 rays from the peak, 1-node tolerance.
        rays_ok = True
        for du, dv in ((1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (1, -1), (-1, 1), (-1, -1)):
            line = []
            i, j = peak
            while 0 <= i < 21 and 0 <= j < 21:
                line.append(scores[i, j])
                i, j = i + du, j + dv
            for k in range(2, len(line)):
                if line[k] > max(line[k - 1], line[k - 2]) + 0.01:
                    rays_ok = False

        # Sphere flatness isolates pure view-angle sensitivity: with the
        # rest of the rig redundant (8-view base plan), moving one view
        # around a rotationally symmetric object must barely matter.
        gen_dataset(tmp_path / "sph", phantom=make_sphere_phantom(radius=20.0), seed=42)
        sph = sensitivity_heatmap(
            tmp_path / "sph",
            HeatmapSpec(seed=42, base_counts=(2, 2, 2, 2)),
            out_csv=tmp_path / "hm_sph.csv",
        )
        sph_range = float(sph.max() - sph.min())
        elapsed = time.perf_counter() - t0

        ok = (
            scores.size == 441
            and peak_ok
            and rays_ok
            and sph_range < 0.05
            and elapsed < 900.0
        )
        report(
            "sensitivity heatmap",
            ok,
            f"441 nodes; peak at {tuple(int(p) for p in peak)} (within 1 of (10,10)); "
            f"monotone rays: {rays_ok}; sphere range {sph_range:.4f} (<0.05); "
            f"runtime {elapsed:.0f} s (<900)",
        )


class TestFileFormatStability:
    def test_criterion(self, tmp_path):
        from fluorokit.pgm import write_mask_pgm, write_pgm
        from fluorokit.volume import save_volume

        golden = Path(__file__).parent / "golden"
        img = (np.arange(48, dtype=np.uint32).reshape(6, 8) * 1386 % 65536).astype(np.uint16)
        write_pgm(tmp_path / "pattern.pgm", img)
        mask = (np.arange(48).reshape(6, 8) % 3 == 0).astype(np.uint8)
        write_mask_pgm(tmp_path / "pattern_mask.pgm", mask)
        data = ((np.arange(24, dtype=np.int32).reshape(4, 3, 2) * 37 - 300) % 2000).astype(
            np.int16
        )
        save_volume(Volume(data, (0.5, 0.75, 1.25), (-2.0, 3.5, 0.25)), tmp_path / "block.vjson")
        cam = {
            "P": [
                [1000.0, 0.0, 112.0, 112000.0],
                [0.0, 1000.0, 112.0, 112000.0],
                [0.0, 0.0, 1.0, 1000.0],
            ],
            "K": [[1000.0, 0.0, 112.0], [0.0, 1000.0, 112.0], [0.0, 0.0, 1.0]],
            "R": [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            "X_o": [0.0, 0.0, -1000.0],
        }
        (tmp_path / "camera.json").write_text(json.dumps(cam, indent=1, sort_keys=True) + "\n")

        mismatches = []
        for name in ("pattern.pgm", "pattern_mask.pgm", "block.vjson", "block.raw", "camera.json"):
            if (tmp_path / name).read_bytes() != (golden / name).read_bytes():
                mismatches.append(name)
        ok = not mismatches
        report(
            "file-format stability",
            ok,
            "all golden fixtures byte-identical" if ok else f"mismatch: {mismatches}",
        )
