"""HTTP facade over rendering, calibration, localization, and reconstruction.

The service is a thin shell: every computation calls the same library code
the CLI uses, so results are byte-identical across both entry points.
Sessions hold loaded volumes, a content-addressed image store, and
in-progress fiducial reviews; artifacts are keyed by the sha256 of their
bytes, so identical content always receives the identical id.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import threading
import uuid
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field as dc_field
from pathlib import Path

import numpy as np
from fastapi import FastAPI, File, HTTPException, Query, UploadFile
from fastapi.responses import JSONResponse
from fastapi.staticfiles import StaticFiles
from pydantic import BaseModel

from . import errors as err
from .calibration import (
    FiducialSet,
    detect_fiducials,
    rectify_all,
    resolve_correspondence,
)
from .carve import (
    HULL,
    MEAN_THRESH,
    ORIGIN_GROUND_TRUTH,
    ORIGIN_TRIANGULATED,
    rasterize_gt_grid,
    reconstruct_scene,
)
from .drr import render_drr
from .geometry import CameraMatrix, Pose, pose_to_camera
from .metrics import evaluate
from .phantom import (
    make_bead_layout,
    make_bead_phantom,
    make_lumbar_phantom,
    rasterize_phantom,
)
from .volume import Volume, label_ids, load_volume, save_volume, threshold_bone

DATA_DIR_ENV = "FRK_DATA_DIR"


def _payload(code: str, message: str, field: str | None = None, **extra) -> dict:
    d = {"code": code, "message": message}
    if field is not None:
        d["field"] = field
    d.update(extra)
    return d


def _bad_request(message: str, field: str | None = None, **extra):
    return HTTPException(status_code=400, detail=_payload("invalid-request", message, field, **extra))


def _not_found(message: str):
    return HTTPException(status_code=404, detail=_payload("not-found", message))


@dataclass
class FiducialReview:
    detections: dict = dc_field(default_factory=dict)  # point id -> point dict
    applied_ops: set = dc_field(default_factory=set)
    next_point: int = 0
    last_solve: dict | None = None


@dataclass
class Session:
    id: str
    volumes: dict = dc_field(default_factory=dict)  # id -> Volume
    volume_meta: dict = dc_field(default_factory=dict)
    images: dict = dc_field(default_factory=dict)  # id -> image record
    reviews: dict = dc_field(default_factory=dict)  # image id -> FiducialReview
    grids: dict = dc_field(default_factory=dict)  # id -> OccupancyGrid
    jobs: dict = dc_field(default_factory=dict)  # job id -> job record
    job_by_request: dict = dc_field(default_factory=dict)
    lock: threading.Lock = dc_field(default_factory=threading.Lock)


class PoseBody(BaseModel):
    orbit_deg: float = 0.0
    tilt_deg: float = 0.0
    focal_len_mm: float = 1000.0
    source_to_center_mm: float = 500.0
    pixel_pitch_mm: float = 0.66
    view_class: str = "MISC"
    center_mm: list[float] | None = None


class RenderBody(BaseModel):
    volume_id: str
    pose: PoseBody | None = None
    P: list[list[float]] | None = None
    width: int = 448
    height: int = 448
    step_mm: float | None = None


class DetectBody(BaseModel):
    image_id: str
    radii_px: tuple[float, float] = (2.5, 12.0)


class EditOp(BaseModel):
    op_id: str
    action: str  # add | move | delete | reclass
    point_id: int | None = None
    u: float | None = None
    v: float | None = None
    radius_px: float | None = None
    cls: str | None = None


class EditBody(BaseModel):
    image_id: str
    ops: list[EditOp]


class Fiducials3dBody(BaseModel):
    points3d_mm: list[list[float]]
    classes: list[str]


class SolveBody(BaseModel):
    image_id: str
    fiducials3d: Fiducials3dBody
    gate_px: float = 10.0
    pixel_pitch_mm: float | None = None


class ReconstructBody(BaseModel):
    volume_id: str
    label: int
    image_ids: list[str]
    mode: str = HULL
    origin: str = ORIGIN_TRIANGULATED
    with_metrics: bool = True
    tau_mm: float = 1.0


def create_app(data_dir: str | Path | None = None, frontend_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="fluorokit service")
    data_root = Path(data_dir or os.environ.get(DATA_DIR_ENV) or ".frk-data")
    data_root.mkdir(parents=True, exist_ok=True)
    sessions: dict[str, Session] = {}
    sessions_lock = threading.Lock()
    pool = ThreadPoolExecutor(max_workers=2)

    def get_session(name: str) -> Session:
        with sessions_lock:
            if name not in sessions:
                sessions[name] = Session(id=name)
            return sessions[name]

    @app.exception_handler(err.FluorokitError)
    async def _domain_error(request, exc: err.FluorokitError):
        code = {
            err.InsufficientPointsError: "insufficient-points",
            err.InsufficientViewsError: "insufficient-views",
            err.DegenerateGeometryError: "degenerate-geometry",
            err.DegenerateConfigurationError: "degenerate-configuration",
            err.DegenerateCameraError: "degenerate-camera",
            err.FormatError: "format-error",
            err.UnsupportedConfigurationError: "unsupported-configuration",
        }.get(type(exc), "invalid-input")
        return JSONResponse(status_code=400, content=_payload(code, str(exc)))

    # ------------------------------------------------------------------
    # sessions and volumes
    # ------------------------------------------------------------------

    @app.post("/api/sessions")
    def create_session():
        name = uuid.uuid4().hex[:12]
        get_session(name)
        return {"id": name}

    @app.get("/api/volumes")
    def list_volumes(session: str = Query("default")):
        s = get_session(session)
        return {"volumes": [dict(id=k, **v) for k, v in s.volume_meta.items()]}

    def _register_volume(s: Session, vol: Volume, vol_id: str, kind: str, labels_of: str | None = None):
        s.volumes[vol_id] = vol
        s.volume_meta[vol_id] = {
            "dims": list(vol.dims),
            "spacing_mm": list(vol.spacing_mm),
            "origin_mm": list(vol.origin_mm),
            "dtype": vol.dtype_name,
            "kind": kind,
            "labels_of": labels_of,
        }

    @app.post("/api/volumes")
    async def upload_volume(
        header: UploadFile = File(...),
        raw: UploadFile = File(...),
        session: str = Query("default"),
        kind: str = Query("hu"),
        labels_of: str | None = Query(None),
    ):
        s = get_session(session)
        header_bytes = await header.read()
        raw_bytes = await raw.read()
        vol_id = hashlib.sha256(header_bytes + raw_bytes).hexdigest()[:16]
        stem = data_root / f"vol_{vol_id}"
        stem.with_suffix(".vjson").write_bytes(header_bytes)
        stem.with_suffix(".raw").write_bytes(raw_bytes)
        vol = load_volume(stem.with_suffix(".vjson"))
        with s.lock:
            _register_volume(s, vol, vol_id, kind, labels_of)
        return {"id": vol_id, **s.volume_meta[vol_id]}

    @app.post("/api/demo")
    def load_demo(session: str = Query("default")):
        """Load the built-in demo: a lumbar phantom plus a 14-bead phantom."""
        s = get_session(session)
        with s.lock:
            if "demo-spine" in s.volumes:
                return _demo_meta(s)
            ph = make_lumbar_phantom(3)
            hu, labels = rasterize_phantom(ph, (100, 84, 168), (0.7, 0.7, 0.7))
            att = threshold_bone(hu)
            _register_volume(s, att, "demo-spine", "demo-hu")
            _register_volume(s, labels, "demo-spine-labels", "labels", labels_of="demo-spine")
            rng = np.random.default_rng(7)
            pose = pose_to_camera(
                Pose(0.0, 0.0, det_width_px=448, det_height_px=448), (0.0, 0.0, 0.0)
            )
            pts, classes = make_bead_layout(rng, cameras=[pose], image_bounds_px=(448, 448, 20.0))
            bead_ph = make_bead_phantom(pts, classes, smoothing=1.5)
            bhu, _ = rasterize_phantom(
                bead_ph, (208, 178, 242), (0.6, 0.6, 0.6)
            )
            _register_volume(s, threshold_bone(bhu), "demo-beads", "demo-hu")
            s.volume_meta["demo-beads"]["fiducials3d"] = {
                "points3d_mm": pts.tolist(),
                "classes": list(classes),
            }
        return _demo_meta(s)

    def _demo_meta(s: Session) -> dict:
        return {
            "volume_id": "demo-spine",
            "labels_id": "demo-spine-labels",
            "bead_volume_id": "demo-beads",
            "labels": label_ids(s.volumes["demo-spine-labels"]),
            "fiducials3d": s.volume_meta.get("demo-beads", {}).get("fiducials3d"),
        }

    # ------------------------------------------------------------------
    # rendering
    # ------------------------------------------------------------------

    @app.post("/api/render")
    def render(body: RenderBody, session: str = Query("default")):
        s = get_session(session)
        vol = s.volumes.get(body.volume_id)
        if vol is None:
            raise _not_found(f"unknown volume {body.volume_id!r}")
        if body.width < 8 or body.height < 8 or body.width > 1024 or body.height > 1024:
            raise _bad_request("width/height must be within [8, 1024]", field="width")
        if body.step_mm is not None and body.step_mm <= 0:
            raise _bad_request("step_mm must be positive", field="step_mm")
        if body.P is not None:
            cam = CameraMatrix(np.asarray(body.P, dtype=np.float64))
        elif body.pose is not None:
            p = body.pose
            if p.focal_len_mm <= 0:
                raise _bad_request("focal_len_mm must be positive", field="focal_len_mm")
            if p.pixel_pitch_mm <= 0:
                raise _bad_request("pixel_pitch_mm must be positive", field="pixel_pitch_mm")
            if p.view_class not in ("AP", "LATERAL", "OBLIQUE", "MISC"):
                raise _bad_request("unknown view_class", field="view_class")
            pose = Pose(
                p.orbit_deg,
                p.tilt_deg,
                focal_len_mm=p.focal_len_mm,
                source_to_center_mm=p.source_to_center_mm,
                det_width_px=body.width,
                det_height_px=body.height,
                pixel_pitch_mm=p.pixel_pitch_mm,
                view_class=p.view_class,
            )
            center = p.center_mm if p.center_mm is not None else [0.0, 0.0, 0.0]
            cam = pose_to_camera(pose, center)
        else:
            raise _bad_request("render needs either 'pose' or 'P'", field="pose")
        img = render_drr(vol, cam, body.width, body.height, body.step_mm)
        normalized = img.normalized
        header = f"P5\n{body.width} {body.height}\n65535\n".encode()
        pgm_bytes = header + normalized.astype(">u2").tobytes()
        image_id = hashlib.sha256(pgm_bytes).hexdigest()[:16]
        with s.lock:
            s.images[image_id] = {
                "pgm": pgm_bytes,
                "array": normalized,
                "camera": cam,
                "volume_id": body.volume_id,
                "width": body.width,
                "height": body.height,
            }
        return {
            "image_id": image_id,
            "pgm_base64": base64.b64encode(pgm_bytes).decode("ascii"),
            "raw_min": float(img.raw.min()),
            "raw_max": float(img.raw.max()),
            "width": body.width,
            "height": body.height,
        }

    @app.get("/api/images/{image_id}")
    def get_image(image_id: str, session: str = Query("default")):
        s = get_session(session)
        rec = s.images.get(image_id)
        if rec is None:
            raise _not_found(f"unknown image {image_id!r}")
        return {
            "image_id": image_id,
            "pgm_base64": base64.b64encode(rec["pgm"]).decode("ascii"),
            "width": rec["width"],
            "height": rec["height"],
        }

    # ------------------------------------------------------------------
    # fiducial review
    # ------------------------------------------------------------------

    def _review_state(image_id: str, review: FiducialReview) -> dict:
        return {
            "image_id": image_id,
            "points": sorted(review.detections.values(), key=lambda p: p["id"]),
            "applied_ops": sorted(review.applied_ops),
            "last_solve": review.last_solve,
        }

    @app.post("/api/fiducials/detect")
    def fiducials_detect(body: DetectBody, session: str = Query("default")):
        s = get_session(session)
        rec = s.images.get(body.image_id)
        if rec is None:
            raise _not_found(f"unknown image {body.image_id!r}")
        if not 0 < body.radii_px[0] < body.radii_px[1]:
            raise _bad_request("radii_px must be an increasing positive pair", field="radii_px")
        detections = detect_fiducials(rec["array"], body.radii_px)
        review = FiducialReview()
        n_ref_guess = len(detections) // 2
        by_radius = sorted(range(len(detections)), key=lambda i: -detections[i].radius_px)
        ref_idx = set(by_radius[:n_ref_guess])
        for i, d in enumerate(detections):
            review.detections[i] = {
                "id": i,
                "u": d.center[0],
                "v": d.center[1],
                "radius_px": d.radius_px,
                "score": d.score,
                "cls": "REF" if i in ref_idx else "STD",
            }
        review.next_point = len(detections)
        with s.lock:
            s.reviews[body.image_id] = review
        return _review_state(body.image_id, review)

    @app.post("/api/fiducials/edit")
    def fiducials_edit(body: EditBody, session: str = Query("default")):
        s = get_session(session)
        review = s.reviews.get(body.image_id)
        if review is None:
            raise _not_found(f"no fiducial review for image {body.image_id!r}")
        with s.lock:
            for op in body.ops:
                if op.op_id in review.applied_ops:
                    continue  # idempotent by op id
                if op.action == "add":
                    if op.u is None or op.v is None:
                        raise _bad_request("add needs u and v", field="u")
                    pid = review.next_point
                    review.next_point += 1
                    review.detections[pid] = {
                        "id": pid,
                        "u": op.u,
                        "v": op.v,
                        "radius_px": op.radius_px or 5.0,
                        "score": 0.0,
                        "cls": op.cls or "STD",
                    }
                elif op.action == "move":
                    pt = review.detections.get(op.point_id)
                    if pt is None:
                        raise _bad_request(f"unknown point {op.point_id}", field="point_id")
                    if op.u is not None:
                        pt["u"] = op.u
                    if op.v is not None:
                        pt["v"] = op.v
                elif op.action == "delete":
                    if op.point_id not in review.detections:
                        raise _bad_request(f"unknown point {op.point_id}", field="point_id")
                    del review.detections[op.point_id]
                elif op.action == "reclass":
                    pt = review.detections.get(op.point_id)
                    if pt is None:
                        raise _bad_request(f"unknown point {op.point_id}", field="point_id")
                    if op.cls not in ("REF", "STD"):
                        raise _bad_request("cls must be REF or STD", field="cls")
                    pt["cls"] = op.cls
                else:
                    raise _bad_request(f"unknown action {op.action!r}", field="action")
                review.applied_ops.add(op.op_id)
        return _review_state(body.image_id, review)

    @app.post("/api/calibrate/solve")
    def calibrate_solve(body: SolveBody, session: str = Query("default")):
        s = get_session(session)
        review = s.reviews.get(body.image_id)
        if review is None:
            raise _not_found(f"no fiducial review for image {body.image_id!r}")
        points = sorted(review.detections.values(), key=lambda p: p["id"])
        if len(points) < 6:
            raise HTTPException(
                status_code=400,
                detail=_payload(
                    "insufficient-points",
                    f"solve needs at least 6 points, {len(points)} remain",
                    count=len(points),
                ),
            )
        fid = FiducialSet(
            np.asarray(body.fiducials3d.points3d_mm, dtype=np.float64),
            tuple(body.fiducials3d.classes),
        )
        ref3d = fid.reference_points
        refs2d = [p for p in points if p["cls"] == "REF"]
        if len(refs2d) != len(ref3d):
            raise HTTPException(
                status_code=400,
                detail=_payload(
                    "insufficient-points",
                    f"need exactly {len(ref3d)} REF points, have {len(refs2d)}",
                    count=len(refs2d),
                ),
            )
        ref2d = np.array([[p["u"], p["v"]] for p in refs2d])
        _, preliminary = resolve_correspondence(ref3d, ref2d)
        all2d = np.array([[p["u"], p["v"]] for p in points])
        result = rectify_all(
            preliminary,
            fid.points3d_mm,
            all2d,
            gate_px=body.gate_px,
            pixel_pitch_mm=body.pixel_pitch_mm,
        )
        point_ids = [p["id"] for p in points]
        solve = result.to_json_dict()
        solve["matched_point_ids"] = [
            [int(i3d), point_ids[j2d]] for i3d, j2d in result.matches
        ]
        with s.lock:
            review.last_solve = solve
        return solve

    # ------------------------------------------------------------------
    # reconstruction jobs
    # ------------------------------------------------------------------

    def _run_reconstruction(s: Session, job_id: str, body: ReconstructBody):
        job = s.jobs[job_id]
        try:
            vol = s.volumes.get(body.volume_id)
            if vol is None:
                raise err.InvalidInputError(f"unknown volume {body.volume_id!r}")
            labels_id = next(
                (k for k, v in s.volume_meta.items() if v.get("labels_of") == body.volume_id),
                None,
            )
            if labels_id is None:
                raise err.InvalidInputError(
                    "reconstruction needs a labels volume registered for this volume"
                )
            labels = s.volumes[labels_id]
            cams = []
            for image_id in body.image_ids:
                rec = s.images.get(image_id)
                if rec is None:
                    raise err.InvalidInputError(f"unknown image {image_id!r}")
                cams.append(rec["camera"])
            res = reconstruct_scene(
                vol,
                labels,
                body.label,
                cams,
                mode=body.mode,
                origin_mode=body.origin,
            )
            grid_vol = res.grid.to_volume()
            blob = np.ascontiguousarray(grid_vol.data.transpose(2, 1, 0)).tobytes()
            grid_id = hashlib.sha256(blob).hexdigest()[:16]
            with s.lock:
                s.grids[grid_id] = res.grid
            save_volume(grid_vol, data_root / f"grid_{grid_id}.vjson")
            out = {"status": "done", "grid_id": grid_id, "timings_ms": res.timings_ms,
                   "center_mm": [float(c) for c in res.center_mm]}
            if body.with_metrics:
                gt = rasterize_gt_grid(labels, body.label, res.grid)
                out["metrics"] = evaluate(res.grid, gt, body.tau_mm).to_json_dict()
            job.update(out)
        except Exception as e:  # job failures carry the module error verbatim
            job.update({"status": "error", "error": str(e), "error_type": type(e).__name__})

    @app.post("/api/reconstruct")
    def reconstruct(body: ReconstructBody, session: str = Query("default")):
        s = get_session(session)
        if body.mode not in (HULL, MEAN_THRESH):
            raise _bad_request(f"unknown mode {body.mode!r}", field="mode")
        if body.origin not in (ORIGIN_TRIANGULATED, ORIGIN_GROUND_TRUTH):
            raise _bad_request(f"unknown origin {body.origin!r}", field="origin")
        if len(body.image_ids) < 2:
            raise HTTPException(
                status_code=400,
                detail=_payload(
                    "insufficient-views",
                    f"reconstruction needs >= 2 views, got {len(body.image_ids)}",
                ),
            )
        request_key = hashlib.sha256(
            json.dumps(body.model_dump(), sort_keys=True).encode()
        ).hexdigest()[:16]
        with s.lock:
            if request_key in s.job_by_request:
                return {"job_id": s.job_by_request[request_key]}
            job_id = uuid.uuid4().hex[:12]
            s.jobs[job_id] = {"status": "queued"}
            s.job_by_request[request_key] = job_id
        pool.submit(_run_reconstruction, s, job_id, body)
        return {"job_id": job_id}

    @app.get("/api/jobs/{job_id}")
    def job_status(job_id: str, session: str = Query("default")):
        s = get_session(session)
        job = s.jobs.get(job_id)
        if job is None:
            raise _not_found(f"unknown job {job_id!r}")
        return {"job_id": job_id, **job}

    @app.get("/api/grids/{grid_id}")
    def get_grid(grid_id: str, session: str = Query("default")):
        s = get_session(session)
        grid = s.grids.get(grid_id)
        if grid is None:
            raise _not_found(f"unknown grid {grid_id!r}")
        v = grid.to_volume()
        blob = np.ascontiguousarray(v.data.transpose(2, 1, 0)).tobytes()
        return {
            "grid_id": grid_id,
            "header": {
                "dims": list(v.dims),
                "spacing_mm": list(v.spacing_mm),
                "origin_mm": list(v.origin_mm),
                "dtype": v.dtype_name,
                "order": "x-fastest",
            },
            "occupied_fraction": grid.occupied_fraction,
            "provenance": grid.provenance,
            "raw_base64": base64.b64encode(blob).decode("ascii"),
        }

    @app.get("/api/grids/{grid_id}/distance-map")
    def get_distance_map(
        grid_id: str,
        volume_id: str = Query(...),
        label: int = Query(...),
        clip_mm: float = Query(9.0),
        session: str = Query("default"),
    ):
        """uint8 display volume of prediction-surface distances (0..clip)."""
        from .metrics import distance_display_volume, distance_map

        s = get_session(session)
        grid = s.grids.get(grid_id)
        if grid is None:
            raise _not_found(f"unknown grid {grid_id!r}")
        labels_id = next(
            (k for k, v in s.volume_meta.items() if v.get("labels_of") == volume_id), None
        )
        if labels_id is None:
            raise _bad_request("no labels volume registered for this volume", field="volume_id")
        gt = rasterize_gt_grid(s.volumes[labels_id], label, grid)
        dmap = distance_map(grid, gt, clip_mm=clip_mm)
        display = distance_display_volume(dmap, grid)
        blob = np.ascontiguousarray(display.transpose(2, 1, 0)).tobytes()
        return {
            "grid_id": grid_id,
            "clip_mm": clip_mm,
            "dims": list(display.shape),
            "raw_base64": base64.b64encode(blob).decode("ascii"),
        }

    if frontend_dir is not None and Path(frontend_dir).is_dir():
        app.mount("/", StaticFiles(directory=str(frontend_dir), html=True), name="studio")

    return app
