/** Studio shell: pose explorer, fiducial review, reconstruction viewer. */

import { ApiError, DemoInfo, StudioApi } from "./api.js";
import { DecodedImage } from "./pgm.js";
import { decodeBase64, decodePgm } from "./pgm.js";
import { PoseExplorer, SLIDER_RANGES } from "./pose-explorer.js";
import { ReconRunner, VIEW_PRESETS } from "./recon.js";
import { MIN_SOLVE_POINTS, ReviewController, solveDisabledReason } from "./review.js";
import { SliceAxis, distanceColor, extractSlice } from "./slices.js";

const api = new StudioApi();

function el<T extends HTMLElement>(id: string): T {
  const node = document.getElementById(id);
  if (!node) throw new Error(`missing element #${id}`);
  return node as T;
}

function toast(message: string): void {
  const box = el<HTMLDivElement>("toast");
  box.textContent = message;
  box.classList.add("visible");
  setTimeout(() => box.classList.remove("visible"), 4000);
}

function drawGray(canvas: HTMLCanvasElement, img: DecodedImage): void {
  canvas.width = img.width;
  canvas.height = img.height;
  const ctx = canvas.getContext("2d")!;
  const out = ctx.createImageData(img.width, img.height);
  for (let i = 0; i < img.data.length; i++) {
    const v = Math.round(img.data[i] * 255);
    out.data[4 * i] = v;
    out.data[4 * i + 1] = v;
    out.data[4 * i + 2] = v;
    out.data[4 * i + 3] = 255;
  }
  ctx.putImageData(out, 0, 0);
}

// ---------------------------------------------------------------------
// pose explorer tab
// ---------------------------------------------------------------------

function setupPoseExplorer(demo: DemoInfo): PoseExplorer {
  const canvas = el<HTMLCanvasElement>("pose-canvas");
  const latency = el<HTMLSpanElement>("pose-latency");
  const scalebar = el<HTMLSpanElement>("pose-scalebar");
  const explorer = new PoseExplorer(
    api,
    demo.volume_id,
    (img, ms) => {
      drawGray(canvas, img);
      latency.textContent = `${ms.toFixed(0)} ms`;
      const mmPerPx = explorer.mmPerPixelAtIso();
      scalebar.textContent = `50 px = ${(50 * mmPerPx).toFixed(1)} mm at isocenter`;
    },
    (message) => toast(message),
  );
  const panel = el<HTMLDivElement>("pose-sliders");
  for (const key of Object.keys(SLIDER_RANGES) as (keyof typeof SLIDER_RANGES)[]) {
    const range = SLIDER_RANGES[key];
    const row = document.createElement("label");
    row.className = "slider-row";
    const name = document.createElement("span");
    name.textContent = key.replace(/_/g, " ");
    const input = document.createElement("input");
    input.type = "range";
    input.min = String(range.min);
    input.max = String(range.max);
    input.step = String(range.step);
    input.value = String(explorer.sliders[key]);
    const value = document.createElement("span");
    value.textContent = input.value;
    input.addEventListener("input", () => {
      value.textContent = input.value;
      explorer.setSlider(key, Number(input.value));
    });
    row.append(name, input, value);
    panel.append(row);
  }
  el<HTMLButtonElement>("pose-ap").addEventListener("click", () => {
    explorer.sliders = { ...explorer.sliders, orbit_deg: 0, tilt_deg: 0 };
    void explorer.renderNow();
  });
  el<HTMLButtonElement>("pose-lateral").addEventListener("click", () => {
    explorer.sliders = { ...explorer.sliders, orbit_deg: 90, tilt_deg: 0 };
    void explorer.renderNow();
  });
  void explorer.renderNow();
  return explorer;
}

// ---------------------------------------------------------------------
// fiducial review tab
// ---------------------------------------------------------------------

function setupFiducialReview(demo: DemoInfo): void {
  if (!demo.fiducials3d) return;
  const fiducials = {
    points3d_mm: demo.fiducials3d.points3d_mm,
    classes: demo.fiducials3d.classes,
  };
  const canvas = el<HTMLCanvasElement>("fid-canvas");
  const status = el<HTMLSpanElement>("fid-status");
  const solveBtn = el<HTMLButtonElement>("fid-solve");
  const detectBtn = el<HTMLButtonElement>("fid-detect");
  const residualBox = el<HTMLDivElement>("fid-residuals");
  let baseImage: DecodedImage | null = null;
  let controller: ReviewController | null = null;
  let selected: number | null = null;

  function redraw(): void {
    if (!baseImage || !controller) return;
    drawGray(canvas, baseImage);
    const ctx = canvas.getContext("2d")!;
    const state = controller.state;
    if (state) {
      for (const p of state.points) {
        ctx.strokeStyle = p.cls === "REF" ? "#4da3ff" : "#57d98a";
        ctx.lineWidth = p.id === selected ? 3 : 1.5;
        ctx.beginPath();
        ctx.arc(p.u, p.v, Math.max(4, p.radius_px), 0, Math.PI * 2);
        ctx.stroke();
        ctx.fillStyle = ctx.strokeStyle;
        ctx.fillText(String(p.id), p.u + 8, p.v - 8);
      }
    }
    for (const vec of controller.overlay()) {
      ctx.strokeStyle = "#ff5f5f";
      ctx.lineWidth = 1.5;
      ctx.beginPath();
      ctx.moveTo(vec.u, vec.v);
      ctx.lineTo(vec.tipU, vec.tipV);
      ctx.stroke();
    }
    const reason = solveDisabledReason(controller.state);
    solveBtn.disabled = reason !== null;
    solveBtn.title = reason ?? "solve calibration";
    status.textContent = reason
      ? `Solve disabled: ${reason}`
      : `${controller.state!.points.length} points ready (min ${MIN_SOLVE_POINTS}); ` +
        `residual arrows at 10x exaggeration`;
  }

  detectBtn.addEventListener("click", async () => {
    try {
      const res = await api.render({
        volume_id: demo.bead_volume_id,
        pose: {},
        width: 448,
        height: 448,
      });
      baseImage = decodePgm(decodeBase64(res.pgm_base64));
      controller = new ReviewController(api, res.image_id, fiducials);
      await controller.detect();
      selected = null;
      redraw();
    } catch (e) {
      toast(e instanceof Error ? e.message : String(e));
    }
  });

  canvas.addEventListener("click", async (ev) => {
    if (!controller?.state) return;
    const rect = canvas.getBoundingClientRect();
    const u = ((ev.clientX - rect.left) / rect.width) * canvas.width;
    const v = ((ev.clientY - rect.top) / rect.height) * canvas.height;
    const hit = controller.state.points.find((p) => Math.hypot(p.u - u, p.v - v) < 8);
    try {
      if (ev.shiftKey && hit) {
        await controller.deletePoint(hit.id);
        selected = null;
      } else if (hit) {
        selected = hit.id;
      } else if (selected !== null) {
        await controller.movePoint(selected, u, v);
      } else {
        await controller.addPoint(u, v);
      }
      redraw();
    } catch (e) {
      toast(e instanceof Error ? e.message : String(e));
    }
  });

  solveBtn.addEventListener("click", async () => {
    if (!controller) return;
    try {
      const solve = await controller.solve();
      const mm =
        solve.mean_mm !== null ? ` (${solve.mean_mm.toFixed(3)} mm)` : "";
      residualBox.textContent =
        `mean ${solve.mean_px.toFixed(3)} px${mm}, median ${solve.median_px.toFixed(3)} px, ` +
        `${solve.residuals_px.length} matched`;
      redraw();
    } catch (e) {
      if (e instanceof ApiError) toast(`${e.detail.message}`);
      else toast(e instanceof Error ? e.message : String(e));
    }
  });
}

// ---------------------------------------------------------------------
// reconstruction tab
// ---------------------------------------------------------------------

function setupReconViewer(demo: DemoInfo): void {
  const runner = new ReconRunner(api);
  const runBtn = el<HTMLButtonElement>("recon-run");
  const oneViewBtn = el<HTMLButtonElement>("recon-one-view");
  const metricsBox = el<HTMLDivElement>("recon-metrics");
  const axialCanvas = el<HTMLCanvasElement>("recon-axial");
  const coronalCanvas = el<HTMLCanvasElement>("recon-coronal");
  const sagittalCanvas = el<HTMLCanvasElement>("recon-sagittal");
  const sliceSlider = el<HTMLInputElement>("recon-slice");
  const legend = el<HTMLDivElement>("recon-legend");
  let outcome: Awaited<ReturnType<ReconRunner["run"]>> | null = null;

  function drawSlices(): void {
    if (!outcome) return;
    const index = Number(sliceSlider.value);
    const views: [HTMLCanvasElement, SliceAxis][] = [
      [axialCanvas, "axial"],
      [coronalCanvas, "coronal"],
      [sagittalCanvas, "sagittal"],
    ];
    for (const [canvas, axis] of views) {
      const slice = extractSlice(outcome.grid, axis, index);
      const overlay = outcome.distanceVolume
        ? extractSlice(outcome.distanceVolume, axis, index)
        : null;
      canvas.width = slice.width;
      canvas.height = slice.height;
      const ctx = canvas.getContext("2d")!;
      const img = ctx.createImageData(slice.width, slice.height);
      for (let i = 0; i < slice.data.length; i++) {
        const occupied = slice.data[i] > 0;
        let rgb: [number, number, number] = occupied ? [230, 230, 230] : [16, 16, 24];
        if (occupied && overlay && overlay.data[i] > 0) {
          rgb = distanceColor(overlay.data[i]);
        }
        img.data[4 * i] = rgb[0];
        img.data[4 * i + 1] = rgb[1];
        img.data[4 * i + 2] = rgb[2];
        img.data[4 * i + 3] = 255;
      }
      ctx.putImageData(img, 0, 0);
    }
    legend.textContent = `distance overlay: blue 0 mm to red >= ${outcome.distanceClipMm} mm (clipped)`;
  }

  async function run(viewCount: number): Promise<void> {
    metricsBox.textContent = "rendering views and reconstructing...";
    try {
      const label = demo.labels[Math.floor(demo.labels.length / 2)] ?? 1;
      const poses = VIEW_PRESETS.slice(0, viewCount).map((p) => p.pose);
      const ids = await runner.renderViews(demo.volume_id, poses, [0, 0, 0]);
      outcome = await runner.run(demo.volume_id, label, ids);
      const m = outcome.metrics;
      metricsBox.textContent = m
        ? `surface score ${m.surface_score.toFixed(4)} (tau ${m.tau_mm} mm) | ` +
          `F1 ${m.f1.toFixed(4)} | IoU ${m.iou.toFixed(4)} | ` +
          `ASD ${m.asd_mm.toFixed(3)} mm | HD95 ${m.hd95_mm.toFixed(3)} mm | ` +
          `occupied ${(outcome.occupiedFraction * 100).toFixed(2)}%`
        : `reconstructed (no ground truth metrics available)`;
      sliceSlider.max = String(outcome.grid.dims[2] - 1);
      sliceSlider.value = String(Math.floor(outcome.grid.dims[2] / 2));
      drawSlices();
    } catch (e) {
      metricsBox.textContent = "";
      toast(e instanceof Error ? e.message : String(e));
    }
  }

  runBtn.addEventListener("click", () => void run(4));
  oneViewBtn.addEventListener("click", () => void run(1));
  sliceSlider.addEventListener("input", drawSlices);
}

// ---------------------------------------------------------------------

async function boot(): Promise<void> {
  for (const button of document.querySelectorAll<HTMLButtonElement>("[data-tab]")) {
    button.addEventListener("click", () => {
      for (const section of document.querySelectorAll<HTMLElement>(".tab")) {
        section.hidden = section.id !== button.dataset.tab;
      }
    });
  }
  try {
    const demo = await api.loadDemo();
    setupPoseExplorer(demo);
    setupFiducialReview(demo);
    setupReconViewer(demo);
  } catch (e) {
    toast(`failed to load demo volumes: ${e instanceof Error ? e.message : e}`);
  }
}

void boot();
