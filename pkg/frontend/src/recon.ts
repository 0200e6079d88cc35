/**
 * Reconstruction flow: render a set of views, submit the job, poll, fetch
 * the grid, and expose slices plus the service's metric report. The viewer
 * displays service numbers only.
 */

import { ApiError, JobStatus, MetricsReport, StudioApi } from "./api.js";
import { decodeBase64 } from "./pgm.js";
import { GridVolume, gridFromBytes } from "./slices.js";

export interface ReconOutcome {
  grid: GridVolume;
  gridId: string;
  metrics: MetricsReport | null;
  timings: { localize_ms: number; reconstruct_ms: number } | null;
  occupiedFraction: number;
  distanceClipMm: number;
  distanceVolume: GridVolume | null;
}

export const VIEW_PRESETS: { name: string; pose: { orbit_deg: number; tilt_deg: number } }[] = [
  { name: "AP", pose: { orbit_deg: 0, tilt_deg: 0 } },
  { name: "Lateral", pose: { orbit_deg: 90, tilt_deg: 0 } },
  { name: "Oblique", pose: { orbit_deg: 20, tilt_deg: 0 } },
  { name: "Misc", pose: { orbit_deg: 30, tilt_deg: 10 } },
];

export class ReconRunner {
  constructor(private api: StudioApi) {}

  async renderViews(
    volumeId: string,
    poses: { orbit_deg: number; tilt_deg: number }[],
    centerMm: number[],
  ): Promise<string[]> {
    const ids: string[] = [];
    for (const pose of poses) {
      const res = await this.api.render({
        volume_id: volumeId,
        pose: { ...pose, center_mm: centerMm },
      });
      ids.push(res.image_id);
    }
    return ids;
  }

  async run(
    volumeId: string,
    label: number,
    imageIds: string[],
    withDistanceMap = true,
  ): Promise<ReconOutcome> {
    let job: JobStatus;
    try {
      const submitted = await this.api.reconstruct({
        volume_id: volumeId,
        label,
        image_ids: imageIds,
      });
      job = await this.api.pollJob(submitted.job_id);
    } catch (e) {
      if (e instanceof ApiError) throw new Error(e.detail.message);
      throw e;
    }
    if (job.status === "error") {
      throw new Error(job.error ?? "reconstruction failed");
    }
    const gridId = job.grid_id as string;
    const payload = await this.api.grid(gridId);
    const grid = gridFromBytes(payload.header.dims, decodeBase64(payload.raw_base64));
    let distanceVolume: GridVolume | null = null;
    let clip = 9.0;
    if (withDistanceMap) {
      try {
        const dm = await this.api.distanceMap(gridId, volumeId, label);
        distanceVolume = gridFromBytes(dm.dims, decodeBase64(dm.raw_base64));
        clip = dm.clip_mm;
      } catch {
        distanceVolume = null; // no ground truth registered: overlay disabled
      }
    }
    return {
      grid,
      gridId,
      metrics: job.metrics ?? null,
      timings: job.timings_ms ?? null,
      occupiedFraction: payload.occupied_fraction,
      distanceClipMm: clip,
      distanceVolume,
    };
  }
}
