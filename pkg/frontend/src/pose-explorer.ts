/**
 * Pose explorer: sliders for orbit/tilt/focal length/detector pitch with a
 * debounced live re-render. Stale responses are dropped by sequence number;
 * the scale bar and latency readout come straight from the service payload.
 */

import { StudioApi } from "./api.js";
import { debounce } from "./debounce.js";
import { decodeBase64, decodePgm } from "./pgm.js";
import { LatestGate } from "./seq.js";

export interface PoseSliders {
  orbit_deg: number;
  tilt_deg: number;
  focal_len_mm: number;
  pixel_pitch_mm: number;
  center_z_mm: number;
}

export const SLIDER_RANGES = {
  orbit_deg: { min: -180, max: 180, step: 1 },
  tilt_deg: { min: -25, max: 25, step: 1 },
  focal_len_mm: { min: 600, max: 1400, step: 10 },
  pixel_pitch_mm: { min: 0.3, max: 1.2, step: 0.02 },
  center_z_mm: { min: -90, max: 90, step: 5 },
} as const;

export function clampSliders(s: PoseSliders): PoseSliders {
  const c = { ...s };
  for (const key of Object.keys(SLIDER_RANGES) as (keyof PoseSliders)[]) {
    const r = SLIDER_RANGES[key];
    c[key] = Math.min(r.max, Math.max(r.min, c[key]));
  }
  return c;
}

export class PoseExplorer {
  sliders: PoseSliders = {
    orbit_deg: 0,
    tilt_deg: 0,
    focal_len_mm: 1000,
    pixel_pitch_mm: 0.66,
    center_z_mm: 0,
  };
  lastImageId: string | null = null;
  lastLatencyMs: number | null = null;
  lastError: string | null = null;
  private gate = new LatestGate();
  private debounced = debounce(() => void this.renderNow(), 150);

  constructor(
    private api: StudioApi,
    private volumeId: string,
    private onImage: (img: ReturnType<typeof decodePgm>, latencyMs: number) => void,
    private onError: (message: string) => void = () => {},
    private size = 448,
  ) {}

  setSlider(key: keyof PoseSliders, value: number): void {
    this.sliders = clampSliders({ ...this.sliders, [key]: value });
    this.debounced.call();
  }

  /** Render immediately (presets, initial draw). */
  async renderNow(): Promise<void> {
    const seq = this.gate.next();
    const started = performance.now();
    try {
      const body = {
        volume_id: this.volumeId,
        pose: {
          orbit_deg: this.sliders.orbit_deg,
          tilt_deg: this.sliders.tilt_deg,
          focal_len_mm: this.sliders.focal_len_mm,
          pixel_pitch_mm: this.sliders.pixel_pitch_mm,
          center_mm: [0, 0, this.sliders.center_z_mm],
        },
        width: this.size,
        height: this.size,
      };
      const res = await this.api.render(body);
      if (!this.gate.accept(seq)) return; // superseded by a newer slider move
      const latency = performance.now() - started;
      this.lastImageId = res.image_id;
      this.lastLatencyMs = latency;
      this.lastError = null;
      this.onImage(decodePgm(decodeBase64(res.pgm_base64)), latency);
    } catch (e) {
      if (!this.gate.accept(seq)) return;
      this.lastError = e instanceof Error ? e.message : String(e);
      this.onError(this.lastError);
    }
  }

  /** mm of anatomy per display pixel at the isocenter, for the scale bar. */
  mmPerPixelAtIso(): number {
    const magnification = this.sliders.focal_len_mm / 500.0;
    return this.sliders.pixel_pitch_mm / magnification;
  }
}
