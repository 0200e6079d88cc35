/**
 * Typed client for the fluorokit service. All numbers shown in the UI come
 * from these payloads; the client performs no local numerics beyond display
 * formatting.
 */

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface PoseRequest {
  orbit_deg?: number;
  tilt_deg?: number;
  focal_len_mm?: number;
  source_to_center_mm?: number;
  pixel_pitch_mm?: number;
  view_class?: string;
  center_mm?: number[] | null;
}

export interface RenderResponse {
  image_id: string;
  pgm_base64: string;
  raw_min: number;
  raw_max: number;
  width: number;
  height: number;
}

export interface ReviewPoint {
  id: number;
  u: number;
  v: number;
  radius_px: number;
  score: number;
  cls: "REF" | "STD";
}

export interface ReviewState {
  image_id: string;
  points: ReviewPoint[];
  applied_ops: string[];
  last_solve: SolveResponse | null;
}

export interface SolveResponse {
  P: number[][];
  K: number[][];
  R: number[][];
  X_o: number[];
  matches: number[][];
  matched_point_ids?: number[][];
  residuals_px: number[];
  mean_px: number;
  median_px: number;
  mean_mm: number | null;
  median_mm: number | null;
}

export interface Fiducials3d {
  points3d_mm: number[][];
  classes: string[];
}

export interface DemoInfo {
  volume_id: string;
  labels_id: string;
  bead_volume_id: string;
  labels: number[];
  fiducials3d: { points3d_mm: number[][]; classes: string[] } | null;
}

export interface JobStatus {
  job_id: string;
  status: "queued" | "running" | "done" | "error";
  grid_id?: string;
  metrics?: MetricsReport;
  timings_ms?: { localize_ms: number; reconstruct_ms: number };
  error?: string;
}

export interface MetricsReport {
  f1: number;
  iou: number;
  surface_score: number;
  tau_mm: number;
  asd_mm: number;
  hd95_mm: number;
  counts: Record<string, number>;
}

export interface GridPayload {
  grid_id: string;
  header: {
    dims: number[];
    spacing_mm: number[];
    origin_mm: number[];
    dtype: string;
    order: string;
  };
  occupied_fraction: number;
  provenance: string;
  raw_base64: string;
}

export interface DistanceMapPayload {
  grid_id: string;
  clip_mm: number;
  dims: number[];
  raw_base64: string;
}

export interface ApiErrorDetail {
  code: string;
  message: string;
  field?: string;
  count?: number;
}

export class ApiError extends Error {
  detail: ApiErrorDetail;
  status: number;
  constructor(status: number, detail: ApiErrorDetail) {
    super(detail.message);
    this.status = status;
    this.detail = detail;
  }
}

export class StudioApi {
  constructor(
    private baseUrl = "",
    private session = "default",
    private fetchImpl: FetchLike = (u, i) => fetch(u, i),
  ) {}

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const url = `${this.baseUrl}${path}${path.includes("?") ? "&" : "?"}session=${this.session}`;
    const response = await this.fetchImpl(url, {
      method,
      headers: body !== undefined ? { "Content-Type": "application/json" } : undefined,
      body: body !== undefined ? JSON.stringify(body) : undefined,
    });
    const payload = await response.json();
    if (!response.ok) {
      const detail: ApiErrorDetail =
        payload && payload.detail && payload.detail.message
          ? payload.detail
          : { code: "http-error", message: JSON.stringify(payload) };
      throw new ApiError(response.status, detail);
    }
    return payload as T;
  }

  loadDemo(): Promise<DemoInfo> {
    return this.request("POST", "/api/demo");
  }

  render(body: {
    volume_id: string;
    pose?: PoseRequest;
    P?: number[][];
    width?: number;
    height?: number;
    step_mm?: number | null;
  }): Promise<RenderResponse> {
    return this.request("POST", "/api/render", body);
  }

  detect(imageId: string, radii: [number, number]): Promise<ReviewState> {
    return this.request("POST", "/api/fiducials/detect", {
      image_id: imageId,
      radii_px: radii,
    });
  }

  edit(imageId: string, ops: Record<string, unknown>[]): Promise<ReviewState> {
    return this.request("POST", "/api/fiducials/edit", { image_id: imageId, ops });
  }

  solve(imageId: string, fiducials3d: Fiducials3d, pitchMm?: number): Promise<SolveResponse> {
    return this.request("POST", "/api/calibrate/solve", {
      image_id: imageId,
      fiducials3d,
      pixel_pitch_mm: pitchMm ?? null,
    });
  }

  reconstruct(body: {
    volume_id: string;
    label: number;
    image_ids: string[];
    mode?: string;
    origin?: string;
  }): Promise<{ job_id: string }> {
    return this.request("POST", "/api/reconstruct", body);
  }

  job(jobId: string): Promise<JobStatus> {
    return this.request("GET", `/api/jobs/${jobId}`);
  }

  grid(gridId: string): Promise<GridPayload> {
    return this.request("GET", `/api/grids/${gridId}`);
  }

  distanceMap(gridId: string, volumeId: string, label: number): Promise<DistanceMapPayload> {
    return this.request(
      "GET",
      `/api/grids/${gridId}/distance-map?volume_id=${volumeId}&label=${label}`,
    );
  }

  async pollJob(jobId: string, intervalMs = 150, timeoutMs = 120000): Promise<JobStatus> {
    const start = Date.now();
    for (;;) {
      const status = await this.job(jobId);
      if (status.status === "done" || status.status === "error") return status;
      if (Date.now() - start > timeoutMs) throw new Error("job polling timed out");
      await new Promise((resolve) => setTimeout(resolve, intervalMs));
    }
  }
}
