/**
 * Fiducial review logic. The UI never mutates calibration state locally:
 * every change becomes an op sent through /api/fiducials/edit, and the
 * displayed points/residuals always come from the latest service payload.
 */

import { Fiducials3d, ReviewPoint, ReviewState, SolveResponse, StudioApi } from "./api.js";

export const MIN_SOLVE_POINTS = 6;
export const RESIDUAL_EXAGGERATION = 10;

export interface ResidualVector {
  pointId: number;
  u: number;
  v: number;
  /** arrow end at 10x exaggeration, for drawing */
  tipU: number;
  tipV: number;
  residualPx: number;
}

export function solveDisabledReason(state: ReviewState | null): string | null {
  if (!state) return "run detection first";
  if (state.points.length < MIN_SOLVE_POINTS) {
    return `need at least ${MIN_SOLVE_POINTS} points, ${state.points.length} remain`;
  }
  return null;
}

/**
 * Residual overlay vectors: each matched point gets an arrow from its
 * clicked position toward the solved projection, exaggerated 10x.
 */
export function residualVectors(
  points: ReviewPoint[],
  solve: SolveResponse,
  fiducials3d: Fiducials3d,
): ResidualVector[] {
  const byId = new Map(points.map((p) => [p.id, p]));
  const out: ResidualVector[] = [];
  const pairs = solve.matched_point_ids ?? [];
  pairs.forEach(([i3d, pointId], k) => {
    const p = byId.get(pointId);
    if (!p) return;
    const projected = projectRow(solve.P, fiducials3d.points3d_mm[i3d]);
    const du = projected[0] - p.u;
    const dv = projected[1] - p.v;
    out.push({
      pointId,
      u: p.u,
      v: p.v,
      tipU: p.u + du * RESIDUAL_EXAGGERATION,
      tipV: p.v + dv * RESIDUAL_EXAGGERATION,
      residualPx: solve.residuals_px[k],
    });
  });
  return out;
}

function projectRow(p: number[][], x: number[]): [number, number] {
  const w = p[2][0] * x[0] + p[2][1] * x[1] + p[2][2] * x[2] + p[2][3];
  const u = (p[0][0] * x[0] + p[0][1] * x[1] + p[0][2] * x[2] + p[0][3]) / w;
  const v = (p[1][0] * x[0] + p[1][1] * x[1] + p[1][2] * x[2] + p[1][3]) / w;
  return [u, v];
}

let opCounter = 0;

export function nextOpId(prefix: string): string {
  opCounter += 1;
  return `${prefix}-${Date.now()}-${opCounter}`;
}

export class ReviewController {
  state: ReviewState | null = null;
  lastSolve: SolveResponse | null = null;

  constructor(
    private api: StudioApi,
    private imageId: string,
    private fiducials3d: Fiducials3d,
  ) {}

  async detect(radii: [number, number] = [2.5, 12.0]): Promise<ReviewState> {
    this.state = await this.api.detect(this.imageId, radii);
    this.lastSolve = null;
    return this.state;
  }

  async deletePoint(pointId: number): Promise<ReviewState> {
    this.state = await this.api.edit(this.imageId, [
      { op_id: nextOpId("del"), action: "delete", point_id: pointId },
    ]);
    return this.state;
  }

  async addPoint(u: number, v: number, cls: "REF" | "STD" = "STD"): Promise<ReviewState> {
    this.state = await this.api.edit(this.imageId, [
      { op_id: nextOpId("add"), action: "add", u, v, cls },
    ]);
    return this.state;
  }

  async movePoint(pointId: number, u: number, v: number): Promise<ReviewState> {
    this.state = await this.api.edit(this.imageId, [
      { op_id: nextOpId("mv"), action: "move", point_id: pointId, u, v },
    ]);
    return this.state;
  }

  async reclassPoint(pointId: number, cls: "REF" | "STD"): Promise<ReviewState> {
    this.state = await this.api.edit(this.imageId, [
      { op_id: nextOpId("rc"), action: "reclass", point_id: pointId, cls },
    ]);
    return this.state;
  }

  canSolve(): boolean {
    return solveDisabledReason(this.state) === null;
  }

  async solve(): Promise<SolveResponse> {
    const reason = solveDisabledReason(this.state);
    if (reason) throw new Error(reason);
    this.lastSolve = await this.api.solve(this.imageId, this.fiducials3d);
    return this.lastSolve;
  }

  overlay(): ResidualVector[] {
    if (!this.state || !this.lastSolve) return [];
    return residualVectors(this.state.points, this.lastSolve, this.fiducials3d);
  }
}
