/** Orthogonal slice extraction from an x-fastest uint8 volume blob. */

export interface GridVolume {
  dims: [number, number, number]; // nx, ny, nz
  data: Uint8Array; // x varies fastest
}

export function gridFromBytes(dims: number[], bytes: Uint8Array): GridVolume {
  const [nx, ny, nz] = dims;
  if (bytes.length !== nx * ny * nz) {
    throw new Error(`grid blob length ${bytes.length} != ${nx * ny * nz}`);
  }
  return { dims: [nx, ny, nz], data: bytes };
}

export function voxelAt(g: GridVolume, ix: number, iy: number, iz: number): number {
  const [nx, ny] = g.dims;
  return g.data[ix + nx * (iy + ny * iz)];
}

export type SliceAxis = "axial" | "coronal" | "sagittal";

/**
 * Extract one slice as a row-major array. Axial slices fix z (rows = y),
 * coronal fix y (rows = z), sagittal fix x (rows = z).
 */
export function extractSlice(
  g: GridVolume,
  axis: SliceAxis,
  index: number,
): { width: number; height: number; data: Uint8Array } {
  const [nx, ny, nz] = g.dims;
  if (axis === "axial") {
    const out = new Uint8Array(nx * ny);
    for (let iy = 0; iy < ny; iy++)
      for (let ix = 0; ix < nx; ix++) out[iy * nx + ix] = voxelAt(g, ix, iy, index);
    return { width: nx, height: ny, data: out };
  }
  if (axis === "coronal") {
    const out = new Uint8Array(nx * nz);
    for (let iz = 0; iz < nz; iz++)
      for (let ix = 0; ix < nx; ix++) out[iz * nx + ix] = voxelAt(g, ix, index, iz);
    return { width: nx, height: nz, data: out };
  }
  const out = new Uint8Array(ny * nz);
  for (let iz = 0; iz < nz; iz++)
    for (let iy = 0; iy < ny; iy++) out[iz * ny + iy] = voxelAt(g, index, iy, iz);
  return { width: ny, height: nz, data: out };
}

/** Blue-to-red color ramp for distance overlays (0 .. clip). */
export function distanceColor(value255: number): [number, number, number] {
  const t = value255 / 255;
  const r = Math.round(255 * Math.min(1, 2 * t));
  const b = Math.round(255 * Math.min(1, 2 * (1 - t)));
  const g = Math.round(128 * (1 - Math.abs(2 * t - 1)));
  return [r, g, b];
}
