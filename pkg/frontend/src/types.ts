/** JSON contract of the annotation service, mirrored field for field. */

export interface GridPayload {
  /** Grid extents [X, Y, Z]; the service always sends 32x32x32. */
  dims: [number, number, number];
  /** Base64 of the bit-packed occupancy, x-major, LSB first per byte. */
  occupancy: string;
}

export interface ProposalPayload {
  cad_id: string;
  grid: GridPayload;
}

export interface UiTask {
  task_id: string;
  scan: GridPayload;
  proposals: ProposalPayload[];
  hint_image_url: string | null;
}

export interface AnnotationPost {
  task_id: string;
  ranked_selection: string[];
  annotator: string;
}

export interface StoredRecord {
  scan_id: string;
  proposed: string[];
  ranked_selection: string[];
  annotator: string;
  category: string;
  timestamp: string;
}

export interface DecodedGrid {
  dims: [number, number, number];
  /** Flat 0/1 occupancy, x-major: index = (x*Y + y)*Z + z. */
  data: Uint8Array;
}

/** Unpack a grid payload into flat occupancy values. */
export function decodeGrid(payload: GridPayload): DecodedGrid {
  const [X, Y, Z] = payload.dims;
  if (!(X > 0 && Y > 0 && Z > 0)) {
    throw new Error(`bad grid dims ${payload.dims}`);
  }
  const n = X * Y * Z;
  const raw = atob(payload.occupancy);
  if (raw.length !== Math.ceil(n / 8)) {
    throw new Error(`expected ${Math.ceil(n / 8)} packed bytes for dims ${payload.dims}, got ${raw.length}`);
  }
  const data = new Uint8Array(n);
  for (let i = 0; i < n; i++) {
    data[i] = (raw.charCodeAt(i >> 3) >> (i & 7)) & 1;
  }
  return { dims: [X, Y, Z], data };
}

export function gridAt(grid: DecodedGrid, x: number, y: number, z: number): number {
  const [, Y, Z] = grid.dims;
  return grid.data[(x * Y + y) * Z + z];
}

/**
 * Client-side check of the annotation invariants the service enforces:
 * 1..3 unique picks, every pick among the task's proposals, named annotator.
 * Returns a problem description, or null when the payload is submittable.
 */
export function validateAnnotation(task: UiTask, ranked: string[], annotator: string): string | null {
  if (!annotator.trim()) return "annotator name must not be empty";
  if (ranked.length < 1) return "select at least one model";
  if (ranked.length > 3) return "at most 3 models can be ranked";
  if (new Set(ranked).size !== ranked.length) return "ranked selection contains a duplicate";
  const offered = new Set(task.proposals.map((p) => p.cad_id));
  for (const id of ranked) {
    if (!offered.has(id)) return `model ${id} is not among the proposals`;
  }
  return null;
}
