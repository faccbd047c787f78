/**
 * Voxel renderer: occupied cells drawn as shaded cubes on a 2D canvas.
 *
 * Orthographic camera orbiting the grid center. Data is z-up; the view
 * keeps +z pointing up on screen at zero elevation. Cubes are painted
 * back to front; for congruent axis-aligned cubes, sorting by center
 * depth is a correct painter order. Pure-geometry helpers are exported
 * separately from the DOM wiring so they stay testable headless.
 */

import type { DecodedGrid } from "./types.js";
import { gridAt } from "./types.js";

export interface Camera {
  /** Rotation about the up axis, radians. */
  azimuth: number;
  /** Tilt above the horizon, radians, clamped shy of the poles. */
  elevation: number;
  /** Scale multiplier on the fitted grid size. */
  zoom: number;
  /** Screen-space offset, pixels. */
  panX: number;
  panY: number;
}

/** Pose every view starts in: a three-quarter look slightly from above. */
export const CANONICAL_POSE: Readonly<Camera> = Object.freeze({
  azimuth: -Math.PI / 5,
  elevation: Math.PI / 7,
  zoom: 1,
  panX: 0,
  panY: 0,
});

export const MIN_ZOOM = 0.2;
export const MAX_ZOOM = 8;
const MAX_ELEVATION = 1.53;
const CLICK_SLOP_PX = 4;

/**
 * Rotate a world point (z up) into view axes. The camera sits on the
 * +depth axis looking inward, so (right, up, depth) is a right-handed
 * frame with depth measuring "toward the viewer": larger is nearer.
 */
export function toView(
  x: number,
  y: number,
  z: number,
  azimuth: number,
  elevation: number,
): { right: number; up: number; depth: number } {
  const ca = Math.cos(azimuth);
  const sa = Math.sin(azimuth);
  const ce = Math.cos(elevation);
  const se = Math.sin(elevation);
  const y1 = -x * sa + y * ca;
  return {
    right: -(x * ca + y * sa),
    up: -y1 * se + z * ce,
    depth: y1 * ce + z * se,
  };
}

// Unit-cube faces: outward normal and corners in fan order.
const FACES: { normal: [number, number, number]; corners: [number, number, number][] }[] = [
  { normal: [1, 0, 0], corners: [[1, 0, 0], [1, 1, 0], [1, 1, 1], [1, 0, 1]] },
  { normal: [-1, 0, 0], corners: [[0, 0, 0], [0, 0, 1], [0, 1, 1], [0, 1, 0]] },
  { normal: [0, 1, 0], corners: [[0, 1, 0], [0, 1, 1], [1, 1, 1], [1, 1, 0]] },
  { normal: [0, -1, 0], corners: [[0, 0, 0], [1, 0, 0], [1, 0, 1], [0, 0, 1]] },
  { normal: [0, 0, 1], corners: [[0, 0, 1], [1, 0, 1], [1, 1, 1], [0, 1, 1]] },
  { normal: [0, 0, -1], corners: [[0, 0, 0], [0, 1, 0], [1, 1, 0], [1, 0, 0]] },
];

// Fixed directional light, normalized below; top faces read brightest.
const LIGHT = (() => {
  const v: [number, number, number] = [0.35, -0.5, 0.8];
  const n = Math.hypot(...v);
  return v.map((c) => c / n) as [number, number, number];
})();

function faceShade(normal: [number, number, number]): number {
  const lambert = Math.max(0, normal[0] * LIGHT[0] + normal[1] * LIGHT[1] + normal[2] * LIGHT[2]);
  return 0.45 + 0.55 * lambert;
}

const SHADES = FACES.map((f) => faceShade(f.normal));

/**
 * Occupied cells that can contribute pixels: cells with all six neighbors
 * occupied are enclosed and skipped.
 */
export function visibleCells(grid: DecodedGrid): { x: number; y: number; z: number }[] {
  const [X, Y, Z] = grid.dims;
  const out: { x: number; y: number; z: number }[] = [];
  for (let x = 0; x < X; x++) {
    for (let y = 0; y < Y; y++) {
      for (let z = 0; z < Z; z++) {
        if (!gridAt(grid, x, y, z)) continue;
        const enclosed =
          x > 0 && x < X - 1 && y > 0 && y < Y - 1 && z > 0 && z < Z - 1 &&
          gridAt(grid, x - 1, y, z) && gridAt(grid, x + 1, y, z) &&
          gridAt(grid, x, y - 1, z) && gridAt(grid, x, y + 1, z) &&
          gridAt(grid, x, y, z - 1) && gridAt(grid, x, y, z + 1);
        if (!enclosed) out.push({ x, y, z });
      }
    }
  }
  return out;
}

export interface Quad {
  /** Screen-space corners [x, y] in draw order. */
  points: [number, number][];
  /** 0..1 brightness from the fixed light. */
  shade: number;
  depth: number;
}

/**
 * Project a grid to shaded screen-space quads, farthest first. Only faces
 * turned toward the camera survive.
 */
export function projectGrid(
  grid: DecodedGrid,
  camera: Camera,
  width: number,
  height: number,
): Quad[] {
  const [X, Y, Z] = grid.dims;
  const half: [number, number, number] = [X / 2, Y / 2, Z / 2];
  const fit = (0.82 * Math.min(width, height)) / (Math.max(X, Y, Z) * Math.sqrt(3));
  const scale = fit * camera.zoom;
  const cx = width / 2 + camera.panX;
  const cy = height / 2 + camera.panY;

  const cells = visibleCells(grid);
  const withDepth = cells.map((c) => ({
    ...c,
    depth: toView(c.x + 0.5 - half[0], c.y + 0.5 - half[1], c.z + 0.5 - half[2], camera.azimuth, camera.elevation).depth,
  }));
  withDepth.sort((a, b) => a.depth - b.depth);

  const facing = FACES.map((f) => toView(...f.normal, camera.azimuth, camera.elevation).depth > 0);

  const quads: Quad[] = [];
  for (const cell of withDepth) {
    for (let fi = 0; fi < FACES.length; fi++) {
      if (!facing[fi]) continue;
      const points: [number, number][] = FACES[fi].corners.map((corner) => {
        const v = toView(
          cell.x + corner[0] - half[0],
          cell.y + corner[1] - half[1],
          cell.z + corner[2] - half[2],
          camera.azimuth,
          camera.elevation,
        );
        return [cx + scale * v.right, cy - scale * v.up];
      });
      quads.push({ points, shade: SHADES[fi], depth: cell.depth });
    }
  }
  return quads;
}

export interface ViewOptions {
  /** Base cube color as [r, g, b], scaled by per-face shade. */
  baseColor?: [number, number, number];
  /** Called when the canvas is clicked rather than dragged. */
  onPick?: () => void;
}

/** One interactive model view: orbit on drag, pan on shift-drag, zoom on wheel. */
export class VoxelView {
  readonly camera: Camera = { ...CANONICAL_POSE };
  private readonly baseColor: [number, number, number];
  private readonly onPick?: () => void;
  private dragging = false;
  private panning = false;
  private lastX = 0;
  private lastY = 0;
  private travel = 0;
  private readonly onMove = (event: MouseEvent) => this.handleMove(event);
  private readonly onUp = () => this.handleUp();

  constructor(
    readonly canvas: HTMLCanvasElement,
    private grid: DecodedGrid,
    options: ViewOptions = {},
  ) {
    this.baseColor = options.baseColor ?? [141, 183, 226];
    this.onPick = options.onPick;
    canvas.addEventListener("mousedown", (event) => this.handleDown(event));
    canvas.addEventListener("wheel", (event) => this.handleWheel(event));
    this.draw();
  }

  setGrid(grid: DecodedGrid): void {
    this.grid = grid;
    this.draw();
  }

  resetCamera(): void {
    Object.assign(this.camera, CANONICAL_POSE);
    this.draw();
  }

  draw(): void {
    const ctx = this.canvas.getContext("2d") as CanvasRenderingContext2D | null;
    if (!ctx) return;
    const { width, height } = this.canvas;
    ctx.clearRect(0, 0, width, height);
    const [r, g, b] = this.baseColor;
    for (const quad of projectGrid(this.grid, this.camera, width, height)) {
      ctx.fillStyle = `rgb(${Math.round(r * quad.shade)},${Math.round(g * quad.shade)},${Math.round(b * quad.shade)})`;
      ctx.beginPath();
      ctx.moveTo(quad.points[0][0], quad.points[0][1]);
      for (let i = 1; i < quad.points.length; i++) {
        ctx.lineTo(quad.points[i][0], quad.points[i][1]);
      }
      ctx.closePath();
      ctx.fill();
    }
  }

  dispose(): void {
    window.removeEventListener("mousemove", this.onMove);
    window.removeEventListener("mouseup", this.onUp);
  }

  private handleDown(event: MouseEvent): void {
    event.preventDefault();
    this.dragging = true;
    this.panning = event.shiftKey || event.button !== 0;
    this.lastX = event.clientX;
    this.lastY = event.clientY;
    this.travel = 0;
    window.addEventListener("mousemove", this.onMove);
    window.addEventListener("mouseup", this.onUp);
  }

  private handleMove(event: MouseEvent): void {
    if (!this.dragging) return;
    const dx = event.clientX - this.lastX;
    const dy = event.clientY - this.lastY;
    this.lastX = event.clientX;
    this.lastY = event.clientY;
    this.travel += Math.abs(dx) + Math.abs(dy);
    if (this.panning) {
      this.camera.panX += dx;
      this.camera.panY += dy;
    } else {
      this.camera.azimuth += dx * 0.01;
      this.camera.elevation = Math.min(
        MAX_ELEVATION,
        Math.max(-MAX_ELEVATION, this.camera.elevation + dy * 0.01),
      );
    }
    this.draw();
  }

  private handleUp(): void {
    if (!this.dragging) return;
    this.dragging = false;
    window.removeEventListener("mousemove", this.onMove);
    window.removeEventListener("mouseup", this.onUp);
    if (this.travel < CLICK_SLOP_PX) this.onPick?.();
  }

  private handleWheel(event: WheelEvent): void {
    event.preventDefault();
    const factor = Math.exp(-event.deltaY * 0.001);
    this.camera.zoom = Math.min(MAX_ZOOM, Math.max(MIN_ZOOM, this.camera.zoom * factor));
    this.draw();
  }
}
