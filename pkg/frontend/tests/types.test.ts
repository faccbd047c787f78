import { describe, expect, it } from "vitest";

import { decodeGrid, gridAt, validateAnnotation } from "../src/types.js";
import { boxGrid, fixtureTask, packGrid } from "./helpers.js";

describe("decodeGrid", () => {
  it("unpacks LSB-first x-major bits", () => {
    // flat pattern 1,0,0,1,1,0,1,0 packs to 0b01011001 = 0x59
    const payload = packGrid([2, 2, 2], [1, 0, 0, 1, 1, 0, 1, 0]);
    expect(atob(payload.occupancy).charCodeAt(0)).toBe(0x59);
    const grid = decodeGrid(payload);
    // flat index (x*2 + y)*2 + z
    expect(gridAt(grid, 0, 0, 0)).toBe(1);
    expect(gridAt(grid, 0, 0, 1)).toBe(0);
    expect(gridAt(grid, 0, 1, 0)).toBe(0);
    expect(gridAt(grid, 0, 1, 1)).toBe(1);
    expect(gridAt(grid, 1, 0, 0)).toBe(1);
    expect(gridAt(grid, 1, 0, 1)).toBe(0);
    expect(gridAt(grid, 1, 1, 0)).toBe(1);
    expect(gridAt(grid, 1, 1, 1)).toBe(0);
  });

  it("round-trips a full-size grid", () => {
    const payload = boxGrid(3);
    const grid = decodeGrid(payload);
    expect(grid.dims).toEqual([32, 32, 32]);
    expect(grid.data.length).toBe(32 * 32 * 32);
    const occupied = grid.data.reduce((a, b) => a + b, 0);
    expect(occupied).toBe(9 * 9 * 9);
    expect(packGrid(grid.dims, grid.data).occupancy).toBe(payload.occupancy);
  });

  it("rejects a byte count that does not match dims", () => {
    const payload = { dims: [32, 32, 32] as [number, number, number], occupancy: btoa("abc") };
    expect(() => decodeGrid(payload)).toThrow(/packed bytes/);
  });
});

describe("validateAnnotation", () => {
  const task = fixtureTask(0);

  it("accepts 1..3 unique proposed ids", () => {
    expect(validateAnnotation(task, ["cad_0_1"], "amy")).toBeNull();
    expect(validateAnnotation(task, ["cad_0_1", "cad_0_0", "cad_0_5"], "amy")).toBeNull();
  });

  it("rejects empty, oversized, duplicated, and foreign selections", () => {
    expect(validateAnnotation(task, [], "amy")).toMatch(/at least one/);
    expect(validateAnnotation(task, ["cad_0_0", "cad_0_1", "cad_0_2", "cad_0_3"], "amy")).toMatch(/at most 3/);
    expect(validateAnnotation(task, ["cad_0_0", "cad_0_0"], "amy")).toMatch(/duplicate/);
    expect(validateAnnotation(task, ["nope"], "amy")).toMatch(/not among/);
    expect(validateAnnotation(task, ["cad_0_0"], "  ")).toMatch(/annotator/);
  });
});
