/** Shared fixtures: grid payload packing and a fixture-backed service. */

import type { GridPayload, ProposalPayload, StoredRecord, UiTask } from "../src/types.js";

/** Pack flat 0/1 occupancy (x-major) the way the service does: LSB first. */
export function packGrid(dims: [number, number, number], flat: ArrayLike<number>): GridPayload {
  const n = dims[0] * dims[1] * dims[2];
  if (flat.length !== n) throw new Error(`need ${n} cells, got ${flat.length}`);
  const bytes = new Uint8Array(Math.ceil(n / 8));
  for (let i = 0; i < n; i++) {
    if (flat[i]) bytes[i >> 3] |= 1 << (i & 7);
  }
  let raw = "";
  for (const b of bytes) raw += String.fromCharCode(b);
  return { dims, occupancy: btoa(raw) };
}

/** Deterministic 32-cube test grid: a filled box whose extent varies by seed. */
export function boxGrid(seed: number): GridPayload {
  const dims: [number, number, number] = [32, 32, 32];
  const flat = new Uint8Array(32 * 32 * 32);
  const side = 6 + (seed % 9);
  const lo = 16 - Math.floor(side / 2);
  for (let x = lo; x < lo + side; x++) {
    for (let y = lo; y < lo + side; y++) {
      for (let z = lo; z < lo + side; z++) {
        flat[(x * 32 + y) * 32 + z] = 1;
      }
    }
  }
  return packGrid(dims, flat);
}

export interface FixtureService {
  /** Records accepted so far, in arrival order. */
  store: StoredRecord[];
  /** Fetch stub implementing the three endpoints against the fixtures. */
  fetch: typeof fetch;
}

function json(status: number, body: unknown): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "Content-Type": "application/json" },
  });
}

/**
 * In-memory stand-in for the annotation service, honoring its status
 * codes: 204 when drained, 400 invalid, 404 unknown task, 409 duplicate.
 */
export function fixtureService(tasks: UiTask[]): FixtureService {
  const store: StoredRecord[] = [];
  const answered = new Set<string>();
  let cursor = 0;

  const handler = async (input: RequestInfo | URL, init?: RequestInit): Promise<Response> => {
    const url = typeof input === "string" ? input : input instanceof URL ? input.href : input.url;
    const path = url.replace(/^https?:\/\/[^/]+/, "");

    if (path.startsWith("/api/task")) {
      if (cursor >= tasks.length) return new Response(null, { status: 204 });
      return json(200, tasks[cursor]);
    }

    if (path.startsWith("/api/annotation") && init?.method === "POST") {
      const body = JSON.parse(String(init.body));
      const task = tasks.find((t) => t.task_id === body.task_id);
      if (!task) return json(404, { error: `unknown task_id '${body.task_id}'` });
      if (answered.has(task.task_id)) {
        return json(409, { error: `task '${task.task_id}' was already answered` });
      }
      const ranked: string[] = body.ranked_selection;
      const offered = new Set(task.proposals.map((p: ProposalPayload) => p.cad_id));
      if (
        !Array.isArray(ranked) || ranked.length < 1 || ranked.length > 3 ||
        new Set(ranked).size !== ranked.length || !ranked.every((id) => offered.has(id)) ||
        typeof body.annotator !== "string" || !body.annotator.trim()
      ) {
        return json(400, { error: "invalid ranked_selection" });
      }
      answered.add(task.task_id);
      if (tasks[cursor]?.task_id === task.task_id) cursor += 1;
      const record: StoredRecord = {
        scan_id: task.task_id.split("#")[0],
        proposed: task.proposals.map((p) => p.cad_id),
        ranked_selection: ranked,
        annotator: body.annotator,
        category: "fixture",
        timestamp: new Date().toISOString(),
      };
      store.push(record);
      return json(200, record);
    }

    const voxelMatch = path.match(/^\/api\/voxels\/(.+)$/);
    if (voxelMatch) {
      const id = decodeURIComponent(voxelMatch[1]);
      for (const task of tasks) {
        for (const proposal of task.proposals) {
          if (proposal.cad_id === id) return json(200, { object_id: id, ...proposal.grid });
        }
      }
      return json(404, { error: `unknown object '${id}'` });
    }

    return json(404, { error: `no such endpoint ${path}` });
  };

  return { store, fetch: handler as typeof fetch };
}

/** Build a six-proposal task over deterministic box grids. */
export function fixtureTask(index: number, hint: string | null = null): UiTask {
  return {
    task_id: `scan_${String(index).padStart(4, "0")}#${String(index + 1).padStart(5, "0")}`,
    scan: boxGrid(index),
    proposals: Array.from({ length: 6 }, (_, i) => ({
      cad_id: `cad_${index}_${i}`,
      grid: boxGrid(index * 7 + i + 1),
    })),
    hint_image_url: hint,
  };
}
