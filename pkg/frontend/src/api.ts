/** Thin fetch client for the three annotation endpoints. */

import type { AnnotationPost, StoredRecord, UiTask } from "./types.js";

export class ApiError extends Error {
  constructor(readonly status: number, message: string) {
    super(message);
    this.name = "ApiError";
  }
}

async function errorFrom(response: Response): Promise<ApiError> {
  let message = `${response.status} ${response.statusText}`;
  try {
    const body = await response.json();
    if (body && typeof body.error === "string") message = body.error;
  } catch {
    // non-JSON error body; keep the status line
  }
  return new ApiError(response.status, message);
}

export class ApiClient {
  constructor(readonly baseUrl: string = "") {}

  /** Next task for this annotator, or null when every scan is done or leased. */
  async fetchTask(annotator: string): Promise<UiTask | null> {
    const query = annotator ? `?annotator=${encodeURIComponent(annotator)}` : "";
    const response = await fetch(`${this.baseUrl}/api/task${query}`);
    if (response.status === 204) return null;
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as UiTask;
  }

  async submitAnnotation(post: AnnotationPost): Promise<StoredRecord> {
    const response = await fetch(`${this.baseUrl}/api/annotation`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify(post),
    });
    if (!response.ok) throw await errorFrom(response);
    return (await response.json()) as StoredRecord;
  }

  async fetchVoxels(objectId: string): Promise<{ object_id: string } & import("./types.js").GridPayload> {
    const response = await fetch(`${this.baseUrl}/api/voxels/${encodeURIComponent(objectId)}`);
    if (!response.ok) throw await errorFrom(response);
    return await response.json();
  }
}
