/**
 * Typed client for the annotation task server.
 *
 * The task payload never exposes category identities: tiles carry only
 * their display slot and an image URL.
 */

export interface ShownTile {
  category_slot: number;
  image_url: string;
}

export interface TaskPayload {
  task_id: string;
  reference_image_url: string;
  shown: ShownTile[];
}

export interface SubmitResponse {
  ok: boolean;
  duplicate: boolean;
}

export interface StatsPayload {
  tasks: number;
  completed: number;
  submissions: number;
}

export class ApiError extends Error {
  constructor(message: string, readonly status: number | null = null) {
    super(message);
  }
}

/** Fetch the next task; null means the pool is exhausted (HTTP 204). */
export async function fetchTask(baseUrl = ""): Promise<TaskPayload | null> {
  const resp = await fetch(`${baseUrl}/api/task`);
  if (resp.status === 204) return null;
  if (!resp.ok) throw new ApiError(`task fetch failed (${resp.status})`, resp.status);
  const payload = (await resp.json()) as TaskPayload;
  if (
    typeof payload.task_id !== "string" ||
    typeof payload.reference_image_url !== "string" ||
    !Array.isArray(payload.shown) ||
    payload.shown.length === 0 ||
    payload.shown.some((t) => typeof t.image_url !== "string")
  ) {
    throw new ApiError("malformed task payload");
  }
  return payload;
}

export async function submitDecisions(
  taskId: string,
  annotator: string,
  decisions: number[],
  baseUrl = "",
): Promise<SubmitResponse> {
  const resp = await fetch(`${baseUrl}/api/submit`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ task_id: taskId, annotator, decisions }),
  });
  if (!resp.ok) {
    let detail = `submit failed (${resp.status})`;
    try {
      const body = (await resp.json()) as { error?: string };
      if (body.error) detail = body.error;
    } catch {
      // keep the generic message
    }
    throw new ApiError(detail, resp.status);
  }
  return (await resp.json()) as SubmitResponse;
}

export async function fetchStats(baseUrl = ""): Promise<StatsPayload> {
  const resp = await fetch(`${baseUrl}/api/stats`);
  if (!resp.ok) throw new ApiError(`stats fetch failed (${resp.status})`, resp.status);
  return (await resp.json()) as StatsPayload;
}
