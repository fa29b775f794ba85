import type { ScreenResponse } from "./types.js";

export type ScreenErrorKind =
  | "too-large"
  | "unsupported-type"
  | "server"
  | "network"
  | "bad-response";

export class ScreenError extends Error {
  kind: ScreenErrorKind;
  status?: number;
  requestId?: string;

  constructor(kind: ScreenErrorKind, message: string, status?: number, requestId?: string) {
    super(message);
    this.name = "ScreenError";
    this.kind = kind;
    this.status = status;
    this.requestId = requestId;
  }
}

export interface ScreenClientOptions {
  baseUrl?: string;
  fetchImpl?: typeof fetch;
}

function validateResponse(body: unknown): ScreenResponse {
  const r = body as ScreenResponse;
  if (
    !r ||
    (r.label !== "monkeypox" && r.label !== "others") ||
    !Array.isArray(r.probabilities) ||
    r.probabilities.length !== 2 ||
    r.probabilities.some((p) => typeof p !== "number" || !isFinite(p)) ||
    !Array.isArray(r.stage_trace)
  ) {
    throw new ScreenError("bad-response", "service returned an unexpected payload");
  }
  return r;
}

/** Upload one image to the screening service and return its verdict. */
export async function screenImage(
  file: Blob,
  options: ScreenClientOptions = {},
): Promise<ScreenResponse> {
  const doFetch = options.fetchImpl ?? fetch;
  const form = new FormData();
  form.append("image", file);

  let response: Response;
  try {
    response = await doFetch(`${options.baseUrl ?? ""}/v1/screen`, {
      method: "POST",
      body: form,
    });
  } catch (err) {
    throw new ScreenError("network", `could not reach the screening service: ${err}`);
  }

  if (response.ok) {
    return validateResponse(await response.json());
  }

  let message = `request failed with status ${response.status}`;
  let requestId: string | undefined;
  try {
    const body = await response.json();
    if (body && typeof body.message === "string") message = body.message;
    if (body && typeof body.request_id === "string") requestId = body.request_id;
  } catch {
    // error body is optional; fall back to the status line
  }
  const kind: ScreenErrorKind =
    response.status === 413
      ? "too-large"
      : response.status === 415
        ? "unsupported-type"
        : "server";
  throw new ScreenError(kind, message, response.status, requestId);
}
