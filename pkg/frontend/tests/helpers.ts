import type { ScreenResponse, StageEntry } from "../src/types";

export function stage(name: string, applied: boolean, blackout = 0, reason = "ok"): StageEntry {
  return {
    name,
    applied,
    blackout_fraction: blackout,
    reason: applied ? "ok" : reason,
  };
}

export function makeResponse(overrides: Partial<ScreenResponse> = {}): ScreenResponse {
  return {
    label: "monkeypox",
    probabilities: [0.93, 0.07],
    stage_trace: [
      stage("restoration", false, 0, "not_requested"),
      stage("background_removal", true, 0.42),
      stage("skin_segmentation", false, 0.91, "over_threshold"),
    ],
    model_version: "b7-head256",
    request_id: "req-123",
    timing_ms: 184.2,
    ...overrides,
  };
}

export function jsonResponse(body: unknown, status = 200): Response {
  return new Response(JSON.stringify(body), {
    status,
    headers: { "content-type": "application/json" },
  });
}
