export interface StageEntry {
  name: string;
  applied: boolean;
  blackout_fraction: number;
  reason: string;
}

/** Wire shape of POST /v1/screen; probabilities are [monkeypox, others]. */
export interface ScreenResponse {
  label: "monkeypox" | "others";
  probabilities: [number, number];
  stage_trace: StageEntry[];
  model_version: string;
  request_id: string;
  timing_ms: number;
}

export interface ErrorBody {
  code: string;
  message: string;
  request_id: string;
}
