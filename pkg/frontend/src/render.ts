import type { ScreenError, ScreenErrorKind } from "./api.js";
import type { ScreenResponse, StageEntry } from "./types.js";

export const DISCLAIMER =
  "Screening aid, not a diagnosis. Discuss any concerning lesion with a clinician.";

const STAGE_LABELS: Record<string, string> = {
  restoration: "restoration",
  background_removal: "background removal",
  skin_segmentation: "skin segmentation",
};

const ERROR_MESSAGES: Record<ScreenErrorKind, string> = {
  "too-large": "That photo is too large for the service. Resize it or pick a smaller file.",
  "unsupported-type": "Unsupported file type. Upload a JPEG or PNG photo.",
  server: "The screening service hit an internal error. Try again in a moment.",
  network: "Could not reach the screening service. Check your connection and retry.",
  "bad-response": "The service answered in an unexpected format. Try again.",
};

function escapeHtml(text: string): string {
  return text
    .replace(/&/g, "&amp;")
    .replace(/</g, "&lt;")
    .replace(/>/g, "&gt;")
    .replace(/"/g, "&quot;");
}

function pct(value: number): number {
  return Math.round(value * 100);
}

export function stageLabel(name: string): string {
  const base = name.split("+")[0] ?? name;
  const label = STAGE_LABELS[base] ?? base.replace(/_/g, " ");
  return name.includes("+") ? `${label} (fallback)` : label;
}

export function renderProbabilityBar(probabilities: [number, number]): string {
  const rows = [
    { name: "monkeypox", value: probabilities[0] },
    { name: "others", value: probabilities[1] },
  ];
  return rows
    .map(
      (row) => `
    <div class="prob-row">
      <span class="prob-name">${row.name}</span>
      <span class="prob-track"><span class="prob-fill" style="width:${pct(row.value)}%"></span></span>
      <span class="prob-pct">${pct(row.value)}%</span>
    </div>`,
    )
    .join("");
}

export function renderStageChips(trace: StageEntry[]): string {
  return trace
    .map((stage) => {
      const status = stage.applied
        ? "applied"
        : `bypassed: ${stage.reason.replace(/_/g, " ")}`;
      const blackout =
        stage.name.startsWith("restoration") || !stage.applied && stage.reason === "not_requested"
          ? ""
          : ` &middot; ${pct(stage.blackout_fraction)}% blacked out`;
      return `<span class="chip ${stage.applied ? "chip-on" : "chip-off"}">
        ${stageLabel(stage.name)}: ${status}${blackout}</span>`;
    })
    .join("");
}

export function renderResultCard(response: ScreenResponse): string {
  return `
  <article class="result-card" data-request="${escapeHtml(response.request_id)}">
    <h2 class="verdict verdict-${response.label}">${response.label}</h2>
    <div class="probabilities">${renderProbabilityBar(response.probabilities)}</div>
    <div class="stages">${renderStageChips(response.stage_trace)}</div>
    <p class="meta">model ${escapeHtml(response.model_version)} &middot; ${response.timing_ms.toFixed(0)} ms</p>
    <p class="disclaimer">${DISCLAIMER}</p>
  </article>`;
}

export function renderError(error: ScreenError): string {
  const detail = error.requestId
    ? `<p class="meta">request ${escapeHtml(error.requestId)}</p>`
    : "";
  return `
  <div class="error-card" data-kind="${error.kind}">
    <p class="error-message">${ERROR_MESSAGES[error.kind]}</p>
    ${detail}
    <button type="button" data-action="retry">Try again</button>
  </div>`;
}

export function renderHistory(history: readonly ScreenResponse[]): string {
  if (history.length === 0) return "";
  const items = history
    .map(
      (entry, i) => `<li>#${i + 1} &mdash; ${entry.label} (${pct(
        Math.max(entry.probabilities[0], entry.probabilities[1]),
      )}%)</li>`,
    )
    .join("");
  return `<h3>This session</h3><ol class="history">${items}</ol>`;
}
