import { screenImage } from "./api.js";
import { renderError, renderHistory, renderResultCard } from "./render.js";
import { ScreeningSession } from "./session.js";

function byId<T extends HTMLElement>(id: string): T {
  const el = document.getElementById(id);
  if (!el) throw new Error(`missing element #${id}`);
  return el as T;
}

export function mount(): void {
  const fileInput = byId<HTMLInputElement>("file-input");
  const preview = byId<HTMLImageElement>("preview");
  const submitButton = byId<HTMLButtonElement>("submit");
  const status = byId<HTMLElement>("status");
  const resultView = byId<HTMLElement>("result");
  const historyView = byId<HTMLElement>("history");

  const session = new ScreeningSession((file) => screenImage(file));
  let selected: File | null = null;
  let previewUrl: string | null = null;

  function redraw(): void {
    submitButton.disabled = selected === null || session.busy;
    switch (session.state) {
      case "idle":
        status.textContent = selected ? "Ready to submit." : "Choose a photo of the lesion.";
        break;
      case "uploading":
        status.textContent = "Uploading…";
        break;
      case "done":
        status.textContent = "";
        if (session.lastResponse) {
          resultView.innerHTML = renderResultCard(session.lastResponse);
        }
        break;
      case "error":
        status.textContent = "";
        if (session.lastError) {
          resultView.innerHTML = renderError(session.lastError);
        }
        break;
    }
    historyView.innerHTML = renderHistory(session.history);
  }

  session.onChange(redraw);

  fileInput.addEventListener("change", () => {
    selected = fileInput.files && fileInput.files.length > 0 ? fileInput.files[0]! : null;
    if (previewUrl) URL.revokeObjectURL(previewUrl);
    if (selected) {
      previewUrl = URL.createObjectURL(selected);
      preview.src = previewUrl;
      preview.hidden = false;
    } else {
      preview.hidden = true;
    }
    redraw();
  });

  submitButton.addEventListener("click", () => {
    if (selected && !session.busy) void session.submit(selected);
  });

  // retry affordance inside rendered error cards
  resultView.addEventListener("click", (event) => {
    const target = event.target as HTMLElement;
    if (target.dataset.action === "retry" && selected && !session.busy) {
      void session.submit(selected);
    }
  });

  redraw();
}

if (typeof document !== "undefined" && document.getElementById("file-input")) {
  mount();
}
