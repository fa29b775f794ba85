import { ScreenError } from "./api.js";
import type { ScreenResponse } from "./types.js";

export type SubmissionState = "idle" | "uploading" | "done" | "error";

type Sender = (file: Blob) => Promise<ScreenResponse>;

/**
 * Per-tab screening session: at most one submission in flight, an
 * append-only history of verdicts, and change notifications for the view.
 * Nothing is persisted beyond the page's lifetime.
 */
export class ScreeningSession {
  state: SubmissionState = "idle";
  lastResponse: ScreenResponse | null = null;
  lastError: ScreenError | null = null;

  private readonly results: ScreenResponse[] = [];
  private listeners: Array<() => void> = [];
  private inFlight = false;

  constructor(private readonly send: Sender) {}

  get history(): readonly ScreenResponse[] {
    return this.results;
  }

  get busy(): boolean {
    return this.inFlight;
  }

  onChange(listener: () => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const listener of this.listeners) listener();
  }

  async submit(file: Blob): Promise<void> {
    if (this.inFlight) {
      throw new Error("a submission is already in flight");
    }
    this.inFlight = true;
    this.state = "uploading";
    this.lastError = null;
    this.notify();
    try {
      const response = await this.send(file);
      this.lastResponse = response;
      this.results.push(response);
      this.state = "done";
    } catch (err) {
      this.lastError =
        err instanceof ScreenError
          ? err
          : new ScreenError("network", String(err));
      this.state = "error";
    } finally {
      this.inFlight = false;
      this.notify();
    }
  }
}
