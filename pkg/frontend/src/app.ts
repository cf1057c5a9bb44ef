/**
 * Annotation single-page app.
 *
 * One task at a time: the reference patch is shown prominently above a
 * row of candidate tiles in the server's randomized order.  Clicking a
 * tile (or pressing its number key, 1..9 then 0 for the tenth) toggles
 * it; Enter or the submit button sends the 0/1 vector in display order.
 * One request is in flight at a time and the submit control is disabled
 * while submitting; a failed submission keeps the selections for retry.
 */

import { ApiError, fetchTask, submitDecisions } from "./api.js";
import { TaskView, beginSubmit, decisions, failSubmit, newView, toggleTile } from "./state.js";

export interface AppOptions {
  baseUrl?: string;
  annotator?: string;
}

type Phase = "loading" | "task" | "done" | "error";

export class App {
  private root: HTMLElement;
  private baseUrl: string;
  private annotator: string;
  private phase: Phase = "loading";
  private view: TaskView | null = null;
  private errorMessage = "";
  private completedCount = 0;

  constructor(root: HTMLElement, options: AppOptions = {}) {
    this.root = root;
    this.baseUrl = options.baseUrl ?? "";
    this.annotator = options.annotator ?? `anon-${Math.random().toString(36).slice(2, 8)}`;
    this.onKeyDown = this.onKeyDown.bind(this);
  }

  async start(): Promise<void> {
    this.root.ownerDocument.addEventListener("keydown", this.onKeyDown as EventListener);
    await this.loadNext();
  }

  stop(): void {
    this.root.ownerDocument.removeEventListener("keydown", this.onKeyDown as EventListener);
  }

  get completed(): number {
    return this.completedCount;
  }

  async loadNext(): Promise<void> {
    this.phase = "loading";
    this.view = null;
    this.render();
    try {
      const task = await fetchTask(this.baseUrl);
      if (task === null) {
        this.phase = "done";
      } else {
        this.view = newView(task);
        this.phase = "task";
      }
    } catch (err) {
      this.phase = "error";
      this.errorMessage = err instanceof Error ? err.message : String(err);
    }
    this.render();
  }

  toggle(slot: number): void {
    if (this.phase !== "task" || !this.view) return;
    this.view = toggleTile(this.view, slot);
    this.render();
  }

  async submit(): Promise<void> {
    if (this.phase !== "task" || !this.view || this.view.submitting) return;
    const view = this.view;
    this.view = beginSubmit(view);
    this.render();
    try {
      await submitDecisions(view.task.task_id, this.annotator, decisions(view), this.baseUrl);
      this.completedCount += 1;
      await this.loadNext();
    } catch (err) {
      // 400s and network failures both land here: keep the selections
      this.view = failSubmit(view);
      this.errorMessage =
        err instanceof ApiError && err.status !== null
          ? `Submission rejected: ${err.message}`
          : `Network problem, please retry: ${err instanceof Error ? err.message : err}`;
      this.render(true);
    }
  }

  private onKeyDown(event: KeyboardEvent): void {
    if (this.phase !== "task") return;
    if (event.key === "Enter") {
      event.preventDefault();
      void this.submit();
      return;
    }
    const digit = "1234567890".indexOf(event.key);
    if (digit >= 0) {
      event.preventDefault();
      this.toggle(digit); // "1" -> slot 0, ..., "0" -> slot 9
    }
  }

  private render(showError = false): void {
    const doc = this.root.ownerDocument;
    this.root.textContent = "";

    const header = doc.createElement("header");
    const progress = doc.createElement("span");
    progress.id = "progress";
    progress.textContent = `${this.completedCount} completed`;
    header.appendChild(progress);
    this.root.appendChild(header);

    if (showError && this.errorMessage) {
      const banner = doc.createElement("div");
      banner.id = "error-banner";
      banner.textContent = this.errorMessage;
      this.root.appendChild(banner);
    }

    if (this.phase === "loading") {
      const note = doc.createElement("p");
      note.id = "loading";
      note.textContent = "Loading task…";
      this.root.appendChild(note);
      return;
    }

    if (this.phase === "done") {
      const done = doc.createElement("div");
      done.id = "completion";
      done.innerHTML = `<h2>All tasks complete</h2>
        <p>Thank you! ${this.completedCount} tasks were recorded.</p>`;
      this.root.appendChild(done);
      return;
    }

    if (this.phase === "error") {
      const wrap = doc.createElement("div");
      wrap.id = "load-error";
      const msg = doc.createElement("p");
      msg.textContent = `Could not reach the task server: ${this.errorMessage}`;
      const retry = doc.createElement("button");
      retry.id = "retry";
      retry.textContent = "Retry";
      retry.addEventListener("click", () => void this.loadNext());
      wrap.appendChild(msg);
      wrap.appendChild(retry);
      this.root.appendChild(wrap);
      return;
    }

    const view = this.view!;
    const guidance = doc.createElement("p");
    guidance.className = "guidance";
    guidance.textContent =
      "Select every patch below that looks similar to the reference patch " +
      "(same kind of surface: e.g. equally fuzzy, shiny, or smooth). " +
      "Selecting none is a valid answer. Keys 1–0 toggle, Enter submits.";
    this.root.appendChild(guidance);

    const reference = doc.createElement("div");
    reference.id = "reference";
    const refImg = doc.createElement("img");
    refImg.src = view.task.reference_image_url;
    refImg.alt = "reference patch";
    reference.appendChild(refImg);
    this.root.appendChild(reference);

    const grid = doc.createElement("div");
    grid.id = "tiles";
    view.task.shown.forEach((tile, slot) => {
      const cell = doc.createElement("button");
      cell.className = "tile" + (view.selected[slot] ? " selected" : "");
      cell.dataset.slot = String(slot);
      cell.setAttribute("aria-pressed", view.selected[slot] ? "true" : "false");
      const img = doc.createElement("img");
      img.src = tile.image_url;
      img.alt = `candidate ${slot + 1}`;
      const key = doc.createElement("span");
      key.className = "key-hint";
      key.textContent = String((slot + 1) % 10);
      cell.appendChild(img);
      cell.appendChild(key);
      cell.addEventListener("click", () => this.toggle(slot));
      grid.appendChild(cell);
    });
    this.root.appendChild(grid);

    const submit = doc.createElement("button");
    submit.id = "submit";
    submit.textContent = view.submitting ? "Submitting…" : "Submit";
    submit.disabled = view.submitting;
    submit.addEventListener("click", () => void this.submit());
    this.root.appendChild(submit);
  }
}

export function mount(root: HTMLElement, options: AppOptions = {}): App {
  const app = new App(root, options);
  void app.start();
  return app;
}
