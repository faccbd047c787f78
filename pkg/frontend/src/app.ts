/**
 * Annotation workflow: fetch a task, collect a ranked selection over the
 * six proposals, submit, move on. One state machine instance owns the DOM
 * under its root element.
 *
 * Phases: loading -> annotating -> submitting -> loading -> ... with an
 * idle terminal when the service has no work left. Inputs are disabled
 * outside annotating, and submit stays disabled while nothing is selected.
 */

import { ApiClient, ApiError } from "./api.js";
import { CANONICAL_POSE, VoxelView } from "./renderer.js";
import { RankedSelection } from "./selection.js";
import type { UiTask } from "./types.js";
import { decodeGrid, validateAnnotation } from "./types.js";

export type Phase = "loading" | "annotating" | "submitting" | "idle";

export interface AppOptions {
  apiBase?: string;
  annotator?: string;
}

const SCAN_COLOR: [number, number, number] = [226, 183, 141];
const CAD_COLOR: [number, number, number] = [141, 183, 226];

export class App {
  readonly client: ApiClient;
  private phaseNow: Phase = "loading";
  private task: UiTask | null = null;
  private readonly selection = new RankedSelection();
  private views: VoxelView[] = [];
  private pending: Promise<void> = Promise.resolve();

  private readonly statusEl: HTMLElement;
  private readonly annotatorInput: HTMLInputElement;
  private readonly queryPanel: HTMLElement;
  private readonly proposalGrid: HTMLElement;
  private readonly submitButton: HTMLButtonElement;
  private readonly hintButton: HTMLButtonElement;
  private readonly hintImage: HTMLImageElement;

  constructor(readonly root: HTMLElement, options: AppOptions = {}) {
    this.client = new ApiClient(options.apiBase ?? "");
    root.className = "annot-app";
    root.innerHTML = `
      <header class="annot-header">
        <h1>CAD model annotation</h1>
        <label>annotator <input name="annotator" type="text" /></label>
        <button type="button" class="hint-button hidden">show hint</button>
      </header>
      <main class="annot-main">
        <section class="query-panel">
          <h2>scan query</h2>
          <canvas width="240" height="240"></canvas>
          <img class="hint-image hidden" alt="hint" />
        </section>
        <div class="proposal-grid"></div>
      </main>
      <footer class="annot-footer">
        <button type="button" class="submit-button" disabled>submit ranking</button>
        <span class="annot-status" role="status"></span>
      </footer>
    `;
    this.statusEl = root.querySelector(".annot-status") as HTMLElement;
    this.annotatorInput = root.querySelector("input[name=annotator]") as HTMLInputElement;
    this.queryPanel = root.querySelector(".query-panel") as HTMLElement;
    this.proposalGrid = root.querySelector(".proposal-grid") as HTMLElement;
    this.submitButton = root.querySelector(".submit-button") as HTMLButtonElement;
    this.hintButton = root.querySelector(".hint-button") as HTMLButtonElement;
    this.hintImage = root.querySelector(".hint-image") as HTMLImageElement;

    this.annotatorInput.value = options.annotator ?? "anonymous";
    this.submitButton.addEventListener("click", () => {
      this.pending = this.pending.then(() => this.submit());
    });
    this.hintButton.addEventListener("click", () => {
      this.hintImage.classList.toggle("hidden");
    });
  }

  get phase(): Phase {
    return this.phaseNow;
  }

  get rankedSelection(): string[] {
    return this.selection.ranked;
  }

  get currentTask(): UiTask | null {
    return this.task;
  }

  /** Kick off the first task fetch. */
  start(): Promise<void> {
    this.pending = this.pending.then(() => this.loadNext());
    return this.pending;
  }

  /** Resolves once queued fetch/submit work has settled; for tests. */
  whenSettled(): Promise<void> {
    return this.pending;
  }

  private setPhase(phase: Phase): void {
    this.phaseNow = phase;
    const busy = phase !== "annotating";
    this.submitButton.disabled = busy || this.selection.size === 0;
    for (const button of this.proposalGrid.querySelectorAll<HTMLButtonElement>(".pick-button")) {
      button.disabled = busy;
    }
  }

  private say(message: string, isError = false): void {
    this.statusEl.textContent = message;
    this.statusEl.classList.toggle("error", isError);
  }

  private async loadNext(): Promise<void> {
    this.setPhase("loading");
    this.say("loading task...");
    let task: UiTask | null;
    try {
      task = await this.client.fetchTask(this.annotatorInput.value.trim());
    } catch (error) {
      this.say(`could not load a task: ${(error as Error).message}`, true);
      this.setPhase("idle");
      return;
    }
    if (task === null) {
      this.task = null;
      this.say("no tasks pending; all scans are annotated or leased");
      this.setPhase("idle");
      return;
    }
    this.mountTask(task);
    this.say(`task ${task.task_id}: rank up to 3 similar models`);
    this.setPhase("annotating");
  }

  private mountTask(task: UiTask): void {
    this.task = task;
    this.selection.clear();
    for (const view of this.views) view.dispose();
    this.views = [];
    this.proposalGrid.innerHTML = "";

    // fresh node so listeners from the previous task's view do not stack
    const oldCanvas = this.queryPanel.querySelector("canvas") as HTMLCanvasElement;
    const scanCanvas = oldCanvas.cloneNode() as HTMLCanvasElement;
    oldCanvas.replaceWith(scanCanvas);
    this.views.push(new VoxelView(scanCanvas, decodeGrid(task.scan), { baseColor: SCAN_COLOR }));

    for (const proposal of task.proposals) {
      const figure = document.createElement("figure");
      figure.className = "proposal";
      figure.dataset.cadId = proposal.cad_id;
      const canvas = document.createElement("canvas");
      canvas.width = 170;
      canvas.height = 170;
      const caption = document.createElement("figcaption");
      const button = document.createElement("button");
      button.type = "button";
      button.className = "pick-button";
      button.innerHTML = `<span class="rank-badge hidden"></span><span class="cad-label">${proposal.cad_id}</span>`;
      caption.append(button);
      figure.append(canvas, caption);
      this.proposalGrid.append(figure);

      const pick = () => this.togglePick(proposal.cad_id);
      button.addEventListener("click", pick);
      this.views.push(new VoxelView(canvas, decodeGrid(proposal.grid), { baseColor: CAD_COLOR, onPick: pick }));
    }

    const hasHint = task.hint_image_url !== null && task.hint_image_url !== undefined;
    this.hintButton.classList.toggle("hidden", !hasHint);
    this.hintImage.classList.add("hidden");
    this.hintImage.src = hasHint ? (task.hint_image_url as string) : "";
  }

  private togglePick(cadId: string): void {
    if (this.phaseNow !== "annotating") return;
    const result = this.selection.toggle(cadId);
    if (result.kind === "rejected") {
      this.say(result.reason, true);
    } else {
      this.say(result.kind === "added" ? `ranked ${cadId} at ${result.rank}` : `removed ${cadId}`);
    }
    this.refreshBadges();
    this.submitButton.disabled = this.selection.size === 0;
  }

  private refreshBadges(): void {
    for (const figure of this.proposalGrid.querySelectorAll<HTMLElement>(".proposal")) {
      const rank = this.selection.rankOf(figure.dataset.cadId ?? "");
      const badge = figure.querySelector(".rank-badge") as HTMLElement;
      figure.classList.toggle("selected", rank !== null);
      badge.classList.toggle("hidden", rank === null);
      badge.textContent = rank === null ? "" : String(rank);
    }
  }

  private async submit(): Promise<void> {
    if (this.phaseNow !== "annotating" || this.task === null) return;
    const ranked = this.selection.ranked;
    const annotator = this.annotatorInput.value.trim();
    const problem = validateAnnotation(this.task, ranked, annotator);
    if (problem !== null) {
      this.say(problem, true);
      return;
    }
    this.setPhase("submitting");
    this.say("submitting...");
    try {
      await this.client.submitAnnotation({
        task_id: this.task.task_id,
        ranked_selection: ranked,
        annotator,
      });
    } catch (error) {
      if (error instanceof ApiError && (error.status === 404 || error.status === 409)) {
        // task vanished or was answered elsewhere; surface it and move on
        this.say(`submission rejected: ${error.message}`, true);
        await this.loadNext();
        return;
      }
      this.say(`submission failed: ${(error as Error).message}`, true);
      this.setPhase("annotating");
      return;
    }
    await this.loadNext();
  }
}

export { CANONICAL_POSE };
