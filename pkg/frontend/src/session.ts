// Session state machine, independent of the DOM so it can be driven
// headlessly in tests. One active task at a time, an append-only answer
// history, and a retry queue that gives offline submissions exactly-once
// effect (the server deduplicates replays).

import { ApiClient, Choice, TaskView } from "./api.js";

export type Phase = "idle" | "loading" | "task" | "submitting" | "retrying" | "done" | "error";

export interface HistoryEntry {
  tripletId: string;
  choice: Choice;
  outcome: "ok" | "replay" | "conflict";
}

export interface PendingAnswer {
  tripletId: string;
  choice: Choice;
}

export interface SessionState {
  phase: Phase;
  task: TaskView | null;
  progress: { answered: number; total: number } | null;
  history: HistoryEntry[];
  pending: PendingAnswer | null;
  errorMessage: string | null;
  champions: Record<string, string | null>;
}

export class SessionController {
  state: SessionState = {
    phase: "idle",
    task: null,
    progress: null,
    history: [],
    pending: null,
    errorMessage: null,
    champions: {},
  };
  private listeners: Array<(s: SessionState) => void> = [];

  constructor(
    private api: ApiClient,
    private annotator: string,
  ) {}

  onChange(listener: (s: SessionState) => void): void {
    this.listeners.push(listener);
  }

  private notify(): void {
    for (const l of this.listeners) l(this.state);
  }

  private set(partial: Partial<SessionState>): void {
    this.state = { ...this.state, ...partial };
    this.notify();
  }

  async start(): Promise<void> {
    await this.loadNextTask();
  }

  async loadNextTask(): Promise<void> {
    this.set({ phase: "loading", errorMessage: null });
    try {
      const task = await this.api.nextTask(this.annotator);
      if (task === null) {
        const progress = await this.api.progress();
        const champions: Record<string, string | null> = {};
        for (const [gid, g] of Object.entries(progress.groups ?? {})) champions[gid] = g.champion;
        this.set({ phase: "done", task: null, progress: { answered: progress.answered, total: progress.total }, champions });
        return;
      }
      this.set({ phase: "task", task, progress: task.progress });
    } catch (e) {
      // the lease (if any) stays server-side; showing a retry banner is all
      this.set({ phase: "error", errorMessage: String(e) });
    }
  }

  /** Submit the current task's answer. Network failures queue a retry. */
  async submitChoice(choice: Choice): Promise<void> {
    const task = this.state.task;
    if (!task || (this.state.phase !== "task" && this.state.phase !== "retrying")) {
      throw new Error("no active task");
    }
    const pending = { tripletId: task.triplet_id, choice };
    this.set({ phase: "submitting", pending });
    await this.trySubmit(pending);
  }

  private async trySubmit(pending: PendingAnswer): Promise<void> {
    try {
      const result = await this.api.submitAnswer(this.annotator, pending.tripletId, pending.choice);
      if (result.status === 200) {
        const outcome = result.body.replay ? "replay" : "ok";
        this.state.history.push({ tripletId: pending.tripletId, choice: pending.choice, outcome });
        if (result.body.progress) this.set({ progress: result.body.progress });
        this.set({ pending: null });
        await this.loadNextTask();
      } else if (result.status === 409) {
        // someone else resolved it; drop silently and move on
        this.state.history.push({ tripletId: pending.tripletId, choice: pending.choice, outcome: "conflict" });
        this.set({ pending: null });
        await this.loadNextTask();
      } else {
        this.set({ phase: "error", errorMessage: result.body.error ?? `status ${result.status}`, pending: null });
      }
    } catch (e) {
      // network failure: keep the answer queued for idempotent replay
      this.set({ phase: "retrying", errorMessage: String(e) });
    }
  }

  /** Re-send the queued answer after connectivity returns. */
  async flushRetry(): Promise<void> {
    const pending = this.state.pending;
    if (!pending) return;
    await this.trySubmit(pending);
  }
}
