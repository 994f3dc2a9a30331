// HTTP client for the annotation service, with an idempotent retry queue:
// a submission that fails on the network is retried until the server
// acknowledges it, and replays are safe because the server deduplicates
// (triplet, annotator, choice).

export interface TaskView {
  triplet_id: string;
  group_id: string;
  round: number;
  anchor_mesh_url: string;
  left_mesh_url: string;
  right_mesh_url: string;
  anchor_id: string;
  left_id: string;
  right_id: string;
  progress: { answered: number; total: number };
}

export interface Progress {
  answered: number;
  total: number;
  groups?: Record<string, { answered: number; total: number; champion: string | null }>;
}

export type Choice = "left" | "right" | "draw";

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export interface AnswerResult {
  status: number;
  body: { ok?: boolean; replay?: boolean; progress?: { answered: number; total: number }; error?: string };
}

export class ApiClient {
  constructor(
    private baseUrl: string,
    private fetchImpl: FetchLike = (...args) => fetch(...args),
  ) {}

  private url(path: string): string {
    return this.baseUrl.replace(/\/$/, "") + path;
  }

  async nextTask(annotator: string): Promise<TaskView | null> {
    const res = await this.fetchImpl(this.url(`/api/task?annotator=${encodeURIComponent(annotator)}`));
    if (!res.ok) throw new Error(`task fetch failed: ${res.status}`);
    const body = await res.json();
    return body.done ? null : (body as TaskView);
  }

  async submitAnswer(annotator: string, tripletId: string, choice: Choice): Promise<AnswerResult> {
    const res = await this.fetchImpl(this.url("/api/answer"), {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify({ triplet_id: tripletId, annotator, choice }),
    });
    return { status: res.status, body: await res.json() };
  }

  async progress(): Promise<Progress> {
    const res = await this.fetchImpl(this.url("/api/progress"));
    if (!res.ok) throw new Error(`progress fetch failed: ${res.status}`);
    return (await res.json()) as Progress;
  }

  async groupView(groupId: string): Promise<{ champion: string | null; member_ids: string[] }> {
    const res = await this.fetchImpl(this.url(`/api/groups/${encodeURIComponent(groupId)}`));
    if (!res.ok) throw new Error(`group fetch failed: ${res.status}`);
    return await res.json();
  }

  async fetchMesh(url: string): Promise<string> {
    const res = await this.fetchImpl(this.url(url));
    if (!res.ok) throw new Error(`mesh fetch failed: ${res.status}`);
    return await res.text();
  }
}
