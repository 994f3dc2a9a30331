// Entry point: wires the session controller, the mesh viewer, and the
// controls together. Configuration via query string:
//   ?annotator=ID&api=http://host:port

import { ApiClient } from "./api.js";
import { parseObj } from "./obj.js";
import { SessionController, SessionState } from "./session.js";
import { TripletViewer } from "./viewer.js";

const params = new URLSearchParams(window.location.search);
const annotator = params.get("annotator") ?? "anonymous";
const apiBase = params.get("api") ?? "";

const api = new ApiClient(apiBase);
const session = new SessionController(api, annotator);

const el = (id: string) => document.getElementById(id)!;
const viewer = new TripletViewer(
  el("anchor-canvas") as HTMLCanvasElement,
  el("left-canvas") as HTMLCanvasElement,
  el("right-canvas") as HTMLCanvasElement,
);

let meshLoadToken = 0;

async function loadMeshes(state: SessionState): Promise<void> {
  const task = state.task;
  if (!task) return;
  const token = ++meshLoadToken;
  try {
    const [anchorText, leftText, rightText] = await Promise.all([
      api.fetchMesh(task.anchor_mesh_url),
      api.fetchMesh(task.left_mesh_url),
      api.fetchMesh(task.right_mesh_url),
    ]);
    if (token !== meshLoadToken) return; // a newer task arrived meanwhile
    viewer.showTriplet(parseObj(anchorText), parseObj(leftText), parseObj(rightText));
    setBanner(null);
    setButtonsEnabled(true);
  } catch (e) {
    // fetch or parse failure: banner with retry, no submission possible
    setBanner(`mesh load failed: ${e}`, true);
    setButtonsEnabled(false);
  }
}

function setBanner(message: string | null, retry = false): void {
  const banner = el("banner");
  banner.textContent = message ?? "";
  banner.style.display = message ? "block" : "none";
  (el("retry-button") as HTMLButtonElement).style.display = message && retry ? "inline-block" : "none";
}

function setButtonsEnabled(enabled: boolean): void {
  for (const id of ["choose-left", "choose-right", "choose-draw"]) {
    (el(id) as HTMLButtonElement).disabled = !enabled;
  }
}

function render(state: SessionState): void {
  el("annotator-label").textContent = annotator;
  if (state.progress) {
    el("progress-label").textContent = `${state.progress.answered} / ${state.progress.total}`;
    const pct = state.progress.total ? (100 * state.progress.answered) / state.progress.total : 0;
    (el("progress-fill") as HTMLElement).style.width = `${pct}%`;
  }
  el("task-area").style.display = state.phase === "done" ? "none" : "grid";
  el("done-area").style.display = state.phase === "done" ? "block" : "none";

  switch (state.phase) {
    case "task":
      el("round-label").textContent = `group ${state.task!.group_id}, round ${state.task!.round}`;
      void loadMeshes(state);
      break;
    case "submitting":
    case "loading":
      setButtonsEnabled(false);
      break;
    case "retrying":
      setBanner("offline: answer queued, retrying...", true);
      break;
    case "error":
      setBanner(state.errorMessage ?? "error", true);
      break;
    case "done": {
      const list = el("champion-list");
      list.innerHTML = "";
      for (const [gid, champ] of Object.entries(state.champions)) {
        const li = document.createElement("li");
        li.textContent = `${gid}: champion ${champ ?? "n/a"}`;
        list.appendChild(li);
      }
      break;
    }
  }
}

session.onChange(render);

el("choose-left").addEventListener("click", () => void session.submitChoice("left"));
el("choose-right").addEventListener("click", () => void session.submitChoice("right"));
el("choose-draw").addEventListener("click", () => void session.submitChoice("draw"));
el("retry-button").addEventListener("click", () => {
  if (session.state.pending) void session.flushRetry();
  else void session.loadNextTask();
});

window.addEventListener("keydown", (ev) => {
  if (session.state.phase !== "task") return;
  if (ev.key === "ArrowLeft") void session.submitChoice("left");
  else if (ev.key === "ArrowRight") void session.submitChoice("right");
  else if (ev.key === " ") {
    ev.preventDefault();
    void session.submitChoice("draw");
  }
});

window.addEventListener("online", () => void session.flushRetry());

void session.start();
