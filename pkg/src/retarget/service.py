"""HTTP service for tournament annotation.

Serves tasks to annotators, ingests answers, and streams mesh geometry
to the browser UI. All campaign state derives from the append-only
annotations.jsonl event log: restarting the service and replaying the
log reproduces progress, brackets, and champions exactly.

Tasks are leased: while an annotator holds an unexpired lease on a
match, no other annotator is offered it. Answers are accepted from any
annotator allowed by the tournament rules (first write wins), so an
expired lease never blocks progress.
"""

from __future__ import annotations

import json
import threading
import time
from dataclasses import dataclass
from pathlib import Path

from fastapi import FastAPI
from fastapi.middleware.cors import CORSMiddleware
from fastapi.responses import JSONResponse, Response

from retarget.tournament import (
    AnnotationRecord,
    Tournament,
    TournamentError,
    append_records,
    create_tournament,
    read_records,
)
from retarget.translate import load_groups

DEFAULT_LEASE_SECONDS = 300.0


class CampaignError(ValueError):
    pass


@dataclass
class Lease:
    annotator: str
    expires: float


class Campaign:
    """In-memory campaign state over an on-disk campaign directory."""

    def __init__(self, directory: str | Path, clock=time.time):
        self.dir = Path(directory)
        spec_path = self.dir / "campaign.json"
        if not spec_path.exists():
            raise CampaignError(f"no campaign.json in {self.dir}")
        spec = json.loads(spec_path.read_text())
        self.seed = int(spec.get("seed", 0))
        self.lease_seconds = float(spec.get("lease_seconds", DEFAULT_LEASE_SECONDS))
        self.clock = clock
        self.lock = threading.Lock()

        self.groups = {g.group_id: g for g in load_groups(self.dir / spec.get("groups", "groups.json"))}
        index_path = self.dir / spec.get("mesh_index", "mesh_index.json")
        self.mesh_paths: dict[str, Path] = {}
        if index_path.exists():
            for mesh_id, rel in json.loads(index_path.read_text())["meshes"].items():
                self.mesh_paths[mesh_id] = self.dir / rel
        self._mesh_cache: dict[str, bytes] = {}

        self.log_path = self.dir / spec.get("annotations", "annotations.jsonl")
        self.tournaments: dict[str, Tournament] = {
            gid: create_tournament(g, self.seed) for gid, g in self.groups.items()
        }
        self.leases: dict[str, Lease] = {}
        self.submissions: dict[tuple[str, str], str] = {}
        for record in read_records(self.log_path):
            if record.origin != "manual":
                continue
            t = self.tournaments[record.group_id]
            t, _ = _apply(t, record)
            self.submissions[(record.triplet_id, record.annotator)] = record.choice

    # -- queries --------------------------------------------------------

    def progress(self) -> dict:
        total = answered = 0
        per_group = {}
        for gid, t in self.tournaments.items():
            real = t.real_matches
            done = sum(1 for m in real if m.resolved)
            total += len(real)
            answered += done
            per_group[gid] = {"answered": done, "total": len(real), "champion": t.champion}
        return {"answered": answered, "total": total, "groups": per_group}

    def group_view(self, group_id: str) -> dict | None:
        t = self.tournaments.get(group_id)
        if t is None:
            return None
        g = self.groups[group_id]
        return {
            "group_id": group_id,
            "anchor_id": g.anchor_id,
            "member_ids": list(g.member_ids),
            "champion": t.champion,
            "matches": [
                {
                    "triplet_id": m.triplet_id,
                    "round": m.round,
                    "left": m.left,
                    "right": m.right,
                    "status": m.status,
                    "winner": m.winner,
                    "bye": m.bye,
                }
                for m in t.matches
            ],
        }

    def mesh_bytes(self, mesh_id: str) -> bytes | None:
        if mesh_id not in self.mesh_paths:
            return None
        if mesh_id not in self._mesh_cache:
            self._mesh_cache[mesh_id] = self.mesh_paths[mesh_id].read_bytes()
        return self._mesh_cache[mesh_id]

    # -- task leasing -----------------------------------------------------

    def _candidate_matches(self, annotator: str):
        now = self.clock()
        for gid in sorted(self.tournaments):
            t = self.tournaments[gid]
            for m in t.answerable_by(annotator):
                lease = self.leases.get(m.triplet_id)
                if lease is not None and lease.annotator != annotator and lease.expires > now:
                    continue
                yield t, m

    def next_task(self, annotator: str) -> dict | None:
        """Lease the lowest-round answerable match to this annotator."""
        with self.lock:
            best = None
            for t, m in self._candidate_matches(annotator):
                key = (m.round, t.group_id, m.slot)
                if best is None or key < best[0]:
                    best = (key, t, m)
            if best is None:
                return None
            _, t, m = best
            self.leases[m.triplet_id] = Lease(annotator=annotator, expires=self.clock() + self.lease_seconds)
            prog = self.progress()
            return {
                "triplet_id": m.triplet_id,
                "group_id": t.group_id,
                "round": m.round,
                "anchor_mesh_url": f"/meshes/{t.anchor_id}.obj",
                "left_mesh_url": f"/meshes/{m.left}.obj",
                "right_mesh_url": f"/meshes/{m.right}.obj",
                "anchor_id": t.anchor_id,
                "left_id": m.left,
                "right_id": m.right,
                "progress": {"answered": prog["answered"], "total": prog["total"]},
            }

    def submit_answer(self, annotator: str, triplet_id: str, choice: str) -> tuple[int, dict]:
        """Apply one answer. Returns (http_status, body); replays are idempotent."""
        with self.lock:
            gid = triplet_id.split(":", 1)[0]
            t = self.tournaments.get(gid)
            if t is None:
                return 404, {"error": f"unknown triplet {triplet_id!r}"}
            try:
                match = t.match_by_id(triplet_id)
            except KeyError:
                return 404, {"error": f"unknown triplet {triplet_id!r}"}

            previous = self.submissions.get((triplet_id, annotator))
            if previous is not None:
                if previous == choice:
                    prog = self.progress()
                    return 200, {"ok": True, "replay": True, "progress": {"answered": prog["answered"], "total": prog["total"]}}
                return 409, {"error": "conflicting answer already recorded for this annotator"}
            if match.resolved:
                return 409, {"error": "match already resolved"}

            try:
                _, records = _apply_live(t, triplet_id, choice, annotator, self.clock())
            except TournamentError as e:
                return 409, {"error": str(e)}
            append_records(self.log_path, records)
            self.submissions[(triplet_id, annotator)] = choice
            self.leases.pop(triplet_id, None)
            prog = self.progress()
            return 200, {"ok": True, "progress": {"answered": prog["answered"], "total": prog["total"]}}


def _apply(t: Tournament, record: AnnotationRecord):
    from retarget.tournament import record_answer

    return record_answer(t, record.triplet_id, record.choice, record.annotator, timestamp=record.timestamp)


def _apply_live(t: Tournament, triplet_id: str, choice: str, annotator: str, ts: float):
    from retarget.tournament import record_answer

    return record_answer(t, triplet_id, choice, annotator, timestamp=ts)


def make_app(campaign: Campaign, ui_dir: str | Path | None = None) -> FastAPI:
    app = FastAPI(title="retarget annotation service")
    app.add_middleware(
        CORSMiddleware,
        allow_origins=["*"],
        allow_methods=["*"],
        allow_headers=["*"],
    )

    @app.get("/api/task")
    def get_task(annotator: str):
        task = campaign.next_task(annotator)
        if task is None:
            return {"done": True}
        return task

    @app.post("/api/answer")
    def post_answer(body: dict):
        for key in ("triplet_id", "annotator", "choice"):
            if key not in body:
                return JSONResponse({"error": f"missing field {key!r}"}, status_code=422)
        status, payload = campaign.submit_answer(body["annotator"], body["triplet_id"], body["choice"])
        return JSONResponse(payload, status_code=status)

    @app.get("/api/progress")
    def get_progress():
        return campaign.progress()

    @app.get("/api/groups/{group_id}")
    def get_group(group_id: str):
        view = campaign.group_view(group_id)
        if view is None:
            return JSONResponse({"error": f"unknown group {group_id!r}"}, status_code=404)
        return view

    @app.get("/meshes/{mesh_id}.obj")
    def get_mesh(mesh_id: str):
        body = campaign.mesh_bytes(mesh_id)
        if body is None:
            return JSONResponse({"error": f"unknown mesh {mesh_id!r}"}, status_code=404)
        return Response(content=body, media_type="text/plain")

    if ui_dir is not None and Path(ui_dir).exists():
        from fastapi.staticfiles import StaticFiles

        app.mount("/", StaticFiles(directory=str(ui_dir), html=True), name="ui")
    return app
