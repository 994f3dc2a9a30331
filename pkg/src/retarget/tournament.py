"""Single-elimination tournaments over correspondence groups.

Each group's avatar candidates are paired off; annotators pick the
candidate more similar to the human anchor, winners advance, and the
champion is the group's best match. Completed brackets are augmented by
transitive closure: every comparable (winner, loser) pair not directly
annotated becomes an inferred training record.

All state is event-sourced: an append-only JSONL log of records is the
source of truth, and replaying it reconstructs identical tournaments.
"""

from __future__ import annotations

import json
import time
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from retarget.rig import philox_rng
from retarget.translate import CorrespondenceGroup, TrainingTriplet

_STREAM_PAIRING = 0x70A1
_STREAM_COIN = 0xC01F
_STREAM_SIM = 0x51AE

CHOICES = ("left", "right", "draw")


class TournamentError(ValueError):
    pass


@dataclass
class AnnotationRecord:
    triplet_id: str
    group_id: str
    anchor: str
    left: str
    right: str
    choice: str  # left | right | draw
    annotator: str
    timestamp: float
    origin: str = "manual"  # manual | augmented

    def __post_init__(self):
        if self.left == self.right:
            raise TournamentError("a record cannot pair an id with itself")
        if self.choice not in CHOICES:
            raise TournamentError(f"unknown choice {self.choice!r}")
        if self.origin == "augmented" and self.choice == "draw":
            raise TournamentError("augmented records always carry a winner")

    def to_json(self) -> str:
        return json.dumps(
            {
                "triplet_id": self.triplet_id,
                "group_id": self.group_id,
                "anchor": self.anchor,
                "left": self.left,
                "right": self.right,
                "choice": self.choice,
                "annotator": self.annotator,
                "timestamp": self.timestamp,
                "origin": self.origin,
            }
        )

    @staticmethod
    def from_json(line: str) -> "AnnotationRecord":
        d = json.loads(line)
        return AnnotationRecord(**d)


def append_records(path: str | Path, records: list[AnnotationRecord]) -> None:
    with open(path, "a", encoding="utf-8") as fh:
        for r in records:
            fh.write(r.to_json() + "\n")


def read_records(path: str | Path) -> list[AnnotationRecord]:
    path = Path(path)
    if not path.exists():
        return []
    return [AnnotationRecord.from_json(line) for line in path.read_text().splitlines() if line.strip()]


@dataclass
class Match:
    triplet_id: str
    round: int  # 1-based
    slot: int
    left: str | None = None
    right: str | None = None
    status: str = "pending"  # pending | left_won | right_won | draw_escalated
    winner: str | None = None
    bye: bool = False  # auto-resolved, no annotation involved
    excluded: bool = False  # resolved by coin flip, no training signal
    draw_annotators: list[str] = field(default_factory=list)

    @property
    def ready(self) -> bool:
        return self.left is not None and self.right is not None

    @property
    def resolved(self) -> bool:
        return self.winner is not None


@dataclass
class Tournament:
    group_id: str
    anchor_id: str
    candidate_ids: list[str]  # retrieval-rank order, best first
    seed: int
    matches: list[Match] = field(default_factory=list)
    rounds: int = 0

    def match_by_id(self, triplet_id: str) -> Match:
        for m in self.matches:
            if m.triplet_id == triplet_id:
                return m
        raise KeyError(f"unknown match {triplet_id!r}")

    @property
    def champion(self) -> str | None:
        final = self.matches[-1]
        return final.winner if final.resolved else None

    @property
    def real_matches(self) -> list[Match]:
        return [m for m in self.matches if not m.bye]

    def pending_matches(self) -> list[Match]:
        return [m for m in self.matches if not m.resolved and m.ready]

    def answerable_by(self, annotator: str) -> list[Match]:
        """Pending or escalated matches this annotator may still answer, lowest round first."""
        out = []
        for m in self.pending_matches():
            if m.status == "draw_escalated" and annotator in m.draw_annotators:
                continue
            out.append(m)
        return out


def _group_seed(seed: int, group_id: str) -> int:
    return int(np.uint64(seed) ^ np.uint64(zlib.crc32(group_id.encode("utf-8"))))


def create_tournament(group: CorrespondenceGroup, seed: int) -> Tournament:
    """Seeded bracket over the group's candidates.

    Non-power-of-two sizes get byes for the highest-retrieval-rank
    candidates, which advance to round two without a match. Round-one
    pairing of the rest is a seeded random permutation.
    """
    candidates = list(group.member_ids)
    n = len(candidates)
    if n < 2:
        raise TournamentError(f"group {group.group_id} has {n} candidates; need at least 2")
    p = 1
    while p < n:
        p *= 2
    n_byes = p - n

    t = Tournament(group_id=group.group_id, anchor_id=group.anchor_id, candidate_ids=candidates, seed=seed)
    rounds = p.bit_length() - 1
    t.rounds = rounds
    for r in range(1, rounds + 1):
        for s in range(p >> r):
            t.matches.append(Match(triplet_id=f"{group.group_id}:r{r}m{s}", round=r, slot=s))

    bye_candidates = candidates[:n_byes]
    rest = candidates[n_byes:]
    rng = philox_rng(_group_seed(seed, group.group_id), _STREAM_PAIRING)
    order = [rest[i] for i in rng.permutation(len(rest))]

    # Entrant list for round 1: byes paired first, then the shuffled rest.
    entrants: list[str | None] = []
    for c in bye_candidates:
        entrants += [c, None]
    entrants += order

    first_round = [m for m in t.matches if m.round == 1]
    for i, m in enumerate(first_round):
        m.left = entrants[2 * i]
        m.right = entrants[2 * i + 1]
        if m.right is None:
            m.right = "-"
            m.bye = True
            _resolve(t, m, "left")
        elif m.left is None:  # not produced by the layout above, kept for safety
            m.left = "-"
            m.bye = True
            _resolve(t, m, "right")
    return t


def _parent(t: Tournament, m: Match) -> Match | None:
    if m.round == t.rounds:
        return None
    target_slot = m.slot // 2
    for cand in t.matches:
        if cand.round == m.round + 1 and cand.slot == target_slot:
            return cand
    return None


def _resolve(t: Tournament, m: Match, side: str) -> None:
    m.status = f"{side}_won"
    m.winner = m.left if side == "left" else m.right
    parent = _parent(t, m)
    if parent is not None:
        if m.slot % 2 == 0:
            parent.left = m.winner
        else:
            parent.right = m.winner


def record_answer(
    t: Tournament,
    triplet_id: str,
    choice: str,
    annotator: str,
    timestamp: float | None = None,
) -> tuple[Tournament, list[AnnotationRecord]]:
    """Apply one answer; returns the tournament and any records to log.

    A draw escalates the match to a different annotator; a second draw
    (by a distinct annotator) resolves it with a seeded coin flip and
    drops the match from the training data.
    """
    if choice not in CHOICES:
        raise TournamentError(f"unknown choice {choice!r}")
    m = t.match_by_id(triplet_id)
    if m.resolved:
        raise TournamentError(f"match {triplet_id} is already resolved")
    if not m.ready:
        raise TournamentError(f"match {triplet_id} is not ready (awaiting earlier rounds)")
    if m.status == "draw_escalated" and annotator in m.draw_annotators:
        raise TournamentError(f"annotator {annotator!r} already answered match {triplet_id}")
    ts = time.time() if timestamp is None else float(timestamp)
    record = AnnotationRecord(
        triplet_id=triplet_id,
        group_id=t.group_id,
        anchor=t.anchor_id,
        left=m.left,
        right=m.right,
        choice=choice,
        annotator=annotator,
        timestamp=ts,
        origin="manual",
    )
    if choice in ("left", "right"):
        _resolve(t, m, choice)
        return t, [record]

    # draw path
    m.draw_annotators.append(annotator)
    if m.status == "pending":
        m.status = "draw_escalated"
        return t, [record]
    # second distinct-annotator draw: deterministic coin flip, excluded
    coin = philox_rng(_group_seed(t.seed, t.group_id), _STREAM_COIN, _match_index(t, m)).integers(0, 2)
    m.excluded = True
    _resolve(t, m, "left" if coin == 0 else "right")
    return t, [record]


def _match_index(t: Tournament, m: Match) -> int:
    return t.matches.index(m)


def _beats_edges(t: Tournament) -> list[tuple[str, str]]:
    """Direct (winner, loser) pairs from annotated matches; byes and
    coin-flip resolutions contribute nothing."""
    out = []
    for m in t.matches:
        if m.resolved and not m.bye and not m.excluded:
            loser = m.right if m.winner == m.left else m.left
            out.append((m.winner, loser))
    return out


def augment(t: Tournament, timestamp: float | None = None) -> list[AnnotationRecord]:
    """Transitive closure of the beats relation minus the direct matches.

    Every inferred (better, worse) pair becomes a record with
    origin="augmented"; the winner is stored on the left.
    """
    if t.champion is None:
        raise TournamentError(f"tournament {t.group_id} is not complete")
    direct = _beats_edges(t)
    children: dict[str, set[str]] = {}
    for w, l in direct:
        children.setdefault(w, set()).add(l)

    def reachable(start: str) -> set[str]:
        seen: set[str] = set()
        stack = list(children.get(start, ()))
        while stack:
            node = stack.pop()
            if node in seen:
                continue
            seen.add(node)
            stack.extend(children.get(node, ()))
        return seen

    direct_set = set(direct)
    rank = {c: i for i, c in enumerate(t.candidate_ids)}
    ts = time.time() if timestamp is None else float(timestamp)
    records = []
    for winner in sorted(children, key=lambda c: rank[c]):
        for loser in sorted(reachable(winner), key=lambda c: rank[c]):
            if (winner, loser) in direct_set:
                continue
            records.append(
                AnnotationRecord(
                    triplet_id=f"{t.group_id}:aug:{winner}>{loser}",
                    group_id=t.group_id,
                    anchor=t.anchor_id,
                    left=winner,
                    right=loser,
                    choice="left",
                    annotator="augment",
                    timestamp=ts,
                    origin="augmented",
                )
            )
    return records


def simulate_annotator(
    anchor_weights: np.ndarray,
    left_weights: np.ndarray,
    right_weights: np.ndarray,
    sigma: float,
    seed: int,
    draw_index: int = 0,
) -> str:
    """Oracle annotator for parallel rigs: prefers the candidate whose
    controller weights are closer to the anchor's, with optional Gaussian
    scoring noise. Exact ties are draws.
    """
    a = np.asarray(anchor_weights, dtype=np.float64)
    lw = np.asarray(left_weights, dtype=np.float64)
    rw = np.asarray(right_weights, dtype=np.float64)
    if lw.shape != a.shape or rw.shape != a.shape:
        raise TournamentError("weight vector length mismatch")
    score_l = float(np.linalg.norm(lw - a))
    score_r = float(np.linalg.norm(rw - a))
    if sigma > 0:
        rng = philox_rng(seed, _STREAM_SIM, draw_index)
        noise = rng.normal(0.0, sigma, size=2)
        score_l += noise[0]
        score_r += noise[1]
    if score_l < score_r:
        return "left"
    if score_r < score_l:
        return "right"
    return "draw"


def run_simulated_tournament(
    t: Tournament,
    anchor_weights: np.ndarray,
    weights_by_id: dict[str, np.ndarray],
    sigma: float,
    seed: int,
) -> list[AnnotationRecord]:
    """Drive a tournament to completion with two simulated annotators.

    The second annotator only sees matches the first one escalated; with
    sigma = 0 both apply the same exact oracle, so a tie escalates and
    then coin-flips deterministically.
    """
    records: list[AnnotationRecord] = []
    draw_index = 0
    while t.champion is None:
        progressed = False
        for annotator in ("sim0", "sim1"):
            candidates = t.answerable_by(annotator)
            if not candidates:
                continue
            m = candidates[0]
            choice = simulate_annotator(
                anchor_weights, weights_by_id[m.left], weights_by_id[m.right], sigma, _group_seed(seed, m.triplet_id), draw_index
            )
            draw_index += 1
            _, recs = record_answer(t, m.triplet_id, choice, annotator, timestamp=float(draw_index))
            records.extend(recs)
            progressed = True
            break
        if not progressed:
            raise TournamentError(f"tournament {t.group_id} stalled")
    return records


def replay_tournament(group: CorrespondenceGroup, seed: int, records: list[AnnotationRecord]) -> Tournament:
    """Reconstruct tournament state from its event log."""
    t = create_tournament(group, seed)
    for r in records:
        if r.group_id != group.group_id or r.origin != "manual":
            continue
        record_answer(t, r.triplet_id, r.choice, r.annotator, timestamp=r.timestamp)
    return t


def export_triplets(
    records: list[AnnotationRecord],
    codebook: dict[str, np.ndarray],
    anchor_codebook: dict[str, np.ndarray] | None = None,
) -> tuple[list[TrainingTriplet], dict[str, int]]:
    """Turn winner-carrying records into training triplets.

    Draw records contribute nothing. Returns the triplets and counts by
    origin. Ids missing from the codebooks raise KeyError.
    """
    anchors = codebook if anchor_codebook is None else anchor_codebook
    triplets = []
    counts = {"manual": 0, "augmented": 0}
    for r in records:
        if r.choice == "draw":
            continue
        winner, loser = (r.left, r.right) if r.choice == "left" else (r.right, r.left)
        if r.anchor not in anchors:
            raise KeyError(f"no code for anchor id {r.anchor!r}")
        if winner not in codebook:
            raise KeyError(f"no code for id {winner!r}")
        if loser not in codebook:
            raise KeyError(f"no code for id {loser!r}")
        triplets.append(
            TrainingTriplet(
                anchor_code=np.asarray(anchors[r.anchor], dtype=np.float32),
                positive_code=np.asarray(codebook[winner], dtype=np.float32),
                negative_code=np.asarray(codebook[loser], dtype=np.float32),
            )
        )
        counts[r.origin] = counts.get(r.origin, 0) + 1
    return triplets, counts
