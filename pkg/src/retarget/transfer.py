"""Gradient-based deformation transfer between triangle meshes.

Per-face deformation gradients are computed with a fourth vertex placed
off the face centroid along the normal, then target vertices are solved
so the target gradients match the source ones in the least-squares
sense, with one anchor vertex pinned to the target neutral.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from retarget.mesh import Mesh


class TransferError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleCorrespondence:
    """Pairs of (source face index, target face index). Targets may repeat."""

    pairs: np.ndarray  # (P, 2) int64

    def __post_init__(self):
        p = np.ascontiguousarray(np.asarray(self.pairs, dtype=np.int64))
        if p.ndim != 2 or p.shape[1] != 2:
            raise TransferError(f"pairs must be (P, 2), got {p.shape}")
        if len(p) == 0:
            raise TransferError("correspondence must be non-empty")
        p.setflags(write=False)
        object.__setattr__(self, "pairs", p)

    def __len__(self) -> int:
        return len(self.pairs)

    def validate(self, source: Mesh, target: Mesh) -> None:
        s, t = self.pairs[:, 0], self.pairs[:, 1]
        if s.min() < 0 or s.max() >= source.face_count:
            raise TransferError("source face index out of range")
        if t.min() < 0 or t.max() >= target.face_count:
            raise TransferError("target face index out of range")


def save_correspondence(corr: TriangleCorrespondence, path: str | Path) -> None:
    Path(path).write_text(json.dumps({"pairs": corr.pairs.tolist()}) + "\n")


def load_correspondence(path: str | Path) -> TriangleCorrespondence:
    data = json.loads(Path(path).read_text())
    return TriangleCorrespondence(np.array(data["pairs"], dtype=np.int64).reshape(-1, 2))


def identity_correspondence(source: Mesh, target: Mesh) -> TriangleCorrespondence:
    if source.face_count != target.face_count:
        raise TransferError(
            f"face-count mismatch: source has {source.face_count}, target has {target.face_count}"
        )
    k = np.arange(source.face_count, dtype=np.int64)
    return TriangleCorrespondence(np.stack([k, k], axis=1))


def _face_frames(mesh: Mesh) -> tuple[np.ndarray, np.ndarray]:
    """Per-face edge matrix [v2-v1, v3-v1, v4-v1] and the fourth vertices.

    v4 sits at the centroid, offset along the unit normal by
    sqrt(2 * area), which keeps the frame scale-consistent with the face.
    """
    p = mesh.vertices
    f = mesh.faces
    v1, v2, v3 = p[f[:, 0]], p[f[:, 1]], p[f[:, 2]]
    cross = np.cross(v2 - v1, v3 - v1)
    cross_norm = np.linalg.norm(cross, axis=1)
    if (cross_norm < 1e-300).any():
        bad = int(np.nonzero(cross_norm < 1e-300)[0][0])
        raise TransferError(f"zero-area face {bad}")
    normal = cross / cross_norm[:, None]
    # |cross| = 2 * area, so the offset length is sqrt(|cross|)
    v4 = (v1 + v2 + v3) / 3.0 + normal * np.sqrt(cross_norm)[:, None]
    E = np.stack([v2 - v1, v3 - v1, v4 - v1], axis=2)
    return E, v4


def face_gradients(neutral: Mesh, deformed: Mesh) -> np.ndarray:
    """Per-face 3x3 deformation gradients taking neutral frames to deformed ones."""
    if not neutral.same_topology(deformed):
        raise TransferError("meshes do not share topology")
    E0, _ = _face_frames(neutral)
    E1, _ = _face_frames(deformed)
    return E1 @ np.linalg.inv(E0)


def _assemble(tgt_neutral: Mesh, corr: TriangleCorrespondence) -> tuple[sp.csr_matrix, np.ndarray, np.ndarray]:
    """Sparse map from unknowns [vertices; used-face v4s] to stacked gradient columns."""
    E0, _ = _face_frames(tgt_neutral)
    W = np.linalg.inv(E0)  # (F, 3, 3)

    tgt_faces = corr.pairs[:, 1]
    used_faces, face_slot = np.unique(tgt_faces, return_inverse=True)
    V = tgt_neutral.vertex_count
    n_unknown = V + len(used_faces)

    rows, cols, vals = [], [], []
    f = tgt_neutral.faces
    for p_idx, (face, slot) in enumerate(zip(tgt_faces, face_slot)):
        w = W[face]
        i1, i2, i3 = f[face]
        i4 = V + slot
        for b in range(3):
            r = 3 * p_idx + b
            rows += [r, r, r, r]
            cols += [i1, i2, i3, i4]
            vals += [-(w[0, b] + w[1, b] + w[2, b]), w[0, b], w[1, b], w[2, b]]
    M = sp.csr_matrix((vals, (rows, cols)), shape=(3 * len(corr), n_unknown))

    covered = np.zeros(V, dtype=bool)
    covered[f[used_faces].ravel()] = True
    return M, used_faces, covered


def transfer_from_gradients(
    tgt_neutral: Mesh,
    corr: TriangleCorrespondence,
    source_gradients: np.ndarray,
    anchor: int = 0,
    identity_weight: float = 0.0,
) -> Mesh:
    """Solve for target vertices whose face gradients match `source_gradients` per pair.

    `identity_weight` > 0 adds a term pulling every constrained face's
    gradient toward the identity map (a rest-pose prior); the default
    keeps the pure data term.
    """
    if identity_weight < 0:
        raise TransferError("identity_weight must be >= 0")
    M, used_faces, covered = _assemble(tgt_neutral, corr)
    V = tgt_neutral.vertex_count
    if not covered.all():
        missing = int(np.nonzero(~covered)[0][0])
        raise TransferError(
            f"singular system: vertex {missing} is not covered by any correspondence pair"
        )

    g = source_gradients[corr.pairs[:, 0]]  # (P, 3, 3)
    # Row (pair, b) targets gradient column b; coordinate a picks G[a, b].
    rhs = np.swapaxes(g, 1, 2).reshape(-1, 3)  # rows: (pair, b), columns: coordinate a

    keep = np.ones(V + len(used_faces), dtype=bool)
    keep[anchor] = False
    Mk = M[:, keep]
    anchor_coef = np.asarray(M[:, [anchor]].todense()).ravel()
    anchor_pos = tgt_neutral.vertices[anchor]

    A = (Mk.T @ Mk).tocsc()
    b = Mk.T @ (rhs - np.outer(anchor_coef, anchor_pos))
    if identity_weight > 0.0:
        # the same gradient rows, weighted, with the identity as target
        eye_rhs = np.tile(np.eye(3), (len(corr), 1))
        A = (A + identity_weight * (Mk.T @ Mk)).tocsc()
        b = b + identity_weight * (Mk.T @ (eye_rhs - np.outer(anchor_coef, anchor_pos)))
    try:
        lu = spla.splu(A)
    except RuntimeError as e:
        raise TransferError(f"singular system: {e}") from e
    sol = lu.solve(b)
    if not np.isfinite(sol).all():
        raise TransferError("singular system: non-finite solution")

    out = np.empty((V, 3))
    out[anchor] = anchor_pos
    out[np.nonzero(keep[:V])[0]] = sol[: V - 1] if anchor < V else sol[:V]
    return Mesh(out, tgt_neutral.faces, name=f"{tgt_neutral.name}:transferred")


def transfer(
    src_neutral: Mesh,
    src_deformed: Mesh,
    tgt_neutral: Mesh,
    corr: TriangleCorrespondence,
    anchor: int = 0,
    identity_weight: float = 0.0,
) -> Mesh:
    """Deform `tgt_neutral` so its face gradients match those of the source deformation."""
    corr.validate(src_neutral, tgt_neutral)
    g = face_gradients(src_neutral, src_deformed)
    return transfer_from_gradients(tgt_neutral, corr, g, anchor=anchor, identity_weight=identity_weight)
