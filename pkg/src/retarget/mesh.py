"""Triangle-mesh data model, OBJ I/O, and topology queries.

Meshes are immutable after construction. Derived topology (one-rings,
edge lists) is computed once per distinct face list and shared between
all meshes of that topology, since a character set holds many meshes
over a single connectivity.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class MeshError(ValueError):
    """Invalid mesh data: bad indices, degenerate faces, or parse failures."""


@dataclass(frozen=True)
class Mesh:
    vertices: np.ndarray  # (V, 3) float64
    faces: np.ndarray  # (F, 3) int64, indices into vertices
    name: str = ""

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.vertices, dtype=np.float64))
        f = np.ascontiguousarray(np.asarray(self.faces, dtype=np.int64))
        if v.ndim != 2 or v.shape[1] != 3:
            raise MeshError(f"vertices must be (V, 3), got {v.shape}")
        if f.size == 0:
            f = f.reshape(0, 3)
        if f.ndim != 2 or f.shape[1] != 3:
            raise MeshError(f"faces must be (F, 3), got {f.shape}")
        if f.size and (f.min() < 0 or f.max() >= len(v)):
            raise MeshError("face index out of range")
        if f.size:
            degenerate = (f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])
            if degenerate.any():
                raise MeshError(f"degenerate face at index {int(np.nonzero(degenerate)[0][0])}")
        v.setflags(write=False)
        f.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)

    @property
    def vertex_count(self) -> int:
        return len(self.vertices)

    @property
    def face_count(self) -> int:
        return len(self.faces)

    def bbox_diagonal(self) -> float:
        if not len(self.vertices):
            return 0.0
        return float(np.linalg.norm(self.vertices.max(axis=0) - self.vertices.min(axis=0)))

    def with_vertices(self, vertices: np.ndarray, name: str | None = None) -> "Mesh":
        """New mesh over the same face list."""
        return Mesh(vertices, self.faces, self.name if name is None else name)

    def same_topology(self, other: "Mesh") -> bool:
        return self.faces.shape == other.faces.shape and bool(np.array_equal(self.faces, other.faces))


# Topology caches, keyed by the raw bytes of the face array.
_RING_CACHE: dict[bytes, tuple[np.ndarray, ...]] = {}
_EDGE_CACHE: dict[bytes, np.ndarray] = {}


def _topology_key(mesh: Mesh) -> bytes:
    return mesh.faces.tobytes()


def mesh_edges(mesh: Mesh) -> np.ndarray:
    """Unique undirected edges as an (E, 2) array with e[0] < e[1]."""
    key = _topology_key(mesh)
    cached = _EDGE_CACHE.get(key)
    if cached is None:
        f = mesh.faces
        if not len(f):
            cached = np.zeros((0, 2), dtype=np.int64)
        else:
            pairs = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]])
            pairs.sort(axis=1)
            cached = np.unique(pairs, axis=0)
        cached.setflags(write=False)
        _EDGE_CACHE[key] = cached
    return cached


def _all_rings(mesh: Mesh) -> tuple[np.ndarray, ...]:
    key = _topology_key(mesh)
    cached = _RING_CACHE.get(key)
    if cached is None:
        neighbors: list[set[int]] = [set() for _ in range(mesh.vertex_count)]
        for a, b in mesh_edges(mesh):
            neighbors[a].add(int(b))
            neighbors[b].add(int(a))
        cached = tuple(np.array(sorted(n), dtype=np.int64) for n in neighbors)
        _RING_CACHE[key] = cached
    return cached


def one_ring(mesh: Mesh, vertex: int) -> np.ndarray:
    """Sorted, duplicate-free indices of the vertices sharing an edge with `vertex`."""
    if not 0 <= vertex < mesh.vertex_count:
        raise IndexError(f"vertex index {vertex} out of range for {mesh.vertex_count} vertices")
    return _all_rings(mesh)[vertex]


def load_obj(path: str | Path) -> Mesh:
    """Parse an ASCII OBJ file with `v` and triangular `f` records.

    Normals and texture coordinates are ignored. Face indices must be
    positive (1-based) and in range. Raises MeshError with the offending
    line number on malformed input.
    """
    path = Path(path)
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            tag = parts[0]
            if tag == "v":
                if len(parts) < 4:
                    raise MeshError(f"{path.name}:{lineno}: vertex record needs 3 coordinates")
                try:
                    vertices.append((float(parts[1]), float(parts[2]), float(parts[3])))
                except ValueError as e:
                    raise MeshError(f"{path.name}:{lineno}: bad vertex coordinate: {e}") from e
            elif tag == "f":
                refs = parts[1:]
                if len(refs) != 3:
                    raise MeshError(f"{path.name}:{lineno}: non-triangular face with {len(refs)} vertices")
                idx = []
                for ref in refs:
                    head = ref.split("/")[0]
                    try:
                        i = int(head)
                    except ValueError as e:
                        raise MeshError(f"{path.name}:{lineno}: bad face index {head!r}") from e
                    if i <= 0 or i > len(vertices):
                        raise MeshError(f"{path.name}:{lineno}: face index {i} out of range")
                    idx.append(i - 1)
                faces.append(tuple(idx))
            # all other record types (vn, vt, o, g, s, usemtl, ...) are ignored
    if not vertices:
        raise MeshError(f"{path.name}: no vertices found")
    try:
        return Mesh(np.array(vertices), np.array(faces, dtype=np.int64).reshape(-1, 3), name=path.stem)
    except MeshError as e:
        raise MeshError(f"{path.name}: {e}") from e


def save_obj(mesh: Mesh, path: str | Path) -> None:
    """Write `mesh` as ASCII OBJ, 9 significant digits per coordinate."""
    if mesh.vertex_count == 0:
        raise MeshError("empty mesh")
    path = Path(path)
    lines = [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces]
    path.write_text("\n".join(lines) + "\n", encoding="ascii")


@dataclass
class MeshSet:
    """A neutral mesh plus expression meshes sharing its topology."""

    neutral: Mesh
    expressions: list[Mesh] = field(default_factory=list)
    manifest: dict[str, dict] = field(default_factory=dict)  # id -> metadata

    def __post_init__(self):
        for m in self.expressions:
            if not m.same_topology(self.neutral):
                raise MeshError(f"expression {m.name!r} does not share the neutral topology")
        ids = list(self.manifest)
        if len(set(ids)) != len(ids):
            raise MeshError("duplicate manifest ids")

    def __len__(self) -> int:
        return len(self.expressions)

    def ids(self) -> list[str]:
        return list(self.manifest)

    def by_id(self, mesh_id: str) -> Mesh:
        try:
            pos = list(self.manifest).index(mesh_id)
        except ValueError:
            raise KeyError(f"unknown mesh id {mesh_id!r}") from None
        return self.expressions[pos]


def save_meshset(ms: MeshSet, directory: str | Path) -> Path:
    """Write neutral + expressions as OBJ files and a manifest.json index."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    save_obj(ms.neutral, directory / "neutral.obj")
    entries = []
    for mesh_id, mesh in zip(ms.manifest, ms.expressions):
        rel = f"{mesh_id}.obj"
        save_obj(mesh, directory / rel)
        meta = ms.manifest[mesh_id]
        entries.append({"id": mesh_id, "path": rel, "tags": meta.get("tags", [])})
    manifest = {"neutral": "neutral.obj", "expressions": entries}
    out = directory / "manifest.json"
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def load_meshset(directory: str | Path) -> MeshSet:
    """Load a MeshSet written by save_meshset (manifest.json + OBJ files)."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    spec = json.loads(manifest_path.read_text())
    neutral = load_obj(directory / spec["neutral"])
    expressions, manifest = [], {}
    for entry in spec["expressions"]:
        mesh = load_obj(directory / entry["path"])
        expressions.append(Mesh(mesh.vertices, mesh.faces, name=entry["id"]))
        manifest[entry["id"]] = {"path": entry["path"], "tags": entry.get("tags", [])}
    return MeshSet(neutral=neutral, expressions=expressions, manifest=manifest)
