"""Per-vertex deformation features between an expression mesh and its neutral.

Each vertex gets a 3x3 deformation gradient fitted over its one-ring by
weighted least squares, split by polar decomposition into a rotation and
a symmetric scale/shear factor, and packed as a 9-vector:

    [wx, wy, wz, sxx-1, syy-1, szz-1, sxy, sxz, syz]

where w is the rotation log (axis * angle, |w| <= pi) and s the symmetric
factor. The neutral expression encodes to the all-zeros matrix, and the
feature is invariant to global translation of the deformed mesh.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from retarget.mesh import Mesh, mesh_edges

COT_CLAMP = 1e-3
DRF_LAYOUT = "w3_s6"


class FeatureError(ValueError):
    """Invalid feature data or unencodable mesh geometry."""


@dataclass(frozen=True)
class DRFeature:
    values: np.ndarray  # (V, 9) float32

    def __post_init__(self):
        v = np.ascontiguousarray(np.asarray(self.values, dtype=np.float32))
        if v.ndim != 2 or v.shape[1] != 9:
            raise FeatureError(f"feature must be (V, 9), got {v.shape}")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def vertex_count(self) -> int:
        return len(self.values)

    @property
    def rotation_logs(self) -> np.ndarray:
        return self.values[:, :3]

    @property
    def scale_parts(self) -> np.ndarray:
        return self.values[:, 3:]

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.values).all())

    def flat(self) -> np.ndarray:
        return self.values.reshape(-1)


def save_drf(feature: DRFeature, path: str | Path) -> None:
    """Container format: one JSON header line, then raw float32 little-endian rows."""
    header = {"vertex_count": feature.vertex_count, "layout": DRF_LAYOUT, "dtype": "f32le"}
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8") + b"\n")
        fh.write(np.ascontiguousarray(feature.values, dtype="<f4").tobytes())


def load_drf(path: str | Path) -> DRFeature:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("layout") != DRF_LAYOUT or header.get("dtype") != "f32le":
            raise FeatureError(f"unsupported feature container header: {header}")
        count = int(header["vertex_count"])
        payload = fh.read(count * 9 * 4)
    if len(payload) != count * 9 * 4:
        raise FeatureError(f"{path}: truncated payload")
    values = np.frombuffer(payload, dtype="<f4").reshape(count, 9)
    return DRFeature(values)


@dataclass(frozen=True)
class EdgeWeights:
    """Symmetric nonnegative per-edge weights aligned with mesh_edges order."""

    edges: np.ndarray  # (E, 2) int64, first < second
    values: np.ndarray  # (E,) float64

    def __post_init__(self):
        e = np.asarray(self.edges, dtype=np.int64)
        v = np.asarray(self.values, dtype=np.float64)
        if len(e) != len(v):
            raise FeatureError("edge/value length mismatch")
        if not np.isfinite(v).all():
            raise FeatureError("edge weights must be finite")
        if len(v) and v.min() < 0:
            raise FeatureError("edge weights must be nonnegative")
        e.setflags(write=False)
        v.setflags(write=False)
        object.__setattr__(self, "edges", e)
        object.__setattr__(self, "values", v)

    def cache_token(self) -> bytes:
        return self.values.tobytes()


def _edge_index_lookup(edges: np.ndarray, n_vertices: int):
    """Return a function mapping sorted vertex pairs to positions in `edges`."""
    keys = edges[:, 0] * n_vertices + edges[:, 1]

    def lookup(a: np.ndarray, b: np.ndarray) -> np.ndarray:
        lo = np.minimum(a, b)
        hi = np.maximum(a, b)
        return np.searchsorted(keys, lo * n_vertices + hi)

    return lookup


def uniform_weights(mesh: Mesh) -> EdgeWeights:
    edges = mesh_edges(mesh)
    return EdgeWeights(edges, np.ones(len(edges)))


def cotangent_weights(mesh: Mesh, clamp: float = COT_CLAMP) -> EdgeWeights:
    """Half cotangent-sum weights, clamped below at `clamp`.

    Interior edges use (cot a + cot b) / 2 over the two opposite angles;
    boundary edges use the single available cotangent (still halved).
    """
    edges = mesh_edges(mesh)
    sums = np.zeros(len(edges))
    lookup = _edge_index_lookup(edges, mesh.vertex_count)
    p = mesh.vertices
    f = mesh.faces
    for corner in range(3):
        i = f[:, corner]
        j = f[:, (corner + 1) % 3]
        k = f[:, (corner + 2) % 3]
        u = p[j] - p[i]
        v = p[k] - p[i]
        cross = np.linalg.norm(np.cross(u, v), axis=1)
        cross = np.maximum(cross, 1e-300)
        cot = (u * v).sum(axis=1) / cross
        np.add.at(sums, lookup(j, k), cot)
    return EdgeWeights(edges, np.maximum(clamp, 0.5 * sums))


def _skew(w: np.ndarray) -> np.ndarray:
    out = np.zeros(w.shape[:-1] + (3, 3), dtype=w.dtype)
    out[..., 0, 1] = -w[..., 2]
    out[..., 0, 2] = w[..., 1]
    out[..., 1, 0] = w[..., 2]
    out[..., 1, 2] = -w[..., 0]
    out[..., 2, 0] = -w[..., 1]
    out[..., 2, 1] = w[..., 0]
    return out


def rotation_exp(w: np.ndarray) -> np.ndarray:
    """Rodrigues map from axis-angle vectors (..., 3) to rotation matrices."""
    w = np.asarray(w, dtype=np.float64)
    theta = np.linalg.norm(w, axis=-1)
    t2 = theta * theta
    small = theta < 1e-8
    with np.errstate(invalid="ignore", divide="ignore"):
        a = np.where(small, 1.0 - t2 / 6.0, np.sin(theta) / np.where(small, 1.0, theta))
        b = np.where(small, 0.5 - t2 / 24.0, (1.0 - np.cos(theta)) / np.where(small, 1.0, t2))
    k = _skew(w)
    eye = np.broadcast_to(np.eye(3), k.shape)
    return eye + a[..., None, None] * k + b[..., None, None] * (k @ k)


def _quaternion_from_matrix(R: np.ndarray) -> np.ndarray:
    """Batched rotation-matrix -> unit quaternion (w, x, y, z), w >= 0."""
    R = np.asarray(R, dtype=np.float64)
    single = R.ndim == 2
    if single:
        R = R[None]
    m00, m11, m22 = R[:, 0, 0], R[:, 1, 1], R[:, 2, 2]
    q = np.empty((len(R), 4))
    tr = m00 + m11 + m22

    # Shepperd's method: trace branch when positive, else the largest
    # diagonal entry picks the pivot.
    diag_choice = np.argmax(np.stack([m00, m11, m22], axis=1), axis=1) + 1
    choice = np.where(tr > 0, 0, diag_choice)

    sel = choice == 0
    if sel.any():
        s = np.sqrt(tr[sel] + 1.0) * 2.0
        q[sel, 0] = 0.25 * s
        q[sel, 1] = (R[sel, 2, 1] - R[sel, 1, 2]) / s
        q[sel, 2] = (R[sel, 0, 2] - R[sel, 2, 0]) / s
        q[sel, 3] = (R[sel, 1, 0] - R[sel, 0, 1]) / s
    sel = choice == 1
    if sel.any():
        s = np.sqrt(1.0 + m00[sel] - m11[sel] - m22[sel]) * 2.0
        q[sel, 0] = (R[sel, 2, 1] - R[sel, 1, 2]) / s
        q[sel, 1] = 0.25 * s
        q[sel, 2] = (R[sel, 0, 1] + R[sel, 1, 0]) / s
        q[sel, 3] = (R[sel, 0, 2] + R[sel, 2, 0]) / s
    sel = choice == 2
    if sel.any():
        s = np.sqrt(1.0 + m11[sel] - m00[sel] - m22[sel]) * 2.0
        q[sel, 0] = (R[sel, 0, 2] - R[sel, 2, 0]) / s
        q[sel, 1] = (R[sel, 0, 1] + R[sel, 1, 0]) / s
        q[sel, 2] = 0.25 * s
        q[sel, 3] = (R[sel, 1, 2] + R[sel, 2, 1]) / s
    sel = choice == 3
    if sel.any():
        s = np.sqrt(1.0 + m22[sel] - m00[sel] - m11[sel]) * 2.0
        q[sel, 0] = (R[sel, 1, 0] - R[sel, 0, 1]) / s
        q[sel, 1] = (R[sel, 0, 2] + R[sel, 2, 0]) / s
        q[sel, 2] = (R[sel, 1, 2] + R[sel, 2, 1]) / s
        q[sel, 3] = 0.25 * s

    q /= np.linalg.norm(q, axis=1, keepdims=True)
    q[q[:, 0] < 0] *= -1.0
    return q[0] if single else q


def rotation_log(R: np.ndarray) -> np.ndarray:
    """Principal rotation log: axis * angle with angle in [0, pi].

    At angle ~pi the axis sign is ambiguous; the branch whose first
    nonzero component is positive is chosen, so the output is
    deterministic.
    """
    q = np.atleast_2d(_quaternion_from_matrix(R))
    w = q[:, 0]
    vec = q[:, 1:]
    s = np.linalg.norm(vec, axis=1)
    theta = 2.0 * np.arctan2(s, w)
    with np.errstate(invalid="ignore", divide="ignore"):
        scale = np.where(s < 1e-12, 2.0, theta / np.where(s < 1e-12, 1.0, s))
    out = vec * scale[:, None]

    near_pi = theta > np.pi - 1e-6
    for i in np.nonzero(near_pi)[0]:
        axis = out[i]
        for c in axis:
            if abs(c) > 1e-12:
                if c < 0:
                    out[i] = -axis
                break
    return out[0] if np.asarray(R).ndim == 2 else out


def _polar_batch(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    U, sig, Vt = np.linalg.svd(T)
    det = np.linalg.det(U @ Vt)
    # Proper rotation: negate the singular vector paired with the smallest
    # singular value (numpy sorts descending, so the last one).
    flip = np.ones_like(sig)
    flip[..., -1] = np.sign(det) + (det == 0)  # det==0 keeps +1
    R = (U * flip[..., None, :]) @ Vt
    V = np.swapaxes(Vt, -1, -2)
    S = (V * (sig * flip)[..., None, :]) @ Vt
    S = 0.5 * (S + np.swapaxes(S, -1, -2))
    return R, S


def polar_decompose(T: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Split T = R @ S with R a proper rotation (det +1) and S symmetric."""
    T = np.asarray(T, dtype=np.float64)
    if not np.isfinite(T).all():
        raise FeatureError("polar_decompose requires finite input")
    if T.shape[-2:] != (3, 3):
        raise FeatureError(f"expected trailing (3, 3) shape, got {T.shape}")
    return _polar_batch(T)


def _check_weights(mesh: Mesh, weights: EdgeWeights) -> None:
    edges = mesh_edges(mesh)
    if weights.edges.shape != edges.shape or not np.array_equal(weights.edges, edges):
        raise FeatureError("edge weights do not match mesh topology")


def _fit_gradients(neutral: Mesh, deformed: Mesh, weights: EdgeWeights) -> np.ndarray:
    """Per-vertex 3x3 maps minimizing the weighted one-ring edge residual."""
    V = neutral.vertex_count
    edges = weights.edges
    c = weights.values
    p = neutral.vertices
    q = deformed.vertices

    i, j = edges[:, 0], edges[:, 1]
    e = p[i] - p[j]
    d = q[i] - q[j]
    # Both edge directions contribute the same outer products. B holds the
    # residual moments sum c (d - e) e^T, which are bitwise zero wherever
    # the deformation leaves a one-ring untouched.
    cee = c[:, None, None] * (e[:, :, None] * e[:, None, :])
    cre = c[:, None, None] * ((d - e)[:, :, None] * e[:, None, :])
    A = np.zeros((V, 3, 3))
    B = np.zeros((V, 3, 3))
    np.add.at(A, i, cee)
    np.add.at(A, j, cee)
    np.add.at(B, i, cre)
    np.add.at(B, j, cre)

    if len(e):
        mean_sq_edge = float((e * e).sum(axis=1).mean())
    else:
        mean_sq_edge = 1.0
    lam = 1e-6 * max(mean_sq_edge, 1e-300)

    # Rank of the unregularized one-ring span; a vertex whose edges span
    # less than a plane has no recoverable gradient.
    eigvals = np.linalg.eigvalsh(A)
    deficient = eigvals[:, 1] <= 1e-12 * max(mean_sq_edge, 1e-300)
    if deficient.any():
        raise FeatureError(
            f"degenerate one-ring at vertex {int(np.nonzero(deficient)[0][0])}: edge span rank < 2"
        )

    M = A + lam * np.eye(3)

    # Regularize toward the ring's own rotation rather than a fixed
    # target: a fixed target (0 or I) biases weakly constrained
    # directions and breaks equivariance under global rotations. The
    # rotation comes from an unbiased pre-fit, so the final fit maps
    # exactly as T -> QT when the deformed mesh is rotated by Q.
    pre = np.swapaxes(np.linalg.solve(M, np.swapaxes(B + A, 1, 2)), 1, 2)
    R0, _ = _polar_batch(pre)
    rhs = B + lam * (R0 - np.eye(3))
    T = np.eye(3) + np.swapaxes(np.linalg.solve(M, np.swapaxes(rhs, 1, 2)), 1, 2)

    # Untouched one-rings have exactly zero residual moments; the fit is
    # exactly the identity there, free of regularizer round-off.
    untouched = ~B.any(axis=(1, 2))
    T[untouched] = np.eye(3)
    return T


def dr_encode(neutral: Mesh, deformed: Mesh, weights: EdgeWeights | None = None) -> DRFeature:
    """Encode per-vertex rotation/scale-shear of `deformed` relative to `neutral`."""
    if not neutral.same_topology(deformed):
        raise FeatureError("meshes do not share topology")
    if neutral.vertex_count != deformed.vertex_count:
        raise FeatureError("vertex count mismatch")
    if weights is None:
        weights = cotangent_weights(neutral)
    _check_weights(neutral, weights)

    T = _fit_gradients(neutral, deformed, weights)
    R, S = _polar_batch(T)
    w = rotation_log(R)
    feat = np.empty((neutral.vertex_count, 9))
    feat[:, :3] = w
    feat[:, 3] = S[:, 0, 0] - 1.0
    feat[:, 4] = S[:, 1, 1] - 1.0
    feat[:, 5] = S[:, 2, 2] - 1.0
    feat[:, 6] = S[:, 0, 1]
    feat[:, 7] = S[:, 0, 2]
    feat[:, 8] = S[:, 1, 2]
    if not np.isfinite(feat).all():
        raise FeatureError("non-finite feature produced; mesh geometry is degenerate")
    return DRFeature(feat.astype(np.float32))


def feature_transforms(feature: DRFeature) -> np.ndarray:
    """Rebuild per-vertex 3x3 maps T = exp(w) @ (I + s) from a feature."""
    vals = feature.values.astype(np.float64)
    R = rotation_exp(vals[:, :3])
    S = np.zeros((len(vals), 3, 3))
    S[:, 0, 0] = vals[:, 3] + 1.0
    S[:, 1, 1] = vals[:, 4] + 1.0
    S[:, 2, 2] = vals[:, 5] + 1.0
    S[:, 0, 1] = S[:, 1, 0] = vals[:, 6]
    S[:, 0, 2] = S[:, 2, 0] = vals[:, 7]
    S[:, 1, 2] = S[:, 2, 1] = vals[:, 8]
    return R @ S


_DECODE_SOLVER_CACHE: dict[tuple, object] = {}


def _decode_solver(mesh: Mesh, weights: EdgeWeights, anchor: int):
    key = (mesh.faces.tobytes(), weights.cache_token(), anchor)
    solver = _DECODE_SOLVER_CACHE.get(key)
    if solver is None:
        V = mesh.vertex_count
        edges = weights.edges
        c = weights.values
        i, j = edges[:, 0], edges[:, 1]
        rows = np.concatenate([i, j, i, j])
        cols = np.concatenate([j, i, i, j])
        vals = np.concatenate([-c, -c, c, c])
        L = sp.csr_matrix((2.0 * vals, (rows, cols)), shape=(V, V))
        keep = np.arange(V) != anchor
        A = L[keep][:, keep].tocsc()
        anchor_col = np.asarray(L[keep][:, [anchor]].todense()).ravel()
        try:
            solver = (spla.splu(A), keep, anchor_col)
        except RuntimeError as e:
            raise FeatureError(f"singular reconstruction system: {e}") from e
        _DECODE_SOLVER_CACHE[key] = solver
    return solver


def dr_decode(neutral: Mesh, feature: DRFeature, weights: EdgeWeights | None = None, anchor: int = 0) -> Mesh:
    """Reconstruct the deformed mesh whose one-ring residual the feature minimizes.

    Global translation is fixed by pinning the anchor vertex to its
    neutral position.
    """
    if feature.vertex_count != neutral.vertex_count:
        raise FeatureError("feature vertex count does not match mesh")
    if not feature.is_finite():
        raise FeatureError("feature contains non-finite values")
    if not 0 <= anchor < neutral.vertex_count:
        raise IndexError(f"anchor {anchor} out of range")
    if weights is None:
        weights = cotangent_weights(neutral)
    _check_weights(neutral, weights)

    T = feature_transforms(feature)
    p = neutral.vertices
    edges = weights.edges
    c = weights.values
    i, j = edges[:, 0], edges[:, 1]
    e = p[i] - p[j]
    Tsum = T[i] + T[j]
    contrib = c[:, None] * np.einsum("eab,eb->ea", Tsum, e)
    b = np.zeros((neutral.vertex_count, 3))
    np.add.at(b, i, contrib)
    np.add.at(b, j, -contrib)

    lu, keep, anchor_col = _decode_solver(neutral, weights, anchor)
    rhs = b[keep] - np.outer(anchor_col, p[anchor])
    sol = lu.solve(rhs)
    if not np.isfinite(sol).all():
        raise FeatureError("singular reconstruction system: disconnected component without anchor")
    out = np.empty_like(p)
    out[keep] = sol
    out[anchor] = p[anchor]
    return Mesh(out, neutral.faces, name=f"{neutral.name}:decoded")
