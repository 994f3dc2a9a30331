// Minimal ASCII OBJ parser for the geometry the service streams:
// `v` and triangular `f` records only. The wire format carries no
// normals, so flat per-face normals are computed here for shading.

export interface ParsedMesh {
  positions: Float32Array; // deindexed, 9 floats per triangle
  normals: Float32Array; // flat per-face normals, matching positions
  vertexCount: number;
  faceCount: number;
}

export function parseObj(text: string): ParsedMesh {
  const vertices: number[][] = [];
  const faces: number[][] = [];
  const lines = text.split("\n");
  for (let lineNo = 0; lineNo < lines.length; lineNo++) {
    const line = lines[lineNo].trim();
    if (!line || line.startsWith("#")) continue;
    const parts = line.split(/\s+/);
    if (parts[0] === "v") {
      if (parts.length < 4) throw new Error(`line ${lineNo + 1}: vertex needs 3 coordinates`);
      const xyz = parts.slice(1, 4).map(Number);
      if (xyz.some((c) => !Number.isFinite(c))) throw new Error(`line ${lineNo + 1}: bad coordinate`);
      vertices.push(xyz);
    } else if (parts[0] === "f") {
      if (parts.length !== 4) throw new Error(`line ${lineNo + 1}: only triangular faces supported`);
      const idx = parts.slice(1).map((ref) => {
        const head = ref.split("/")[0];
        const i = Number(head);
        if (!Number.isInteger(i) || i <= 0 || i > vertices.length) {
          throw new Error(`line ${lineNo + 1}: face index ${head} out of range`);
        }
        return i - 1;
      });
      faces.push(idx);
    }
  }
  if (!vertices.length || !faces.length) throw new Error("empty mesh");

  const positions = new Float32Array(faces.length * 9);
  const normals = new Float32Array(faces.length * 9);
  faces.forEach((f, t) => {
    const [a, b, c] = f.map((i) => vertices[i]);
    const u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
    const v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
    let n = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    const len = Math.hypot(n[0], n[1], n[2]) || 1;
    n = n.map((x) => x / len);
    [a, b, c].forEach((p, k) => {
      positions.set(p, t * 9 + k * 3);
      normals.set(n, t * 9 + k * 3);
    });
  });
  return { positions, normals, vertexCount: vertices.length, faceCount: faces.length };
}

export function boundingRadius(mesh: ParsedMesh): number {
  let max = 0;
  for (let i = 0; i < mesh.positions.length; i += 3) {
    const r = Math.hypot(mesh.positions[i], mesh.positions[i + 1], mesh.positions[i + 2]);
    if (r > max) max = r;
  }
  return max || 1;
}
