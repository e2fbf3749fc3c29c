"""Triangulated surface container, adjacency, per-triangle frames, OBJ I/O.

A Mesh is immutable after construction: all derived quantities (frames,
adjacency, normals) are pure functions of it, so concurrent queries are
safe. Triangle labels and named groups travel in a JSON sidecar because
the OBJ format has no label channel.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np


class MeshError(ValueError):
    pass


@dataclass
class TriangleFrame:
    """Per-triangle rigid frame: rotation R (columns), centroid T, scale s."""

    R: np.ndarray
    T: np.ndarray
    s: float


@dataclass
class EdgeAdjacency:
    """Symmetric triangle adjacency: neighbors[i] lists triangles sharing an
    edge with i, optionally augmented with cross-group nearest-neighbor pairs."""

    neighbors: list[list[int]]

    def as_sets(self) -> list[set[int]]:
        return [set(n) for n in self.neighbors]


@dataclass
class Mesh:
    """Indexed triangle surface with per-corner UVs and semantic labels.

    vertices: (V, 3) float; triangles: (F, 3) int; uvs: (F, 3, 2) in [0,1]^2;
    labels: (F,) int; groups: name -> sorted triangle-index list.
    """

    vertices: np.ndarray
    triangles: np.ndarray
    uvs: np.ndarray
    labels: np.ndarray
    groups: dict[str, list[int]] = field(default_factory=dict)

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        self.validate()

    def validate(self):
        V = len(self.vertices)
        F = len(self.triangles)
        if self.triangles.shape != (F, 3):
            raise MeshError("triangles must be (F, 3)")
        if self.uvs.shape != (F, 3, 2):
            raise MeshError("uvs must be (F, 3, 2)")
        if self.labels.shape != (F,):
            raise MeshError("labels must be (F,)")
        if F and (self.triangles.min() < 0 or self.triangles.max() >= V):
            raise MeshError("triangle index out of range")
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex")
        if not np.all(np.isfinite(self.uvs)):
            raise MeshError("non-finite UV")
        if F and np.any(face_areas(self) < 1e-14):
            bad = int(np.argmin(face_areas(self)))
            raise MeshError(f"zero-area triangle {bad}")
        for name, idx in self.groups.items():
            arr = np.asarray(idx)
            if len(arr) and (arr.min() < 0 or arr.max() >= F):
                raise MeshError(f"group {name!r} index out of range")

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def bbox_diagonal(self) -> float:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        return float(np.linalg.norm(hi - lo))


def face_corners(mesh: Mesh) -> np.ndarray:
    """(F, 3, 3) corner positions in winding order."""
    return mesh.vertices[mesh.triangles]


def face_areas(mesh: Mesh) -> np.ndarray:
    c = face_corners(mesh)
    return 0.5 * np.linalg.norm(np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0]), axis=-1)


def face_normals(mesh: Mesh) -> np.ndarray:
    c = face_corners(mesh)
    n = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])
    return n / np.linalg.norm(n, axis=-1, keepdims=True)


def face_centroids(mesh: Mesh) -> np.ndarray:
    return face_corners(mesh).mean(axis=1)


def vertex_normals(mesh: Mesh) -> np.ndarray:
    """Area-weighted vertex normals."""
    c = face_corners(mesh)
    fn = np.cross(c[:, 1] - c[:, 0], c[:, 2] - c[:, 0])  # area-weighted
    vn = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(vn, mesh.triangles[:, k], fn)
    norm = np.linalg.norm(vn, axis=-1, keepdims=True)
    return vn / np.where(norm > 1e-14, norm, 1.0)


def vertex_adjacency(mesh: Mesh) -> list[list[int]]:
    """Edge-connected vertex neighbors, sorted."""
    nbr: list[set[int]] = [set() for _ in range(len(mesh.vertices))]
    for a, b, c in mesh.triangles:
        nbr[a].update((b, c))
        nbr[b].update((a, c))
        nbr[c].update((a, b))
    return [sorted(s) for s in nbr]


def build_adjacency(mesh: Mesh) -> EdgeAdjacency:
    """Edge-sharing triangle adjacency; rejects non-manifold edges."""
    edge_map: dict[tuple[int, int], list[int]] = {}
    for t, (a, b, c) in enumerate(mesh.triangles):
        for e in ((a, b), (b, c), (c, a)):
            key = (int(min(e)), int(max(e)))
            edge_map.setdefault(key, []).append(t)
    neighbors: list[set[int]] = [set() for _ in range(mesh.num_triangles)]
    for key, tris in edge_map.items():
        if len(tris) > 2:
            raise MeshError(f"non-manifold edge {key} shared by {len(tris)} triangles")
        if len(tris) == 2:
            neighbors[tris[0]].add(tris[1])
            neighbors[tris[1]].add(tris[0])
    return EdgeAdjacency([sorted(s) for s in neighbors])


def augment_cross_group(adj: EdgeAdjacency, mesh: Mesh, group_a: str, group_b: str) -> EdgeAdjacency:
    """Add mutual nearest-neighbor centroid pairs between two triangle groups."""
    ia = np.asarray(mesh.groups.get(group_a, []), dtype=np.int64)
    ib = np.asarray(mesh.groups.get(group_b, []), dtype=np.int64)
    if len(ia) == 0 or len(ib) == 0:
        raise MeshError(f"cross-group pairing needs non-empty groups ({group_a!r}, {group_b!r})")
    cen = face_centroids(mesh)
    d = np.linalg.norm(cen[ia][:, None, :] - cen[ib][None, :, :], axis=-1)
    nn_ab = np.argmin(d, axis=1)  # for each a, nearest b (first index on ties)
    nn_ba = np.argmin(d, axis=0)  # for each b, nearest a
    neighbors = [list(n) for n in adj.neighbors]
    for k, a in enumerate(ia):
        j = nn_ab[k]
        if nn_ba[j] == k:  # mutual pair
            b = int(ib[j])
            a = int(a)
            if b not in neighbors[a]:
                neighbors[a].append(b)
            if a not in neighbors[b]:
                neighbors[b].append(a)
    return EdgeAdjacency([sorted(n) for n in neighbors])


def _frame_edge_indices(tri: np.ndarray) -> tuple[int, int, int]:
    """Corner order for the consistently chosen edge: start at the corner with
    the lowest vertex index, proceed in winding order."""
    k = int(np.argmin(tri))
    return k, (k + 1) % 3, (k + 2) % 3


def edge_frame(mesh: Mesh, tri: int) -> TriangleFrame:
    """Frame from the consistently chosen edge and Gram-Schmidt in-plane axis.

    s = (|edge| + altitude(edge)) / 2; T = centroid; columns of R are the
    normalized edge, its in-plane complement, and their cross product.
    """
    corners = mesh.vertices[mesh.triangles[tri]]
    i0, i1, i2 = _frame_edge_indices(mesh.triangles[tri])
    p0, p1, p2 = corners[i0], corners[i1], corners[i2]
    e0 = p1 - p0
    e1 = p2 - p0
    len0 = np.linalg.norm(e0)
    area2 = np.linalg.norm(np.cross(e0, e1))
    if len0 < 1e-14 or area2 < 1e-14:
        raise MeshError(f"degenerate triangle {tri}")
    c0 = e0 / len0
    c1 = e1 - np.dot(e1, c0) * c0
    c1 /= np.linalg.norm(c1)
    c2 = np.cross(c0, c1)
    altitude = area2 / len0
    s = 0.5 * (len0 + altitude)
    return TriangleFrame(np.stack([c0, c1, c2], axis=1), corners.mean(axis=0), float(s))


def uv_frame(mesh: Mesh, tri: int, degenerate_flags: list | None = None) -> TriangleFrame:
    """Frame whose first axis follows the world-space direction of increasing U.

    V is orthogonalized against U; the third column is the face normal with
    the in-plane axis flipped if needed so det(R) = +1. Falls back to
    edge_frame (and records the index) when the UV mapping is degenerate.
    """
    corners = mesh.vertices[mesh.triangles[tri]]
    uv = mesh.uvs[tri]
    dp1 = corners[1] - corners[0]
    dp2 = corners[2] - corners[0]
    du1, dv1 = uv[1] - uv[0]
    du2, dv2 = uv[2] - uv[0]
    det = du1 * dv2 - du2 * dv1
    if abs(det) < 1e-12:
        if degenerate_flags is not None:
            degenerate_flags.append(tri)
        return edge_frame(mesh, tri)
    inv = 1.0 / det
    tangent = inv * (dv2 * dp1 - dv1 * dp2)   # world direction of increasing U
    bitangent = inv * (-du2 * dp1 + du1 * dp2)
    tn = np.linalg.norm(tangent)
    nrm = np.cross(dp1, dp2)
    nn = np.linalg.norm(nrm)
    if tn < 1e-14 or nn < 1e-14:
        if degenerate_flags is not None:
            degenerate_flags.append(tri)
        return edge_frame(mesh, tri)
    c0 = tangent / tn
    n = nrm / nn
    c1 = bitangent - np.dot(bitangent, c0) * c0
    c1n = np.linalg.norm(c1)
    c1 = np.cross(n, c0) if c1n < 1e-14 else c1 / c1n
    R = np.stack([c0, c1, n], axis=1)
    if np.linalg.det(R) < 0:
        R[:, 1] = -R[:, 1]
    ef = edge_frame(mesh, tri)
    return TriangleFrame(R, ef.T, ef.s)


def all_frames(mesh: Mesh, kind: str = "uv") -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Batch frames: (R (F,3,3), T (F,3), s (F,)). kind: 'uv' or 'edge'."""
    F = mesh.num_triangles
    R = np.empty((F, 3, 3))
    T = np.empty((F, 3))
    s = np.empty(F)
    fn = uv_frame if kind == "uv" else edge_frame
    for i in range(F):
        f = fn(mesh, i)
        R[i], T[i], s[i] = f.R, f.T, f.s
    return R, T, s


def uv_lifted_mesh(mesh: Mesh) -> Mesh:
    """Mesh whose vertices are the UV corners lifted to (u, v, 0).

    Corner UVs are per-face, so the lifted mesh has 3F unshared vertices;
    frames built on it define the UVW texture-space transform.
    """
    F = mesh.num_triangles
    verts = np.zeros((3 * F, 3))
    verts[:, :2] = mesh.uvs.reshape(-1, 2)
    tris = np.arange(3 * F, dtype=np.int64).reshape(F, 3)
    return Mesh(verts, tris, mesh.uvs.copy(), mesh.labels.copy(), dict(mesh.groups))


def subdivide_midpoint(mesh: Mesh) -> tuple[Mesh, np.ndarray]:
    """1 -> 4 midpoint split preserving original vertices bitwise.

    Returns (mesh', parent) where parent[i'] is the source triangle of each
    child. Children inherit the parent label; groups follow membership.
    """
    verts = [v for v in mesh.vertices]
    cache: dict[tuple[int, int], int] = {}

    def midpoint(a: int, b: int) -> int:
        key = (min(a, b), max(a, b))
        if key not in cache:
            verts.append(0.5 * (mesh.vertices[a] + mesh.vertices[b]))
            cache[key] = len(verts) - 1
        return cache[key]

    tris = []
    uvs = []
    labels = []
    parent = []
    for t, (a, b, c) in enumerate(mesh.triangles):
        ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
        ua, ub, uc = mesh.uvs[t]
        uab, ubc, uca = 0.5 * (ua + ub), 0.5 * (ub + uc), 0.5 * (uc + ua)
        for tri, uv in (
            ((a, ab, ca), (ua, uab, uca)),
            ((b, bc, ab), (ub, ubc, uab)),
            ((c, ca, bc), (uc, uca, ubc)),
            ((ab, bc, ca), (uab, ubc, uca)),
        ):
            tris.append(tri)
            uvs.append(uv)
            labels.append(mesh.labels[t])
            parent.append(t)
    parent = np.asarray(parent, dtype=np.int64)
    groups = {
        name: sorted(np.nonzero(np.isin(parent, np.asarray(idx, dtype=np.int64)))[0].tolist())
        for name, idx in mesh.groups.items()
    }
    out = Mesh(np.asarray(verts), np.asarray(tris, dtype=np.int64),
               np.asarray(uvs), np.asarray(labels, dtype=np.int64), groups)
    return out, parent


def point_mesh_distance(points: np.ndarray, mesh: Mesh) -> np.ndarray:
    """Exact distance from each point to the closest point on the surface."""
    c = face_corners(mesh)
    a, b, cc = c[:, 0], c[:, 1], c[:, 2]
    ab = b - a
    ac = cc - a
    best = np.full(len(points), np.inf)
    for t in range(len(a)):
        # Ericson's closest-point-on-triangle, vectorized over points
        ap = points - a[t]
        d1 = ap @ ab[t]
        d2 = ap @ ac[t]
        bp = points - b[t]
        d3 = bp @ ab[t]
        d4 = bp @ ac[t]
        cp = points - cc[t]
        d5 = cp @ ab[t]
        d6 = cp @ ac[t]
        va = d3 * d6 - d5 * d4
        vb = d5 * d2 - d1 * d6
        vc = d1 * d4 - d3 * d2
        denom = va + vb + vc
        v = np.where(np.abs(denom) > 1e-300, vb / denom, 0.0)
        w = np.where(np.abs(denom) > 1e-300, vc / denom, 0.0)
        closest = a[t] + v[:, None] * ab[t] + w[:, None] * ac[t]
        # vertex regions
        closest = np.where(((d1 <= 0) & (d2 <= 0))[:, None], a[t], closest)
        closest = np.where(((d3 >= 0) & (d4 <= d3))[:, None], b[t], closest)
        closest = np.where(((d6 >= 0) & (d5 <= d6))[:, None], cc[t], closest)
        # edge regions
        e_ab = (vc <= 0) & (d1 >= 0) & (d3 <= 0)
        tt = np.where(np.abs(d1 - d3) > 1e-300, d1 / np.where(e_ab, d1 - d3, 1.0), 0.0)
        closest = np.where(e_ab[:, None], a[t] + np.clip(tt, 0, 1)[:, None] * ab[t], closest)
        e_ac = (vb <= 0) & (d2 >= 0) & (d6 <= 0)
        tt = np.where(np.abs(d2 - d6) > 1e-300, d2 / np.where(e_ac, d2 - d6, 1.0), 0.0)
        closest = np.where(e_ac[:, None], a[t] + np.clip(tt, 0, 1)[:, None] * ac[t], closest)
        e_bc = (va <= 0) & (d4 - d3 >= 0) & (d5 - d6 >= 0)
        tt = np.where(np.abs((d4 - d3) + (d5 - d6)) > 1e-300,
                      (d4 - d3) / np.where(e_bc, (d4 - d3) + (d5 - d6), 1.0), 0.0)
        closest = np.where(e_bc[:, None], b[t] + np.clip(tt, 0, 1)[:, None] * (cc[t] - b[t]), closest)
        best = np.minimum(best, np.linalg.norm(points - closest, axis=1))
    return best


def icosphere(subdiv: int = 2, radius: float = 1.0, center=(0.0, 0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Icosahedron subdivided toward a sphere: (vertices, triangles)."""
    t = (1.0 + 5.0 ** 0.5) / 2.0
    verts = np.array([
        [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
        [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
        [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
    ], dtype=np.float64)
    verts /= np.linalg.norm(verts, axis=1)[:, None]
    faces = np.array([
        [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
        [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
        [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
        [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
    ], dtype=np.int64)
    for _ in range(subdiv):
        vlist = [v for v in verts]
        cache: dict[tuple[int, int], int] = {}

        def midpoint(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = 0.5 * (verts[a] + verts[b])
                vlist.append(m / np.linalg.norm(m))
                cache[key] = len(vlist) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        verts = np.asarray(vlist)
        faces = np.asarray(new_faces, dtype=np.int64)
    return verts * radius + np.asarray(center, dtype=np.float64), faces


def save_obj(path, mesh: Mesh) -> None:
    """Write OBJ (v / vt / f v/vt) plus the <name>.labels.json sidecar."""
    path = str(path)
    uv_flat = mesh.uvs.reshape(-1, 2)
    with open(path, "w") as f:
        f.write("# splatmesh OBJ\n")
        for v in mesh.vertices:
            f.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
        for uv in uv_flat:
            f.write(f"vt {uv[0]:.9g} {uv[1]:.9g}\n")
        for t, tri in enumerate(mesh.triangles):
            a, b, c = tri + 1
            ta, tb, tc = 3 * t + 1, 3 * t + 2, 3 * t + 3
            f.write(f"f {a}/{ta} {b}/{tb} {c}/{tc}\n")
    sidecar = {
        "format_version": 1,
        "labels": mesh.labels.tolist(),
        "groups": {k: list(map(int, v)) for k, v in mesh.groups.items()},
    }
    with open(_sidecar_path(path), "w") as f:
        json.dump(sidecar, f)


def load_obj(path) -> Mesh:
    """Parse an OBJ written by save_obj (or compatible); UVs are required."""
    path = str(path)
    verts: list[list[float]] = []
    uvs: list[list[float]] = []
    faces: list[list[int]] = []
    face_uvs: list[list[int]] = []
    with open(path) as f:
        for ln, line in enumerate(f, start=1):
            parts = line.split()
            if not parts or parts[0].startswith("#"):
                continue
            try:
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "vt":
                    uvs.append([float(x) for x in parts[1:3]])
                elif parts[0] == "f":
                    vs, ts = [], []
                    for token in parts[1:4]:
                        sub = token.split("/")
                        vs.append(int(sub[0]) - 1)
                        if len(sub) < 2 or sub[1] == "":
                            raise MeshError("UVs required")
                        ts.append(int(sub[1]) - 1)
                    faces.append(vs)
                    face_uvs.append(ts)
            except MeshError:
                raise
            except Exception as exc:
                raise MeshError(f"{path}:{ln}: malformed line: {line.strip()!r}") from exc
    if not uvs and faces:
        raise MeshError("UVs required")
    uv_arr = np.asarray(uvs)
    uvs_per_face = uv_arr[np.asarray(face_uvs, dtype=np.int64)]
    labels = np.zeros(len(faces), dtype=np.int64)
    groups: dict[str, list[int]] = {}
    try:
        with open(_sidecar_path(path)) as f:
            sidecar = json.load(f)
        labels = np.asarray(sidecar["labels"], dtype=np.int64)
        groups = {k: list(map(int, v)) for k, v in sidecar.get("groups", {}).items()}
    except FileNotFoundError:
        pass
    return Mesh(np.asarray(verts), np.asarray(faces, dtype=np.int64), uvs_per_face, labels, groups)


def _sidecar_path(path: str) -> str:
    base = path[:-4] if path.endswith(".obj") else path
    return base + ".labels.json"
