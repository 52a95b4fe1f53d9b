"""Triangle meshes: I/O, manifold validation and per-vertex geometry."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy import sparse


class MeshError(ValueError):
    """Raised for malformed or invalid meshes."""


class NonManifoldError(MeshError):
    def __init__(self, message, edge=None, vertex=None):
        super().__init__(message)
        self.edge = edge
        self.vertex = vertex


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle mesh with an optional derived geometry block.

    Parameters
    ----------
    positions : (V, 3) float array
    triangles : (F, 3) int array, counter-clockwise oriented.

    The derived fields (``normals``, ``one_ring_area``, ``k_max``, ``k_min``,
    ``dir_max``) are ``None`` until :func:`vertex_geometry` fills them.
    """

    positions: np.ndarray
    triangles: np.ndarray
    normals: np.ndarray | None = None
    one_ring_area: np.ndarray | None = None
    k_max: np.ndarray | None = None
    k_min: np.ndarray | None = None
    dir_max: np.ndarray | None = None
    degenerate_fit: np.ndarray | None = None

    def __post_init__(self):
        pos = np.ascontiguousarray(self.positions, dtype=np.float64)
        tri = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if pos.ndim != 2 or pos.shape[1] != 3:
            raise MeshError(f"positions must have shape (V, 3), got {pos.shape}")
        if tri.size == 0:
            tri = tri.reshape(0, 3)
        if tri.ndim != 2 or tri.shape[1] != 3:
            raise MeshError(f"triangles must have shape (F, 3), got {tri.shape}")
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "triangles", tri)

    @property
    def n_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def n_faces(self) -> int:
        return self.triangles.shape[0]

    @property
    def n_edges(self) -> int:
        return self.edges.shape[0]

    @property
    def has_geometry(self) -> bool:
        return self.normals is not None

    @cached_property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)``, ``i < j``, lexicographically sorted."""
        he = self.halfedges
        e = np.sort(he, axis=1)
        return np.unique(e, axis=0)

    @cached_property
    def halfedges(self) -> np.ndarray:
        t = self.triangles
        return np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])

    @cached_property
    def edge_face_count(self) -> np.ndarray:
        e = np.sort(self.halfedges, axis=1)
        idx = self.edge_index(e[:, 0], e[:, 1])
        return np.bincount(idx, minlength=self.n_edges)

    @cached_property
    def boundary_vertices(self) -> np.ndarray:
        b = self.edges[self.edge_face_count == 1]
        mask = np.zeros(self.n_vertices, dtype=bool)
        mask[b.ravel()] = True
        return mask

    @property
    def has_boundary(self) -> bool:
        return bool(np.any(self.edge_face_count == 1))

    @property
    def euler_characteristic(self) -> int:
        return self.n_vertices - self.n_edges + self.n_faces

    def edge_index(self, i, j) -> np.ndarray:
        """Index into :attr:`edges` of the undirected edges ``(i, j)``."""
        i = np.asarray(i, dtype=np.int64)
        j = np.asarray(j, dtype=np.int64)
        a, b = np.minimum(i, j), np.maximum(i, j)
        key = a * self.n_vertices + b
        ekey = self.edges[:, 0] * self.n_vertices + self.edges[:, 1]
        pos = np.searchsorted(ekey, key)
        pos = np.clip(pos, 0, len(ekey) - 1)
        if np.any(ekey[pos] != key):
            raise KeyError("not an edge of the mesh")
        return pos

    @cached_property
    def adjacency(self) -> sparse.csr_matrix:
        """Symmetric vertex adjacency; column indices sorted per row."""
        e = self.edges
        n = self.n_vertices
        rows = np.concatenate([e[:, 0], e[:, 1]])
        cols = np.concatenate([e[:, 1], e[:, 0]])
        a = sparse.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
        a.sort_indices()
        return a

    @property
    def neighbor_ptr(self) -> np.ndarray:
        return self.adjacency.indptr.astype(np.int64)

    @property
    def neighbor_idx(self) -> np.ndarray:
        return self.adjacency.indices.astype(np.int64)

    def neighbors(self, v: int) -> np.ndarray:
        a = self.adjacency
        return a.indices[a.indptr[v]:a.indptr[v + 1]].astype(np.int64)

    @cached_property
    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self._face_cross, axis=1)

    @cached_property
    def _face_cross(self) -> np.ndarray:
        p = self.positions
        t = self.triangles
        return np.cross(p[t[:, 1]] - p[t[:, 0]], p[t[:, 2]] - p[t[:, 0]])

    @property
    def surface_area(self) -> float:
        return float(self.face_areas.sum())

    def with_positions(self, positions) -> "TriMesh":
        return TriMesh(np.asarray(positions, dtype=np.float64), self.triangles)

    def quality_report(self) -> dict:
        rep = {
            "vertices": self.n_vertices,
            "faces": self.n_faces,
            "edges": self.n_edges,
            "euler_characteristic": self.euler_characteristic,
            "boundary": self.has_boundary,
        }
        if self.degenerate_fit is not None:
            rep["degenerate_fit"] = [int(i) for i in np.flatnonzero(self.degenerate_fit)]
        return rep


def validate(mesh: TriMesh) -> None:
    """Check the manifold invariants, raising :class:`MeshError` on failure."""
    if mesh.n_vertices == 0 or mesh.n_faces == 0:
        raise MeshError("empty mesh")
    t = mesh.triangles
    if t.min() < 0 or t.max() >= mesh.n_vertices:
        raise MeshError("triangle index out of range")
    if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
        bad = int(np.flatnonzero((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2]))[0])
        raise MeshError(f"triangle {bad} repeats a vertex index: {t[bad].tolist()}")
    scale = np.ptp(mesh.positions, axis=0).max() if mesh.n_vertices else 1.0
    tiny = 1e-14 * max(scale, 1e-300) ** 2
    if np.any(mesh.face_areas <= tiny):
        bad = int(np.argmin(mesh.face_areas))
        raise MeshError(f"triangle {bad} has zero area")

    counts = mesh.edge_face_count
    if np.any(counts > 2):
        i, j = mesh.edges[np.argmax(counts > 2)]
        raise NonManifoldError(
            f"non-manifold edge ({i}, {j}) shared by {counts.max()} triangles", edge=(int(i), int(j))
        )
    # consistent orientation: every directed half-edge appears at most once
    he = mesh.halfedges
    key = he[:, 0] * mesh.n_vertices + he[:, 1]
    uniq, cnt = np.unique(key, return_counts=True)
    if np.any(cnt > 1):
        k = uniq[np.argmax(cnt > 1)]
        i, j = divmod(int(k), mesh.n_vertices)
        raise NonManifoldError(f"inconsistent orientation at edge ({i}, {j})", edge=(i, j))

    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[t.ravel()] = True
    if not used.all():
        v = int(np.flatnonzero(~used)[0])
        raise MeshError(f"vertex {v} is not referenced by any triangle")

    _check_vertex_manifold(mesh)


def _check_vertex_manifold(mesh: TriMesh) -> None:
    # the link of every vertex must be a single path or cycle
    t = mesh.triangles
    n = mesh.n_vertices
    corner_v = t.ravel()
    nxt = t[:, [1, 2, 0]].ravel()
    prv = t[:, [2, 0, 1]].ravel()
    order = np.argsort(corner_v, kind="stable")
    corner_v, nxt, prv = corner_v[order], nxt[order], prv[order]
    starts = np.searchsorted(corner_v, np.arange(n + 1))
    for v in range(n):
        a, b = starts[v], starts[v + 1]
        if b - a <= 1:
            continue
        succ = dict(zip(nxt[a:b].tolist(), prv[a:b].tolist()))
        pred = {w: u for u, w in succ.items()}
        # walk from a path start if any, else from an arbitrary link vertex
        heads = [u for u in succ if u not in pred]
        if len(heads) > 1:
            raise NonManifoldError(f"non-manifold vertex {v}", vertex=v)
        u = heads[0] if heads else next(iter(succ))
        seen = 0
        cur = u
        while cur in succ:
            seen += 1
            cur = succ[cur]
            if cur == u:
                break
        if seen != b - a:
            raise NonManifoldError(f"non-manifold vertex {v}", vertex=v)


# ---------------------------------------------------------------------------
# file I/O


def _triangulate(poly):
    # fan split: (v0,v1,v2,v3) -> (v0,v1,v2) + (v0,v2,v3)
    return [(poly[0], poly[k], poly[k + 1]) for k in range(1, len(poly) - 1)]


def read_off(path) -> TriMesh:
    text = Path(path).read_text()
    tokens = []
    for line in text.splitlines():
        line = line.split("#", 1)[0].strip()
        if line:
            tokens.append(line.split())
    if not tokens:
        raise MeshError(f"{path}: empty file")
    head = tokens[0]
    if not head[0].upper().endswith("OFF"):
        raise MeshError(f"{path}: missing OFF header")
    rest = head[1:]
    lines = tokens[1:]
    if not rest:
        if not lines:
            raise MeshError(f"{path}: missing counts")
        rest, lines = lines[0], lines[1:]
    try:
        nv, nf = int(rest[0]), int(rest[1])
        verts = np.array([[float(x) for x in ln[:3]] for ln in lines[:nv]], dtype=np.float64)
        faces = []
        for ln in lines[nv:nv + nf]:
            k = int(ln[0])
            poly = [int(x) for x in ln[1:1 + k]]
            if len(poly) != k or k < 3:
                raise MeshError(f"{path}: malformed face record {' '.join(ln)}")
            faces.extend(_triangulate(poly))
    except (ValueError, IndexError) as exc:
        raise MeshError(f"{path}: parse failure ({exc})") from exc
    if verts.shape != (nv, 3) or len(faces) < 1 and nf > 0:
        raise MeshError(f"{path}: truncated file")
    return TriMesh(verts.reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def read_obj(path) -> TriMesh:
    verts, faces = [], []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        parts = line.split("#", 1)[0].split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(x) for x in parts[1:4]])
                if len(verts[-1]) != 3:
                    raise ValueError("vertex needs 3 coordinates")
            elif parts[0] == "f":
                poly = []
                for ref in parts[1:]:
                    i = int(ref.split("/")[0])
                    poly.append(i - 1 if i > 0 else len(verts) + i)
                if len(poly) < 3:
                    raise ValueError("face needs 3 vertices")
                faces.extend(_triangulate(poly))
        except ValueError as exc:
            raise MeshError(f"{path}:{lineno}: parse failure ({exc})") from exc
    return TriMesh(np.array(verts, dtype=np.float64).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path, check: bool = True) -> TriMesh:
    """Read an ASCII OFF or OBJ file and validate it.

    Polygons are fan-triangulated, so a quad ``(v0, v1, v2, v3)`` becomes
    ``(v0, v1, v2)`` and ``(v0, v2, v3)``.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".off":
        mesh = read_off(path)
    elif suffix == ".obj":
        mesh = read_obj(path)
    else:
        raise MeshError(f"{path}: unsupported mesh format {suffix!r}")
    if check:
        validate(mesh)
    return mesh


def write_off(path, mesh: TriMesh) -> None:
    with open(path, "w") as f:
        f.write(f"OFF\n{mesh.n_vertices} {mesh.n_faces} 0\n")
        for p in mesh.positions:
            f.write(f"{p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
        for t in mesh.triangles:
            f.write(f"3 {t[0]} {t[1]} {t[2]}\n")


def write_obj(path, mesh: TriMesh, colors=None, lines=None) -> None:
    """Write an OBJ file, optionally with per-vertex RGB colors in [0, 1]
    and extra polyline segments (pairs of vertex indices)."""
    with open(path, "w") as f:
        for i, p in enumerate(mesh.positions):
            if colors is None:
                f.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g}\n")
            else:
                c = colors[i]
                f.write(f"v {p[0]:.17g} {p[1]:.17g} {p[2]:.17g} {c[0]:.6f} {c[1]:.6f} {c[2]:.6f}\n")
        for t in mesh.triangles:
            f.write(f"f {t[0] + 1} {t[1] + 1} {t[2] + 1}\n")
        if lines is not None:
            for a, b in lines:
                f.write(f"l {a + 1} {b + 1}\n")


# ---------------------------------------------------------------------------
# derived geometry


@dataclass(frozen=True, eq=False)
class TangentBasis:
    """Per-vertex orthonormal right-handed frames ``(e0, e1, n)``."""

    e0: np.ndarray
    e1: np.ndarray
    n: np.ndarray

    def to_local(self, vectors: np.ndarray) -> np.ndarray:
        """Complex tangent coordinates ``(v.e0) + i (v.e1)`` of per-vertex vectors."""
        return np.einsum("ij,ij->i", vectors, self.e0) + 1j * np.einsum("ij,ij->i", vectors, self.e1)

    def to_world(self, z: np.ndarray) -> np.ndarray:
        z = np.asarray(z)
        return z.real[:, None] * self.e0 + z.imag[:, None] * self.e1

    def rotated(self, angles) -> "TangentBasis":
        """Basis rotated about the normal by per-vertex ``angles``."""
        c, s = np.cos(angles)[:, None], np.sin(angles)[:, None]
        e0 = c * self.e0 + s * self.e1
        return TangentBasis(e0, np.cross(self.n, e0), self.n)


def _normalize(v):
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def vertex_normals(mesh: TriMesh) -> np.ndarray:
    cross = mesh._face_cross
    n = np.zeros_like(mesh.positions)
    for c in range(3):
        np.add.at(n, mesh.triangles[:, c], cross)
    return _normalize(n)


def basis_from_normals(normals: np.ndarray) -> TangentBasis:
    n = np.asarray(normals, dtype=np.float64)
    axis = np.argmin(np.abs(n), axis=1)  # first minimum breaks ties by lowest index
    a = np.zeros_like(n)
    a[np.arange(len(n)), axis] = 1.0
    e0 = _normalize(a - np.einsum("ij,ij->i", a, n)[:, None] * n)
    e1 = np.cross(n, e0)
    return TangentBasis(e0, e1, n)


def tangent_basis(mesh: TriMesh) -> TangentBasis:
    """Per-vertex tangent basis; ``e0`` projects the global axis least
    aligned with the normal, ``e1 = n x e0``."""
    if mesh.normals is None:
        raise MeshError("vertex normals missing; call vertex_geometry first")
    return basis_from_normals(mesh.normals)


def _two_ring(mesh: TriMesh) -> sparse.csr_matrix:
    a = mesh.adjacency
    r2 = (a + a @ a).tocsr()
    r2.setdiag(0)
    r2.eliminate_zeros()
    r2.sort_indices()
    return r2


def vertex_geometry(mesh: TriMesh) -> TriMesh:
    """Fill normals, one-ring areas and principal curvatures.

    Curvatures come from a least-squares fit of ``z = (a u^2 + 2 b uv + c v^2)/2``
    to the 2-ring expressed in the vertex tangent frame. Vertices with fewer
    than five 2-ring neighbours fall back to zero curvature and ``dir_max = e0``
    and are flagged in ``degenerate_fit``.
    """
    n = vertex_normals(mesh)
    area = np.zeros(mesh.n_vertices)
    for c in range(3):
        np.add.at(area, mesh.triangles[:, c], mesh.face_areas)
    basis = basis_from_normals(n)

    r2 = _two_ring(mesh)
    rows = np.repeat(np.arange(mesh.n_vertices), np.diff(r2.indptr))
    cols = r2.indices
    d = mesh.positions[cols] - mesh.positions[rows]
    u = np.einsum("ij,ij->i", d, basis.e0[rows])
    v = np.einsum("ij,ij->i", d, basis.e1[rows])
    z = np.einsum("ij,ij->i", d, n[rows])
    A = np.stack([0.5 * u * u, u * v, 0.5 * v * v], axis=1)
    AtA = np.zeros((mesh.n_vertices, 3, 3))
    Atz = np.zeros((mesh.n_vertices, 3))
    np.add.at(AtA, rows, A[:, :, None] * A[:, None, :])
    np.add.at(Atz, rows, A * z[:, None])

    count = np.diff(r2.indptr)
    det = np.linalg.det(AtA)
    scale = np.einsum("ijj->i", AtA) ** 3 + 1e-300
    degenerate = (count < 5) | (np.abs(det) <= 1e-12 * scale)
    coef = np.zeros((mesh.n_vertices, 3))
    ok = ~degenerate
    if ok.any():
        coef[ok] = np.linalg.solve(AtA[ok], Atz[ok][:, :, None])[:, :, 0]
    # shape operator with outward normals: convex surfaces get positive curvature
    H = -np.stack([np.stack([coef[:, 0], coef[:, 1]], 1), np.stack([coef[:, 1], coef[:, 2]], 1)], 1)
    evals, evecs = np.linalg.eigh(H)
    k_min, k_max = evals[:, 0], evals[:, 1]
    dmax = evecs[:, 0, 1][:, None] * basis.e0 + evecs[:, 1, 1][:, None] * basis.e1
    dmax[degenerate] = basis.e0[degenerate]
    k_min = np.where(degenerate, 0.0, k_min)
    k_max = np.where(degenerate, 0.0, k_max)
    # sign fixed by the first (lowest-index) neighbour so it follows rigid motions
    a = mesh.adjacency
    first = a.indices[a.indptr[:-1]]
    ref = mesh.positions[first] - mesh.positions
    flip = np.einsum("ij,ij->i", dmax, ref) < 0
    dmax[flip] *= -1.0
    return dataclasses.replace(
        mesh,
        normals=n,
        one_ring_area=area,
        k_max=k_max,
        k_min=k_min,
        dir_max=_normalize(dmax),
        degenerate_fit=degenerate,
    )


def prepare(mesh: TriMesh) -> tuple[TriMesh, TangentBasis]:
    """Validate, derive geometry and build the tangent basis."""
    validate(mesh)
    mesh = vertex_geometry(mesh)
    return mesh, tangent_basis(mesh)


def angle_defects(mesh: TriMesh) -> np.ndarray:
    """Per-vertex angle defect ``2 pi - sum of corner angles`` (``pi - ...`` on the boundary)."""
    p = mesh.positions
    t = mesh.triangles
    total = np.zeros(mesh.n_vertices)
    for c in range(3):
        a = p[t[:, (c + 1) % 3]] - p[t[:, c]]
        b = p[t[:, (c + 2) % 3]] - p[t[:, c]]
        ang = np.arctan2(np.linalg.norm(np.cross(a, b), axis=1), np.einsum("ij,ij->i", a, b))
        np.add.at(total, t[:, c], ang)
    full = np.where(mesh.boundary_vertices, np.pi, 2 * np.pi)
    return full - total
