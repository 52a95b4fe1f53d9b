"""Mesh hierarchies: QEM edge collapse, vertex nesting and cross-level frames."""

from __future__ import annotations

import dataclasses
import heapq
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import frames as fr
from .mesh import TangentBasis, TriMesh, prepare, validate

logger = logging.getLogger(__name__)

_COND_LIMIT = 1e8


# ---------------------------------------------------------------------------
# QEM simplification


def _face_quadrics(pos, tri):
    n = np.cross(pos[tri[:, 1]] - pos[tri[:, 0]], pos[tri[:, 2]] - pos[tri[:, 0]])
    area = 0.5 * np.linalg.norm(n, axis=1)
    n = n / np.maximum(2 * area, 1e-300)[:, None]
    d = -np.einsum("ij,ij->i", n, pos[tri[:, 0]])
    p = np.concatenate([n, d[:, None]], axis=1)
    return area[:, None, None] * p[:, :, None] * p[:, None, :]


def _boundary_quadrics(mesh: TriMesh, vq: np.ndarray) -> None:
    # planes through boundary edges, perpendicular to the adjacent face
    bmask = mesh.edge_face_count == 1
    if not bmask.any():
        return
    he = mesh.halfedges
    F = mesh.n_faces
    face_of = np.tile(np.arange(F), 3)
    eid = mesh.edge_index(he[:, 0], he[:, 1])
    sel = bmask[eid]
    pos = mesh.positions
    a, b, f = he[sel, 0], he[sel, 1], face_of[sel]
    t = mesh.triangles[f]
    fn = np.cross(pos[t[:, 1]] - pos[t[:, 0]], pos[t[:, 2]] - pos[t[:, 0]])
    fn /= np.linalg.norm(fn, axis=1, keepdims=True)
    e = pos[b] - pos[a]
    length = np.linalg.norm(e, axis=1)
    n = np.cross(e, fn)
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    d = -np.einsum("ij,ij->i", n, pos[a])
    p = np.concatenate([n, d[:, None]], axis=1)
    Q = (length ** 2)[:, None, None] * p[:, :, None] * p[:, None, :]
    np.add.at(vq, a, Q)
    np.add.at(vq, b, Q)


def _sym3_eigvals(a, b, c, d, e, f):
    # eigenvalues of [[a, d, e], [d, b, f], [e, f, c]] (closed form)
    p1 = d * d + e * e + f * f
    q = (a + b + c) / 3.0
    if p1 == 0.0:
        return sorted((a, b, c))
    p2 = (a - q) ** 2 + (b - q) ** 2 + (c - q) ** 2 + 2.0 * p1
    p = math.sqrt(p2 / 6.0)
    if p == 0.0:
        return [q, q, q]
    ba, bb, bc = (a - q) / p, (b - q) / p, (c - q) / p
    bd, be, bf = d / p, e / p, f / p
    r = 0.5 * (ba * (bb * bc - bf * bf) - bd * (bd * bc - bf * be) + be * (bd * bf - bb * be))
    r = min(1.0, max(-1.0, r))
    phi = math.acos(r) / 3.0
    l1 = q + 2.0 * p * math.cos(phi)
    l3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    return [l3, 3.0 * q - l1 - l3, l1]


def _optimal_point(Q, pa, pb):
    (a, d, e, g), (_, b, f, h), (_, _, c, k) = Q[0].tolist(), Q[1].tolist(), Q[2].tolist()
    lo, _, hi = _sym3_eigvals(a, b, c, d, e, f)
    x = None
    if lo > 0 and hi < _COND_LIMIT * lo:
        # Cramer's rule on A x = -(g, h, k)
        c00 = b * c - f * f
        c01 = e * f - d * c
        c02 = d * f - b * e
        det = a * c00 + d * c01 + e * c02
        if det != 0.0:
            c11 = a * c - e * e
            c12 = d * e - a * f
            c22 = a * b - d * d
            rx, ry, rz = -g, -h, -k
            x = np.array([
                (c00 * rx + c01 * ry + c02 * rz) / det,
                (c01 * rx + c11 * ry + c12 * rz) / det,
                (c02 * rx + c12 * ry + c22 * rz) / det,
            ])
    if x is None:
        x = 0.5 * (pa + pb)
    hv = np.append(x, 1.0)
    return x, max(float(hv @ Q @ hv), 0.0)


def _cross(u, v):
    return (u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0])


@dataclass
class SimplifyResult:
    mesh: TriMesh
    parent_of: np.ndarray
    reached: bool
    achieved: int


def simplify_qem(mesh: TriMesh, target_vertices: int) -> SimplifyResult:
    """Garland-Heckbert edge collapse down to ``target_vertices``.

    Collapses that break the link condition or flip a triangle are skipped.
    ``parent_of`` maps every input vertex to the surviving coarse vertex its
    collapse chain ends in. Priority ties (after rounding costs to 1e-12 of
    the squared bounding-box diagonal) go to the lowest ``(a, b)`` edge.
    """
    if target_vertices < 4:
        raise ValueError("target_vertices must be >= 4")
    V0 = mesh.n_vertices
    if target_vertices >= V0:
        return SimplifyResult(mesh, np.arange(V0), True, V0)

    pos = mesh.positions.copy()
    tri = mesh.triangles.copy()
    scale = float(np.sum(np.ptp(pos, axis=0) ** 2)) or 1.0
    quant = 1e-12 * scale

    vq = np.zeros((V0, 4, 4))
    fq = _face_quadrics(pos, tri)
    for c in range(3):
        np.add.at(vq, tri[:, c], fq)
    _boundary_quadrics(mesh, vq)

    vfaces: list[set[int]] = [set() for _ in range(V0)]
    for f, (a, b, c) in enumerate(tri.tolist()):
        vfaces[a].add(f)
        vfaces[b].add(f)
        vfaces[c].add(f)
    face_alive = np.ones(len(tri), dtype=bool)
    parent = np.arange(V0)
    stamp = np.zeros(V0, dtype=np.int64)
    boundary = mesh.boundary_vertices.copy()

    def neighbors(v):
        out = set()
        for f in vfaces[v]:
            out.update(tri[f].tolist())
        out.discard(v)
        return out

    def edge_faces(a, b):
        return [f for f in vfaces[a] if f in vfaces[b]]

    heap: list = []

    def push(a, b):
        if a > b:
            a, b = b, a
        Q = vq[a] + vq[b]
        x, cost = _optimal_point(Q, pos[a], pos[b])
        heapq.heappush(heap, (round(cost / quant), a, b, stamp[a], stamp[b]))

    for a, b in mesh.edges.tolist():
        push(a, b)

    def can_collapse(a, b, x):
        shared = edge_faces(a, b)
        common = neighbors(a) & neighbors(b)
        if len(shared) == 2:
            if len(common) != 2 or (boundary[a] and boundary[b]):
                return False
        elif len(shared) == 1:
            if len(common) != 1:
                return False
        else:
            return False
        xs = x.tolist()
        for v, keep in ((a, b), (b, a)):
            for f in vfaces[v]:
                t = tri[f].tolist()
                if keep in t:
                    continue
                p = [pos[i].tolist() for i in t]
                p0, p1, p2 = p
                old = _cross([p1[i] - p0[i] for i in range(3)], [p2[i] - p0[i] for i in range(3)])
                q = [xs if t[i] == v else p[i] for i in range(3)]
                q0, q1, q2 = q
                new = _cross([q1[i] - q0[i] for i in range(3)], [q2[i] - q0[i] for i in range(3)])
                dot = old[0] * new[0] + old[1] * new[1] + old[2] * new[2]
                nn = math.sqrt(new[0] ** 2 + new[1] ** 2 + new[2] ** 2)
                no = math.sqrt(old[0] ** 2 + old[1] ** 2 + old[2] ** 2)
                if nn == 0.0 or dot <= 1e-3 * no * nn:
                    return False
        return True

    alive = V0
    deferred: list = []
    last_retry = -1
    while alive > target_vertices:
        if not heap:
            if not deferred or alive == last_retry:
                break
            # neighbourhoods changed since these were rejected; try them again
            last_retry = alive
            for a, b in deferred:
                if parent[a] == a and parent[b] == b and b in neighbors(a):
                    push(a, b)
            deferred = []
            continue
        _, a, b, sa, sb = heapq.heappop(heap)
        if parent[a] != a or parent[b] != b or stamp[a] != sa or stamp[b] != sb:
            continue
        Q = vq[a] + vq[b]
        x, _ = _optimal_point(Q, pos[a], pos[b])
        if not can_collapse(a, b, x):
            deferred.append((a, b))
            continue
        # collapse b into a
        for f in edge_faces(a, b):
            face_alive[f] = False
            for v in tri[f].tolist():
                vfaces[v].discard(f)
        for f in list(vfaces[b]):
            tri[f][tri[f] == b] = a
            vfaces[a].add(f)
        vfaces[b] = set()
        boundary[a] = boundary[a] or boundary[b]
        pos[a] = x
        vq[a] = Q
        parent[b] = a
        stamp[a] += 1
        alive -= 1
        for c in sorted(neighbors(a)):
            push(a, c)

    # resolve collapse chains and compact indices
    root = parent.copy()
    while True:
        nxt = root[root]
        if np.array_equal(nxt, root):
            break
        root = nxt
    survivors = np.flatnonzero(parent == np.arange(V0))
    remap = -np.ones(V0, dtype=np.int64)
    remap[survivors] = np.arange(len(survivors))
    coarse = TriMesh(pos[survivors], remap[tri[face_alive]])
    reached = alive <= target_vertices
    if not reached:
        logger.warning("QEM stopped at %d vertices (target %d)", alive, target_vertices)
    return SimplifyResult(coarse, remap[root], reached, alive)


# ---------------------------------------------------------------------------
# hierarchy


@dataclass(eq=False)
class Level:
    mesh: TriMesh
    basis: TangentBasis
    conn: fr.Connection
    field: fr.RoSyField
    atlas: fr.FrameAtlas

    @property
    def n_vertices(self) -> int:
        return self.mesh.n_vertices


@dataclass(eq=False)
class Hierarchy:
    """Levels ordered fine to coarse. ``parent_of[k]`` and ``group_offset[k]``
    map vertices of level ``k`` to level ``k + 1``."""

    levels: list[Level]
    parent_of: list[np.ndarray] = field(default_factory=list)
    group_offset: list[np.ndarray] = field(default_factory=list)
    reached: list[bool] = field(default_factory=list)
    solve_seconds: float = 0.0

    @property
    def N(self) -> int:
        return self.levels[0].atlas.N

    def __len__(self):
        return len(self.levels)

    def sizes(self) -> list[int]:
        return [lv.n_vertices for lv in self.levels]


def align_rotate(vectors, n_from, n_to):
    """Apply the minimal rotation taking ``n_from`` to ``n_to`` (row-wise)."""
    k = np.cross(n_from, n_to)
    c = np.einsum("ij,ij->i", n_from, n_to)
    out = np.empty_like(vectors)
    ok = c > -1 + 1e-12
    kv = np.cross(k[ok], vectors[ok])
    kd = np.einsum("ij,ij->i", k[ok], vectors[ok])
    out[ok] = vectors[ok] * c[ok, None] + kv + k[ok] * (kd / (1 + c[ok]))[:, None]
    if np.any(~ok):
        # antipodal normals: rotate by pi about an axis perpendicular to n_from
        nf = n_from[~ok]
        ax = np.cross(nf, np.eye(3)[np.argmin(np.abs(nf), axis=1)])
        ax /= np.linalg.norm(ax, axis=1, keepdims=True)
        v = vectors[~ok]
        out[~ok] = 2 * ax * np.einsum("ij,ij->i", ax, v)[:, None] - v
    return out


def prolong_field(coarse: Level, fine: Level, parent_of: np.ndarray) -> np.ndarray:
    """Copy each parent's field to its children, re-expressed in the child basis."""
    N = coarse.field.N
    u = np.exp(1j * np.angle(coarse.field.v) / N)
    d = coarse.basis.to_world(u)[parent_of]
    d = align_rotate(d, coarse.basis.n[parent_of], fine.basis.n)
    z = fine.basis.to_local(d)
    return np.exp(1j * N * np.angle(z))


def cross_level_offsets(fine: Level, coarse: Level, parent_of: np.ndarray) -> np.ndarray:
    """Offset ``g`` per fine vertex such that fine frame ``(i + g) mod N``
    lines up with frame ``i`` of its parent."""
    N = fine.atlas.N
    e0, _ = fine.atlas.axes(0)
    d = align_rotate(e0, fine.basis.n, coarse.basis.n[parent_of])
    z = np.einsum("ij,ij->i", d, coarse.basis.e0[parent_of]) + 1j * np.einsum(
        "ij,ij->i", d, coarse.basis.e1[parent_of]
    )
    beta = np.angle(z)
    q = (coarse.atlas.angles[parent_of] - beta) * N / (2 * np.pi)
    return np.mod(np.ceil(q - 0.5), N).astype(np.int64)


def make_level(mesh: TriMesh, N: int, lam: float, seed: int = 0, x0=None, maxiter=None,
               weighting: str = "uniform", root_shift=0) -> Level:
    if mesh.normals is None:
        mesh, basis = prepare(mesh)
    else:
        from .mesh import tangent_basis
        basis = tangent_basis(mesh)
    conn = fr.connection_coefficients(mesh, basis)
    fld = fr.solve_rosy(mesh, conn, basis, N, lam, seed, x0=x0, maxiter=maxiter, weighting=weighting)
    atlas = fr.frame_atlas(fld, basis, conn, root_shift)
    return Level(mesh, basis, conn, fld, atlas)


def level_targets_from_ratio(n_vertices: int, levels: int, ratio: float = 3.0) -> list[int]:
    return [max(4, int(round(n_vertices / ratio ** k))) for k in range(levels)]


def build_hierarchy(
    mesh: TriMesh,
    level_targets: list[int],
    N: int = fr.DEFAULT_N,
    lam: float = fr.DEFAULT_LAMBDA,
    seed: int = 0,
    multiscale: bool = True,
    refine_iters: int = 50,
    weighting: str = "uniform",
) -> Hierarchy:
    """Simplify level by level, then solve frames coarse to fine.

    ``level_targets[0]`` is the finest level; the input is simplified to it
    when larger. With ``multiscale`` each finer level starts from the
    prolonged parent field and runs at most ``refine_iters`` CG iterations.
    """
    targets = list(level_targets)
    if any(b >= a for a, b in zip(targets, targets[1:])):
        raise ValueError(f"level targets must be strictly decreasing: {targets}")
    validate(mesh)
    meshes = []
    parents = []
    reached = []
    cur = mesh
    if targets[0] < cur.n_vertices:
        res = simplify_qem(cur, targets[0])
        cur = res.mesh
    meshes.append(cur)
    for t in targets[1:]:
        res = simplify_qem(cur, t)
        validate(res.mesh)
        meshes.append(res.mesh)
        parents.append(res.parent_of)
        reached.append(res.reached)
        cur = res.mesh

    geo = [prepare(m) for m in meshes]
    conns = [fr.connection_coefficients(m, b) for m, b in geo]

    t0 = time.perf_counter()
    fields: list[fr.RoSyField | None] = [None] * len(geo)
    top = len(geo) - 1
    for k in range(top, -1, -1):
        m, b = geo[k]
        if k == top or not multiscale:
            fields[k] = fr.solve_rosy(m, conns[k], b, N, lam, seed, weighting=weighting)
        else:
            tmp_coarse = Level(geo[k + 1][0], geo[k + 1][1], conns[k + 1], fields[k + 1], None)
            tmp_fine = Level(m, b, conns[k], None, None)
            init = prolong_field(tmp_coarse, tmp_fine, parents[k])
            fields[k] = fr.solve_rosy(m, conns[k], b, N, lam, seed, x0=init,
                                      maxiter=refine_iters, weighting=weighting)
    solve_seconds = time.perf_counter() - t0

    levels = []
    for k, ((m, b), c, f) in enumerate(zip(geo, conns, fields)):
        levels.append(Level(m, b, c, f, fr.frame_atlas(f, b, c)))
    h = Hierarchy(levels, parents, [], reached, solve_seconds)
    h.group_offset = [cross_level_offsets(levels[k], levels[k + 1], parents[k]) for k in range(len(parents))]
    return h


def relabel_sections(h: Hierarchy, shifts) -> Hierarchy:
    """Re-pick the root frame at every vertex (``shifts`` is a scalar or one
    array per level) and recompute all matching and cross-level offsets."""
    if np.isscalar(shifts):
        shifts = [shifts] * len(h.levels)
    levels = []
    for lv, s in zip(h.levels, shifts):
        atlas = fr.frame_atlas(lv.field, lv.basis, lv.conn, root_shift=s)
        levels.append(dataclasses.replace(lv, atlas=atlas))
    out = Hierarchy(levels, list(h.parent_of), [], list(h.reached), h.solve_seconds)
    out.group_offset = [cross_level_offsets(levels[k], levels[k + 1], h.parent_of[k]) for k in range(len(h.parent_of))]
    return out


def write_levels_obj(prefix, h: Hierarchy) -> list[str]:
    from .mesh import write_obj

    paths = []
    for k, lv in enumerate(h.levels):
        p = f"{prefix}_level{k}.obj"
        write_obj(p, lv.mesh)
        paths.append(p)
    return paths
