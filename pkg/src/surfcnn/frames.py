"""Discrete Levi-Civita transport, N-RoSy field optimisation and frame matching.

Transport is stored per undirected edge ``(a, b)`` with ``a < b`` as the unit
complex number ``t_ab`` rotating tangent coordinates of ``a`` into those of
``b``; the reverse transport is its conjugate.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from .mesh import MeshError, TangentBasis, TriMesh

logger = logging.getLogger(__name__)

DEFAULT_N = 4
DEFAULT_LAMBDA = 0.01


class FieldSolveError(RuntimeError):
    pass


def wrap_angle(a):
    """Wrap angles into ``(-pi, pi]``."""
    return np.pi - np.mod(np.pi - a, 2 * np.pi)


@dataclass(frozen=True, eq=False)
class Connection:
    """Per-edge transport plus the face bookkeeping needed for holonomy."""

    edges: np.ndarray            # (E, 2), a < b
    angle: np.ndarray            # (E,), t_ab = exp(i * angle)
    face_edges: np.ndarray       # (F, 3) edge ids of the directed face edges
    face_edge_sign: np.ndarray   # (F, 3) +1 if the face traverses a->b, else -1
    face_holonomy: np.ndarray    # (F,) rotation accumulated around each face

    @property
    def rotation(self) -> np.ndarray:
        return np.exp(1j * self.angle)

    def directed_angle(self, x, y, edge_ids=None) -> np.ndarray:
        """Transport angle from ``x`` to ``y`` for arrays of directed edges."""
        x = np.asarray(x)
        y = np.asarray(y)
        if edge_ids is None:
            key = np.minimum(x, y) * (self.edges.max() + 1) + np.maximum(x, y)
            ekey = self.edges[:, 0] * (self.edges.max() + 1) + self.edges[:, 1]
            edge_ids = np.searchsorted(ekey, key)
        return np.where(x < y, self.angle[edge_ids], -self.angle[edge_ids])


def _edge_angles(mesh: TriMesh, basis: TangentBasis, tail, head):
    """Angle of the edge direction ``head - tail`` in the tangent frame of ``tail``."""
    d = mesh.positions[head] - mesh.positions[tail]
    z = np.einsum("ij,ij->i", d, basis.e0[tail]) + 1j * np.einsum("ij,ij->i", d, basis.e1[tail])
    return z


def connection_coefficients(mesh: TriMesh, basis: TangentBasis) -> Connection:
    """Levi-Civita transport identifying each edge's direction in both
    endpoint tangent planes.

    For ``a -> b`` with ``theta_a``, ``theta_b`` the angles of ``b - a`` in
    the frames of ``a`` and ``b``: ``t_ab = exp(i (theta_b - theta_a))``.
    """
    e = mesh.edges
    a, b = e[:, 0], e[:, 1]
    length = np.linalg.norm(mesh.positions[b] - mesh.positions[a], axis=1)
    za = _edge_angles(mesh, basis, a, b)
    # direction b - a seen from b is minus the direction of a - b
    zb = -_edge_angles(mesh, basis, b, a)
    scale = np.maximum(length, 1e-300)
    bad = (length <= 0) | (np.abs(za) <= 1e-12 * scale) | (np.abs(zb) <= 1e-12 * scale)
    if np.any(bad):
        i, j = e[np.argmax(bad)]
        raise MeshError(f"degenerate edge ({i}, {j}): zero length or normal to a tangent plane")
    angle = wrap_angle(np.angle(zb) - np.angle(za))

    t = mesh.triangles
    tails = t
    heads = t[:, [1, 2, 0]]
    fe = mesh.edge_index(tails.ravel(), heads.ravel()).reshape(-1, 3)
    sign = np.where(tails < heads, 1, -1)

    # corner angles measured inside each vertex tangent plane
    corner = np.zeros(t.shape)
    for c in range(3):
        v = t[:, c]
        nxt = t[:, (c + 1) % 3]
        prv = t[:, (c + 2) % 3]
        z1 = _edge_angles(mesh, basis, v, nxt)
        z2 = _edge_angles(mesh, basis, v, prv)
        corner[:, c] = np.angle(z2 * np.conj(z1))
    holonomy = corner.sum(axis=1) - np.pi
    return Connection(e, angle, fe, sign, holonomy)


@dataclass(frozen=True, eq=False)
class RoSyField:
    """Per-vertex unit complex ``v = u**N`` encoding an N-direction frame."""

    N: int
    v: np.ndarray
    energy: float           # Dirichlet energy of the normalised field
    objective: float = np.nan  # smoothness + alignment objective of the raw solve
    iterations: int = 0


def edge_weights(mesh: TriMesh, kind: str = "uniform") -> np.ndarray:
    if kind == "uniform":
        return np.ones(mesh.n_edges)
    if kind != "cotan":
        raise ValueError(f"unknown edge weighting {kind!r}")
    p = mesh.positions
    t = mesh.triangles
    w = np.zeros(mesh.n_edges)
    for c in range(3):
        o = t[:, c]
        i, j = t[:, (c + 1) % 3], t[:, (c + 2) % 3]
        u, v = p[i] - p[o], p[j] - p[o]
        cot = np.einsum("ij,ij->i", u, v) / np.linalg.norm(np.cross(u, v), axis=1)
        np.add.at(w, mesh.edge_index(i, j), 0.5 * cot)
    return np.maximum(w, 0.0)


def connection_laplacian(conn: Connection, n_vertices: int, N: int, weights=None) -> sparse.csr_matrix:
    """Hermitian ``L`` with ``v^H L v = sum_e w_e |v_b - t_ab^N v_a|^2``."""
    a, b = conn.edges[:, 0], conn.edges[:, 1]
    w = np.ones(len(a)) if weights is None else weights
    tN = np.exp(1j * N * conn.angle)
    rows = np.concatenate([a, b, b, a])
    cols = np.concatenate([a, b, a, b])
    vals = np.concatenate([w, w, -w * tN, -w * np.conj(tN)]).astype(np.complex128)
    L = sparse.coo_matrix((vals, (rows, cols)), shape=(n_vertices, n_vertices)).tocsr()
    L.sum_duplicates()
    return L


def dirichlet_energy(v: np.ndarray, conn: Connection, N: int, weights=None) -> float:
    a, b = conn.edges[:, 0], conn.edges[:, 1]
    w = 1.0 if weights is None else weights
    r = v[b] - np.exp(1j * N * conn.angle) * v[a]
    return float(np.sum(w * (r.real ** 2 + r.imag ** 2)))


def guidance(mesh: TriMesh, basis: TangentBasis, N: int):
    """Alignment weights ``tanh(|k_max - k_min|)`` and target powers of ``dir_max``."""
    if mesh.k_max is None:
        raise MeshError("curvatures missing; call vertex_geometry first")
    w = np.tanh(np.abs(mesh.k_max - mesh.k_min))
    z = basis.to_local(mesh.dir_max)
    z = z / np.abs(z)
    return w, z ** N


def curvature_field(mesh: TriMesh, basis: TangentBasis, conn: Connection, N: int = DEFAULT_N) -> RoSyField:
    """Frames taken directly from principal curvature directions."""
    _, v0 = guidance(mesh, basis, N)
    return RoSyField(N, v0, dirichlet_energy(v0, conn, N))


def _objective(x, L, lam, w, v0) -> float:
    r = x - v0
    return float(np.real(np.vdot(x, L @ x)) + lam * np.sum(w * (r.real ** 2 + r.imag ** 2)))


def _normalize_field(x):
    mag = np.abs(x)
    if np.all(mag < 1e-12):
        return None
    out = np.where(mag > 1e-300, x / np.where(mag > 0, mag, 1.0), 1.0 + 0j)
    return out


def _perturbation(n, seed):
    rng = np.random.default_rng(seed)
    return rng.normal(size=n) + 1j * rng.normal(size=n)


def solve_rosy(
    mesh: TriMesh,
    conn: Connection,
    basis: TangentBasis,
    N: int = DEFAULT_N,
    lam: float = DEFAULT_LAMBDA,
    seed: int = 0,
    x0: np.ndarray | None = None,
    maxiter: int | None = None,
    weighting: str = "uniform",
    rtol: float = 1e-8,
) -> RoSyField:
    """Smooth N-RoSy field minimising the transported-difference energy plus a
    ``lam``-weighted pull towards the maximum curvature directions.

    ``lam > 0`` solves the sparse Hermitian system with conjugate gradients and
    normalises per vertex. ``lam == 0`` finds the smallest eigenvector of the
    connection Laplacian by inverse iteration.

    Passing ``maxiter`` makes the CG solve a bounded refinement (used for the
    coarse-to-fine solve) instead of an error on non-convergence.
    """
    if N < 1:
        raise ValueError("symmetry order must be >= 1")
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    V = mesh.n_vertices
    ew = edge_weights(mesh, weighting)
    L = connection_laplacian(conn, V, N, ew)
    if lam == 0:
        return _solve_eigen(L, conn, N, ew, seed, x0)

    w, v0 = guidance(mesh, basis, N)
    A = (L + sparse.diags(lam * w)).tocsr()
    b = lam * w * v0
    refine = maxiter is not None
    limit = maxiter if refine else 10 * V

    bnorm = float(np.linalg.norm(b))
    for attempt in range(2):
        if attempt == 0:
            start = np.zeros(V, np.complex128) if x0 is None else np.asarray(x0, dtype=np.complex128)
        else:
            # deterministic restart; on a singular system CG keeps the null-space part
            start = _perturbation(V, seed)
            logger.warning("RoSy solve produced a zero field; retrying from a perturbed start")
        As = A @ start
        denom = float(np.real(np.vdot(start, As)))
        if denom > 0 and bnorm > 0:
            # best scalar multiple of the start along the quadratic
            alpha = np.vdot(start, b) / denom
            start, As = alpha * start, alpha * As
        # solve for the correction so that a zero right-hand side still iterates
        r0 = b - As
        atol = rtol * bnorm if bnorm > 0 else 1e-12 * max(float(np.linalg.norm(As)), 1e-300)
        it = [0]

        def cb(_):
            it[0] += 1

        if np.linalg.norm(r0) <= atol:
            dx, info = np.zeros(V, np.complex128), 0
        else:
            dx, info = splinalg.cg(A, r0, rtol=0.0, atol=atol, maxiter=limit, callback=cb)
        x = start + dx
        if info > 0 and not refine:
            res = np.linalg.norm(A @ x - b) / max(bnorm, 1e-300)
            raise FieldSolveError(f"CG did not converge after {limit} iterations (relative residual {res:.3e})")
        u = _normalize_field(x)
        if u is not None:
            return RoSyField(N, u, dirichlet_energy(u, conn, N, ew), _objective(x, L, lam, w, v0), it[0])
    raise FieldSolveError("RoSy solve returned a zero field twice")


def _solve_eigen(L, conn, N, ew, seed, x0, tol=1e-10, maxiter=2000):
    V = L.shape[0]
    diag = np.real(L.diagonal())
    shift = 1e-8 * max(float(diag.mean()), 1e-300)
    lu = splinalg.splu((L + shift * sparse.identity(V, format="csc")).tocsc())
    x = _perturbation(V, seed) if x0 is None else np.asarray(x0, dtype=np.complex128).copy()
    x /= np.linalg.norm(x)
    scale = max(float(diag.max()), 1e-300)
    for it in range(1, maxiter + 1):
        y = lu.solve(x)
        x = y / np.linalg.norm(y)
        Lx = L @ x
        rho = np.real(np.vdot(x, Lx))
        if np.linalg.norm(Lx - rho * x) <= tol * scale:
            break
    u = _normalize_field(x)
    if u is None:
        raise FieldSolveError("eigen solve returned a zero field")
    return RoSyField(N, u, dirichlet_energy(u, conn, N, ew), float(rho), it)


@dataclass(frozen=True, eq=False)
class FrameAtlas:
    """Per-vertex N frames plus matching offsets and singularity indices.

    ``angles[x]`` is the tangent angle of frame 0 at ``x``; frame ``k`` is at
    ``angles[x] + 2 pi k / N``. ``offsets[e]`` is the matching for the
    direction ``edges[e, 0] -> edges[e, 1]``: group ``i`` at the tail
    matches group ``(i + m) mod N`` at the head.
    """

    N: int
    angles: np.ndarray
    basis: TangentBasis
    offsets: np.ndarray | None = None
    residual: np.ndarray | None = None
    index: np.ndarray | None = None  # per-face index numerators, index = value / N

    def frame_angles(self) -> np.ndarray:
        return self.angles[:, None] + 2 * np.pi * np.arange(self.N)[None, :] / self.N

    def axes(self, k) -> tuple[np.ndarray, np.ndarray]:
        """World-space ``(e0', e1')`` of frame ``k`` (scalar or per-vertex array)."""
        a = self.angles + 2 * np.pi * np.asarray(k) / self.N
        c, s = np.cos(a)[:, None], np.sin(a)[:, None]
        e0 = c * self.basis.e0 + s * self.basis.e1
        e1 = -s * self.basis.e0 + c * self.basis.e1
        return e0, e1

    def directed_offsets(self, x, y, edge_ids) -> np.ndarray:
        m = self.offsets[edge_ids]
        return np.where(np.asarray(x) < np.asarray(y), m, (-m) % self.N)

    @property
    def singularity_index(self) -> np.ndarray:
        return self.index / self.N


def extract_frames(field: RoSyField, basis: TangentBasis, root_shift=0) -> FrameAtlas:
    """Frames from the principal N-th root of ``v``; ``root_shift`` relabels
    which root is frame 0 (scalar or per-vertex)."""
    N = field.N
    a = np.angle(field.v) / N + 2 * np.pi * np.asarray(root_shift) / N
    return FrameAtlas(N, np.broadcast_to(a, field.v.shape).astype(np.float64), basis)


def match_frames(atlas: FrameAtlas, conn: Connection) -> FrameAtlas:
    """Per-edge group offsets minimising the angle between the transported
    frame 0 of the tail and the frames of the head; ties take the smaller offset."""
    N = atlas.N
    a, b = conn.edges[:, 0], conn.edges[:, 1]
    d = atlas.angles[a] + conn.angle - atlas.angles[b]
    q = d * N / (2 * np.pi)
    m = np.ceil(q - 0.5)
    rho = d - 2 * np.pi * m / N
    return dataclasses.replace(atlas, offsets=np.mod(m, N).astype(np.int64), residual=rho)


def singularity_indices(atlas: FrameAtlas, conn: Connection) -> FrameAtlas:
    """Per-face singularity index numerators (index = numerator / N)."""
    if atlas.residual is None:
        atlas = match_frames(atlas, conn)
    rho = atlas.residual[conn.face_edges] * conn.face_edge_sign
    turn = conn.face_holonomy - rho.sum(axis=1)
    numer = np.rint(turn * atlas.N / (2 * np.pi)).astype(np.int64)
    return dataclasses.replace(atlas, index=numer)


def frame_atlas(field: RoSyField, basis: TangentBasis, conn: Connection, root_shift=0) -> FrameAtlas:
    atlas = extract_frames(field, basis, root_shift)
    atlas = match_frames(atlas, conn)
    return singularity_indices(atlas, conn)


def matched_angular_distance(atlas: FrameAtlas) -> np.ndarray:
    return np.abs(atlas.residual)


def singular_faces(atlas: FrameAtlas) -> np.ndarray:
    return np.flatnonzero(atlas.index != 0)


def write_frames_obj(path, mesh: TriMesh, atlas: FrameAtlas, scale: float | None = None) -> None:
    """Debug export: every frame axis as a line segment from its vertex."""
    if scale is None:
        scale = 0.4 * float(np.mean(np.linalg.norm(
            mesh.positions[mesh.edges[:, 1]] - mesh.positions[mesh.edges[:, 0]], axis=1)))
    with open(path, "w") as f:
        for p in mesh.positions:
            f.write(f"v {p[0]:.9g} {p[1]:.9g} {p[2]:.9g}\n")
        V = mesh.n_vertices
        nxt = V + 1
        for k in range(atlas.N):
            e0, _ = atlas.axes(k)
            tips = mesh.positions + scale * e0
            for i, q in enumerate(tips):
                f.write(f"v {q[0]:.9g} {q[1]:.9g} {q[2]:.9g}\n")
            for i in range(V):
                f.write(f"l {i + 1} {nxt + i}\n")
            nxt += V
