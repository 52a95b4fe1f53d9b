"""Analytic test meshes: icospheres, tori, cylinders and planar grids."""

from __future__ import annotations

import numpy as np

from .mesh import TriMesh


def icosahedron() -> TriMesh:
    t = (1.0 + np.sqrt(5.0)) / 2.0
    verts = np.array(
        [
            [-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
            [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
            [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1],
        ],
        dtype=np.float64,
    )
    faces = np.array(
        [
            [0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
            [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
            [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
            [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1],
        ]
    )
    verts /= np.linalg.norm(verts, axis=1, keepdims=True)
    return TriMesh(verts, faces)


def icosphere(subdivisions: int = 3, radius: float = 1.0) -> TriMesh:
    """Loop-style midpoint subdivision of the icosahedron projected to a sphere.

    Vertex counts are ``10 * 4**s + 2``: 12, 42, 162, 642, 2562, ...
    """
    mesh = icosahedron()
    verts = list(mesh.positions)
    faces = mesh.triangles
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}

        def mid(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new = []
        for a, b, c in faces.tolist():
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            new += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        faces = np.array(new, dtype=np.int64)
    return TriMesh(np.array(verts) * radius, faces)


def torus(major: float = 1.0, minor: float = 0.4, nu: int = 24, nv: int = 16) -> TriMesh:
    u = 2 * np.pi * np.arange(nu) / nu
    v = 2 * np.pi * np.arange(nv) / nv
    U, V = np.meshgrid(u, v, indexing="ij")
    x = (major + minor * np.cos(V)) * np.cos(U)
    y = (major + minor * np.cos(V)) * np.sin(U)
    z = minor * np.sin(V)
    verts = np.stack([x, y, z], -1).reshape(-1, 3)
    idx = np.arange(nu * nv).reshape(nu, nv)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a = idx[i, j]
            b = idx[(i + 1) % nu, j]
            c = idx[(i + 1) % nu, (j + 1) % nv]
            d = idx[i, (j + 1) % nv]
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(verts, np.array(faces))


def cylinder(radius: float = 2.0, height: float = 4.0, nu: int = 48, nv: int = 24) -> TriMesh:
    """Open cylinder around the z axis with outward normals."""
    u = 2 * np.pi * np.arange(nu) / nu
    z = np.linspace(-height / 2, height / 2, nv + 1)
    U, Z = np.meshgrid(u, z, indexing="ij")
    verts = np.stack([radius * np.cos(U), radius * np.sin(U), Z], -1).reshape(-1, 3)
    idx = np.arange(nu * (nv + 1)).reshape(nu, nv + 1)
    faces = []
    for i in range(nu):
        for j in range(nv):
            a, b = idx[i, j], idx[(i + 1) % nu, j]
            c, d = idx[(i + 1) % nu, j + 1], idx[i, j + 1]
            faces += [[a, b, c], [a, c, d]]
    return TriMesh(verts, np.array(faces))


def triangular_grid(nx: int = 9, ny: int = 9, spacing: float = 1.0) -> TriMesh:
    """Planar equilateral lattice in the z=0 plane, lattice vectors
    ``(1, 0)`` and ``(1/2, sqrt(3)/2)`` times ``spacing``; normals point to +z.

    Vertex ``(i, j)`` has index ``j * nx + i``; interior vertices have six
    neighbours at unit distance.
    """
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    x = (i + 0.5 * j) * spacing
    y = j * (np.sqrt(3) / 2) * spacing
    verts = np.stack([x, y, np.zeros_like(x)], -1).reshape(-1, 3).astype(np.float64)
    faces = []
    for jj in range(ny - 1):
        for ii in range(nx - 1):
            a = jj * nx + ii
            b, c, d = a + 1, a + nx, a + nx + 1
            faces += [[a, b, c], [b, d, c]]
    return TriMesh(verts, np.array(faces))


def square_grid(nx: int = 9, ny: int = 9, spacing: float = 1.0) -> TriMesh:
    i, j = np.meshgrid(np.arange(nx), np.arange(ny), indexing="xy")
    verts = np.stack([i * spacing, j * spacing, np.zeros(i.shape)], -1).reshape(-1, 3).astype(np.float64)
    faces = []
    for jj in range(ny - 1):
        for ii in range(nx - 1):
            a = jj * nx + ii
            faces += [[a, a + 1, a + nx + 1], [a, a + nx + 1, a + nx]]
    return TriMesh(verts, np.array(faces))


def hinge(angle: float) -> TriMesh:
    """Two unit right triangles sharing the edge on the x axis, folded by
    ``angle`` (0 = flat)."""
    verts = np.array(
        [
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [0.3, -1.0, 0.0],
            [0.6, np.cos(angle), np.sin(angle)],
        ]
    )
    return TriMesh(verts, np.array([[0, 2, 1], [0, 1, 3]]))


def tetrahedron() -> TriMesh:
    verts = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64)
    return TriMesh(verts, np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]]))


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def rigid_motion(mesh: TriMesh, rotation: np.ndarray, translation=(0.0, 0.0, 0.0)) -> TriMesh:
    return TriMesh(mesh.positions @ np.asarray(rotation).T + np.asarray(translation), mesh.triangles)
