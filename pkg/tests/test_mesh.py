import numpy as np
import pytest

from surfcnn import shapes
from surfcnn.mesh import (
    MeshError,
    NonManifoldError,
    TriMesh,
    basis_from_normals,
    load_mesh,
    prepare,
    read_obj,
    validate,
    vertex_geometry,
    write_obj,
    write_off,
)


def _write(tmp_path, name, text):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_off_tetrahedron(tmp_path):
    p = _write(tmp_path, "t.off", """OFF
4 4 0
0 0 0
1 0 0
0 1 0
0 0 1
3 0 2 1
3 0 1 3
3 0 3 2
3 1 2 3
""")
    m = load_mesh(p)
    assert (m.n_vertices, m.n_faces, m.n_edges) == (4, 4, 6)
    assert m.euler_characteristic == 2


def test_obj_quad_split_uses_v0_v2_diagonal(tmp_path):
    p = _write(tmp_path, "q.obj", "v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    m = read_obj(p)
    assert m.n_faces == 2
    shared = set(m.triangles[0]) & set(m.triangles[1])
    assert shared == {0, 2}


def test_obj_ignores_texture_and_normal_indices(tmp_path):
    p = _write(tmp_path, "q.obj", "v 0 0 0\nv 1 0 0\nv 0 1 0\nvt 0 0\nvn 0 0 1\nf 1/1/1 2/1/1 3/1/1\n")
    assert read_obj(p).triangles.tolist() == [[0, 1, 2]]


def test_off_three_faces_on_one_edge(tmp_path):
    p = _write(tmp_path, "nm.off", """OFF
5 3 0
0 0 0
1 0 0
0 1 0
0 -1 0
0 0 1
3 0 1 2
3 1 0 3
3 0 1 4
""")
    with pytest.raises(NonManifoldError, match=r"\(0, 1\)|0.*1"):
        load_mesh(p)


def test_rejects_degenerate_and_repeated_indices():
    with pytest.raises(MeshError):
        validate(TriMesh(np.eye(3), [[0, 0, 1]]))
    with pytest.raises(MeshError):
        validate(TriMesh(np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.]]), [[0, 1, 2]]))


def test_rejects_inconsistent_orientation():
    pos = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0.]])
    with pytest.raises(MeshError):
        validate(TriMesh(pos, [[0, 1, 2], [1, 2, 3]]))


def test_off_roundtrip(tmp_path, ico3):
    p = tmp_path / "s.off"
    write_off(p, ico3)
    m = load_mesh(p)
    np.testing.assert_array_equal(m.triangles, ico3.triangles)
    np.testing.assert_allclose(m.positions, ico3.positions, rtol=0, atol=1e-15)


def test_write_obj_colors(tmp_path):
    m = shapes.tetrahedron()
    write_obj(tmp_path / "c.obj", m, colors=np.full((4, 3), 0.5))
    lines = (tmp_path / "c.obj").read_text().splitlines()
    assert lines[0].split()[-3:] == ["0.500000"] * 3


def test_derived_invariants(ico3):
    m = vertex_geometry(ico3)
    np.testing.assert_allclose(np.linalg.norm(m.normals, axis=1), 1, atol=1e-10)
    assert (m.one_ring_area > 0).all()


def test_sphere_curvature(ico3):
    m = vertex_geometry(ico3)
    np.testing.assert_allclose(m.k_max, 1, rtol=0.05)
    np.testing.assert_allclose(m.k_min, 1, rtol=0.05)


def test_flat_grid_curvature():
    m = vertex_geometry(shapes.triangular_grid(7, 7))
    inner = np.setdiff1d(np.arange(m.n_vertices), m.boundary_vertices)
    assert np.abs(m.k_max[inner]).max() < 1e-8
    assert np.abs(m.k_min[inner]).max() < 1e-8


def test_cylinder_curvature():
    m = vertex_geometry(shapes.cylinder(radius=2.0))
    z = m.positions[:, 2]
    inner = np.setdiff1d(np.flatnonzero(np.abs(z - z.mean()) < 0.5), m.boundary_vertices)
    np.testing.assert_allclose(m.k_max[inner], 0.5, rtol=0.05)
    assert np.abs(m.k_min[inner]).max() < 0.025
    # principal direction goes around the axis
    assert np.abs(m.dir_max[inner, 2]).max() < 0.05


@pytest.mark.parametrize(
    "n, e0, e1",
    [((0, 0, 1), (1, 0, 0), (0, 1, 0)), ((1, 0, 0), (0, 1, 0), (0, 0, 1))],
)
def test_tangent_basis_axis_cases(n, e0, e1):
    b = basis_from_normals(np.array([n], float))
    np.testing.assert_allclose(b.e0[0], e0, atol=1e-15)
    np.testing.assert_allclose(b.e1[0], e1, atol=1e-15)


def test_tangent_basis_right_handed(rng):
    n = rng.normal(size=(500, 3))
    n /= np.linalg.norm(n, axis=1, keepdims=True)
    b = basis_from_normals(n)
    det = np.linalg.det(np.stack([b.e0, b.e1, b.n], axis=2))
    np.testing.assert_allclose(det, 1, atol=1e-10)


def test_prepare_rigid_motion_rotates_geometry(ico3, rng):
    R = shapes.random_rotation(rng)
    a, _ = prepare(ico3)
    b, _ = prepare(shapes.rigid_motion(ico3, R, (1, 2, 3)))
    np.testing.assert_allclose(b.normals, a.normals @ R.T, atol=1e-10)
    np.testing.assert_allclose(b.k_max, a.k_max, atol=1e-9)
