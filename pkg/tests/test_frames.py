import numpy as np
import pytest
from scipy import sparse

from surfcnn import frames as fr
from surfcnn import shapes
from surfcnn.hierarchy import simplify_qem
from surfcnn.mesh import TangentBasis, basis_from_normals, prepare


def _solved(mesh, N=4, lam=0.01):
    m, b = prepare(mesh)
    c = fr.connection_coefficients(m, b)
    f = fr.solve_rosy(m, c, b, N, lam)
    return m, b, c, f, fr.frame_atlas(f, b, c)


def _flat():
    m, b = prepare(shapes.triangular_grid(6, 6))
    return m, b


def test_flat_connection_is_identity():
    m, b = _flat()
    c = fr.connection_coefficients(m, b)
    np.testing.assert_allclose(c.rotation, 1, atol=1e-12)


def test_rotated_basis_absorbed_by_transport():
    m, b = _flat()
    alpha = 0.37
    v = 17
    rot = np.zeros(m.n_vertices)
    rot[v] = alpha
    c = fr.connection_coefficients(m, b.rotated(rot))
    touch = (c.edges == v).any(axis=1)
    np.testing.assert_allclose(np.abs(c.angle[touch]), alpha, atol=1e-12)
    # arriving at v the angle is -alpha, leaving v it is +alpha
    out_of_v = c.edges[touch, 0] == v
    np.testing.assert_allclose(c.angle[touch][out_of_v], alpha, atol=1e-12)
    np.testing.assert_allclose(c.rotation[~touch], 1, atol=1e-12)


@pytest.mark.parametrize("dihedral", [0.3, 1.1, 2.0])
def test_hinge_matches_unfolding(dihedral, rng):
    # on the hinge edge both vertex tangent planes contain the edge, so
    # unfolding reduces transport to the angle between the two bases
    m, b = prepare(shapes.hinge(dihedral))
    gauge = rng.uniform(-np.pi, np.pi, m.n_vertices)
    b = b.rotated(gauge)
    c = fr.connection_coefficients(m, b)
    e = int(np.flatnonzero((c.edges == [0, 1]).all(axis=1))[0])
    np.testing.assert_allclose(b.n[0], b.n[1], atol=1e-12)
    # unfold: rotate about the hinge axis so both planes become z = 0
    n = b.n[0]
    ang = np.arctan2(n[1], n[2])
    cr, sr = np.cos(ang), np.sin(ang)
    R = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
    np.testing.assert_allclose(R @ n, [0, 0, 1], atol=1e-12)
    u0, u1 = R @ b.e0[0], R @ b.e0[1]
    # a vector at angle phi in frame 0 sits at angle phi + t in frame 1
    t = np.arctan2(u0[1], u0[0]) - np.arctan2(u1[1], u1[0])
    assert abs(fr.wrap_angle(c.angle[e] - t)) < 1e-10


def test_flat_grid_parallel_field():
    m, b = _flat()
    c = fr.connection_coefficients(m, b)
    f = fr.solve_rosy(m, c, b, 4, 0.0)
    assert f.energy < 1e-10
    np.testing.assert_allclose(f.v, f.v[0], atol=1e-8)


def test_cg_matches_dense_oracle():
    m = simplify_qem(shapes.icosphere(3), 200).mesh
    m, b = prepare(m)
    c = fr.connection_coefficients(m, b)
    N, lam = 4, 0.01
    f = fr.solve_rosy(m, c, b, N, lam)
    L = fr.connection_laplacian(c, m.n_vertices, N, fr.edge_weights(m))
    w, v0 = fr.guidance(m, b, N)
    A = (L + sparse.diags(lam * w)).toarray()
    x = np.linalg.solve(A, lam * w * v0)
    u = x / np.abs(x)
    dense = fr.dirichlet_energy(u, c, N, fr.edge_weights(m))
    assert f.energy <= 1.001 * dense


def test_default_lambda():
    assert fr.DEFAULT_LAMBDA == 0.01 and fr.DEFAULT_N == 4


def _atlas_from_v(v, N=4):
    basis = basis_from_normals(np.array([[0, 0, 1.0]] * len(v)))
    return fr.extract_frames(fr.RoSyField(N, np.asarray(v, complex), 0.0), basis)


def test_extract_roots_of_one():
    a = _atlas_from_v([1.0])
    np.testing.assert_allclose(a.frame_angles()[0], [0, np.pi / 2, np.pi, 3 * np.pi / 2], atol=1e-12)


def test_extract_roots_of_i():
    a = _atlas_from_v([1j])
    np.testing.assert_allclose(a.frame_angles()[0], np.array([1, 5, 9, 13]) * np.pi / 8, atol=1e-12)


@pytest.mark.parametrize("N", [1, 2, 4, 6])
def test_extracted_frames_are_roots(N, rng):
    v = np.exp(1j * rng.uniform(-np.pi, np.pi, 50))
    a = _atlas_from_v(v, N)
    u = np.exp(1j * a.frame_angles())
    np.testing.assert_allclose(u ** N, np.repeat(v[:, None], N, 1), atol=1e-10)
    # consecutive frames differ by 2 pi / N
    np.testing.assert_allclose(np.diff(a.frame_angles(), axis=1), 2 * np.pi / N, atol=1e-12)


def _two_vertex(angle_x, angle_y, transport, N=4):
    basis = TangentBasis(np.array([[1, 0, 0.]] * 2), np.array([[0, 1, 0.]] * 2), np.array([[0, 0, 1.]] * 2))
    atlas = fr.FrameAtlas(N, np.array([angle_x, angle_y]), basis)
    conn = fr.Connection(np.array([[0, 1]]), np.array([transport]), np.zeros((0, 3), int),
                         np.zeros((0, 3)), np.zeros(0))
    return fr.match_frames(atlas, conn)


def test_match_identical_frames():
    assert _two_vertex(0.2, 0.2, 0.0).offsets[0] == 0


def test_match_rotated_by_one_bin():
    N = 4
    a = _two_vertex(0.1, 0.1 + 0.3 + 2 * np.pi / N, 0.3, N)
    assert a.offsets[0] == N - 1


def test_offsets_antisymmetric():
    m, b, c, f, a = _solved(shapes.icosphere(2))
    x, y = c.edges[:, 0], c.edges[:, 1]
    eid = np.arange(len(c.edges))
    np.testing.assert_array_equal(a.directed_offsets(y, x, eid), (-a.directed_offsets(x, y, eid)) % 4)


def test_matched_angle_bound(ico3):
    *_, a = _solved(ico3)
    assert fr.matched_angular_distance(a).max() <= np.pi / 4 + 1e-9


@pytest.mark.parametrize("mesh, chi", [(shapes.icosphere(3), 2), (shapes.torus(1, 0.4, 32, 16), 0)])
def test_poincare_hopf(mesh, chi):
    *_, a = _solved(mesh)
    assert a.index.sum() == chi * 4


def test_loop_offsets_compose_to_index(ico3):
    m, b, c, f, a = _solved(ico3)
    N = a.N
    tri = m.triangles
    total = np.zeros(len(tri), dtype=np.int64)
    for k in range(3):
        x, y = tri[:, k], tri[:, (k + 1) % 3]
        total += a.directed_offsets(x, y, c.face_edges[:, k])
    assert np.any(a.index == 1)
    np.testing.assert_array_equal(total % N, a.index % N)
    # a quarter singularity: going once around returns group 0 matched to group 1
    assert set(total[a.index == 1] % N) == {1}


def test_root_shift_preserves_field_geometry(ico3):
    m, b, c, f, a = _solved(ico3)
    s = fr.frame_atlas(f, b, c, root_shift=2)
    np.testing.assert_array_equal(s.index, a.index)
    np.testing.assert_allclose(fr.matched_angular_distance(s), fr.matched_angular_distance(a), atol=1e-12)


def test_invalid_arguments():
    m, b = _flat()
    c = fr.connection_coefficients(m, b)
    with pytest.raises(ValueError):
        fr.solve_rosy(m, c, b, 0, 0.01)
    with pytest.raises(ValueError):
        fr.solve_rosy(m, c, b, 4, -1.0)
