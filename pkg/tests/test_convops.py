import dataclasses
import itertools

import numpy as np
import pytest

from surfcnn import convops as ops
from surfcnn import kernels, shapes
from surfcnn.hierarchy import make_level
from surfcnn.verify import aligned_grid_patches, scalar_gconv_vertex, star_patches


def central_diff(f, x, step=1e-5):
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2 * step)
    return g


def rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-30)


@pytest.fixture(scope="module")
def level():
    from surfcnn.verify import random_mesh

    lv = make_level(random_mesh(60, seed=2), 4, 0.01)
    return lv, ops.build_patches(lv.mesh, lv.atlas)


# --- patches -------------------------------------------------------------


def test_hexagonal_ring_radius():
    m, atlas, p = aligned_grid_patches(7, 7)
    inner = np.flatnonzero(np.diff(p.ptr) == 7)
    assert inner.size
    for x in inner:
        c = p.coords[:, p.ptr[x] + 1:p.ptr[x + 1]]
        np.testing.assert_allclose(np.linalg.norm(c, axis=-1), 1.0, atol=1e-12)
        assert p.radius[x] == pytest.approx(1.0)


def test_flat_patch_features():
    m, atlas, p = aligned_grid_patches(5, 5)
    np.testing.assert_allclose(p.features[..., 3], 0, atol=1e-14)
    np.testing.assert_allclose(p.features[..., :3], np.broadcast_to([0, 0, 1.0], p.features[..., :3].shape),
                               atol=1e-14)


def test_center_entry_first(level):
    _, p = level
    np.testing.assert_array_equal(p.nbr[p.ptr[:-1]], np.arange(p.n_vertices))
    np.testing.assert_array_equal(p.coords[:, p.ptr[:-1]], 0)


def test_patches_rigid_invariant(rng):
    from surfcnn.verify import random_mesh

    mesh = random_mesh(300, seed=7)
    # frame 0 is picked from a global-axis basis, so a rigid motion may relabel
    # each vertex's sections; values agree once that relabelling is undone
    R = shapes.random_rotation(rng)
    a = make_level(mesh, 4, 0.01)
    b = make_level(shapes.rigid_motion(mesh, R, rng.normal(size=3)), 4, 0.01)
    pa, pb = ops.build_patches(a.mesh, a.atlas), ops.build_patches(b.mesh, b.atlas)
    N = 4
    e0a, _ = a.atlas.axes(0)
    e0b, _ = b.atlas.axes(0)
    e0a = e0a @ R.T
    ang = np.arctan2(np.einsum("ij,ij->i", e0a, np.cross(b.basis.n, e0b)), np.einsum("ij,ij->i", e0a, e0b))
    shift = np.rint(ang * N / (2 * np.pi)).astype(int) % N  # frame 0 of a is frame `shift` of b
    np.testing.assert_allclose(np.abs(_wrap(ang - 2 * np.pi * shift / N)), 0, atol=1e-8)
    own = pa.owner
    kb = (np.arange(N)[:, None] + shift[own][None, :]) % N
    cb = np.take_along_axis(pb.coords, kb[:, :, None], axis=0)
    fb = np.take_along_axis(pb.features, kb[:, :, None], axis=0)
    np.testing.assert_allclose(cb, pa.coords, atol=1e-10)
    np.testing.assert_allclose(fb, pa.features, atol=1e-10)
    np.testing.assert_allclose(pb.weight, pa.weight, rtol=1e-10)
    np.testing.assert_allclose(pb.radius, pa.radius, rtol=1e-10)
    # offsets transform as m' = m + s_y - s_x
    expect = (pa.offsets + shift[pa.nbr] - shift[own]) % N
    np.testing.assert_array_equal(pb.offsets, expect)


def _wrap(a):
    return (a + np.pi) % (2 * np.pi) - np.pi


def test_self_only_patch_sees_constant_term(rng):
    p = star_patches(3, 4, rng)
    W = rng.normal(size=(2, 1, 10))
    x = rng.normal(size=(4, 1, p.n_vertices))
    y = ops.gconv(p, x, W)
    for v in range(1, p.n_vertices):
        np.testing.assert_allclose(y[:, :, v], W[None, :, 0, 0] * x[:, 0, v][:, None], atol=1e-14)


# --- gconv ---------------------------------------------------------------


def test_constant_kernel_averages(level):
    _, p = level
    W = np.zeros((1, 1, 10))
    W[0, 0, 0] = 1
    y = ops.gconv(p, np.full((4, 1, p.n_vertices), 2.5), W)
    np.testing.assert_allclose(y, 2.5, atol=1e-13)


def test_zero_kernel_and_zero_grad(level, rng):
    _, p = level
    x = rng.normal(size=(4, 3, p.n_vertices))
    assert not ops.gconv(p, x, np.zeros((2, 3, 10))).any()
    W = rng.normal(size=(2, 3, 10))
    gx, gW = ops.gconv_grad(p, x, W, np.zeros((4, 2, p.n_vertices)))
    assert not gx.any() and not gW.any()


def test_star_patch_scalar_oracle(rng):
    for _ in range(20):
        p = star_patches(3, 4, rng)
        W = rng.normal(size=(1, 1, 10))
        x = rng.normal(size=(4, 1, p.n_vertices))
        np.testing.assert_allclose(ops.gconv(p, x, W)[:, :, 0], scalar_gconv_vertex(p, x, W), atol=1e-10)


def test_hand_placed_star():
    coords = np.array([[1.0, 0.0], [-0.5, 0.5], [0.0, -0.8]])
    p = star_patches(3, 4, np.random.default_rng(5), coords=coords)
    np.testing.assert_allclose(p.coords[0, 1:4], coords)
    W = np.zeros((1, 1, 10))
    W[0, 0, 1] = 1.0  # K(u, v) = u
    x = np.ones((4, 1, 4))
    wn = p.weight[:4] / p.weight[:4].sum()
    # frame 0: sum of w_y * u_y; frame 1 sees the star rotated by 90 degrees
    assert ops.gconv(p, x, W)[0, 0, 0] == pytest.approx(wn[1:] @ coords[:, 0], abs=1e-14)
    assert ops.gconv(p, x, W)[1, 0, 0] == pytest.approx(wn[1:] @ coords[:, 1], abs=1e-14)


def test_linearity(level, rng):
    _, p = level
    W = rng.normal(size=(3, 2, 10))
    f, g = rng.normal(size=(2, 4, 2, p.n_vertices))
    lhs = ops.gconv(p, 0.7 * f - 1.3 * g, W)
    np.testing.assert_allclose(lhs, 0.7 * ops.gconv(p, f, W) - 1.3 * ops.gconv(p, g, W), atol=1e-10)


def test_gconv_gradients(level, rng):
    _, p = level
    x = rng.normal(size=(4, 2, p.n_vertices))
    W = rng.normal(size=(3, 7, 10))
    gy = rng.normal(size=(4, 3, p.n_vertices))
    loss = lambda: float((ops.gconv(p, x, W, patch_input=True) * gy).sum())  # noqa: E731
    gx, gW = ops.gconv_grad(p, x, W, gy, patch_input=True)
    assert rel(gx, central_diff(loss, x)) < 1e-6
    assert rel(gW, central_diff(loss, W)) < 1e-6


@pytest.mark.skipif(len(kernels.backends()) < 2, reason="compiled kernels not built")
def test_backends_agree(level, rng):
    _, p = level
    (pf, pb), (cf, cb) = kernels.backends()["python"], kernels.backends()["cython"]
    wn, mono, _ = p.as_dtype(np.float64)
    V = p.n_vertices
    x = rng.normal(size=(4, V, 3))
    W = rng.normal(size=(2, 3, 10))
    gy = rng.normal(size=(4, V, 2))
    y1, y2 = np.empty((4, V, 2)), np.empty((4, V, 2))
    pf(p.ptr, p.nbr, p.offsets, wn, mono, x, W, y1)
    cf(p.ptr, p.nbr, p.offsets, wn, mono, x, W, y2)
    np.testing.assert_allclose(y1, y2, atol=1e-12)
    g1 = (np.zeros_like(x), np.zeros_like(W))
    g2 = (np.zeros_like(x), np.zeros_like(W))
    pb(p.ptr, p.nbr, p.offsets, wn, mono, x, W, gy, *g1)
    cb(p.ptr, p.nbr, p.offsets, wn, mono, x, W, gy, *g2)
    for a, b in zip(g1, g2):
        np.testing.assert_allclose(a, b, atol=1e-12)


def test_single_precision(level, rng):
    _, p = level
    x = rng.normal(size=(4, 2, p.n_vertices))
    W = rng.normal(size=(3, 2, 10))
    y32 = ops.gconv(p, x.astype(np.float32), W.astype(np.float32))
    assert y32.dtype == np.float32
    np.testing.assert_allclose(y32, ops.gconv(p, x, W), rtol=1e-4, atol=1e-4)


def test_gconv_shape_errors(level):
    _, p = level
    with pytest.raises(ValueError):
        ops.gconv(p, np.zeros((2, 1, p.n_vertices)), np.zeros((1, 1, 10)))
    with pytest.raises(ValueError):
        ops.gconv(p, np.zeros((4, 2, p.n_vertices)), np.zeros((1, 1, 10)))


def test_flat_grid_translation():
    from surfcnn.verify import suite_flat_grid

    for check in suite_flat_grid():
        assert check.passed, check.line()


# --- pointwise and group layers ------------------------------------------


def test_gconv1x1(rng):
    x = rng.normal(size=(4, 3, 7))
    np.testing.assert_array_equal(ops.gconv1x1(x, np.eye(3), np.zeros(3)), x)
    np.testing.assert_allclose(ops.gconv1x1(x, np.ones((1, 3)), np.zeros(1))[:, 0], x.sum(1), atol=1e-14)
    W, b = rng.normal(size=(5, 3)), rng.normal(size=5)
    dense = np.stack([W @ x[n] + b[:, None] for n in range(4)])
    np.testing.assert_allclose(ops.gconv1x1(x, W, b), dense, atol=1e-12)
    gy = rng.normal(size=(4, 5, 7))
    loss = lambda: float((ops.gconv1x1(x, W, b) * gy).sum())  # noqa: E731
    gx, gW, gb = ops.gconv1x1_grad(x, W, gy)
    assert rel(gx, central_diff(loss, x)) < 1e-8
    assert rel(gW, central_diff(loss, W)) < 1e-8
    assert rel(gb, central_diff(loss, b)) < 1e-8


def test_duplicate():
    f = np.array([[1.0, 2.0, 3.0]])
    d = ops.duplicate(f, 4)
    assert d.shape == (4, 1, 3)
    assert (d == f).all()
    np.testing.assert_array_equal(ops.duplicate(f, 1)[0], f)
    for mode in ("max", "average"):
        np.testing.assert_array_equal(ops.reduce(d, mode)[0], f)


def test_reduce_values():
    x = np.array([1.0, 3.0, 2.0, 0.0]).reshape(4, 1, 1)
    assert ops.reduce(x, "max")[0][0, 0] == 3
    assert ops.reduce(x, "average")[0][0, 0] == 1.5
    same = np.full((4, 2, 3), 0.25)
    for mode in ("max", "average"):
        np.testing.assert_array_equal(ops.reduce(same, mode)[0], same[0])


def test_max_reduce_permutation_invariant(rng):
    x = rng.normal(size=(4, 3, 5))
    ref = ops.reduce(x, "max")[0]
    for perm in itertools.permutations(range(4)):
        np.testing.assert_array_equal(ops.reduce(x[list(perm)], "max")[0], ref)


def test_max_reduce_tie_lowest_group():
    x = np.ones((4, 1, 1))
    _, arg = ops.reduce(x, "max")
    assert arg[0, 0] == 0
    g = ops.reduce_grad(np.ones((1, 1)), x.shape, "max", arg)
    assert g[:, 0, 0].tolist() == [1, 0, 0, 0]


@pytest.mark.parametrize("mode", ["max", "average"])
def test_reduce_gradient(mode, rng):
    x = rng.normal(size=(4, 3, 5))
    gy = rng.normal(size=(3, 5))
    out, arg = ops.reduce(x, mode)
    loss = lambda: float((ops.reduce(x, mode)[0] * gy).sum())  # noqa: E731
    assert rel(ops.reduce_grad(gy, x.shape, mode, arg), central_diff(loss, x)) < 1e-8


def test_pool_identity_relabel(rng):
    perm = rng.permutation(6)
    pm = ops.PoolMap(perm, np.zeros(6, int), 6)
    f = rng.normal(size=(4, 2, 6))
    out, _ = ops.pool(f, pm, "max")
    np.testing.assert_array_equal(out[:, :, perm], f)
    np.testing.assert_array_equal(ops.unpool(out, pm), f)


def test_pool_two_children():
    pm = ops.PoolMap(np.array([0, 0]), np.zeros(2, int), 1)
    x = np.array([2.0, 5.0]).reshape(1, 1, 2)
    out, arg = ops.pool(x, pm, "max")
    assert out[0, 0, 0] == 5
    g = ops.pool_grad(np.ones((1, 1, 1)), pm, "max", arg, x.shape)
    assert g[0, 0].tolist() == [0, 1]


def test_pool_unpool_preserve_constants(rng):
    pm = ops.PoolMap(rng.integers(0, 5, 20), rng.integers(0, 4, 20), 5)
    pm.parent_of[:5] = np.arange(5)
    c = np.full((4, 2, 20), 3.0)
    for mode in ("max", "average"):
        np.testing.assert_array_equal(ops.pool(c, pm, mode)[0], 3.0)
    np.testing.assert_array_equal(ops.unpool(np.full((4, 2, 5), 3.0), pm), 3.0)


def test_unpool_inverts_pool_for_single_children(rng):
    pm = ops.PoolMap(rng.permutation(8), rng.integers(0, 4, 8), 8)
    f = rng.normal(size=(4, 3, 8))
    np.testing.assert_array_equal(ops.unpool(ops.pool(f, pm, "average")[0], pm), f)


@pytest.mark.parametrize("mode", ["max", "average"])
def test_pool_gradients(mode, rng):
    parent = np.concatenate([np.arange(5), rng.integers(0, 5, 10)])
    pm = ops.PoolMap(parent, rng.integers(0, 4, 15), 5)
    x = rng.normal(size=(4, 2, 15))
    gy = rng.normal(size=(4, 2, 5))
    out, arg = ops.pool(x, pm, mode)
    loss = lambda: float((ops.pool(x, pm, mode)[0] * gy).sum())  # noqa: E731
    assert rel(ops.pool_grad(gy, pm, mode, arg, x.shape), central_diff(loss, x)) < 1e-8
    z = rng.normal(size=(4, 2, 5))
    gz = rng.normal(size=(4, 2, 15))
    loss_u = lambda: float((ops.unpool(z, pm) * gz).sum())  # noqa: E731
    assert rel(ops.unpool_grad(gz, pm), central_diff(loss_u, z)) < 1e-8


def test_relu():
    x = np.array([-1.0, 0.0, 2.0])
    assert ops.relu(x).tolist() == [0, 0, 2]
    assert ops.relu_grad(x, np.ones(3)).tolist() == [0, 0, 1]


def test_batchnorm_standardized_input(rng):
    x = rng.normal(size=(4, 3, 50))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    st = ops.BatchNormState.create(3)
    y, _ = ops.batchnorm(x, np.ones(3), np.zeros(3), st, training=True)
    np.testing.assert_allclose(y, x, atol=1e-6)
    assert st.count == 1


def test_batchnorm_running_stats(rng):
    st = ops.BatchNormState.create(2)
    x = rng.normal(3.0, 2.0, size=(4, 2, 200))
    for _ in range(100):
        ops.batchnorm(x, np.ones(2), np.zeros(2), st, training=True)
    np.testing.assert_allclose(st.running_mean, x.mean(axis=(0, 2)), rtol=1e-3)
    y, _ = ops.batchnorm(x, np.ones(2), np.zeros(2), st, training=False)
    assert abs(y.mean()) < 1e-2


def test_batchnorm_eval_without_stats_raises():
    with pytest.raises(RuntimeError):
        ops.batchnorm(np.ones((1, 1, 3)), np.ones(1), np.zeros(1), ops.BatchNormState.create(1), training=False)


def test_batchnorm_group_permutation_equivariant(rng):
    x = rng.normal(size=(4, 3, 9))
    g, b = rng.normal(size=3), rng.normal(size=3)
    y, _ = ops.batchnorm(x, g, b, ops.BatchNormState.create(3), True)
    yr, _ = ops.batchnorm(np.roll(x, 1, axis=0), g, b, ops.BatchNormState.create(3), True)
    np.testing.assert_allclose(yr, np.roll(y, 1, axis=0), atol=1e-14)


@pytest.mark.parametrize("training, batch_stats", [(True, None), (False, None), (False, True)])
def test_batchnorm_gradients(training, batch_stats, rng):
    x = rng.normal(size=(4, 3, 6))
    gamma, beta = rng.normal(size=3), rng.normal(size=3)
    gy = rng.normal(size=x.shape)
    st = ops.BatchNormState(rng.normal(size=3), rng.uniform(0.5, 2, 3), 5)

    def loss():
        s = dataclasses.replace(st, running_mean=st.running_mean.copy(), running_var=st.running_var.copy())
        return float((ops.batchnorm(x, gamma, beta, s, training, batch_stats)[0] * gy).sum())

    s = dataclasses.replace(st, running_mean=st.running_mean.copy(), running_var=st.running_var.copy())
    _, cache = ops.batchnorm(x, gamma, beta, s, training, batch_stats)
    gx, gg, gb = ops.batchnorm_grad(gy, gamma, cache)
    assert rel(gx, central_diff(loss, x)) < 1e-4
    assert rel(gg, central_diff(loss, gamma)) < 1e-4
    assert rel(gb, central_diff(loss, beta)) < 1e-4


def test_global_pool_dense(rng):
    col = rng.normal(size=3)
    x = np.repeat(col[:, None], 5, axis=1)
    W = np.zeros((2, 3))
    b = np.array([0.5, -1.0])
    np.testing.assert_array_equal(ops.global_pool_dense(x, W, b)[0], b)
    W = rng.normal(size=(2, 3))
    _, cache = ops.global_pool_dense(x, W, b)
    np.testing.assert_allclose(cache[2], col, atol=1e-15)
    g = rng.normal(size=(4, 3, 5))
    oracle = W @ g.max(axis=0).mean(axis=1) + b
    np.testing.assert_allclose(ops.global_pool_dense(g, W, b)[0], oracle, atol=1e-12)
    gs = rng.normal(size=2)
    loss = lambda: float(ops.global_pool_dense(g, W, b)[0] @ gs)  # noqa: E731
    gx, gW, gb = ops.global_pool_dense_grad(gs, W, ops.global_pool_dense(g, W, b)[1])
    assert rel(gx, central_diff(loss, g)) < 1e-8
    assert rel(gW, central_diff(loss, W)) < 1e-8
