"""Property suites: gradient checks, Poincare-Hopf, section relabelling,
rigid motion and the flat-grid stencil oracle.

Every suite returns a list of :class:`Check` records with the measured
value next to its tolerance.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from . import convops as ops
from . import frames as fr
from . import shapes
from .hierarchy import build_hierarchy, relabel_sections
from .mesh import TriMesh, prepare
from .network import MeshInput, Network, NetworkDescription
from .training import cross_entropy, directed_edges, regression_loss

SUITES = ("gradcheck", "poincare-hopf", "section-permutation", "rigid-invariance", "flat-grid", "star-oracle",
          "multiscale")
FD_STEP = 1e-5


@dataclass
class Check:
    suite: str
    name: str
    value: float
    tolerance: float
    passed: bool
    detail: str = ""

    def line(self) -> str:
        tag = "PASS" if self.passed else "FAIL"
        extra = f" ({self.detail})" if self.detail else ""
        return f"{tag} {self.suite}/{self.name}: {self.value:.3g} (tol {self.tolerance:.3g}){extra}"


def _check(suite, name, value, tol, detail="", cmp="le"):
    ok = bool(value <= tol) if cmp == "le" else bool(value == tol)
    return Check(suite, name, float(value), float(tol), ok, detail)


# ---------------------------------------------------------------------------
# test meshes


def random_mesh(n_vertices: int = 50, seed: int = 0) -> TriMesh:
    """A bumpy sphere simplified to ``n_vertices``."""
    rng = np.random.default_rng(seed)
    m = shapes.icosphere(2 if n_vertices <= 162 else 3)
    m = m.with_positions(m.positions * (1 + 0.1 * rng.normal(size=(m.n_vertices, 1))))
    if n_vertices < m.n_vertices:
        from .hierarchy import simplify_qem

        m = simplify_qem(m, n_vertices).mesh
    return m


def small_hierarchy(mesh: TriMesh | None = None, levels: int = 3, N: int = 4, seed: int = 0):
    mesh = random_mesh(seed=seed) if mesh is None else mesh
    V = mesh.n_vertices
    targets = [V] + [max(6, int(round(V / 2.5 ** k))) for k in range(1, levels)]
    return build_hierarchy(mesh, targets, N=N)


# ---------------------------------------------------------------------------
# gradients


def rel_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    den = np.linalg.norm(a) + np.linalg.norm(b)
    return float(np.linalg.norm(a - b) / den) if den > 0 else 0.0


def fd_gradient(f, x, idx, step=FD_STEP):
    """Central differences of scalar ``f`` w.r.t. the flat entries ``idx`` of ``x``."""
    flat = x.reshape(-1)
    out = np.empty(len(idx))
    for n, i in enumerate(idx):
        old = flat[i]
        flat[i] = old + step
        fp = f()
        flat[i] = old - step
        fm = f()
        flat[i] = old
        out[n] = (fp - fm) / (2 * step)
    return out


def _sample(rng, size, k):
    return rng.choice(size, size=min(k, size), replace=False)


def fd_check(f, x, idx, analytic, tol, step=FD_STEP) -> tuple[float, int]:
    """Relative error of ``analytic`` against central differences at ``idx``.

    Networks are piecewise smooth (relu, max, l1), so a stencil of width
    ``2 step`` can straddle a kink. An entry whose mismatch disappears when
    the step is refined tenfold is attributed to such a kink and dropped;
    returns ``(error over the remaining entries, number dropped)``.
    """
    analytic = np.ravel(analytic)[idx]
    fd = fd_gradient(f, x, idx, step)
    bad = np.abs(fd - analytic) > tol * (np.abs(fd) + np.abs(analytic))
    keep = np.ones(len(idx), bool)
    if bad.any():
        fine = fd_gradient(f, x, np.asarray(idx)[bad], step / 10)
        ok = np.abs(fine - analytic[bad]) <= tol * (np.abs(fine) + np.abs(analytic[bad]))
        keep[np.flatnonzero(bad)[ok]] = False
    return rel_error(fd[keep], analytic[keep]), int((~keep).sum())


def compare_grad(f, tensors, grads, rng, k=30, tol=1e-4) -> tuple[float, int]:
    """Worst relative error over ``tensors`` plus the count of kink-straddling entries."""
    worst, kinks = 0.0, 0
    for x, g in zip(tensors, grads):
        err, n = fd_check(f, x, _sample(rng, x.size, k), g, tol)
        worst, kinks = max(worst, err), kinks + n
    return worst, kinks


def _grad_check(name, f, tensors, grads, rng, tol):
    err, kinks = compare_grad(f, tensors, grads, rng, tol=tol)
    return _check("gradcheck", name, err, tol, f"{kinks} kink-straddling entries dropped" if kinks else "")


def layer_gradchecks(h, rng, tol=1e-4) -> list[Check]:
    sample = MeshInput.from_hierarchy(h)
    N = h.N
    p0 = sample.patches[0]
    V0 = p0.n_vertices
    out = []

    def run(name, fwd, bwd, tensors):
        y = fwd()
        R = rng.normal(size=np.shape(y))
        grads = bwd(R)
        f = lambda: float(np.sum(fwd() * R))  # noqa: E731
        out.append(_grad_check(name, f, tensors, grads, rng, tol))

    x = rng.normal(size=(N, 3, V0))
    W = rng.normal(size=(4, 3, 10))
    run("gconv", lambda: ops.gconv(p0, x, W), lambda R: ops.gconv_grad(p0, x, W, R), [x, W])
    Wp = rng.normal(size=(4, 3 + ops.N_PATCH_FEATURES, 10))
    run("gconv_patch_input", lambda: ops.gconv(p0, x, Wp, True),
        lambda R: ops.gconv_grad(p0, x, Wp, R, True), [x, Wp])
    W1, b1 = rng.normal(size=(5, 3)), rng.normal(size=5)
    run("gconv1x1", lambda: ops.gconv1x1(x, W1, b1),
        lambda R: ops.gconv1x1_grad(x, W1, R), [x, W1, b1])
    gam, bet = rng.uniform(0.5, 1.5, 3), rng.normal(size=3)

    def bn_fwd():
        return ops.batchnorm(x, gam, bet, ops.BatchNormState.create(3), True)[0]

    def bn_bwd(R):
        _, cache = ops.batchnorm(x, gam, bet, ops.BatchNormState.create(3), True)
        return ops.batchnorm_grad(R, gam, cache)

    run("batchnorm", bn_fwd, bn_bwd, [x, gam, bet])
    st = ops.BatchNormState.create(3)
    ops.batchnorm(x, gam, bet, st, True)
    run("batchnorm_eval", lambda: ops.batchnorm(x, gam, bet, st, False)[0],
        lambda R: ops.batchnorm_grad(R, gam, ops.batchnorm(x, gam, bet, st, False)[1]), [x, gam, bet])
    for mode in ("max", "average"):
        run(f"reduce_{mode}", lambda: ops.reduce(x, mode)[0],
            lambda R: [ops.reduce_grad(R, x.shape, mode, ops.reduce(x, mode)[1])], [x])
    pm = sample.pools[0]
    for mode in ("max", "average"):
        run(f"pool_{mode}", lambda: ops.pool(x, pm, mode)[0],
            lambda R: [ops.pool_grad(R, pm, mode, ops.pool(x, pm, mode)[1], x.shape)], [x])
    xc = rng.normal(size=(N, 3, pm.n_coarse))
    run("unpool", lambda: ops.unpool(xc, pm), lambda R: [ops.unpool_grad(R, pm)], [xc])
    run("relu", lambda: ops.relu(x), lambda R: [ops.relu_grad(x, R)], [x])
    Wd, bd = rng.normal(size=(3, 3)), rng.normal(size=3)
    run("global_pool_dense", lambda: ops.global_pool_dense(x, Wd, bd)[0],
        lambda R: ops.global_pool_dense_grad(R, Wd, ops.global_pool_dense(x, Wd, bd)[1]), [x, Wd, bd])

    s = rng.normal(size=(4, V0))
    lab = rng.integers(0, 4, V0)
    g = cross_entropy(s, lab)[1]
    out.append(_grad_check("cross_entropy", lambda: cross_entropy(s, lab)[0], [s], [g], rng, tol))
    mesh0 = h.levels[0].mesh
    E = directed_edges(mesh0)
    P, Nn = rng.normal(size=(V0, 3)), rng.normal(size=(V0, 3))
    TP, TN = rng.normal(size=(V0, 3)), rng.normal(size=(V0, 3))
    gp, gn = regression_loss(P, Nn, TP, TN, E)[1]
    out.append(_grad_check("regression_loss", lambda: regression_loss(P, Nn, TP, TN, E)[0], [P, Nn], [gp, gn],
                           rng, tol))
    return out


GRADCHECK_NETWORK = {
    "name": "gradcheck-unet",
    "task": "regression",
    "layers": [
        {"type": "duplicate"},
        {"type": "gconv", "out": 4, "patch_input": True},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "residual"},
        {"type": "pool", "mode": "max"},
        {"type": "gconv", "out": 5},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "pool", "mode": "average"},
        {"type": "gconv", "out": 5},
        {"type": "relu"},
        {"type": "unpool"},
        {"type": "gconv", "out": 4},
        {"type": "unpool"},
        {"type": "gconv", "out": 4, "patch_input": True},
        {"type": "reduce", "mode": "max"},
        {"type": "gconv1x1", "out": 6},
    ],
}

GRADCHECK_CLASSIFIER = {
    "name": "gradcheck-classifier",
    "task": "classification",
    "layers": [
        {"type": "duplicate"},
        {"type": "gconv", "out": 4, "patch_input": True},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "pool", "mode": "max"},
        {"type": "residual"},
        {"type": "pool", "mode": "max"},
        {"type": "gconv", "out": 5},
        {"type": "reduce", "mode": "average"},
        {"type": "global_pool_dense", "out": 3},
    ],
}


def network_gradcheck(h, rng, tol=1e-3, k=8) -> list[Check]:
    sample = MeshInput.from_hierarchy(h)
    mesh0 = h.levels[0].mesh
    V = mesh0.n_vertices
    out = []
    targets = {
        "regression": {"positions": rng.normal(size=(V, 3)), "normals": rng.normal(size=(V, 3)),
                       "edges": directed_edges(mesh0)},
        "classification": 1,
    }
    for d in (GRADCHECK_NETWORK, GRADCHECK_CLASSIFIER):
        net = Network(NetworkDescription.from_dict(d), N=h.N, seed=int(rng.integers(1 << 30)))
        for p in net.parameters():  # move batchnorm scales off their initial constants
            p += 0.1 * rng.normal(size=p.shape)
        task = net.desc.task
        tgt = targets[task]

        def loss():
            o = net.forward(sample, training=True)
            if task == "classification":
                return cross_entropy(o, tgt)
            return _regression(o, tgt)

        net.zero_grad()
        _, g = loss()
        net.backward(g)
        grads = [gr.copy() for gr in net.gradients()]
        worst, kinks = 0.0, 0
        for p, gr in zip(net.parameters(), grads):
            err, n = fd_check(lambda: loss()[0], p, _sample(rng, p.size, k), gr, tol)
            worst, kinks = max(worst, err), kinks + n
        out.append(_check("gradcheck", f"network/{d['name']}", worst, tol,
                          f"{len(grads)} parameter tensors, {h.sizes()} vertices, "
                          f"{kinks} kink-straddling entries dropped"))
    return out


def _regression(o, tgt):
    loss, (gp, gn) = regression_loss(o[:3].T, o[3:].T, tgt["positions"], tgt["normals"], tgt["edges"])
    return loss, np.concatenate([gp.T, gn.T])


def suite_gradcheck(mesh=None, seed=0) -> list[Check]:
    rng = np.random.default_rng(seed)
    h = small_hierarchy(mesh, levels=3, seed=seed)
    return layer_gradchecks(h, rng) + network_gradcheck(h, rng)


# ---------------------------------------------------------------------------
# Poincare-Hopf


def poincare_hopf(mesh: TriMesh, N=4, lam=fr.DEFAULT_LAMBDA, label="mesh") -> list[Check]:
    m, basis = prepare(mesh)
    conn = fr.connection_coefficients(m, basis)
    field = fr.solve_rosy(m, conn, basis, N, lam)
    atlas = fr.frame_atlas(field, basis, conn)
    total = atlas.index.sum() / N
    chi = m.euler_characteristic
    worst = float(fr.matched_angular_distance(atlas).max())
    return [
        Check("poincare-hopf", f"{label}/index_sum_minus_chi", float(abs(total - chi)), 1e-9, abs(total - chi) < 1e-9,
              f"sum {total:g}, chi {chi}, {int(np.count_nonzero(atlas.index))} singular faces"),
        _check("poincare-hopf", f"{label}/max_matched_angle", worst, np.pi / N + 1e-9),
    ]


def suite_poincare_hopf(mesh=None, N=4) -> list[Check]:
    if mesh is not None:
        return poincare_hopf(mesh, N)
    return poincare_hopf(shapes.icosphere(3), N, label="icosphere") + \
        poincare_hopf(shapes.torus(1.0, 0.4, 32, 16), N, label="torus")


# ---------------------------------------------------------------------------
# invariances


DEMO_NETWORK = {
    "name": "invariance-probe",
    "task": "classification",
    "layers": [
        {"type": "duplicate"},
        {"type": "gconv", "out": 8, "patch_input": True},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "residual"},
        {"type": "pool", "mode": "max"},
        {"type": "gconv", "out": 8},
        {"type": "batchnorm"},
        {"type": "relu"},
        {"type": "reduce", "mode": "max"},
        {"type": "global_pool_dense", "out": 3},
    ],
}


def _warm(net: Network, sample: MeshInput, steps=5, label=1, lr=1e-2):
    """A few Adam steps towards ``label`` so the probe is a trained network
    with populated batchnorm statistics."""
    from .training import OptimizerState, adam_step

    opt = OptimizerState.create(net.parameters(), lr)
    for _ in range(steps):
        net.zero_grad()
        out = net.forward(sample, training=True)
        _, g = cross_entropy(out, label)
        net.backward(g)
        adam_step(net.parameters(), net.gradients(), opt)


def _reduce_outputs(net):
    return [x for kind, x in net.trace if kind == "reduce"]


def rel_change(a, b) -> float:
    a, b = np.asarray(a), np.asarray(b)
    if a.size == 0:
        return 0.0
    scale = max(np.abs(a).max(), 1e-30)
    return float(np.abs(a - b).max() / scale)


def section_permutation(h, net: Network, shifts=(1, 2, 3), rng=None) -> list[Check]:
    base_in = MeshInput.from_hierarchy(h)
    base = net.forward(base_in, record=True)
    base_red = _reduce_outputs(net)
    base_trace = [x for _, x in net.trace]
    out = []
    for s in shifts:
        hs = relabel_sections(h, s)
        y = net.forward(MeshInput.from_hierarchy(hs), record=True)
        red = _reduce_outputs(net)
        dev = max([rel_change(base, y)] + [rel_change(a, b) for a, b in zip(base_red, red)])
        # grouped intermediates are the same maps with groups rolled by s
        perm = 0.0
        for a, (kind, b) in zip(base_trace, net.trace):
            if a.shape[0] == net.N and a.shape == b.shape and a.ndim == 3:
                perm = max(perm, rel_change(np.roll(a, -s, axis=0), b))
        out.append(_check("section-permutation", f"shift_{s}", dev, 1e-6,
                          f"grouped maps rolled: {perm:.2e}"))
    if rng is not None:
        shifts_v = [rng.integers(0, h.N, lv.n_vertices) for lv in h.levels]
        y = net.forward(MeshInput.from_hierarchy(relabel_sections(h, shifts_v)), record=True)
        dev = max([rel_change(base, y)] + [rel_change(a, b) for a, b in zip(base_red, _reduce_outputs(net))])
        out.append(_check("section-permutation", "per_vertex_shift", dev, 1e-6))
    return out


def rigid_invariance(mesh, targets, net: Network, motions=10, seed=0, N=4) -> list[Check]:
    rng = np.random.default_rng(seed)
    base = net.forward(MeshInput.from_hierarchy(build_hierarchy(mesh, targets, N=N)))
    worst = 0.0
    for _ in range(motions):
        moved = shapes.rigid_motion(mesh, shapes.random_rotation(rng), rng.normal(size=3) * 3)
        y = net.forward(MeshInput.from_hierarchy(build_hierarchy(moved, targets, N=N)))
        worst = max(worst, rel_change(base, y))
    return [_check("rigid-invariance", f"{motions}_motions", worst, 1e-6)]


def suite_section_permutation(mesh=None, seed=0, net=None) -> list[Check]:
    rng = np.random.default_rng(seed)
    h = small_hierarchy(mesh if mesh is not None else random_mesh(150, seed), levels=2, seed=seed)
    if net is None:
        net = Network(NetworkDescription.from_dict(DEMO_NETWORK), N=h.N, seed=seed)
        _warm(net, MeshInput.from_hierarchy(h))
    return section_permutation(h, net, rng=rng)


def suite_rigid_invariance(mesh=None, seed=0, net=None) -> list[Check]:
    mesh = mesh if mesh is not None else random_mesh(150, seed)
    V = mesh.n_vertices
    targets = [V, max(6, int(round(V / 3)))]
    if net is None:
        net = Network(NetworkDescription.from_dict(DEMO_NETWORK), N=4, seed=seed)
        _warm(net, MeshInput.from_hierarchy(build_hierarchy(mesh, targets, N=4)))
    return rigid_invariance(mesh, targets, net, seed=seed, N=net.N)


# ---------------------------------------------------------------------------
# flat grid


def aligned_grid_patches(nx=9, ny=9, N=4):
    """Patches of a planar lattice with the constant field ``v = 1``."""
    m, basis = prepare(shapes.triangular_grid(nx, ny))
    conn = fr.connection_coefficients(m, basis)
    field = fr.RoSyField(N, np.ones(m.n_vertices, complex), 0.0)
    atlas = fr.frame_atlas(field, basis, conn)
    return m, atlas, ops.build_patches(m, atlas)


def stencil_oracle(positions, W, x, N, weights=None):
    """Dense evaluation from positions alone: neighbours are the points at
    unit distance, frame ``k`` is the x axis rotated by ``2 pi k / N``."""
    V = len(positions)
    D = np.linalg.norm(positions[:, None] - positions[None], axis=-1)
    A = (np.abs(D - 1.0) < 1e-9) | np.eye(V, dtype=bool)
    w = np.ones(V) if weights is None else weights
    O = W.shape[0]
    out = np.zeros((N, O, V))
    for k in range(N):
        c, s = np.cos(2 * np.pi * k / N), np.sin(2 * np.pi * k / N)
        for i in range(V):
            nb = np.flatnonzero(A[i])
            d = positions[nb] - positions[i]
            u = d[:, 0] * c + d[:, 1] * s
            v = -d[:, 0] * s + d[:, 1] * c
            K = ops.kernel_values(W, u, v)  # (P, O, C)
            ww = w[nb] / w[nb].sum()
            out[k, :, i] = np.einsum("p,poc,cp->o", ww, K, x[k][:, nb])
    return out


def interior_mask(mesh: TriMesh, rings=2) -> np.ndarray:
    """Vertices at least ``rings`` edges away from the boundary."""
    inside = np.ones(mesh.n_vertices, bool)
    inside[mesh.boundary_vertices] = False
    adj = mesh.adjacency
    for _ in range(rings - 1):
        bad = ~inside
        reach = adj @ bad.astype(float) > 0
        inside &= ~reach
    return inside


def suite_flat_grid(seed=0, N=4, nx=9, ny=9) -> list[Check]:
    rng = np.random.default_rng(seed)
    m, atlas, p = aligned_grid_patches(nx, ny, N)
    V = m.n_vertices
    W = rng.normal(size=(3, 2, 10))
    x = rng.normal(size=(N, 2, V))
    out = []
    y = ops.gconv(p, x, W)
    oracle = stencil_oracle(m.positions, W, x, N, weights=m.one_ring_area)
    out.append(_check("flat-grid", "stencil_oracle", np.abs(y - oracle).max(), 1e-10,
                      f"{V} vertices, one-ring area weights"))
    pu = dataclasses.replace(p, weight=np.ones_like(p.weight))
    yu = ops.gconv(pu, x, W)
    oracle_u = stencil_oracle(m.positions, W, x, N)
    out.append(_check("flat-grid", "stencil_oracle_uniform", np.abs(yu - oracle_u).max(), 1e-10))

    # translate an indicator by each lattice vector and compare interior outputs
    inside = interior_mask(m, 2)
    worst = 0.0
    ci, cj = nx // 2 - 1, ny // 2 - 1
    for di, dj in ((1, 0), (0, 1)):
        f = np.zeros((N, 2, V))
        f[:, :, cj * nx + ci] = rng.normal(size=(N, 2))
        g = np.zeros_like(f)
        g[:, :, (cj + dj) * nx + ci + di] = f[:, :, cj * nx + ci]
        yf, yg = ops.gconv(p, f, W), ops.gconv(p, g, W)
        for j in range(ny):
            for i in range(nx):
                a, b = j * nx + i, (j + dj) * nx + i + di
                if i + di < nx and j + dj < ny and inside[a] and inside[b]:
                    worst = max(worst, np.abs(yf[:, :, a] - yg[:, :, b]).max())
    out.append(_check("flat-grid", "translation_equivariance", worst, 1e-12))
    return out


# ---------------------------------------------------------------------------


def star_patches(n_nbr=3, N=4, rng=None, coords=None):
    """One-vertex star: the centre plus ``n_nbr`` hand-placed neighbours.

    Neighbour features live on extra vertices ``1..n_nbr`` which own only
    themselves, so vertex 0 is the only full patch.
    """
    rng = rng or np.random.default_rng(0)
    V = n_nbr + 1
    if coords is None:
        ang = np.sort(rng.uniform(0, 2 * np.pi, n_nbr))
        rad = rng.uniform(0.3, 1.0, n_nbr)
        coords = np.stack([rad * np.cos(ang), rad * np.sin(ang)], axis=1)
    coords = np.asarray(coords, float)
    ptr = np.concatenate([[0], np.arange(n_nbr + 1, n_nbr + 1 + V)])
    nbr = np.concatenate([np.arange(V), np.arange(1, V)])
    P = len(nbr)
    offsets = np.concatenate([[0], rng.integers(0, N, n_nbr), np.zeros(n_nbr, int)])
    weight = rng.uniform(0.5, 2.0, P)
    C = np.zeros((N, P, 2))
    for k in range(N):
        c, s = np.cos(2 * np.pi * k / N), np.sin(2 * np.pi * k / N)
        C[k, 1:V, 0] = coords[:, 0] * c + coords[:, 1] * s
        C[k, 1:V, 1] = -coords[:, 0] * s + coords[:, 1] * c
    feats = rng.normal(size=(N, P, ops.N_PATCH_FEATURES))
    return ops.PatchData(N, ptr, nbr, offsets, weight, np.ones(V), C, feats, np.zeros(V, bool))


def scalar_gconv_vertex(p: ops.PatchData, x, W, vertex=0):
    """Term-by-term evaluation at one vertex with plain Python loops."""
    N, C, _ = x.shape
    O = W.shape[0]
    a, b = int(p.ptr[vertex]), int(p.ptr[vertex + 1])
    total = sum(float(p.weight[e]) for e in range(a, b))
    out = np.zeros((N, O))
    for k in range(N):
        for o in range(O):
            acc = 0.0
            for e in range(a, b):
                u, v = float(p.coords[k, e, 0]), float(p.coords[k, e, 1])
                mono = (1.0, u, v, u * u, u * v, v * v, u * u * u, u * u * v, u * v * v, v * v * v)
                src = (k + int(p.offsets[e])) % N
                for c in range(C):
                    kval = 0.0
                    for t in range(10):
                        kval += float(W[o, c, t]) * mono[t]
                    acc += float(p.weight[e]) / total * kval * float(x[src, c, int(p.nbr[e])])
            out[k, o] = acc
    return out


def suite_star_oracle(seed=0, draws=100, N=4) -> list[Check]:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(draws):
        p = star_patches(int(rng.integers(3, 7)), N, rng)
        C = 1 if i % 2 == 0 else 3
        W = rng.normal(size=(2, C, 10))
        x = rng.normal(size=(N, C, p.n_vertices))
        y = ops.gconv(p, x, W)[:, :, 0]
        worst = max(worst, np.abs(y - scalar_gconv_vertex(p, x, W)).max())
    return [_check("star-oracle", "scalar_loop_max_abs", worst, 1e-10, f"{draws} random kernel/feature draws")]


def multiscale_solve(mesh: TriMesh, targets, N=4, lam=fr.DEFAULT_LAMBDA, repeats=3) -> list[Check]:
    """Coarse-to-fine solve against a from-scratch solve of the finest level.

    Timings are the best of ``repeats``; the multiscale time covers every
    level including prolongation.
    """
    best_ms, best_fs = np.inf, np.inf
    for _ in range(repeats):
        h = build_hierarchy(mesh, targets, N=N, lam=lam)
        best_ms = min(best_ms, h.solve_seconds)
    m, basis = h.levels[0].mesh, h.levels[0].basis
    conn = h.levels[0].conn
    for _ in range(repeats):
        t0 = time.perf_counter()
        ref = fr.solve_rosy(m, conn, basis, N, lam)
        best_fs = min(best_fs, time.perf_counter() - t0)
    fine = h.levels[0].field
    gap = (fine.objective - ref.objective) / ref.objective
    egap = (fine.energy - ref.energy) / ref.energy
    return [
        _check("multiscale", "objective_excess", gap, 0.01,
               f"{m.n_vertices} vertices, Dirichlet energy excess {egap:.2e}"),
        _check("multiscale", "wall_time_ratio", best_ms / best_fs, 1.0,
               f"multiscale {best_ms * 1e3:.1f} ms vs scratch {best_fs * 1e3:.1f} ms"),
    ]


def five_k_mesh(seed=0, n_vertices=5000) -> TriMesh:
    from .hierarchy import simplify_qem
    from .synth import displace, smooth_field

    rng = np.random.default_rng(seed)
    m = shapes.icosphere(5)
    m = displace(m, 0.1 * smooth_field(m.positions, rng, freq=3))
    return simplify_qem(m, n_vertices).mesh


def suite_multiscale(mesh=None, N=4) -> list[Check]:
    m = mesh if mesh is not None else five_k_mesh()
    V = m.n_vertices
    return multiscale_solve(m, [V, V // 3, V // 9], N)


def run_suites(names, mesh=None, seed=0, N=4) -> list[Check]:
    results = []
    for name in names:
        if name == "gradcheck":
            results += suite_gradcheck(mesh, seed)
        elif name == "poincare-hopf":
            results += suite_poincare_hopf(mesh, N)
        elif name == "section-permutation":
            results += suite_section_permutation(mesh, seed)
        elif name == "rigid-invariance":
            results += suite_rigid_invariance(mesh, seed)
        elif name == "flat-grid":
            results += suite_flat_grid(seed, N)
        elif name == "star-oracle":
            results += suite_star_oracle(seed, N=N)
        elif name == "multiscale":
            results += suite_multiscale(mesh, N)
        else:
            raise ValueError(f"unknown suite {name!r}; choose from {SUITES}")
    return results
