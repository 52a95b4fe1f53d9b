"""Differentiable operations on grouped feature maps.

A grouped feature map is an array of shape ``(N, C, V)``: group, channel,
vertex. Ungrouped maps use ``N = 1``. Every operation comes as a forward
function plus an explicit reverse-mode gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import numpy as np

from . import kernels
from .frames import FrameAtlas
from .mesh import TriMesh

N_MONOMIALS = 10
N_PATCH_FEATURES = 5


def monomials(u, v):
    """Cubic monomial basis ``(1, u, v, u^2, uv, v^2, u^3, u^2 v, u v^2, v^3)``."""
    one = np.ones_like(u)
    return np.stack([one, u, v, u * u, u * v, v * v, u ** 3, u * u * v, u * v * v, v ** 3], axis=-1)


def kernel_values(W, u, v):
    """Evaluate the polynomial kernels ``W (O, C, 10)`` at coordinates ``(u, v)``."""
    return np.tensordot(monomials(np.asarray(u, float), np.asarray(v, float)), W, axes=([-1], [-1]))


@dataclass(eq=False)
class PatchData:
    """Per-vertex 1-ring patches seen through each of the N frames.

    Entries are CSR ordered: ``ptr[x]:ptr[x+1]`` are the entries of vertex
    ``x``; the first is ``x`` itself.
    """

    N: int
    ptr: np.ndarray          # (V+1,)
    nbr: np.ndarray          # (P,) neighbour vertex of each entry
    offsets: np.ndarray      # (P,) group offset m(x, y)
    weight: np.ndarray       # (P,) raw sampling weight w_y
    radius: np.ndarray       # (V,)
    coords: np.ndarray       # (N, P, 2)
    features: np.ndarray     # (N, P, 5)
    isolated: np.ndarray     # (V,) bool

    @property
    def n_vertices(self) -> int:
        return len(self.ptr) - 1

    @cached_property
    def owner(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_vertices), np.diff(self.ptr))

    @cached_property
    def wn(self) -> np.ndarray:
        total = np.add.reduceat(self.weight, self.ptr[:-1])
        return self.weight / total[self.owner]

    @cached_property
    def mono(self) -> np.ndarray:
        return np.ascontiguousarray(monomials(self.coords[..., 0], self.coords[..., 1]))

    @cached_property
    def feature_sums(self) -> np.ndarray:
        """``(N, V, 5, 10)`` weighted monomial sums of the patch input features."""
        A = self.wn[None, :, None] * self.mono
        T = self.features[:, :, :, None] * A[:, :, None, :]
        return np.add.reduceat(T, self.ptr[:-1], axis=1)

    def as_dtype(self, dtype):
        key = np.dtype(dtype).name
        cache = self.__dict__.setdefault("_typed", {})
        if key not in cache:
            cache[key] = (
                np.ascontiguousarray(self.wn, dtype=dtype),
                np.ascontiguousarray(self.mono, dtype=dtype),
                np.ascontiguousarray(self.feature_sums, dtype=dtype),
            )
        return cache[key]


def build_patches(mesh: TriMesh, atlas: FrameAtlas) -> PatchData:
    """Local patches ``{x} + 1-ring`` with coordinates under every frame of ``x``.

    Coordinates are ``(1/r) F_x^k (y - x)`` restricted to the tangent plane,
    ``r`` the largest projected neighbour offset. Input features per entry:
    the neighbour normal in frame coordinates, the height ``n_x.(y - x)/r``
    and a constant 1.
    """
    if atlas.offsets is None:
        raise ValueError("frame matching missing")
    V = mesh.n_vertices
    adj = mesh.adjacency
    deg = np.diff(adj.indptr)
    ptr = np.zeros(V + 1, dtype=np.int64)
    ptr[1:] = np.cumsum(deg + 1)
    P = int(ptr[-1])
    owner = np.repeat(np.arange(V), deg + 1)
    nbr = np.empty(P, dtype=np.int64)
    nbr[ptr[:-1]] = np.arange(V)
    is_center = np.zeros(P, dtype=bool)
    is_center[ptr[:-1]] = True
    nbr[~is_center] = adj.indices

    offsets = np.zeros(P, dtype=np.int64)
    rest = ~is_center
    if rest.any():
        x, y = owner[rest], nbr[rest]
        eid = mesh.edge_index(x, y)
        offsets[rest] = atlas.directed_offsets(x, y, eid)

    d = mesh.positions[nbr] - mesh.positions[owner]
    basis = atlas.basis
    n_x = basis.n[owner]
    proj = np.hypot(np.einsum("ij,ij->i", d, basis.e0[owner]), np.einsum("ij,ij->i", d, basis.e1[owner]))
    radius = np.maximum.reduceat(proj, ptr[:-1])
    isolated = deg == 0
    radius = np.where(isolated | (radius <= 0), 1.0, radius)
    r = radius[owner]

    N = atlas.N
    coords = np.empty((N, P, 2))
    features = np.empty((N, P, N_PATCH_FEATURES))
    n_y = mesh.normals[nbr]
    height = np.einsum("ij,ij->i", d, n_x) / r
    nz = np.einsum("ij,ij->i", n_y, n_x)
    for k in range(N):
        e0, e1 = atlas.axes(k)
        e0, e1 = e0[owner], e1[owner]
        coords[k, :, 0] = np.einsum("ij,ij->i", d, e0) / r
        coords[k, :, 1] = np.einsum("ij,ij->i", d, e1) / r
        features[k, :, 0] = np.einsum("ij,ij->i", n_y, e0)
        features[k, :, 1] = np.einsum("ij,ij->i", n_y, e1)
        features[k, :, 2] = nz
        features[k, :, 3] = height
        features[k, :, 4] = 1.0
    coords[:, is_center] = 0.0
    features[:, is_center, 3] = 0.0
    weight = mesh.one_ring_area[nbr].astype(np.float64)
    return PatchData(N, ptr, nbr, offsets, weight, radius, coords, features, isolated)


# ---------------------------------------------------------------------------
# grouped convolution


def _split_kernel(W, patch_input):
    if patch_input:
        return W[:, :N_PATCH_FEATURES], W[:, N_PATCH_FEATURES:]
    return None, W


def gconv(patches: PatchData, x: np.ndarray, W: np.ndarray, patch_input: bool = False) -> np.ndarray:
    """Semi-discrete grouped convolution with cubic polynomial kernels.

    ``out[k, o, x] = sum_y wn_y sum_c K_oc(u, v) in[(k + m(x, y)) mod N, c, y]``
    where ``(u, v)`` are the coordinates of ``y`` under frame ``k`` of ``x``.
    With ``patch_input`` the first five kernel input channels read the
    per-patch geometric features instead of ``x``.
    """
    N, C, V = x.shape
    if N != patches.N or V != patches.n_vertices:
        raise ValueError(f"feature map {x.shape} does not live on this level (N={patches.N}, V={patches.n_vertices})")
    Wx, Wf = _split_kernel(W, patch_input)
    if Wf.shape[1] != C:
        raise ValueError(f"kernel expects {Wf.shape[1]} input channels, got {C}")
    dtype = x.dtype
    wn, mono, fsum = patches.as_dtype(dtype)
    inp = np.ascontiguousarray(x.transpose(0, 2, 1))
    out = np.empty((N, V, W.shape[0]), dtype=dtype)
    if C:
        kernels.gconv_forward(patches.ptr, patches.nbr, patches.offsets, wn, mono, inp,
                              np.ascontiguousarray(Wf, dtype=dtype), out)
    else:
        out[...] = 0
    if Wx is not None:
        out += np.einsum("nvcp,ocp->nvo", fsum, Wx.astype(dtype), optimize=True)
    return out.transpose(0, 2, 1)


def gconv_grad(patches: PatchData, x: np.ndarray, W: np.ndarray, gy: np.ndarray, patch_input: bool = False):
    """Gradients ``(d x, d W)`` of :func:`gconv` given the output gradient."""
    N, C, V = x.shape
    Wx, Wf = _split_kernel(W, patch_input)
    dtype = x.dtype
    wn, mono, fsum = patches.as_dtype(dtype)
    inp = np.ascontiguousarray(x.transpose(0, 2, 1))
    gout = np.ascontiguousarray(gy.transpose(0, 2, 1), dtype=dtype)
    ginp = np.zeros_like(inp)
    gWf = np.zeros(Wf.shape, dtype=dtype)
    if C:
        kernels.gconv_backward(patches.ptr, patches.nbr, patches.offsets, wn, mono, inp,
                               np.ascontiguousarray(Wf, dtype=dtype), gout, ginp, gWf)
    if Wx is not None:
        gWx = np.einsum("nvo,nvcp->ocp", gout, fsum, optimize=True)
        gW = np.concatenate([gWx, gWf], axis=1)
    else:
        gW = gWf
    return ginp.transpose(0, 2, 1), gW


# ---------------------------------------------------------------------------
# pointwise and group operations


def gconv1x1(x, W, b):
    """Per-vertex, per-group affine map shared by all groups."""
    if W.shape[1] != x.shape[1] or b.shape[0] != W.shape[0]:
        raise ValueError(f"1x1 weights {W.shape} incompatible with input channels {x.shape[1]}")
    return np.einsum("oc,ncv->nov", W, x, optimize=True) + b[None, :, None]


def gconv1x1_grad(x, W, gy):
    gx = np.einsum("oc,nov->ncv", W, gy, optimize=True)
    gW = np.einsum("nov,ncv->oc", gy, x, optimize=True)
    gb = gy.sum(axis=(0, 2))
    return gx, gW, gb


def duplicate(features, N: int):
    """Copy a ``(C, V)`` map into ``N`` identical groups."""
    f = np.asarray(features)
    return np.broadcast_to(f[None], (N,) + f.shape).copy()


def duplicate_grad(gy):
    return gy.sum(axis=0)


def reduce(x, mode: str = "max"):
    """Collapse groups to a ``(C, V)`` map; returns ``(out, argmax)``.

    Max ties resolve to the lowest group index.
    """
    if mode == "max":
        arg = np.argmax(x, axis=0)
        return np.take_along_axis(x, arg[None], axis=0)[0], arg
    if mode == "average":
        return x.mean(axis=0), None
    raise ValueError(f"unknown reduce mode {mode!r}")


def reduce_grad(gy, shape, mode, arg):
    N = shape[0]
    if mode == "max":
        g = np.zeros(shape, dtype=gy.dtype)
        np.put_along_axis(g, arg[None], gy[None], axis=0)
        return g
    return np.broadcast_to(gy[None] / N, shape).copy()


def _aligned(x, group_offset, sign):
    N = x.shape[0]
    idx = (np.arange(N)[:, None] + sign * group_offset[None, :]) % N
    return np.take_along_axis(x, idx[:, None, :], axis=0), idx


@dataclass(eq=False)
class PoolMap:
    """Fine-to-coarse nesting between two adjacent levels."""

    parent_of: np.ndarray
    group_offset: np.ndarray
    n_coarse: int

    @cached_property
    def order(self):
        return np.argsort(self.parent_of, kind="stable")

    @cached_property
    def starts(self):
        return np.searchsorted(self.parent_of[self.order], np.arange(self.n_coarse))

    @cached_property
    def counts(self):
        return np.bincount(self.parent_of, minlength=self.n_coarse)


def pool(x, pmap: PoolMap, mode: str = "max"):
    """Coarse group ``i`` pools fine group ``(i + offset) mod N`` of every child.

    Returns ``(out, argmax)`` where ``argmax`` indexes fine vertices.
    """
    if x.shape[2] != len(pmap.parent_of):
        raise ValueError("pooling input does not live on the fine level")
    a, _ = _aligned(x, pmap.group_offset, +1)
    a = a[:, :, pmap.order]
    if mode == "max":
        out = np.maximum.reduceat(a, pmap.starts, axis=2)
        seg = pmap.parent_of[pmap.order]
        pos = np.arange(a.shape[2])
        hit = np.where(a == out[:, :, seg], pos, a.shape[2])
        first = np.minimum.reduceat(hit, pmap.starts, axis=2)
        return out, pmap.order[first]
    if mode == "average":
        out = np.add.reduceat(a, pmap.starts, axis=2) / pmap.counts
        return out, None
    raise ValueError(f"unknown pooling mode {mode!r}")


def pool_grad(gy, pmap: PoolMap, mode, arg, fine_shape):
    N, C, _ = gy.shape
    ga = np.zeros(fine_shape, dtype=gy.dtype)  # gradient w.r.t. aligned fine map
    if mode == "max":
        n_idx = np.arange(N)[:, None, None]
        c_idx = np.arange(C)[None, :, None]
        np.add.at(ga, (n_idx, c_idx, arg), gy)
    else:
        ga[...] = (gy / pmap.counts)[:, :, pmap.parent_of]
    # undo the alignment: aligned[i] = x[(i + off) mod N]
    g = np.zeros_like(ga)
    idx = (np.arange(N)[:, None] + pmap.group_offset[None, :]) % N
    np.put_along_axis(g, idx[:, None, :].repeat(C, axis=1), ga, axis=0)
    return g


def unpool(x, pmap: PoolMap):
    """Child group ``j`` copies parent group ``(j - offset) mod N``."""
    if x.shape[2] != pmap.n_coarse:
        raise ValueError("unpooling input does not live on the coarse level")
    y = x[:, :, pmap.parent_of]
    out, _ = _aligned(y, pmap.group_offset, -1)
    return out


def unpool_grad(gy, pmap: PoolMap):
    N, C, _ = gy.shape
    idx = (np.arange(N)[:, None] - pmap.group_offset[None, :]) % N
    g = np.zeros_like(gy)
    np.put_along_axis(g, idx[:, None, :].repeat(C, axis=1), gy, axis=0)
    out = np.zeros((N, C, pmap.n_coarse), dtype=gy.dtype)
    np.add.at(out, (slice(None), slice(None), pmap.parent_of), g)
    return out


def relu(x):
    return np.maximum(x, 0)


def relu_grad(x, gy):
    return np.where(x > 0, gy, 0)


# ---------------------------------------------------------------------------
# batch normalisation

BN_EPS = 1e-7
BN_MOMENTUM = 0.9


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    count: int = 0

    @classmethod
    def create(cls, channels, dtype=np.float64):
        return cls(np.zeros(channels, dtype), np.ones(channels, dtype), 0)


def batchnorm(x, gamma, beta, state: BatchNormState, training: bool, batch_stats: bool | None = None):
    """Per-channel normalisation with statistics pooled over groups and vertices.

    Returns ``(y, cache)``. Training updates the running statistics in
    ``state`` with momentum 0.9. ``batch_stats`` (default: ``training``)
    selects normalising by the statistics of ``x`` itself; otherwise the
    running statistics are used.
    """
    if batch_stats is None:
        batch_stats = training
    if batch_stats:
        mean = x.mean(axis=(0, 2))
        var = x.var(axis=(0, 2))
    if training:
        m = x.shape[0] * x.shape[2]
        unbiased = var * m / max(m - 1, 1)
        state.running_mean[...] = BN_MOMENTUM * state.running_mean + (1 - BN_MOMENTUM) * mean
        state.running_var[...] = BN_MOMENTUM * state.running_var + (1 - BN_MOMENTUM) * unbiased
        state.count += 1
    elif not batch_stats:
        if state.count == 0:
            raise RuntimeError("batchnorm in eval mode has no accumulated statistics")
        mean, var = state.running_mean, state.running_var
    inv = 1.0 / np.sqrt(var + BN_EPS)
    xhat = (x - mean[None, :, None]) * inv[None, :, None]
    y = gamma[None, :, None] * xhat + beta[None, :, None]
    return y, (xhat, inv, batch_stats)


def batchnorm_grad(gy, gamma, cache):
    xhat, inv, batch_stats = cache
    ggamma = (gy * xhat).sum(axis=(0, 2))
    gbeta = gy.sum(axis=(0, 2))
    gxhat = gy * gamma[None, :, None]
    if not batch_stats:
        return gxhat * inv[None, :, None], ggamma, gbeta
    m = gy.shape[0] * gy.shape[2]
    gx = (inv[None, :, None] / m) * (
        m * gxhat - gxhat.sum(axis=(0, 2))[None, :, None] - xhat * (gxhat * xhat).sum(axis=(0, 2))[None, :, None]
    )
    return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# global pooling head


def global_pool_dense(x, W, b):
    """Max-reduce groups (if any), average over vertices, then ``W @ pooled + b``.

    Returns ``(scores, cache)``.
    """
    if x.ndim == 2:
        x = x[None]
    red, arg = reduce(x, "max") if x.shape[0] > 1 else (x[0], None)
    pooled = red.mean(axis=1)
    if W.shape[1] != pooled.shape[0]:
        raise ValueError(f"dense weights {W.shape} incompatible with {pooled.shape[0]} channels")
    return W @ pooled + b, (x.shape, arg, pooled)


def global_pool_dense_grad(gs, W, cache):
    shape, arg, pooled = cache
    gW = np.outer(gs, pooled)
    gb = gs.copy()
    gp = W.T @ gs
    V = shape[2]
    gred = np.broadcast_to((gp / V)[:, None], (shape[1], V)).astype(gs.dtype)
    if shape[0] > 1:
        gx = reduce_grad(gred, shape, "max", arg)
    else:
        gx = gred[None].copy()
    return gx, gW, gb
