"""Versioned binary cache of a preprocessed mesh hierarchy.

Layout (little-endian)::

    b"SFCV" | u32 version | u32 N | u32 levels | 32-byte sha256 of source
    u32 array count
    per array: u16 name length | name | u8 dtype code | u8 ndim | u64 dims | raw data

Arrays are written in a fixed order, so write -> read -> write is
byte-identical.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import frames as fr
from .convops import PatchData, PoolMap, build_patches
from .hierarchy import Hierarchy, Level
from .mesh import TangentBasis, TriMesh
from .network import MeshInput

MAGIC = b"SFCV"
VERSION = 1
_HEADER = struct.Struct("<4sIII32s")
_DTYPES = {0: "<f8", 1: "<i8", 2: "<c16", 3: "|u1"}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1, np.dtype("<c16"): 2, np.dtype("|u1"): 3}

_MESH_FIELDS = ("positions", "triangles", "normals", "one_ring_area", "k_max", "k_min", "dir_max", "degenerate_fit")
_PATCH_FIELDS = ("ptr", "nbr", "offsets", "weight", "radius", "coords", "features", "isolated")


class CacheError(RuntimeError):
    pass


def source_hash(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(eq=False)
class CacheContents:
    hierarchy: Hierarchy
    patches: list[PatchData]
    source_hash: bytes
    meta: dict

    @property
    def N(self) -> int:
        return self.hierarchy.N

    def mesh_input(self, features=None) -> MeshInput:
        h = self.hierarchy
        pools = [PoolMap(h.parent_of[k], h.group_offset[k], h.levels[k + 1].n_vertices)
                 for k in range(len(h.parent_of))]
        V = h.levels[0].n_vertices
        f = np.zeros((0, V)) if features is None else np.asarray(features, np.float64)
        return MeshInput(h.N, self.patches, pools, f)


def _canon(a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool or a.dtype == np.uint8:
        return a.astype("|u1")
    if np.issubdtype(a.dtype, np.complexfloating):
        return a.astype("<c16")
    if np.issubdtype(a.dtype, np.integer):
        return a.astype("<i8")
    return a.astype("<f8")


def _arrays(h: Hierarchy, patches: list[PatchData], meta: dict):
    out = [("meta", np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype="|u1"))]
    for k, lv in enumerate(h.levels):
        p = f"L{k}."
        for name in _MESH_FIELDS:
            val = getattr(lv.mesh, name)
            if val is not None:
                out.append((p + "mesh." + name, val))
        out += [(p + "basis.e0", lv.basis.e0), (p + "basis.e1", lv.basis.e1), (p + "basis.n", lv.basis.n)]
        c = lv.conn
        out += [(p + "conn.edges", c.edges), (p + "conn.angle", c.angle), (p + "conn.face_edges", c.face_edges),
                (p + "conn.face_edge_sign", c.face_edge_sign), (p + "conn.face_holonomy", c.face_holonomy)]
        f = lv.field
        out += [(p + "field.v", f.v), (p + "field.energy", np.float64(f.energy)),
                (p + "field.objective", np.float64(f.objective)), (p + "field.iterations", np.int64(f.iterations))]
        a = lv.atlas
        out += [(p + "atlas.angles", a.angles), (p + "atlas.offsets", a.offsets),
                (p + "atlas.residual", a.residual), (p + "atlas.index", a.index)]
        for name in _PATCH_FIELDS:
            out.append((p + "patch." + name, getattr(patches[k], name)))
    for k in range(len(h.parent_of)):
        out += [(f"X{k}.parent_of", h.parent_of[k]), (f"X{k}.group_offset", h.group_offset[k]),
                (f"X{k}.reached", np.uint8(h.reached[k]) if k < len(h.reached) else np.uint8(1))]
    return [(n, _canon(v)) for n, v in out]


def encode(h: Hierarchy, patches: list[PatchData], src_hash: bytes, meta: dict | None = None) -> bytes:
    if len(patches) != len(h.levels):
        raise CacheError("one PatchData per level required")
    if any(p.N != h.N for p in patches):
        raise CacheError("patch data and hierarchy disagree on N")
    arrays = _arrays(h, patches, meta or {})
    parts = [_HEADER.pack(MAGIC, VERSION, h.N, len(h.levels), src_hash), struct.pack("<I", len(arrays))]
    for name, a in arrays:
        raw = name.encode()
        parts.append(struct.pack("<HBB", len(raw), _CODES[a.dtype], a.ndim))
        parts.append(raw)
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(np.ascontiguousarray(a).tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> CacheContents:
    if len(blob) < _HEADER.size or blob[:4] != MAGIC:
        raise CacheError("not a surface-CNN cache (bad magic)")
    _, version, N, n_levels, src = _HEADER.unpack_from(blob, 0)
    if version != VERSION:
        raise CacheError(f"cache format version {version} is not supported (this build reads version {VERSION})")
    pos = _HEADER.size
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    A = {}
    for _ in range(count):
        ln, code, nd = struct.unpack_from("<HBB", blob, pos)
        pos += 4
        name = blob[pos:pos + ln].decode()
        pos += ln
        shape = struct.unpack_from(f"<{nd}Q", blob, pos)
        pos += 8 * nd
        dt = np.dtype(_DTYPES[code])
        n = int(np.prod(shape)) if nd else 1
        A[name] = np.frombuffer(blob, dtype=dt, count=n, offset=pos).reshape(shape).copy()
        pos += n * dt.itemsize
    if pos != len(blob):
        raise CacheError("trailing bytes after last array")
    try:
        meta = json.loads(A.pop("meta").tobytes().decode())
    except (KeyError, ValueError) as exc:
        raise CacheError(f"corrupt cache metadata: {exc}") from None

    levels, patches = [], []
    for k in range(n_levels):
        p = f"L{k}."
        kw = {}
        for name in _MESH_FIELDS:
            key = p + "mesh." + name
            if key in A:
                kw[name] = A[key].astype(bool) if name == "degenerate_fit" else A[key]
        mesh = TriMesh(**kw)
        basis = TangentBasis(A[p + "basis.e0"], A[p + "basis.e1"], A[p + "basis.n"])
        conn = fr.Connection(A[p + "conn.edges"], A[p + "conn.angle"], A[p + "conn.face_edges"],
                             A[p + "conn.face_edge_sign"], A[p + "conn.face_holonomy"])
        field = fr.RoSyField(N, A[p + "field.v"], float(A[p + "field.energy"]),
                             float(A[p + "field.objective"]), int(A[p + "field.iterations"]))
        atlas = fr.FrameAtlas(N, A[p + "atlas.angles"], basis, A[p + "atlas.offsets"],
                              A[p + "atlas.residual"], A[p + "atlas.index"])
        levels.append(Level(mesh, basis, conn, field, atlas))
        pk = {name: A[p + "patch." + name] for name in _PATCH_FIELDS}
        pk["isolated"] = pk["isolated"].astype(bool)
        patches.append(PatchData(N=N, **pk))
    h = Hierarchy(
        levels,
        [A[f"X{k}.parent_of"] for k in range(n_levels - 1)],
        [A[f"X{k}.group_offset"] for k in range(n_levels - 1)],
        [bool(A[f"X{k}.reached"]) for k in range(n_levels - 1)],
    )
    return CacheContents(h, patches, src, meta)


def write_cache(path, h: Hierarchy, src_hash: bytes, meta: dict | None = None, patches=None) -> None:
    if patches is None:
        patches = [build_patches(lv.mesh, lv.atlas) for lv in h.levels]
    blob = encode(h, patches, src_hash, meta)
    with open(path, "wb") as fh:
        fh.write(blob)


def read_cache(path) -> CacheContents:
    with open(path, "rb") as fh:
        return decode(fh.read())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    if len(head) < _HEADER.size or head[:4] != MAGIC:
        raise CacheError(f"{path}: not a surface-CNN cache")
    _, version, N, levels, src = _HEADER.unpack(head)
    return {"version": version, "N": N, "levels": levels, "source_hash": src}
