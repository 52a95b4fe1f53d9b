import struct

import numpy as np
import pytest

from surfcnn import cache as cc
from surfcnn.convops import build_patches


@pytest.fixture(scope="module")
def blob(small_h):
    patches = [build_patches(lv.mesh, lv.atlas) for lv in small_h.levels]
    return cc.encode(small_h, patches, cc.source_hash(b"mesh bytes"), {"params": {"N": 4}})


def test_roundtrip_is_byte_identical(blob):
    c = cc.decode(blob)
    assert cc.encode(c.hierarchy, c.patches, c.source_hash, c.meta) == blob


def test_roundtrip_values(small_h, blob):
    c = cc.decode(blob)
    assert c.N == small_h.N and c.hierarchy.sizes() == small_h.sizes()
    for a, b in zip(small_h.levels, c.hierarchy.levels):
        np.testing.assert_array_equal(a.atlas.offsets, b.atlas.offsets)
        np.testing.assert_array_equal(a.field.v, b.field.v)
        np.testing.assert_array_equal(a.mesh.triangles, b.mesh.triangles)
    for a, b in zip(small_h.group_offset, c.hierarchy.group_offset):
        np.testing.assert_array_equal(a, b)
    assert c.meta == {"params": {"N": 4}}


def test_newer_version_rejected(blob):
    bad = blob[:4] + struct.pack("<I", cc.VERSION + 1) + blob[8:]
    with pytest.raises(cc.CacheError, match=str(cc.VERSION + 1)):
        cc.decode(bad)


def test_bad_magic_and_trailing_bytes(blob):
    with pytest.raises(cc.CacheError):
        cc.decode(b"XXXX" + blob[4:])
    with pytest.raises(cc.CacheError):
        cc.decode(blob + b"\x00")


def test_corrupt_meta(small_h):
    patches = [build_patches(lv.mesh, lv.atlas) for lv in small_h.levels]
    good = cc.encode(small_h, patches, b"\x00" * 32, {"a": 1})
    i = good.index(b'{"a": 1}')
    with pytest.raises(cc.CacheError, match="metadata"):
        cc.decode(good[:i] + b"{bad:js}" + good[i + 8:])


def test_write_read_header(small_h, tmp_path):
    p = tmp_path / "m.sfcv"
    cc.write_cache(p, small_h, cc.source_hash(b"x"))
    h = cc.read_header(p)
    assert h == {"version": cc.VERSION, "N": 4, "levels": 3, "source_hash": cc.source_hash(b"x")}
    mi = cc.read_cache(p).mesh_input()
    assert mi.n_vertices == small_h.levels[0].n_vertices


def test_encode_rejects_mismatched_patches(small_h):
    with pytest.raises(cc.CacheError):
        cc.encode(small_h, [], b"\x00" * 32)
