"""Small deterministic synthetic datasets for end-to-end checks.

``classification``
    sphere, torus and bumpy ellipsoid, each with a random smooth normal
    displacement and a random rigid motion; label = family.
``segmentation``
    spheres carrying one large bump; vertex label 1 on the bump, 0 elsewhere.
``regression``
    a fixed landmark-bumped sphere (the template) deformed with jittered
    landmark amplitudes, smooth noise and a rigid motion; the target of
    vertex ``i`` is template vertex ``i``.

Every dataset is written as OFF files plus ``manifest.json``.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import shapes
from .mesh import TriMesh, vertex_normals, write_off

KINDS = ("classification", "segmentation", "regression")
CLASS_NAMES = ("sphere", "torus", "bumpy_ellipsoid")

# fixed landmarks of the regression template: (direction, amplitude, width)
LANDMARKS = (
    ((0.0, 0.0, 1.0), 0.35, 0.35),
    ((1.0, 0.0, 0.2), 0.22, 0.30),
    ((-0.3, 0.9, -0.1), 0.15, 0.45),
    ((-0.5, -0.6, -0.6), -0.18, 0.40),
    ((0.4, -0.2, -0.9), 0.10, 0.25),
    ((-0.9, 0.1, 0.4), 0.28, 0.22),
)


def _unit(v):
    v = np.asarray(v, float)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def smooth_field(points, rng, n_waves=4, freq=2.0):
    """Random smooth scalar field: a sum of low-frequency plane waves."""
    out = np.zeros(len(points))
    for _ in range(n_waves):
        k = _unit(rng.normal(size=3)) * freq * rng.uniform(0.5, 1.0)
        out += rng.uniform(-1, 1) * np.cos(points @ k + rng.uniform(0, 2 * np.pi))
    return out / n_waves


def displace(mesh: TriMesh, amount) -> TriMesh:
    """Move every vertex along its normal by ``amount``."""
    return mesh.with_positions(mesh.positions + np.asarray(amount)[:, None] * vertex_normals(mesh))


def bumps(directions, points, amps, widths):
    """Radial Gaussian bumps on a unit sphere around the given directions."""
    p = _unit(points)
    out = np.zeros(len(points))
    for d, a, w in zip(directions, amps, widths):
        ang = np.arccos(np.clip(p @ _unit(d), -1, 1))
        out += a * np.exp(-(ang / w) ** 2)
    return out


def _finish(mesh: TriMesh, rng) -> TriMesh:
    R = shapes.random_rotation(rng)
    return shapes.rigid_motion(mesh, R, rng.normal(size=3))


def classification_mesh(label: int, rng) -> TriMesh:
    if label == 0:
        m = shapes.icosphere(3)
        m = displace(m, 0.06 * smooth_field(m.positions, rng))
    elif label == 1:
        m = shapes.torus(1.0, rng.uniform(0.3, 0.45), 24, 20)
        m = displace(m, 0.04 * smooth_field(m.positions, rng))
    else:
        m = shapes.icosphere(3)
        axes = np.array([1.0, 0.75, 0.55]) * rng.uniform(0.9, 1.1, size=3)
        d = _unit(rng.normal(size=(5, 3)))
        r = 1 + bumps(d, m.positions, rng.uniform(0.15, 0.3, 5), rng.uniform(0.25, 0.4, 5))
        m = m.with_positions(m.positions * r[:, None] * axes)
        m = displace(m, 0.04 * smooth_field(m.positions, rng))
    return _finish(m, rng)


def segmentation_mesh(rng) -> tuple[TriMesh, np.ndarray]:
    m = shapes.icosphere(3)
    d = _unit(rng.normal(size=3))
    amp = rng.uniform(0.4, 0.6)
    h = bumps([d], m.positions, [amp], [rng.uniform(0.45, 0.6)])
    labels = (h > 0.3 * amp).astype(np.int64)
    m = m.with_positions(m.positions * (1 + h + 0.04 * smooth_field(m.positions, rng))[:, None])
    return _finish(m, rng), labels


def regression_template() -> TriMesh:
    m = shapes.icosphere(3)
    d, a, w = zip(*LANDMARKS)
    return m.with_positions(m.positions * (1 + bumps(d, m.positions, a, w))[:, None])


def regression_mesh(rng) -> TriMesh:
    m = shapes.icosphere(3)
    d, a, w = zip(*LANDMARKS)
    a = np.array(a) * rng.uniform(0.8, 1.2, size=len(a))
    r = 1 + bumps(d, m.positions, a, w) + 0.03 * smooth_field(m.positions, rng)
    m = m.with_positions(m.positions * r[:, None])
    return _finish(m, rng)


def generate(kind: str, count: int, seed: int, out_dir) -> dict:
    """Write ``count`` meshes of ``kind`` into ``out_dir``; returns the manifest.

    Mesh ``i`` depends only on ``(seed, i)``.
    """
    if kind not in KINDS:
        raise ValueError(f"unknown dataset kind {kind!r}; choose from {KINDS}")
    os.makedirs(out_dir, exist_ok=True)
    items = []
    manifest = {"kind": kind, "seed": seed, "count": count, "items": items}
    if kind == "classification":
        manifest["classes"] = list(CLASS_NAMES)
    if kind == "segmentation":
        manifest["classes"] = ["base", "bump"]
    if kind == "regression":
        write_off(os.path.join(out_dir, "template.off"), regression_template())
        manifest["template"] = "template.off"
    for i in range(count):
        rng = np.random.default_rng([seed, i])
        name = f"{kind[:3]}_{i:04d}"
        rec = {"name": name, "mesh": name + ".off"}
        if kind == "classification":
            label = i % 3
            m = classification_mesh(label, rng)
            rec["label"] = label
        elif kind == "segmentation":
            m, labels = segmentation_mesh(rng)
            rec["labels"] = name + ".labels"
            with open(os.path.join(out_dir, rec["labels"]), "w") as fh:
                fh.write("\n".join(str(int(v)) for v in labels) + "\n")
        else:
            m = regression_mesh(rng)
        write_off(os.path.join(out_dir, rec["mesh"]), m)
        items.append(rec)
    with open(os.path.join(out_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


def load_manifest(path) -> dict:
    p = path if os.path.basename(str(path)) == "manifest.json" else os.path.join(path, "manifest.json")
    with open(p) as fh:
        m = json.load(fh)
    m["root"] = os.path.dirname(os.path.abspath(p))
    return m
