"""Run configuration, preprocessing and dataset assembly shared by the CLI."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field

import numpy as np
import yaml

from . import cache as cc
from . import frames as fr
from .hierarchy import build_hierarchy, level_targets_from_ratio
from .mesh import MeshError, load_mesh, prepare
from .network import NetworkDescription
from .training import Item, directed_edges


@dataclass
class RunConfig:
    data: str | None = None
    cache_dir: str = "cache"
    out_dir: str = "runs"
    network: str | None = None
    N: int = fr.DEFAULT_N
    lam: float = fr.DEFAULT_LAMBDA
    levels: int = 2
    ratio: float = 3.0
    level_targets: list[int] | None = None
    lr: float = 1e-3
    epochs: int = 20
    seed: int = 0
    accumulate: int = 1
    train_fraction: float = 2.0 / 3.0
    reduce_mode: str | None = None
    pool_mode: str | None = None
    precision: str = "double"
    extra: dict = field(default_factory=dict)

    @classmethod
    def load(cls, path=None, **overrides) -> "RunConfig":
        raw = {}
        if path:
            with open(path) as fh:
                raw = yaml.safe_load(fh) or {}
        names = {f.name for f in dataclasses.fields(cls)} - {"extra"}
        kw = {k: v for k, v in raw.items() if k in names}
        extra = {k: v for k, v in raw.items() if k not in names}
        kw.update({k: v for k, v in overrides.items() if v is not None})
        cfg = cls(**kw, extra=extra)
        cfg.check()
        return cfg

    def check(self) -> None:
        if self.N < 1:
            raise ValueError("N must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.precision not in ("double", "single"):
            raise ValueError("precision must be 'double' or 'single'")
        if not 2 <= self.ratio <= 4:
            raise ValueError("level ratio must lie in [2, 4]")
        for mode in (self.reduce_mode, self.pool_mode):
            if mode not in (None, "max", "average"):
                raise ValueError(f"unknown mode {mode!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "double" else np.float32

    def targets_for(self, n_vertices: int) -> list[int]:
        if self.level_targets:
            return [int(t) for t in self.level_targets]
        return level_targets_from_ratio(n_vertices, self.levels, self.ratio)

    def network_description(self) -> NetworkDescription:
        if not self.network:
            raise ValueError("no network description configured")
        path = self.network
        if not os.path.exists(path):
            bundled = os.path.join(os.path.dirname(__file__), "networks", path)
            bundled = bundled if bundled.endswith(".yaml") else bundled + ".yaml"
            if os.path.exists(bundled):
                path = bundled
        d = NetworkDescription.from_yaml(path).to_dict()
        for layer in d["layers"]:
            if layer["type"] == "reduce" and self.reduce_mode:
                layer["mode"] = self.reduce_mode
            if layer["type"] == "pool" and self.pool_mode:
                layer["mode"] = self.pool_mode
        d["N"] = self.N
        return NetworkDescription.from_dict(d)


# ---------------------------------------------------------------------------
# preprocessing


def cache_path(cache_dir, name) -> str:
    return os.path.join(cache_dir, f"{name}.sfcv")


def _params(cfg: RunConfig, targets) -> dict:
    return {"N": cfg.N, "lam": cfg.lam, "level_targets": list(targets), "seed": cfg.seed}


def preprocess_mesh(path, cfg: RunConfig, out_path, force=False) -> dict:
    """Build and cache one hierarchy; returns a report dict.

    Skips the work when an existing cache has the same source hash and
    parameters (``report["skipped"]`` is then True).
    """
    with open(path, "rb") as fh:
        src = cc.source_hash(fh.read())
    mesh = load_mesh(path)
    targets = cfg.targets_for(mesh.n_vertices)
    params = _params(cfg, targets)
    if not force and os.path.exists(out_path):
        try:
            old = cc.read_cache(out_path)
        except cc.CacheError:
            old = None
        if old is not None and old.source_hash == src and old.meta.get("params") == params:
            rep = dict(old.meta.get("report", {}))
            rep["skipped"] = True
            return rep
    h = build_hierarchy(mesh, targets, N=cfg.N, lam=cfg.lam, seed=cfg.seed)
    report = hierarchy_report(h)
    report["mesh"] = os.path.basename(str(path))
    cc.write_cache(out_path, h, src, {"params": params, "report": report})
    report = dict(report)
    report["skipped"] = False
    return report


def hierarchy_report(h) -> dict:
    fine = h.levels[0]
    idx = fine.atlas.index
    sing = np.flatnonzero(idx)
    return {
        "N": h.N,
        "level_sizes": h.sizes(),
        "levels_reached": [bool(r) for r in h.reached],
        "singular_faces": [int(f) for f in sing],
        "singularity_count": int(sing.size),
        "index_sum": float(idx.sum() / h.N),
        "euler_characteristic": int(fine.mesh.euler_characteristic),
        "frame_energy": float(fine.field.energy),
        "max_matched_angle": float(np.abs(fine.atlas.residual).max()) if fine.atlas.residual.size else 0.0,
        "quality": fine.mesh.quality_report(),
    }


def preprocess_many(paths, cfg: RunConfig, force=False, names=None) -> list[dict]:
    os.makedirs(cfg.cache_dir, exist_ok=True)
    reports = []
    for i, p in enumerate(paths):
        name = names[i] if names else os.path.splitext(os.path.basename(str(p)))[0]
        try:
            rep = preprocess_mesh(p, cfg, cache_path(cfg.cache_dir, name), force=force)
        except MeshError as exc:
            rep = {"mesh": os.path.basename(str(p)), "error": str(exc), "skipped": True}
        rep["name"] = name
        reports.append(rep)
    return reports


# ---------------------------------------------------------------------------
# datasets


def manifest_paths(manifest: dict) -> list[str]:
    return [os.path.join(manifest["root"], it["mesh"]) for it in manifest["items"]]


def load_items(manifest: dict, cfg: RunConfig, names=None) -> list[Item]:
    """Pair each cached mesh with its target; missing caches are an error."""
    kind = manifest["kind"]
    root = manifest["root"]
    template = tmpl_normals = None
    if kind == "regression":
        template, _ = prepare(load_mesh(os.path.join(root, manifest["template"])))
        tmpl_normals = template.normals
    items = []
    wanted = set(names) if names is not None else None
    for rec in manifest["items"]:
        if wanted is not None and rec["name"] not in wanted:
            continue
        cpath = cache_path(cfg.cache_dir, rec["name"])
        if not os.path.exists(cpath):
            raise FileNotFoundError(f"no preprocessed cache for mesh {rec['name']} (expected {cpath})")
        contents = cc.read_cache(cpath)
        if contents.N != cfg.N:
            raise ValueError(f"cache {cpath} was built with N={contents.N}, run uses N={cfg.N}")
        sample = contents.mesh_input()
        fine = contents.hierarchy.levels[0].mesh
        if kind == "classification":
            target = int(rec["label"])
        elif kind == "segmentation":
            target = np.loadtxt(os.path.join(root, rec["labels"]), dtype=np.int64).reshape(-1)
        else:
            target = {"positions": template.positions, "normals": tmpl_normals,
                      "edges": directed_edges(fine), "template": template}
        if kind != "classification":
            V = sample.n_vertices
            n_t = len(target) if kind == "segmentation" else len(target["positions"])
            if n_t != V:
                raise ValueError(
                    f"mesh {rec['name']}: {n_t} per-vertex targets but finest level has {V} vertices; "
                    "per-vertex tasks need an unsimplified finest level"
                )
        items.append(Item(rec["name"], sample, target))
    return items


def split(items: list[Item], fraction: float) -> tuple[list[Item], list[Item]]:
    n = int(round(len(items) * fraction))
    return items[:n], items[n:]
